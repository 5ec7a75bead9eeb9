"""Pure-numpy kernels. Reference path; always available."""
import numpy as np


def jacobi_eigvals(gram, tol=1e-12, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm drops to
    ``tol * ||gram||_F``. Returns ``(eigenvalues, sweeps_used)``; the
    eigenvalues are unsorted.
    """
    a = np.array(gram, dtype=np.float64, copy=True)
    n = a.shape[0]
    scale = np.sqrt(np.sum(a * a))
    if scale == 0.0:
        return np.zeros(n), 0
    thresh = tol * scale
    for sweep in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= thresh:
            return np.diag(a).copy(), sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(diff) > 1e150 * abs(apq):
                    t = apq / diff  # small-angle limit of 1/(2 tau)
                else:
                    tau = diff / (2.0 * apq)
                    if tau >= 0.0:
                        t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                    else:
                        t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0
    return np.diag(a).copy(), max_sweeps


def wood_accept(z, u, b, a, dconst, m1):
    """Vectorized acceptance step of the Wood rejection sampler.

    ``z`` are Beta((d-1)/2, (d-1)/2) proposals and ``u`` uniforms. Returns the
    proposed cosines ``w`` and a boolean acceptance mask.
    """
    denom = 1.0 - (1.0 - b) * z
    w = (1.0 - (1.0 + b) * z) / denom
    t = 2.0 * a * b / denom
    accept = m1 * np.log(t) - t + dconst >= np.log(u)
    return w, accept


def reservoir_assign(capacity, size, draws):
    """Apply reservoir updates for a run of incoming items.

    Item ``k`` of the run comes with a draw ``draws[k]`` uniform on
    ``[0, n_seen_k)``. Returns ``(assign, size)`` where ``assign[slot]`` is the
    run index that ends up in ``slot`` or ``-1`` if the slot keeps its content.
    """
    assign = np.full(capacity, -1, dtype=np.int64)
    n = draws.shape[0]
    fill = min(capacity - size, n)
    if fill > 0:
        assign[size:size + fill] = np.arange(fill)
        size += fill
    rest = np.arange(fill, n)
    hit = rest[draws[fill:] < capacity]
    if hit.size:
        # later items overwrite earlier ones; run indices increase, so max wins
        np.maximum.at(assign, draws[hit], hit)
    return assign, size
