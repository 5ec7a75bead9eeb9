"""Numba-compiled kernels mirroring ``numpy_impl`` one-for-one."""
import numpy as np
from numba import njit


@njit(cache=True)
def _jacobi(a, tol, max_sweeps):
    n = a.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += a[i, j] * a[i, j]
    if total == 0.0:
        return np.zeros(n), 0
    thresh = tol * np.sqrt(total)
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    off += a[i, j] * a[i, j]
        if np.sqrt(off) <= thresh:
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
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
    return np.diag(a).copy(), max_sweeps


def jacobi_eigvals(gram, tol=1e-12, max_sweeps=100):
    a = np.array(gram, dtype=np.float64, copy=True)
    return _jacobi(a, tol, max_sweeps)


@njit(cache=True)
def _wood_accept(z, u, b, a, dconst, m1):
    n = z.shape[0]
    w = np.empty(n)
    accept = np.empty(n, dtype=np.bool_)
    for i in range(n):
        denom = 1.0 - (1.0 - b) * z[i]
        w[i] = (1.0 - (1.0 + b) * z[i]) / denom
        t = 2.0 * a * b / denom
        accept[i] = m1 * np.log(t) - t + dconst >= np.log(u[i])
    return w, accept


def wood_accept(z, u, b, a, dconst, m1):
    return _wood_accept(np.ascontiguousarray(z, dtype=np.float64),
                        np.ascontiguousarray(u, dtype=np.float64),
                        float(b), float(a), float(dconst), float(m1))


@njit(cache=True)
def _reservoir(capacity, size, draws):
    assign = np.full(capacity, -1, dtype=np.int64)
    for k in range(draws.shape[0]):
        if size < capacity:
            assign[size] = k
            size += 1
        elif draws[k] < capacity:
            assign[draws[k]] = k
    return assign, size


def reservoir_assign(capacity, size, draws):
    return _reservoir(int(capacity), int(size), np.ascontiguousarray(draws, dtype=np.int64))
