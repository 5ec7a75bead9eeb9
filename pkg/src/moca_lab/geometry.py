"""Unit-hypersphere projection and the norm-preserving perturbation map.

Every function accepts a single vector of shape ``(d,)`` or a batch of row
vectors of shape ``(n, d)`` and returns the same leading shape.
"""
import numpy as np

from .errors import DegenerateVector

TINY = 1e-30


def _norms(v):
    return np.linalg.norm(v, axis=-1, keepdims=True)


def project_to_sphere(v):
    """Return ``v / ||v||`` (row-wise for a batch)."""
    v = np.asarray(v, dtype=np.float64)
    n = _norms(v)
    if np.any(n <= TINY):
        raise DegenerateVector("cannot project a zero vector onto the unit sphere")
    return v / n


def hyperspherical_perturb(h, eps, lam):
    """Rotate ``h`` toward ``eps`` while keeping its norm.

    Computes ``||h|| * P(P(h) + lam * eps)`` where ``P`` is projection onto the
    unit sphere. ``eps`` is taken as given (callers pass unit directions).
    """
    h = np.asarray(h, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    r = _norms(h)
    if np.any(r <= TINY):
        raise DegenerateVector("prototype feature has zero norm")
    if lam == 0:
        # h / ||h|| * ||h|| is not bit-exact
        return h.copy()
    v = h / r + lam * eps
    q = _norms(v)
    if np.any(q <= TINY):
        raise DegenerateVector("perturbation cancels the prototype direction")
    return r * (v / q)


def hyperspherical_perturb_vjp(h, eps, lam, grad_out):
    """Pull ``dL/df`` back through :func:`hyperspherical_perturb` to ``dL/dh``.

    ``eps`` is treated as a constant (no gradient flows into the direction
    branch).
    """
    h = np.asarray(h, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    if lam == 0:
        return g.copy()
    r = _norms(h)
    u = h / r
    v = u + lam * np.asarray(eps, dtype=np.float64)
    q = _norms(v)
    if np.any(q <= TINY):
        raise DegenerateVector("perturbation cancels the prototype direction")
    vt = v / q
    # f = r * vt; r contributes along u, vt depends on u through v
    radial = np.sum(g * vt, axis=-1, keepdims=True) * u
    gv = (g - vt * np.sum(vt * g, axis=-1, keepdims=True)) / q
    tangential = gv - u * np.sum(u * gv, axis=-1, keepdims=True)
    return radial + tangential


def decompose_delta(h, eps, lam):
    """Closed-form hyperspherical augmentation ``delta`` with ``h + delta = f``.

    Uses ``delta = ((||h|| - ||h + d||) h + ||h|| d) / ||h + d||`` with the
    unconstrained step ``d = ||h|| * lam * eps``, i.e. the step taken after the
    inner projection and scaled back to the prototype radius.
    """
    h = np.asarray(h, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    r = _norms(h)
    if np.any(r <= TINY):
        raise DegenerateVector("prototype feature has zero norm")
    step = r * lam * eps
    shifted = _norms(h + step)
    if np.any(shifted <= TINY):
        raise DegenerateVector("perturbation cancels the prototype direction")
    return ((r - shifted) * h + r * step) / shifted


def angle_between(u, v):
    """Angle in degrees between ``u`` and ``v`` (row-wise), in ``[0, 180]``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu <= TINY) or np.any(nv <= TINY):
        raise DegenerateVector("angle undefined for a zero vector")
    cos = np.sum(u * v, axis=-1) / (nu * nv)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def tangent_direction(u, direction):
    """Unit component of ``direction`` orthogonal to the unit vector ``u``."""
    u = np.asarray(u, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t = direction - u * np.sum(u * direction, axis=-1, keepdims=True)
    n = _norms(t)
    if np.any(n <= 1e-12 * _norms(direction)) or np.any(n <= TINY):
        raise DegenerateVector("direction is collinear with the prototype")
    return t / n
