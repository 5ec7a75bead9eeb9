"""Seedable random streams, Gaussian directions and von Mises-Fisher sampling.

Streams are Philox (counter-based) generators keyed by ``(seed, path)``, so a
child stream is a pure function of its parent's seed and the child id and can
be handed to another worker without sharing state.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import gammaln

from . import kernels
from .errors import NumericalOverflow, SamplerExhausted
from .geometry import project_to_sphere

logger = logging.getLogger(__name__)

MAX_PROPOSALS = 1_000_000


def _child_key(child_id):
    if isinstance(child_id, (int, np.integer)):
        return int(child_id)
    return zlib.crc32(str(child_id).encode("utf-8"))


class RngStream:
    """A splittable random stream.

    Attribute access not defined here is forwarded to the underlying
    :class:`numpy.random.Generator` (``normal``, ``integers``, ``beta`` ...).
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed) % (1 << 64)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def split(self, child_id) -> "RngStream":
        return RngStream(self.seed, self.path + (_child_key(child_id),))

    def __getattr__(self, name):
        return getattr(self.generator, name)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(rng)


def sample_gaussian_vector(d, rng, n=None):
    """``d`` i.i.d. standard normal draws (ziggurat), or ``(n, d)`` if ``n`` is given."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    shape = d if n is None else (n, d)
    return as_stream(rng).standard_normal(shape)


def sample_uniform_sphere(d, rng, n=None):
    return project_to_sphere(sample_gaussian_vector(d, rng, n))


@dataclass(frozen=True)
class VmfParams:
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.ndim != 1 or mu.shape[0] < 2:
            raise ValueError("vMF mean direction must be a vector with d >= 2")
        if abs(np.linalg.norm(mu) - 1.0) > 1e-12:
            raise ValueError("vMF mean direction must have unit norm")
        if not self.kappa >= 0.0:
            raise ValueError("vMF concentration must be >= 0")
        object.__setattr__(self, "mu", mu)

    @property
    def dim(self):
        return self.mu.shape[0]


def _wood_constants(kappa, d):
    m1 = d - 1.0
    root = math.sqrt(4.0 * kappa * kappa + m1 * m1)
    # b = (-2k + root) / m1, rewritten without cancellation for large kappa
    b = m1 / (2.0 * kappa + root)
    a = (m1 + 2.0 * kappa + root) / 4.0
    dconst = 4.0 * a * b / (1.0 + b) - m1 * math.log(m1)
    return b, a, dconst, m1


def sample_vmf_cosines(kappa, d, n, rng):
    """Draw ``n`` values of ``w = mu^T x`` for ``x ~ vMF(mu, kappa)`` on S^{d-1}."""
    rng = as_stream(rng)
    b, a, dconst, m1 = _wood_constants(float(kappa), d)
    out = np.empty(n)
    pending = np.arange(n)
    proposals = 0
    rounds = 0
    while pending.size:
        rounds += 1
        if rounds > MAX_PROPOSALS:
            raise SamplerExhausted(f"vMF rejection exceeded {MAX_PROPOSALS} proposals per sample")
        z = rng.beta(m1 / 2.0, m1 / 2.0, size=pending.size)
        u = rng.random(pending.size)
        proposals += pending.size
        w, accept = kernels.wood_accept(z, u, b, a, dconst, m1)
        out[pending[accept]] = w[accept]
        pending = pending[~accept]
    if n:
        logger.debug("vMF(kappa=%g, d=%d) acceptance rate %.4f", kappa, d, n / proposals)
    return out


def _householder_from_pole(mus, x):
    """Reflect rows of ``x`` by the Householder map taking e1 to the matching ``mus`` row."""
    e1 = np.zeros_like(mus)
    e1[:, 0] = 1.0
    v = e1 - mus
    vn = np.linalg.norm(v, axis=1, keepdims=True)
    flip = vn[:, 0] > 1e-15
    out = x.copy()
    if np.any(flip):
        vv = v[flip] / vn[flip]
        out[flip] = x[flip] - 2.0 * vv * np.sum(vv * x[flip], axis=1, keepdims=True)
    return out


def sample_vmf_rows(mus, kappa, rng):
    """One vMF draw per row of ``mus`` (unit mean directions), shared ``kappa``."""
    rng = as_stream(rng)
    mus = np.atleast_2d(np.asarray(mus, dtype=np.float64))
    n, d = mus.shape
    if d < 2:
        raise ValueError("vMF sampling requires d >= 2")
    w = sample_vmf_cosines(kappa, d, n, rng)
    tangent = project_to_sphere(rng.standard_normal((n, d - 1)))
    x = np.empty((n, d))
    x[:, 0] = w
    x[:, 1:] = np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * tangent
    x = _householder_from_pole(mus, x)
    return project_to_sphere(x)


def sample_vmf(params: VmfParams, rng, n=None):
    """Sample from vMF(mu, kappa): a unit vector, or ``(n, d)`` rows if ``n`` is given."""
    count = 1 if n is None else n
    mus = np.broadcast_to(params.mu, (count, params.dim))
    x = sample_vmf_rows(mus, params.kappa, rng)
    return x[0] if n is None else x


# --- modified Bessel function of the first kind, log scale -----------------

SERIES_LIMIT = 50.0


def _debye_polynomials(order):
    t = Polynomial([0.0, 1.0])
    polys = [Polynomial([1.0])]
    for _ in range(order):
        u = polys[-1]
        integrand = (1.0 - 5.0 * t * t) * u
        nxt = 0.5 * t * t * (1.0 - t * t) * u.deriv() + 0.125 * integrand.integ()
        polys.append(nxt)
    return polys


_DEBYE = _debye_polynomials(12)


def _log_iv_series(nu, x):
    k = np.arange(0, int(x) + 200, dtype=np.float64)
    # non-finite results are reported by the caller
    with np.errstate(over="ignore", invalid="ignore"):
        logs = (2.0 * k + nu) * math.log(x / 2.0) - gammaln(k + 1.0) - gammaln(k + nu + 1.0)
        top = logs.max()
        return top + math.log(np.sum(np.exp(logs - top)))


def _log_iv_debye(nu, x):
    z = x / nu
    root = math.sqrt(1.0 + z * z)
    t = 1.0 / root
    eta = root + math.log(z / (1.0 + root))
    total = 0.0
    for k, poly in enumerate(_DEBYE):
        total += poly(t) / nu ** k
    return nu * eta - 0.5 * math.log(2.0 * math.pi * nu) - 0.5 * math.log(root) + math.log(total)


def _log_i0_hankel(x):
    total = 1.0
    term = 1.0
    for k in range(1, 60):
        nxt = term * (2 * k - 1) ** 2 / (8.0 * k * x)
        if nxt > term or nxt < 1e-18:
            break
        term = nxt
        total += term
    return x - 0.5 * math.log(2.0 * math.pi * x) + math.log(total)


def log_bessel_iv(nu, x):
    """``log I_nu(x)`` for ``nu >= 0``, ``x >= 0``.

    Power series up to ``x = 50``; above that the uniform (Debye) asymptotic
    expansion, or the large-argument expansion when ``nu == 0``.
    """
    nu = float(nu)
    x = float(x)
    if nu < 0 or x < 0:
        raise ValueError("log_bessel_iv needs nu >= 0 and x >= 0")
    if x == 0.0:
        return 0.0 if nu == 0.0 else -math.inf
    if x <= SERIES_LIMIT:
        val = _log_iv_series(nu, x)
    elif nu == 0.0:
        val = _log_i0_hankel(x)
    else:
        val = _log_iv_debye(nu, x)
    if not math.isfinite(val):
        raise NumericalOverflow(f"log I_{nu}({x}) is not finite")
    return val


def log_sphere_area(d):
    """Log surface area of the unit sphere S^{d-1} in R^d."""
    return math.log(2.0) + 0.5 * d * math.log(math.pi) - math.lgamma(0.5 * d)


def vmf_log_normalizer(d, kappa):
    if kappa == 0.0:
        return -log_sphere_area(d)
    nu = 0.5 * d - 1.0
    val = nu * math.log(kappa) - 0.5 * d * math.log(2.0 * math.pi) - log_bessel_iv(nu, kappa)
    if not math.isfinite(val):
        raise NumericalOverflow(f"vMF normalizer not finite for d={d}, kappa={kappa}")
    return val


def vmf_log_density(params: VmfParams, x):
    """``log p(x | mu, kappa)``; ``x`` may be a unit vector or rows of unit vectors."""
    x = np.asarray(x, dtype=np.float64)
    return vmf_log_normalizer(params.dim, float(params.kappa)) + params.kappa * (x @ params.mu)


def vmf_mean_resultant(d, kappa):
    """Expected ``mu^T x`` under vMF, ``A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa)``."""
    if kappa == 0.0:
        return 0.0
    return math.exp(log_bessel_iv(0.5 * d, kappa) - log_bessel_iv(0.5 * d - 1.0, kappa))
