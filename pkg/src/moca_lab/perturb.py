"""Intra-class feature perturbations for replayed (old-class) representations.

Each variant produces a unit direction per old feature and then rotates the
feature toward it on its own hypersphere (see
:func:`moca_lab.geometry.hyperspherical_perturb`). Directions are always
treated as constants during backprop.

Variants: ``gaussian`` and ``vmf`` draw directions from a fixed distribution;
``doa_old``/``doa_new`` use a dropout forward pass; ``vt`` uses new-class
deviations from their batch class mean; ``wap`` uses a forward pass through an
adversarially perturbed encoder.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateDeviation
from .geometry import (TINY, angle_between, hyperspherical_perturb, project_to_sphere,
                       tangent_direction)
from .net import (ModelParams, WeightDelta, apply_weight_delta, backward_from_feature_grad,
                  cosine_ce, forward, forward_dropout, forward_with_cache, l2_ball_project)
from .randkit import sample_vmf_rows

VARIANTS = ("none", "gaussian", "vmf", "doa_old", "doa_new", "vt", "wap")
SETTINGS = ("offline", "online", "proxy")
PROXY_UNSUPPORTED = ("doa_old", "wap")
NEEDS_NEW_BATCH = ("doa_new", "vt", "wap")


@dataclass(frozen=True)
class PerturberConfig:
    variant: str = "none"
    lam: float = 2.0
    kappa: Optional[float] = None
    dropout_rate: float = 0.5
    zeta: float = 10.0
    inner_steps: int = 1
    ball_radius: float = 1.0
    adv_weight: float = 10.0
    fixed_angle: Optional[float] = None

    def validate(self, setting=None) -> "PerturberConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if setting is not None and setting not in SETTINGS:
            raise ConfigError(f"unknown setting {setting!r}")
        if not self.lam >= 0:
            raise ConfigError("lambda must be non-negative")
        if self.variant == "vmf" and (self.kappa is None or not self.kappa >= 0):
            raise ConfigError("the vmf variant needs an explicit kappa >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if self.zeta <= 0 or self.inner_steps < 1 or self.ball_radius <= 0 or self.adv_weight <= 0:
            raise ConfigError("zeta, inner_steps, ball_radius and adv_weight must be positive")
        if self.fixed_angle is not None:
            if not 0.0 <= self.fixed_angle < 90.0:
                raise ConfigError("fixed_angle must lie in [0, 90) degrees")
            if self.fixed_angle > 0 and self.lam == 0 and self.variant != "none":
                raise ConfigError("fixed_angle needs lambda > 0 to define a direction")
        if setting == "proxy" and self.variant in PROXY_UNSUPPORTED:
            raise ConfigError(f"variant {self.variant!r} needs raw old examples and is not "
                              "available in the proxy setting")
        return self

    @property
    def disabled(self):
        if self.variant == "none":
            return True
        return self.lam == 0 and not self.fixed_angle

    def resolved(self) -> "PerturberConfig":
        """Canonical form; every disabled configuration collapses to one value."""
        if self.disabled:
            return PerturberConfig(variant="none", lam=0.0, kappa=None, dropout_rate=0.0,
                                   zeta=1.0, inner_steps=1, ball_radius=1.0, adv_weight=1.0,
                                   fixed_angle=None)
        return self

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class PerturbContext:
    """Everything a model-based variant may look at for one training step.

    ``old_x`` is ``None`` in the proxy setting. ``new_features`` may carry the
    already computed (detached) encoder output for ``new_x``.
    """

    model: ModelParams
    old_x: Optional[np.ndarray]
    old_y: np.ndarray
    new_x: Optional[np.ndarray]
    new_y: Optional[np.ndarray]
    rng: object
    dropout_rng: object = None
    new_features: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dropout_rng is None:
            self.dropout_rng = self.rng


# --- directions ------------------------------------------------------------

def gaussian_directions(n, d, rng):
    return project_to_sphere(rng.standard_normal((n, d)))


def vmf_directions(h_old, kappa, rng):
    return sample_vmf_rows(project_to_sphere(h_old), kappa, rng)


def doa_directions(model, x_source, rate, rng):
    return project_to_sphere(forward_dropout(model, x_source, rate, rng))


def vt_directions(new_features, new_y, m, rng):
    """Unit deviations of randomly picked new examples from their batch class mean."""
    new_features = np.atleast_2d(new_features)
    classes, inverse, counts = np.unique(new_y, return_inverse=True, return_counts=True)
    eligible = np.flatnonzero(counts[inverse] >= 2)
    if eligible.size == 0:
        raise DegenerateDeviation("no new class has two or more examples in the batch")
    means = np.zeros((classes.size, new_features.shape[1]))
    np.add.at(means, inverse, new_features)
    means /= counts[:, None]
    pick = eligible[rng.integers(0, eligible.size, size=m)]
    dev = new_features[pick] - means[inverse[pick]]
    norms = np.linalg.norm(dev, axis=1, keepdims=True)
    if np.any(norms <= TINY):
        raise DegenerateDeviation("new-class feature coincides with its class mean")
    return dev / norms


def wap_inner(ctx: PerturbContext, cfg: PerturberConfig, history=None) -> WeightDelta:
    """Projected gradient descent on an encoder delta that pushes old examples
    toward randomly assigned new-task labels.

    ``history``, if a list, receives ``(loss_before_step, delta_norm_after)``
    per inner iteration.
    """
    model = ctx.model
    x_old = np.atleast_2d(ctx.old_x)
    m = x_old.shape[0]
    new_labels = np.unique(ctx.new_y)
    if new_labels.size == 0:
        raise ConfigError("WAP needs new-task labels in the batch")
    delta = model.encoder_delta_zeros()
    for _ in range(cfg.inner_steps):
        y_adv = new_labels[ctx.rng.integers(0, new_labels.size, size=m)]
        adv = apply_weight_delta(model, delta)
        feats, cache = forward_with_cache(adv, x_old)
        loss, grad_f, _ = cosine_ce(adv, feats, y_adv)
        grads = backward_from_feature_grad(adv, cache, grad_f)
        delta = delta + grads.encoder().scaled(-cfg.zeta * cfg.adv_weight)
        delta = l2_ball_project(delta, cfg.ball_radius)
        if history is not None:
            history.append((loss, delta.norm(), y_adv))
    return delta


def wap_directions(model, delta, x_old):
    return project_to_sphere(forward(apply_weight_delta(model, delta), x_old))


# --- perturbed features ------------------------------------------------------

def project_to_fixed_angle(h_old, f_perturbed, angle):
    """Place the output at exactly ``angle`` degrees from ``h_old`` in the plane
    spanned by ``h_old`` and ``f_perturbed``, keeping the norm of ``h_old``."""
    h_old = np.asarray(h_old, dtype=np.float64)
    if angle == 0:
        return h_old.copy()
    r = np.linalg.norm(h_old, axis=-1, keepdims=True)
    u = project_to_sphere(h_old)
    t = tangent_direction(u, f_perturbed)
    a = math.radians(angle)
    return r * (math.cos(a) * u + math.sin(a) * t)


def perturb_gaussian(h_old, cfg: PerturberConfig, rng):
    h_old = np.asarray(h_old, dtype=np.float64)
    if cfg.lam == 0:
        return h_old.copy()
    h2 = np.atleast_2d(h_old)
    eps = gaussian_directions(h2.shape[0], h2.shape[1], rng)
    return hyperspherical_perturb(h2, eps, cfg.lam).reshape(h_old.shape)


def perturb_vmf(h_old, cfg: PerturberConfig, rng):
    h_old = np.asarray(h_old, dtype=np.float64)
    if cfg.lam == 0:
        return h_old.copy()
    h2 = np.atleast_2d(h_old)
    eps = vmf_directions(h2, cfg.kappa, rng)
    return hyperspherical_perturb(h2, eps, cfg.lam).reshape(h_old.shape)


def perturb_doa(h_old, x_source, cfg: PerturberConfig, ctx: PerturbContext):
    h_old = np.asarray(h_old, dtype=np.float64)
    if cfg.lam == 0:
        return h_old.copy()
    h2 = np.atleast_2d(h_old)
    eps = doa_directions(ctx.model, np.atleast_2d(x_source), cfg.dropout_rate, ctx.dropout_rng)
    return hyperspherical_perturb(h2, eps, cfg.lam).reshape(h_old.shape)


def _new_features(ctx: PerturbContext):
    if ctx.new_features is not None:
        return ctx.new_features
    return forward(ctx.model, np.atleast_2d(ctx.new_x))


def perturb_vt(h_old, ctx: PerturbContext, cfg: PerturberConfig):
    h_old = np.asarray(h_old, dtype=np.float64)
    if cfg.lam == 0:
        return h_old.copy()
    h2 = np.atleast_2d(h_old)
    eps = vt_directions(_new_features(ctx), ctx.new_y, h2.shape[0], ctx.rng)
    return hyperspherical_perturb(h2, eps, cfg.lam).reshape(h_old.shape)


def perturb_wap(h_old, x_old, delta: WeightDelta, ctx: PerturbContext, cfg: PerturberConfig):
    h_old = np.asarray(h_old, dtype=np.float64)
    if cfg.lam == 0:
        return h_old.copy()
    h2 = np.atleast_2d(h_old)
    eps = wap_directions(ctx.model, delta, np.atleast_2d(x_old))
    return hyperspherical_perturb(h2, eps, cfg.lam).reshape(h_old.shape)


def directions(cfg: PerturberConfig, h_old, ctx: PerturbContext):
    """Unit perturbation direction per row of ``h_old`` for ``cfg.variant``."""
    h_old = np.atleast_2d(h_old)
    m, d = h_old.shape
    v = cfg.variant
    if v == "gaussian":
        return gaussian_directions(m, d, ctx.rng)
    if v == "vmf":
        return vmf_directions(h_old, cfg.kappa, ctx.rng)
    if v == "doa_old":
        return doa_directions(ctx.model, ctx.old_x, cfg.dropout_rate, ctx.dropout_rng)
    if v == "doa_new":
        pick = ctx.rng.integers(0, len(ctx.new_x), size=m)
        return doa_directions(ctx.model, ctx.new_x[pick], cfg.dropout_rate, ctx.dropout_rng)
    if v == "vt":
        return vt_directions(_new_features(ctx), ctx.new_y, m, ctx.rng)
    if v == "wap":
        delta = wap_inner(ctx, cfg)
        return wap_directions(ctx.model, delta, ctx.old_x)
    raise ConfigError(f"variant {v!r} has no perturbation direction")


def perturb_features(cfg: PerturberConfig, h_old, ctx: PerturbContext):
    """Perturb old features for training.

    Returns ``(f, eps, lam)`` such that ``f == hyperspherical_perturb(h_old,
    eps, lam)``; the pair ``(eps, lam)`` is what backprop holds constant. In
    fixed-angle mode ``eps`` is the unit tangent toward the variant's output
    and ``lam = tan(angle)``.
    """
    h_old = np.atleast_2d(np.asarray(h_old, dtype=np.float64))
    if cfg.disabled:
        return h_old.copy(), np.zeros_like(h_old), 0.0
    eps = directions(cfg, h_old, ctx)
    if cfg.fixed_angle is None:
        return hyperspherical_perturb(h_old, eps, cfg.lam), eps, cfg.lam
    if cfg.fixed_angle == 0:
        return h_old.copy(), np.zeros_like(h_old), 0.0
    f_var = hyperspherical_perturb(h_old, eps, cfg.lam)
    tangent = tangent_direction(project_to_sphere(h_old), f_var)
    lam = math.tan(math.radians(cfg.fixed_angle))
    return hyperspherical_perturb(h_old, tangent, lam), tangent, lam


def deflection_angles(h_old, f):
    return angle_between(h_old, f)
