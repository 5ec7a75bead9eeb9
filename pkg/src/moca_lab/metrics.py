"""Collapse diagnostics: angular spread, gradient spectra, classifier geometry,
angular Fisher score, and a numerical check of the large-margin inequality."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import DegenerateVector
from .geometry import TINY, angle_between, project_to_sphere


@dataclass
class LabeledFeatureSet:
    features: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels must have equal length")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if self.groups.shape != self.labels.shape:
                raise ValueError("groups must align with labels")


def _class_directions(unit, labels):
    classes, inverse = np.unique(labels, return_inverse=True)
    sums = np.zeros((classes.size, unit.shape[1]))
    np.add.at(sums, inverse, unit)
    norms = np.linalg.norm(sums, axis=1, keepdims=True)
    if np.any(norms <= TINY):
        raise DegenerateVector("a class mean direction vanished")
    return classes, inverse, sums / norms


def intra_class_angle_deviation(fs: LabeledFeatureSet) -> dict:
    """Mean angle (degrees) between each feature and its class mean direction.

    Averaged within each class, then across the classes of each group. Class
    means are taken over sphere-normalized features. Returns ``{group: deg}``;
    with no groups the single key is ``"all"``.
    """
    unit = project_to_sphere(fs.features)
    classes, inverse, means = _class_directions(unit, fs.labels)
    angles = angle_between(unit, means[inverse])
    per_class = np.zeros(classes.size)
    np.add.at(per_class, inverse, angles)
    per_class /= np.bincount(inverse, minlength=classes.size)
    if fs.groups is None:
        return {"all": float(per_class.mean())}
    out = {}
    for g in np.unique(fs.groups):
        members = np.unique(fs.labels[fs.groups == g])
        out[str(g)] = float(per_class[np.searchsorted(classes, members)].mean())
    return out


@dataclass
class SpectrumReport:
    values: np.ndarray   # singular values, descending
    sweeps: int = 0

    def normalized(self):
        top = self.values[0] if self.values.size else 0.0
        return self.values / top if top > 0 else np.zeros_like(self.values)

    def tail_sum(self, start_rank, normalized=True):
        """Sum of (normalized) singular values from 1-based ``start_rank`` on."""
        vals = self.normalized() if normalized else self.values
        return float(np.sum(vals[start_rank - 1:]))


def gradient_spectrum(grad_matrix, tol=1e-12) -> SpectrumReport:
    """Singular values of a ``(rows, d)`` gradient matrix.

    Eigenvalues of the ``d x d`` Gram matrix by cyclic Jacobi; eigenvalues
    below the Gram matrix's rounding level are reported as exact zeros.
    """
    a = np.atleast_2d(np.asarray(grad_matrix, dtype=np.float64))
    gram = a.T @ a
    eig, sweeps = kernels.jacobi_eigvals(gram, tol)
    eig = np.sort(eig)[::-1]
    floor = max(a.shape) * np.finfo(np.float64).eps * max(eig[0], 0.0) if eig.size else 0.0
    eig[eig <= floor] = 0.0
    return SpectrumReport(np.sqrt(eig), sweeps)


def classifier_angle_matrix(rows, partition):
    """``T x T`` matrix of mean pairwise angles between classifier rows of two tasks.

    ``partition[t]`` lists the row indices owned by task ``t``. Pairs with
    ``i == j`` are excluded, so a diagonal entry is ``nan`` for a one-row task.
    """
    rows = np.asarray(rows, dtype=np.float64)
    unit = project_to_sphere(rows)
    angles = np.degrees(np.arccos(np.clip(unit @ unit.T, -1.0, 1.0)))
    T = len(partition)
    out = np.full((T, T), np.nan)
    for s in range(T):
        ps = np.asarray(partition[s])
        for t in range(T):
            pt = np.asarray(partition[t])
            block = angles[np.ix_(ps, pt)]
            valid = ps[:, None] != pt[None, :]
            if np.any(valid):
                out[s, t] = block[valid].mean()
    return out


def angular_fisher_score(fs: LabeledFeatureSet) -> float:
    """Within-class over between-class angular scatter (lower is more separable).

    ``S_w = sum_i sum_{f in i} (1 - cos(f, mu_i))`` and
    ``S_b = sum_i n_i (1 - cos(mu_i, mu))`` on sphere-normalized features.
    """
    unit = project_to_sphere(fs.features)
    classes, inverse, means = _class_directions(unit, fs.labels)
    if classes.size < 2:
        raise ValueError("angular Fisher score needs at least two classes")
    counts = np.bincount(inverse, minlength=classes.size)
    # 1 - cos is clipped at zero so rounding cannot make a scatter negative
    s_w = float(np.sum(np.maximum(0.0, 1.0 - np.sum(unit * means[inverse], axis=1))))
    g = unit.sum(axis=0)
    gn = np.linalg.norm(g)
    if gn <= TINY:
        raise DegenerateVector("global mean direction vanished")
    s_b = float(np.sum(counts * np.maximum(0.0, 1.0 - means @ (g / gn))))
    if s_b <= 0.0:
        return float("inf") if s_w > 0 else 0.0
    return s_w / s_b


# --- large-margin inequality ----------------------------------------------------

def margin_ratio(w_norms, x_norm, angles, deviations, label):
    """``exp(|w_y||x| cos(th_y + d_y)) / sum_j exp(|w_j||x| cos(th_j + d_j))``.

    With ``deviations`` zero except at ``label`` this is the large-margin
    expression; with all deviations it is the perturbed-feature expression.
    """
    logits = w_norms * x_norm * np.cos(angles + deviations)
    logits = logits - logits.max()
    e = np.exp(logits)
    return float(e[label] / e.sum())


@dataclass
class MarginCheckReport:
    trials: int
    violations_nonneg: int
    violations_nonpos: int
    zero_equal: bool
    max_excess: float

    @property
    def passed(self):
        return self.violations_nonneg == 0 and self.violations_nonpos == 0 and self.zero_equal


def _margin_trial(rng, k, sign):
    w_norms = rng.uniform(0.2, 3.0, size=k)
    x_norm = rng.uniform(0.2, 3.0)
    angles = rng.uniform(0.0, np.pi, size=k)
    angles = np.clip(angles, 1e-9, np.pi - 1e-9)
    label = int(rng.integers(0, k))
    # room left inside [0, pi] in the requested direction
    room = np.pi - angles if sign > 0 else angles
    own = rng.uniform(0.0, 1.0) * room[label]
    # every other deviation is capped by the label's own deviation
    dev = sign * rng.uniform(0.0, 1.0, size=k) * np.minimum(room, own)
    dev[label] = sign * own
    return w_norms, x_norm, angles, dev, label


def margin_pair(w_norms, x_norm, angles, deviations, label):
    """Return ``(large_margin, perturbed)`` for one feature.

    The large-margin expression keeps only the label's deviation.
    """
    lm_dev = np.zeros_like(deviations)
    lm_dev[label] = deviations[label]
    return (margin_ratio(w_norms, x_norm, angles, lm_dev, label),
            margin_ratio(w_norms, x_norm, angles, deviations, label))


def large_margin_inequality_check(rng, trials=10_000, k=10, slack=1e-12) -> MarginCheckReport:
    """Randomized check that the large-margin expression bounds the perturbed one.

    For all-nonnegative deviations expects ``LM <= MOCA``; for all-nonpositive
    deviations expects ``LM >= MOCA``; with zero deviations both must be equal.
    """
    bad_pos = bad_neg = 0
    zero_equal = True
    worst = 0.0
    for _ in range(trials):
        for sign in (1.0, -1.0):
            w, xn, th, dev, y = _margin_trial(rng, k, sign)
            lm, moca = margin_pair(w, xn, th, dev, y)
            excess = (lm - moca) if sign > 0 else (moca - lm)
            worst = max(worst, excess)
            if excess > slack:
                if sign > 0:
                    bad_pos += 1
                else:
                    bad_neg += 1
        w, xn, th, _, y = _margin_trial(rng, k, 1.0)
        lm, moca = margin_pair(w, xn, th, np.zeros(k), y)
        zero_equal = zero_equal and lm == moca
    return MarginCheckReport(trials, bad_pos, bad_neg, zero_equal, worst)
