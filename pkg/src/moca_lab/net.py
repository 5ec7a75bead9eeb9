"""Fixed-topology MLP encoder with a cosine classifier and manual backprop.

Encoder: ``L`` affine layers with ReLU between them and no activation after
the last one. Classifier: ``logit_j = s * cos(w_j, f)``. All functions take a
single input vector or a batch of rows.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateVector, SchemaMismatch, ShapeMismatch, StaleCache
from .geometry import TINY

CHECKPOINT_FORMAT = "moca-lab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    weights: list          # per layer, shape (out, in)
    biases: list           # per layer, shape (out,)
    classifier: np.ndarray  # (k, d_f)
    scale: float = 10.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatch(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeMismatch(f"layer {i} input {w.shape[1]} does not chain")
        if self.classifier.ndim != 2 or self.classifier.shape[1] != self.weights[-1].shape[0]:
            raise ShapeMismatch("classifier width must equal the feature dimension")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def feature_dim(self):
        return self.weights[-1].shape[0]

    @property
    def num_classes(self):
        return self.classifier.shape[0]

    @property
    def layer_sizes(self):
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           self.classifier.copy(), self.scale)

    def encoder_delta_zeros(self) -> "WeightDelta":
        return WeightDelta([np.zeros_like(w) for w in self.weights],
                           [np.zeros_like(b) for b in self.biases])


@dataclass
class WeightDelta:
    """Additive perturbation of the encoder parameters."""

    weights: list
    biases: list

    def norm(self):
        sq = sum(float(np.sum(w * w)) for w in self.weights)
        sq += sum(float(np.sum(b * b)) for b in self.biases)
        return float(np.sqrt(sq))

    def scaled(self, c) -> "WeightDelta":
        return WeightDelta([c * w for w in self.weights], [c * b for b in self.biases])

    def __add__(self, other):
        return WeightDelta([a + b for a, b in zip(self.weights, other.weights)],
                           [a + b for a, b in zip(self.biases, other.biases)])

    def __neg__(self):
        return self.scaled(-1.0)


@dataclass
class GradientBundle:
    weights: list
    biases: list
    classifier: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradientBundle":
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases],
                   np.zeros_like(params.classifier))

    def __add__(self, other):
        return GradientBundle([a + b for a, b in zip(self.weights, other.weights)],
                              [a + b for a, b in zip(self.biases, other.biases)],
                              self.classifier + other.classifier)

    def encoder(self) -> WeightDelta:
        return WeightDelta(list(self.weights), list(self.biases))


@dataclass
class ForwardCache:
    """Activations needed to backprop one forward call."""

    inputs: list        # input to each layer, (n, in_l)
    pre: list           # hidden pre-activations, (n, out_l) for l < L-1
    masks: list = field(default_factory=list)  # scaled keep-masks per hidden layer, or None
    squeeze: bool = False


def init_params(layer_sizes, num_classes, rng, scale=10.0) -> ModelParams:
    """He-style uniform fan-in initialization; biases start at zero."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    d_f = layer_sizes[-1]
    bound = np.sqrt(6.0 / d_f)
    classifier = rng.uniform(-bound, bound, size=(num_classes, d_f))
    return ModelParams(weights, biases, classifier, float(scale))


def _as_batch(x, width, what="input"):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = x[None, :] if squeeze else x
    if x2.ndim != 2 or x2.shape[1] != width:
        raise ShapeMismatch(f"{what} width {x2.shape[-1]} != expected {width}")
    return x2, squeeze


def forward_with_cache(params: ModelParams, x, masks=None):
    x2, squeeze = _as_batch(x, params.input_dim)
    n_layers = len(params.weights)
    inputs, pre = [], []
    a = x2
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        if i == n_layers - 1:
            a = z
            break
        pre.append(z)
        a = np.maximum(z, 0.0)
        if masks is not None:
            a = a * masks[i]
    cache = ForwardCache(inputs, pre, list(masks) if masks is not None else [], squeeze)
    return (a[0] if squeeze else a), cache


def forward(params: ModelParams, x):
    """Encoder output ``h(x)``."""
    return forward_with_cache(params, x)[0]


def dropout_masks(params: ModelParams, n, rate, rng):
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    keep = 1.0 - rate
    return [(rng.random((n, w.shape[0])) < keep) / keep for w in params.weights[:-1]]


def forward_dropout(params: ModelParams, x, rate, rng, return_cache=False):
    """Forward pass with inverted dropout on every hidden layer."""
    x2, _ = _as_batch(x, params.input_dim)
    masks = dropout_masks(params, x2.shape[0], rate, rng)
    out, cache = forward_with_cache(params, x, masks)
    return (out, cache) if return_cache else out


def _unit_rows(m, what):
    n = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(n <= TINY):
        raise DegenerateVector(f"{what} has a zero row")
    return m / n, n


def cosine_logits(params: ModelParams, f):
    f2, squeeze = _as_batch(f, params.feature_dim, "feature")
    u, _ = _unit_rows(f2, "feature")
    v, _ = _unit_rows(params.classifier, "classifier")
    logits = params.scale * (u @ v.T)
    return logits[0] if squeeze else logits


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def cosine_ce(params: ModelParams, f, labels):
    """Mean cross-entropy over cosine logits with exact gradients.

    Returns ``(loss, dL/df, dL/dclassifier)``; gradients are for the batch
    mean, so each feature row's gradient carries a ``1/n`` factor.
    """
    f2, squeeze = _as_batch(f, params.feature_dim, "feature")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = f2.shape[0]
    if y.shape != (n,):
        raise ShapeMismatch("one label per feature row required")
    if np.any(y < 0) or np.any(y >= params.num_classes):
        raise ValueError("label out of range")
    u, fn = _unit_rows(f2, "feature")
    v, wn = _unit_rows(params.classifier, "classifier")
    s = params.scale
    logp = _log_softmax(s * (u @ v.T))
    rows = np.arange(n)
    loss = -float(np.mean(logp[rows, y]))
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz /= n
    du = s * (dz @ v)
    df = (du - u * np.sum(u * du, axis=1, keepdims=True)) / fn
    dv = s * (dz.T @ u)
    dw = (dv - v * np.sum(v * dv, axis=1, keepdims=True)) / wn
    return loss, (df[0] if squeeze else df), dw


def ce_loss_and_feature_grad(params: ModelParams, f, label):
    loss, df, _ = cosine_ce(params, f, label)
    return loss, df


def backward_from_feature_grad(params: ModelParams, cache: ForwardCache, grad_f) -> GradientBundle:
    """Reverse-mode encoder gradients for a gradient injected at the feature layer.

    The classifier entry of the returned bundle is zero.
    """
    g = np.asarray(grad_f, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    n_layers = len(params.weights)
    if len(cache.inputs) != n_layers or len(cache.pre) != n_layers - 1:
        raise StaleCache("cache depth does not match the network")
    if g.shape != (cache.inputs[0].shape[0], params.feature_dim):
        raise StaleCache(f"feature gradient {g.shape} does not match cached batch")
    for w, a in zip(params.weights, cache.inputs):
        if a.shape[1] != w.shape[1]:
            raise StaleCache("cached activations do not match layer widths")
    dws = [None] * n_layers
    dbs = [None] * n_layers
    delta = g
    for i in range(n_layers - 1, -1, -1):
        dws[i] = delta.T @ cache.inputs[i]
        dbs[i] = delta.sum(axis=0)
        if i:
            delta = delta @ params.weights[i]
            if cache.masks:
                delta = delta * cache.masks[i - 1]
            delta = delta * (cache.pre[i - 1] > 0.0)
    return GradientBundle(dws, dbs, np.zeros_like(params.classifier))


def apply_weight_delta(params: ModelParams, delta: WeightDelta) -> ModelParams:
    if len(delta.weights) != len(params.weights):
        raise ShapeMismatch("delta depth does not match the encoder")
    for w, dw, b, db in zip(params.weights, delta.weights, params.biases, delta.biases):
        if w.shape != dw.shape or b.shape != db.shape:
            raise ShapeMismatch("delta shape does not match the encoder")
    return ModelParams([w + dw for w, dw in zip(params.weights, delta.weights)],
                       [b + db for b, db in zip(params.biases, delta.biases)],
                       params.classifier.copy(), params.scale)


def l2_ball_project(delta: WeightDelta, radius) -> WeightDelta:
    """Radially shrink ``delta`` onto the L2 ball of ``radius`` when outside it."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    norm = delta.norm()
    if norm > radius:
        return delta.scaled(radius / norm)
    return delta


def sgd_step(params: ModelParams, grads: GradientBundle, lr) -> ModelParams:
    if len(grads.weights) != len(params.weights) or grads.classifier.shape != params.classifier.shape:
        raise ShapeMismatch("gradient bundle does not match parameters")
    for w, gw in zip(params.weights, grads.weights):
        if w.shape != gw.shape:
            raise ShapeMismatch("gradient bundle does not match parameters")
    return ModelParams([w - lr * gw for w, gw in zip(params.weights, grads.weights)],
                       [b - lr * gb for b, gb in zip(params.biases, grads.biases)],
                       params.classifier - lr * grads.classifier, params.scale)


# --- checkpoints ------------------------------------------------------------

def params_to_dict(params: ModelParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "scale": params.scale,
        "layers": [
            {"weight_shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
        "classifier_shape": list(params.classifier.shape),
        "classifier": params.classifier.ravel().tolist(),
    }


def params_from_dict(doc: dict) -> ModelParams:
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise SchemaMismatch("not a version-1 moca-lab checkpoint")
    weights, biases = [], []
    for layer in doc["layers"]:
        weights.append(np.asarray(layer["weight"], dtype=np.float64).reshape(layer["weight_shape"]))
        biases.append(np.asarray(layer["bias"], dtype=np.float64))
    classifier = np.asarray(doc["classifier"], dtype=np.float64).reshape(doc["classifier_shape"])
    return ModelParams(weights, biases, classifier, float(doc["scale"]))


def save_checkpoint(params: ModelParams, path):
    Path(path).write_text(json.dumps(params_to_dict(params)))


def load_checkpoint(path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()))
