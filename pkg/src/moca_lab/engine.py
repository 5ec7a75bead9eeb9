"""Task streams, replay memory and the offline / online / proxy training loops."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels, metrics
from .errors import ConfigError
from .geometry import hyperspherical_perturb_vjp
from .net import (GradientBundle, ModelParams, backward_from_feature_grad, cosine_ce, cosine_logits,
                  forward, forward_with_cache, sgd_step)
from .perturb import NEEDS_NEW_BATCH, PerturbContext, PerturberConfig, perturb_features
from .randkit import RngStream, as_stream

logger = logging.getLogger(__name__)

RESULT_SCHEMA_VERSION = 1


@dataclass
class Example:
    input: np.ndarray
    label: int
    task: int


@dataclass
class Task:
    classes: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def examples(self, index):
        return [Example(x, int(y), index) for x, y in zip(self.train_x, self.train_y)]


@dataclass
class TaskStream:
    tasks: list
    num_classes: int

    def __post_init__(self):
        seen = set()
        for t, task in enumerate(self.tasks):
            cls = set(int(c) for c in task.classes)
            if cls & seen:
                raise ConfigError(f"task {t} reuses classes {sorted(cls & seen)}")
            seen |= cls
            for y in (task.train_y, task.test_y):
                if not set(np.unique(y).tolist()) <= cls:
                    raise ConfigError(f"task {t} has labels outside its class set")
        if seen != set(range(self.num_classes)):
            raise ConfigError("task class sets must cover 0..k-1")

    @property
    def input_dim(self):
        return self.tasks[0].train_x.shape[1]

    def __len__(self):
        return len(self.tasks)


class MemoryBuffer:
    """Fixed-capacity reservoir of labeled raw examples."""

    def __init__(self, capacity, input_dim):
        if capacity < 0:
            raise ConfigError("buffer capacity must be >= 0")
        self.capacity = int(capacity)
        self.x = np.zeros((self.capacity, input_dim))
        self.y = np.zeros(self.capacity, dtype=np.int64)
        self.task = np.zeros(self.capacity, dtype=np.int64)
        self.size = 0
        self.seen = 0

    def __len__(self):
        return self.size

    def offer(self, x, y, task, rng):
        """Offer a run of examples; classic reservoir (Algorithm R) semantics."""
        x = np.atleast_2d(x)
        y = np.atleast_1d(y)
        n = x.shape[0]
        if n == 0 or self.capacity == 0:
            self.seen += n
            return self
        highs = self.seen + np.arange(1, n + 1)
        draws = as_stream(rng).integers(0, highs)
        assign, self.size = kernels.reservoir_assign(self.capacity, self.size, draws)
        slots = np.flatnonzero(assign >= 0)
        src = assign[slots]
        self.x[slots] = x[src]
        self.y[slots] = y[src]
        self.task[slots] = task
        self.seen += n
        return self

    def sample(self, m, rng):
        """Uniform draw of ``min(m, size)`` stored items without replacement."""
        k = min(m, self.size)
        idx = as_stream(rng).choice(self.size, size=k, replace=False)
        return self.x[idx], self.y[idx]

    def classes(self):
        return np.unique(self.y[:self.size])


def buffer_offer(buffer: MemoryBuffer, example: Example, rng) -> MemoryBuffer:
    return buffer.offer(example.input, example.label, example.task, rng)


class ProxyStore:
    """Frozen per-class mean features for the memory-free setting."""

    def __init__(self):
        self.means = {}
        self.counts = {}

    def add(self, features, labels):
        features = np.atleast_2d(features)
        for c in np.unique(labels):
            rows = features[labels == c]
            self.means[int(c)] = rows.sum(axis=0) / rows.shape[0]
            self.counts[int(c)] = int(rows.shape[0])

    def __len__(self):
        return len(self.means)

    def arrays(self):
        keys = sorted(self.means)
        return np.array([self.means[k] for k in keys]), np.array(keys, dtype=np.int64)


@dataclass
class TrainHyper:
    epochs: int = 5
    batch: int = 32
    replay_batch: int = 32
    lr: float = 0.05
    buffer: int = 50
    insertion: str = "batch"          # "batch" (per incoming batch) | "task_end"
    diag_population: str = "buffer"   # "buffer" (replay memory + current task) | "train"

    def validate(self):
        if self.epochs < 1 or self.batch < 1 or self.replay_batch < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch sizes and lr must be positive")
        if self.insertion not in ("batch", "task_end"):
            raise ConfigError("insertion must be 'batch' or 'task_end'")
        if self.diag_population not in ("train", "buffer"):
            raise ConfigError("diag_population must be 'train' or 'buffer'")
        return self


@dataclass
class ExperimentResult:
    config: dict
    seed: int
    accuracy_matrix: list
    final_accuracy: float
    boundaries: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    config_hash: str = ""
    schema_version: int = RESULT_SCHEMA_VERSION

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "config": self.config,
            "final_accuracy": self.final_accuracy,
            "accuracy_matrix": self.accuracy_matrix,
            "boundaries": self.boundaries,
            "diagnostics": self.diagnostics,
            "stats": self.stats,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(config=d["config"], seed=d["seed"], accuracy_matrix=d["accuracy_matrix"],
                   final_accuracy=d["final_accuracy"], boundaries=d["boundaries"],
                   diagnostics=d["diagnostics"], stats=d["stats"], config_hash=d["config_hash"],
                   schema_version=d["schema_version"])


def plain(obj):
    """Convert to JSON-native types; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- evaluation ---------------------------------------------------------------

def predict(params: ModelParams, x, chunk=4096):
    x = np.atleast_2d(x)
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], chunk):
        out[s:s + chunk] = np.argmax(cosine_logits(params, forward(params, x[s:s + chunk])), axis=1)
    return out


def accuracy(params: ModelParams, x, y):
    if len(y) == 0:
        return float("nan")
    return 100.0 * float(np.mean(predict(params, x) == y))


def evaluate(params: ModelParams, stream: TaskStream, upto=None):
    """Per-task test accuracy (percent) for tasks ``0..upto`` plus their union."""
    upto = len(stream) - 1 if upto is None else upto
    per_task = []
    hits = total = 0
    for task in stream.tasks[:upto + 1]:
        pred = predict(params, task.test_x)
        per_task.append(100.0 * float(np.mean(pred == task.test_y)) if len(pred) else float("nan"))
        hits += int(np.sum(pred == task.test_y))
        total += len(task.test_y)
    return per_task, (100.0 * hits / total if total else float("nan"))


# --- training -----------------------------------------------------------------

def _streams(rng):
    root = as_stream(rng)
    return {name: root.split(name) for name in ("order", "buffer", "perturb", "dropout", "diagnostics")}


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[s:s + size] for s in range(0, n, size)]


def _memory_step(params, cfg, xb, yb, replay, rngs):
    """One SGD step on new data plus (optionally perturbed) replayed data."""
    n = xb.shape[0]
    x_all = xb if replay is None else np.concatenate([xb, replay[0]])
    feats, cache = forward_with_cache(params, x_all)
    loss_new, grad_new, grad_cls = cosine_ce(params, feats[:n], yb)
    grad_feat = grad_new
    loss_old = 0.0
    if replay is not None:
        xo, yo = replay
        h_old = feats[n:]
        ctx = PerturbContext(params, xo, yo, xb, yb, rngs["perturb"], rngs["dropout"],
                             new_features=feats[:n])
        f_pert, eps, lam = perturb_features(cfg, h_old, ctx)
        loss_old, grad_pert, grad_cls_old = cosine_ce(params, f_pert, yo)
        grad_old = hyperspherical_perturb_vjp(h_old, eps, lam, grad_pert)
        grad_feat = np.concatenate([grad_new, grad_old])
        grad_cls = grad_cls + grad_cls_old
    grads = backward_from_feature_grad(params, cache, grad_feat)
    grads.classifier = grad_cls
    return grads, loss_new + loss_old


def _proxy_step(params, cfg, xb, yb, store_batch, rngs):
    n = xb.shape[0]
    feats, cache = forward_with_cache(params, xb)
    loss, grad_new, grad_cls = cosine_ce(params, feats, yb)
    if store_batch is not None:
        means, labels = store_batch
        ctx = PerturbContext(params, None, labels, xb, yb, rngs["perturb"], rngs["dropout"],
                             new_features=feats)
        f_pert, _, _ = perturb_features(cfg, means, ctx)
        loss_old, _, grad_cls_old = cosine_ce(params, f_pert, labels)
        grad_cls = grad_cls + grad_cls_old
        loss += loss_old
    grads = backward_from_feature_grad(params, cache, grad_new)
    grads.classifier = grad_cls
    return grads, loss


def _check_setting(setting, cfg: PerturberConfig, hyper: TrainHyper):
    cfg.validate(setting)
    hyper.validate()
    if setting != "proxy" and hyper.buffer < 1:
        raise ConfigError("memory-based settings need a buffer capacity >= 1")


def train(stream: TaskStream, params: ModelParams, perturber: PerturberConfig, hyper: TrainHyper,
          rng, setting="offline", config=None, observer: Optional[Callable] = None,
          keep_model=False):
    """Run one continual-learning experiment and return an :class:`ExperimentResult`.

    ``observer(task, step, batch_index_array)`` is called once per SGD step
    with the indices of the new-task examples used in that step.
    """
    _check_setting(setting, perturber, hyper)
    cfg = perturber.resolved()
    rngs = _streams(rng)
    num_tasks = len(stream)
    buffer = MemoryBuffer(hyper.buffer if setting != "proxy" else 0, stream.input_dim)
    store = ProxyStore()
    epochs = 1 if setting == "online" else hyper.epochs
    acc_matrix = [[None] * num_tasks for _ in range(num_tasks)]
    boundaries = []
    step = 0
    new_seen = 0
    for t, task in enumerate(stream.tasks):
        n_train = task.train_x.shape[0]
        for epoch in range(epochs):
            for idx in _batches(n_train, hyper.batch, rngs["order"]):
                xb, yb = task.train_x[idx], task.train_y[idx]
                if setting == "proxy":
                    store_batch = None
                    if len(store):
                        means, labels = store.arrays()
                        pick = rngs["buffer"].integers(0, len(labels), size=hyper.replay_batch)
                        store_batch = (means[pick], labels[pick])
                    grads, loss = _proxy_step(params, cfg, xb, yb, store_batch, rngs)
                else:
                    replay = buffer.sample(hyper.replay_batch, rngs["buffer"]) if len(buffer) else None
                    if replay is not None and cfg.variant in NEEDS_NEW_BATCH and len(xb) < 2:
                        replay = None
                    grads, loss = _memory_step(params, cfg, xb, yb, replay, rngs)
                params = sgd_step(params, grads, hyper.lr)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at step {step}")
                if setting != "proxy" and hyper.insertion == "batch" and epoch == 0:
                    buffer.offer(xb, yb, t, rngs["buffer"])
                if observer is not None:
                    observer(t, step, idx)
                step += 1
                if epoch == 0:
                    new_seen += len(idx)
        if setting != "proxy" and hyper.insertion == "task_end":
            buffer.offer(task.train_x, task.train_y, t, rngs["buffer"])
        if setting == "proxy":
            store.add(forward(params, task.train_x), task.train_y)
        per_task, seen_acc = evaluate(params, stream, t)
        acc_matrix[t][:t + 1] = per_task
        row = {"step": step, "task": t, "accuracies": per_task, "seen_accuracy": seen_acc}
        row.update(_boundary_diagnostics(params, stream, t, buffer, hyper))
        boundaries.append(row)
        logger.info("task %d done: seen-class accuracy %.2f", t, seen_acc)
    _, final_acc = evaluate(params, stream)
    diagnostics = final_diagnostics(params, stream, cfg, buffer, store, hyper, rngs["diagnostics"],
                                    setting)
    resolved = dict(config) if config is not None else {}
    resolved.setdefault("setting", setting)
    resolved["perturber"] = cfg.to_dict()
    resolved = plain(resolved)
    result = ExperimentResult(
        config=resolved,
        seed=int(as_stream(rng).seed),
        accuracy_matrix=plain(acc_matrix),
        final_accuracy=plain(final_acc),
        boundaries=plain(boundaries),
        diagnostics=plain(diagnostics),
        stats={"steps": step, "new_examples_seen": new_seen, "buffer_size": len(buffer),
               "buffer_offered": buffer.seen, "proxy_classes": len(store)},
        config_hash=config_hash(resolved),
    )
    if keep_model:
        return result, params
    return result


def train_offline(stream, model, perturber, hyper, rng, **kw):
    return train(stream, model, perturber, hyper, rng, setting="offline", **kw)


def train_online(stream, model, perturber, hyper, rng, **kw):
    return train(stream, model, perturber, hyper, rng, setting="online", **kw)


def train_proxy(stream, model, perturber, hyper, rng, **kw):
    return train(stream, model, perturber, hyper, rng, setting="proxy", **kw)


# --- diagnostics ----------------------------------------------------------------

def _old_new_split(stream, t):
    old = np.concatenate([stream.tasks[s].classes for s in range(t)]) if t else np.array([], int)
    return old, stream.tasks[t].classes


def _population(stream, t, buffer, hyper):
    if hyper.diag_population == "buffer" and len(buffer):
        x = np.concatenate([buffer.x[:buffer.size], stream.tasks[t].train_x])
        y = np.concatenate([buffer.y[:buffer.size], stream.tasks[t].train_y])
        return x, y
    x = np.concatenate([stream.tasks[s].train_x for s in range(t + 1)])
    y = np.concatenate([stream.tasks[s].train_y for s in range(t + 1)])
    return x, y


def _boundary_diagnostics(params, stream, t, buffer, hyper):
    x, y = _population(stream, t, buffer, hyper)
    feats = forward(params, x)
    old, new = _old_new_split(stream, t)
    groups = np.where(np.isin(y, old), "old", "new")
    dev = metrics.intra_class_angle_deviation(metrics.LabeledFeatureSet(feats, y, groups))
    fisher = (metrics.angular_fisher_score(metrics.LabeledFeatureSet(feats, y))
              if len(np.unique(y)) >= 2 else None)
    return {"old_angle_deviation": dev.get("old"), "new_angle_deviation": dev.get("new"),
            "angular_fisher": fisher}


def old_class_feature_gradients(params, stream, cfg, buffer, store, hyper, rng, setting):
    """Per-example training gradients ``dL/dh`` for old-class replay items at the
    final task, using the run's own perturbation (held constant)."""
    t = len(stream) - 1
    old, _ = _old_new_split(stream, t)
    last = stream.tasks[t]
    pick = rng.permutation(last.train_x.shape[0])[:hyper.batch]
    xb, yb = last.train_x[pick], last.train_y[pick]
    if setting == "proxy":
        means, labels = store.arrays()
        keep = np.isin(labels, old)
        h_old, yo, xo = means[keep], labels[keep], None
    else:
        keep = np.isin(buffer.y[:buffer.size], old)
        xo, yo = buffer.x[:buffer.size][keep], buffer.y[:buffer.size][keep]
        h_old = forward(params, xo) if len(yo) else np.zeros((0, params.feature_dim))
    if len(yo) == 0:
        return np.zeros((0, params.feature_dim))
    ctx = PerturbContext(params, xo, yo, xb, yb, rng.split("perturb"), rng.split("dropout"),
                         new_features=forward(params, xb))
    f_pert, eps, lam = perturb_features(cfg, h_old, ctx)
    _, grad_pert, _ = cosine_ce(params, f_pert, yo)
    grad_pert = grad_pert * len(yo)
    if setting == "proxy":
        return grad_pert
    return hyperspherical_perturb_vjp(h_old, eps, lam, grad_pert)


def final_diagnostics(params, stream, cfg, buffer, store, hyper, rng, setting):
    t = len(stream) - 1
    out = {}
    grads = old_class_feature_gradients(params, stream, cfg, buffer, store, hyper, rng, setting)
    if grads.shape[0]:
        spec = metrics.gradient_spectrum(grads)
        out["gradient_spectrum"] = spec.values.tolist()
        out["gradient_spectrum_normalized"] = spec.normalized().tolist()
        out["gradient_rows"] = int(grads.shape[0])
        out["old_class_gradients"] = grads.tolist()
    partition = [task.classes for task in stream.tasks]
    out["classifier_angle_matrix"] = metrics.classifier_angle_matrix(
        params.classifier, partition).tolist()
    x, y = _population(stream, t, buffer, hyper)
    feats = forward(params, x)
    old, _ = _old_new_split(stream, t)
    groups = np.where(np.isin(y, old), "old", "new")
    dev = metrics.intra_class_angle_deviation(metrics.LabeledFeatureSet(feats, y, groups))
    out["old_angle_deviation"] = dev.get("old")
    out["new_angle_deviation"] = dev.get("new")
    out["angular_fisher"] = metrics.angular_fisher_score(metrics.LabeledFeatureSet(feats, y))
    return out
