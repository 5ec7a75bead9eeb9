"""Synthetic split benchmarks, IDX parsing and result files.

IDX layout (all integers big-endian)::

    bytes 0-1   zero
    byte  2     element type, 0x08 = unsigned byte (the only one accepted)
    byte  3     number of dimensions (3 for image files, 1 for label files)
    4*ndim      uint32 size of each dimension
    payload     prod(sizes) unsigned bytes, row-major

Result files: ``<name>.json`` holds the full :class:`ExperimentResult`
(``schema_version`` 1) and ``<name>.csv`` one row per task boundary.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import ExperimentResult, Task, TaskStream, plain
from .errors import (BadMagic, ConfigError, IdxError, LabelOutOfRange, SchemaMismatch,
                     ShapeMismatch, SizeOverflow, TruncatedPayload)
from .randkit import as_stream

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_IDX_NDIM = {IDX_IMAGES: 3, IDX_LABELS: 1}


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    num_tasks: int = 5
    input_dim: int = 32
    train_per_class: int = 200
    test_per_class: int = 200
    radius: float = 4.0
    sigma: float = 1.0
    seed: int = 0

    def validate(self):
        if self.num_classes < 1 or self.num_tasks < 1 or self.num_classes % self.num_tasks:
            raise ConfigError("num_classes must be a positive multiple of num_tasks")
        if self.input_dim < 1 or self.train_per_class < 1 or self.test_per_class < 0:
            raise ConfigError("input_dim and per-class counts must be positive")
        if not self.sigma > 0 or not self.radius > 0:
            raise ConfigError("sigma and radius must be positive")
        return self


def contiguous_partition(num_classes, num_tasks):
    per = num_classes // num_tasks
    return [np.arange(t * per, (t + 1) * per) for t in range(num_tasks)]


def generate_synthetic(spec: SyntheticSpec, rng=None) -> TaskStream:
    """Gaussian class blobs around means drawn uniformly on a radius-R sphere."""
    spec.validate()
    rng = as_stream(spec.seed if rng is None else rng)
    means = rng.standard_normal((spec.num_classes, spec.input_dim))
    means *= spec.radius / np.linalg.norm(means, axis=1, keepdims=True)
    per = spec.train_per_class + spec.test_per_class
    noise = rng.standard_normal((spec.num_classes, per, spec.input_dim)) * spec.sigma
    samples = means[:, None, :] + noise
    tasks = []
    for classes in contiguous_partition(spec.num_classes, spec.num_tasks):
        tr = samples[classes, :spec.train_per_class].reshape(-1, spec.input_dim)
        te = samples[classes, spec.train_per_class:].reshape(-1, spec.input_dim)
        tasks.append(Task(classes, tr, np.repeat(classes, spec.train_per_class),
                          te, np.repeat(classes, spec.test_per_class)))
    return TaskStream(tasks, spec.num_classes)


# --- IDX ------------------------------------------------------------------------

def parse_idx(data: bytes):
    """Parse an IDX image (3-d) or label (1-d) file. Returns a ``uint8`` array."""
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedPayload("IDX header shorter than the 4-byte magic")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in _IDX_NDIM:
        raise BadMagic(f"unsupported IDX magic 0x{magic:08x}")
    ndim = _IDX_NDIM[magic]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedPayload("IDX header truncated before all dimension sizes")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    total = math.prod(dims)
    if total > sys.maxsize:
        raise SizeOverflow(f"IDX dims {dims} exceed addressable size")
    payload = len(data) - header
    if payload < total:
        raise TruncatedPayload(f"IDX payload has {payload} bytes, dims {dims} need {total}")
    if payload > total:
        raise IdxError(f"IDX payload has {payload - total} trailing bytes")
    return np.frombuffer(data, dtype=np.uint8, count=total, offset=header).reshape(dims).copy()


def encode_idx(array) -> bytes:
    a = np.asarray(array)
    if a.dtype != np.uint8 or a.ndim not in (1, 3):
        raise ShapeMismatch("IDX encoding supports uint8 arrays of 1 or 3 dims")
    magic = IDX_IMAGES if a.ndim == 3 else IDX_LABELS
    return struct.pack(f">I{a.ndim}I", magic, *a.shape) + np.ascontiguousarray(a).tobytes()


def load_idx(path):
    return parse_idx(Path(path).read_bytes())


def build_split_stream(images, labels, tasks, classes_per_task, test_images=None,
                       test_labels=None) -> TaskStream:
    """Split a labeled image set into contiguous class blocks, pixels scaled to [0, 1]."""
    k = tasks * classes_per_task

    def prepare(imgs, labs):
        imgs = np.asarray(imgs)
        labs = np.asarray(labs).astype(np.int64)
        if imgs.shape[0] != labs.shape[0]:
            raise ShapeMismatch(f"{imgs.shape[0]} images but {labs.shape[0]} labels")
        if labs.size and (labs.min() < 0 or labs.max() >= k):
            raise LabelOutOfRange(f"labels must lie in [0, {k})")
        return imgs.reshape(imgs.shape[0], -1).astype(np.float64) / 255.0, labs

    x, y = prepare(images, labels)
    if set(np.unique(y).tolist()) != set(range(k)):
        raise LabelOutOfRange(f"training labels must cover exactly {k} classes")
    if test_images is not None:
        tx, ty = prepare(test_images, test_labels)
    else:
        tx, ty = np.zeros((0, x.shape[1])), np.zeros(0, dtype=np.int64)
    out = []
    for classes in contiguous_partition(k, tasks):
        m = np.isin(y, classes)
        tm = np.isin(ty, classes)
        out.append(Task(classes, x[m], y[m], tx[tm], ty[tm]))
    return TaskStream(out, k)


# --- results ------------------------------------------------------------------------

def result_to_json(result: ExperimentResult) -> str:
    return json.dumps(plain(result.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def result_to_csv(result: ExperimentResult) -> str:
    num_tasks = len(result.accuracy_matrix)
    header = (["step", "task"] + [f"acc_task_{j}" for j in range(num_tasks)]
              + ["seen_accuracy", "old_angle_deviation", "new_angle_deviation", "angular_fisher"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in result.boundaries:
        accs = list(row["accuracies"]) + [None] * (num_tasks - len(row["accuracies"]))
        w.writerow([_fmt(row["step"]), _fmt(row["task"])] + [_fmt(a) for a in accs]
                   + [_fmt(row.get(k)) for k in ("seen_accuracy", "old_angle_deviation",
                                                  "new_angle_deviation", "angular_fisher")])
    return buf.getvalue()


def result_paths(path):
    path = Path(path)
    base = path.with_suffix("") if path.suffix == ".json" else path
    return base.with_suffix(".json"), base.with_suffix(".csv")


def write_result(result: ExperimentResult, path):
    """Write ``<path>.json`` and ``<path>.csv``; returns both paths."""
    jpath, cpath = result_paths(path)
    jpath.parent.mkdir(parents=True, exist_ok=True)
    with open(jpath, "w", newline="\n") as fh:
        fh.write(result_to_json(result))
    with open(cpath, "w", newline="") as fh:
        fh.write(result_to_csv(result))
    return jpath, cpath


def read_result(path) -> ExperimentResult:
    jpath, _ = result_paths(path)
    doc = json.loads(Path(jpath).read_text())
    if doc.get("schema_version") != 1:
        raise SchemaMismatch(f"unsupported result schema {doc.get('schema_version')!r}")
    return ExperimentResult.from_dict(doc)
