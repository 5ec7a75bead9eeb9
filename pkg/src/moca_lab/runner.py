"""Run configuration, single experiments and multi-seed sweeps.

A run is described by one flat key/value document (:class:`RunConfig`). Every
key can come from a JSON file or a command-line flag; flags win.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from . import dataio
from .engine import TrainHyper, train
from .errors import ConfigError
from .net import init_params, save_checkpoint
from .perturb import SETTINGS, VARIANTS, PerturberConfig
from .randkit import RngStream

logger = logging.getLogger(__name__)

# perturbation magnitude when none is given
DEFAULT_LAMBDA = {"offline": 2.0, "online": 0.8, "proxy": 1.0}
# single-pass runs use small batches
DEFAULT_BATCH = {"offline": 32, "online": 10, "proxy": 32}

# keys that shape the sweep or the output location, not the experiment itself
_NON_EXPERIMENT = ("seeds", "variants", "out")


@dataclass
class RunConfig:
    setting: str = "offline"
    variant: str = "none"
    # perturber
    lam: Optional[float] = None
    kappa: Optional[float] = None
    dropout_rate: float = 0.5
    zeta: float = 10.0
    inner_steps: int = 1
    ball_radius: float = 1.0
    adv_weight: float = 10.0
    fixed_angle: Optional[float] = None
    # network
    hidden: list = field(default_factory=lambda: [256, 256])
    feature_dim: int = 64
    scale: float = 10.0
    # training (desk-scale defaults)
    epochs: int = 5
    batch: Optional[int] = None
    replay_batch: int = 32
    lr: float = 0.05
    buffer: int = 50
    insertion: str = "batch"
    diag_population: str = "buffer"
    # data: "synthetic" or a directory holding the four MNIST-style IDX files
    data: str = "synthetic"
    num_classes: int = 10
    num_tasks: int = 5
    input_dim: int = 32
    train_per_class: int = 200
    test_per_class: int = 200
    radius: float = 4.0
    sigma: float = 1.0
    data_seed: Optional[int] = None
    seed: int = 0
    seeds: Optional[list] = None
    variants: Optional[list] = None
    out: str = "results"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path, overrides=None) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(doc)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def perturber(self) -> PerturberConfig:
        lam = DEFAULT_LAMBDA.get(self.setting, 2.0) if self.lam is None else self.lam
        return PerturberConfig(variant=self.variant, lam=float(lam), kappa=self.kappa,
                               dropout_rate=self.dropout_rate, zeta=self.zeta,
                               inner_steps=self.inner_steps, ball_radius=self.ball_radius,
                               adv_weight=self.adv_weight, fixed_angle=self.fixed_angle)

    def hyper(self) -> TrainHyper:
        batch = DEFAULT_BATCH.get(self.setting, 32) if self.batch is None else self.batch
        return TrainHyper(epochs=self.epochs, batch=batch, replay_batch=self.replay_batch,
                          lr=self.lr, buffer=self.buffer, insertion=self.insertion,
                          diag_population=self.diag_population)

    def validate(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        self.perturber().validate(self.setting)
        self.hyper().validate()
        if not self.hidden or any(int(w) < 1 for w in self.hidden) or self.feature_dim < 1:
            raise ConfigError("layer widths must be positive")
        if self.scale <= 0:
            raise ConfigError("classifier scale must be positive")
        if self.num_classes % self.num_tasks:
            raise ConfigError("num_classes must be a multiple of num_tasks")
        if self.seeds is not None and not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.variants is not None:
            if not self.variants:
                raise ConfigError("variants must list at least one variant")
            for v in self.variants:
                if v not in VARIANTS:
                    raise ConfigError(f"unknown variant {v!r}")
        return self

    def resolved(self) -> dict:
        """Experiment-defining keys with every default filled in.

        The perturber appears in canonical form, so a disabled perturbation
        resolves to the same document as ``variant: none``.
        """
        d = self.to_dict()
        for k in _NON_EXPERIMENT:
            d.pop(k)
        for k in ("variant", "lambda", "kappa", "dropout_rate", "zeta", "inner_steps",
                  "ball_radius", "adv_weight", "fixed_angle"):
            d.pop(k)
        hyper = self.hyper()
        d["batch"] = hyper.batch
        d["hidden"] = [int(w) for w in self.hidden]
        if d["data"] == "synthetic":
            d["data_seed"] = self.seed if self.data_seed is None else self.data_seed
        d["perturber"] = self.perturber().resolved().to_dict()
        return d


def _idx_stream(cfg: RunConfig):
    root = Path(cfg.data)
    names = {"train_x": "train-images-idx3-ubyte", "train_y": "train-labels-idx1-ubyte",
             "test_x": "t10k-images-idx3-ubyte", "test_y": "t10k-labels-idx1-ubyte"}
    arrays = {k: dataio.load_idx(root / v) for k, v in names.items()}
    return dataio.build_split_stream(arrays["train_x"], arrays["train_y"], cfg.num_tasks,
                                     cfg.num_classes // cfg.num_tasks,
                                     arrays["test_x"], arrays["test_y"])


def build_stream(cfg: RunConfig):
    if cfg.data == "synthetic":
        seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
        spec = dataio.SyntheticSpec(cfg.num_classes, cfg.num_tasks, cfg.input_dim,
                                    cfg.train_per_class, cfg.test_per_class, cfg.radius,
                                    cfg.sigma, seed)
        return dataio.generate_synthetic(spec, RngStream(seed).split("data"))
    return _idx_stream(cfg)


def run_experiment(cfg: RunConfig, keep_model=False):
    """Build data and model from ``cfg`` and train once with ``cfg.seed``."""
    cfg.validate()
    stream = build_stream(cfg)
    root = RngStream(cfg.seed)
    sizes = [stream.input_dim] + [int(w) for w in cfg.hidden] + [cfg.feature_dim]
    params = init_params(sizes, stream.num_classes, root.split("init"), cfg.scale)
    return train(stream, params, cfg.perturber(), cfg.hyper(), root.split("train"),
                 setting=cfg.setting, config=cfg.resolved(), keep_model=keep_model)


def write_run(cfg: RunConfig, out_dir):
    """Run once and write ``result.json``, ``result.csv`` and ``model.json``."""
    result, params = run_experiment(cfg, keep_model=True)
    out_dir = Path(out_dir)
    dataio.write_result(result, out_dir / "result")
    save_checkpoint(params, out_dir / "model.json")
    return result


def accuracy_table(result) -> str:
    n = len(result.accuracy_matrix)
    lines = ["after  " + " ".join(f"T{j:<6d}" for j in range(n)) + " seen"]
    for t, (row, b) in enumerate(zip(result.accuracy_matrix, result.boundaries)):
        cells = " ".join(f"{a:7.2f}" if a is not None else "      -" for a in row)
        lines.append(f"T{t:<5d} {cells} {b['seen_accuracy']:.2f}")
    lines.append(f"final accuracy: {result.final_accuracy:.2f}")
    return "\n".join(lines)


# --- sweeps ---------------------------------------------------------------------

def max_workers():
    cores = os.cpu_count() or 1
    cap = os.environ.get("MOCA_LAB_THREADS")
    if cap:
        try:
            cores = min(cores, max(1, int(cap)))
        except ValueError:
            raise ConfigError("MOCA_LAB_THREADS must be an integer") from None
    return cores


def cell_dir(out, variant, seed):
    return Path(out) / variant / f"seed_{seed}"


def _run_cell(doc, out_dir):
    marker = Path(out_dir) / "DONE"
    try:
        result = write_run(RunConfig.from_dict(doc), out_dir)
        marker.write_text(f"{result.final_accuracy!r}\n")
        return None
    except Exception:
        return traceback.format_exc()


@dataclass
class SweepReport:
    summary_path: Path
    rows: list
    failures: dict
    skipped: int


def run_sweep(cfg: RunConfig, workers=None) -> SweepReport:
    """Run every (variant, seed) cell, skipping cells with a completion marker.

    Cells for the same seed share data, initialization and training streams
    across variants, so per-seed comparisons are paired.
    """
    cfg.validate()
    seeds = cfg.seeds if cfg.seeds is not None else [cfg.seed]
    variants = cfg.variants if cfg.variants is not None else [cfg.variant]
    for v in variants:
        RunConfig.from_dict({**cfg.to_dict(), "variant": v, "variants": None}).validate()
    out = Path(cfg.out)
    pending, skipped = [], 0
    for v in variants:
        for s in seeds:
            d = cell_dir(out, v, s)
            if (d / "DONE").exists():
                skipped += 1
                continue
            d.mkdir(parents=True, exist_ok=True)
            doc = {**cfg.to_dict(), "variant": v, "seed": s, "seeds": None, "variants": None}
            pending.append((doc, d, (v, s)))
    failures = {}
    workers = min(workers or max_workers(), max(1, len(pending)))
    if workers == 1:
        for doc, d, key in pending:
            err = _run_cell(doc, d)
            if err:
                failures[key] = err
    elif pending:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_run_cell, doc, d): key for doc, d, key in pending}
            for fut in as_completed(futs):
                err = fut.result()
                if err:
                    failures[futs[fut]] = err
    rows = summarize(out, cfg.setting, variants, seeds)
    path = out / "summary.csv"
    write_summary(rows, seeds, path)
    return SweepReport(path, rows, failures, skipped)


def summarize(out, setting, variants, seeds):
    rows = []
    for v in variants:
        finals = []
        for s in seeds:
            jpath = cell_dir(out, v, s) / "result.json"
            finals.append(dataio.read_result(jpath).final_accuracy if jpath.exists() else None)
        done = [f for f in finals if f is not None]
        rows.append({
            "setting": setting, "variant": v, "n": len(done),
            "mean": statistics.fmean(done) if done else None,
            "std": statistics.stdev(done) if len(done) > 1 else (0.0 if done else None),
            "finals": finals,
        })
    return rows


def write_summary(rows, seeds, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "variant", "n_seeds", "mean_final_accuracy", "std_final_accuracy"]
                   + [f"seed_{s}" for s in seeds])
        for r in rows:
            w.writerow([r["setting"], r["variant"], r["n"], dataio._fmt(r["mean"]),
                        dataio._fmt(r["std"])] + [dataio._fmt(f) for f in r["finals"]])
    return path
