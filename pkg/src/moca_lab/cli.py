"""``moca-lab`` command line: ``run``, ``sweep`` and ``diagnose``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, metrics
from .errors import ConfigError, IdxError, MocaLabError, SchemaMismatch
from .net import CHECKPOINT_FORMAT, params_from_dict
from .perturb import SETTINGS, VARIANTS
from .randkit import RngStream
from .runner import RunConfig, accuracy_table, run_sweep, write_run

DIAGNOSTICS = ("angles", "spectrum", "classifier-matrix", "fisher", "margin-check")

# flag dest -> config key
_FLAG_KEYS = {
    "setting": "setting", "variant": "variant", "lam": "lam", "kappa": "kappa",
    "dropout_rate": "dropout_rate", "zeta": "zeta", "inner_steps": "inner_steps",
    "ball_radius": "ball_radius", "fixed_angle": "fixed_angle", "buffer": "buffer",
    "epochs": "epochs", "batch": "batch", "replay_batch": "replay_batch", "lr": "lr",
    "seed": "seed", "seeds": "seeds", "variants": "variants", "data": "data", "out": "out",
}


def _int_list(text):
    try:
        return [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [s for s in text.replace(",", " ").split()]


def _add_run_flags(p):
    p.add_argument("--config", help="flat JSON config file; flags override its values")
    p.add_argument("--setting", choices=SETTINGS)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--dropout-rate", type=float)
    p.add_argument("--zeta", type=float)
    p.add_argument("--inner-steps", type=int)
    p.add_argument("--ball-radius", type=float)
    p.add_argument("--fixed-angle", type=float)
    p.add_argument("--buffer", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--replay-batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--data", help="'synthetic' or a directory with MNIST-style IDX files")
    p.add_argument("--out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="moca-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one experiment and write its result files")
    _add_run_flags(p)

    p = sub.add_parser("sweep", help="run every seed x variant cell and summarize")
    _add_run_flags(p)
    p.add_argument("--variants", type=_str_list)
    p.add_argument("--workers", type=int, help="parallel cells (default: cores, capped by "
                                               "MOCA_LAB_THREADS)")

    p = sub.add_parser("diagnose", help="extract one diagnostic from a stored artifact")
    p.add_argument("which", choices=DIAGNOSTICS)
    p.add_argument("path", nargs="?", help="result JSON, checkpoint JSON, or gradient dump "
                                           "(.npy / .json / .csv matrix)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--tasks", type=int, default=5, help="task count for a checkpoint's "
                                                        "classifier partition")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write to this file instead of standard output")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {}
    for dest, key in _FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            overrides[key] = val
    if args.config:
        return RunConfig.load(args.config, overrides)
    return RunConfig.from_dict(overrides)


def cmd_run(args) -> int:
    cfg = config_from_args(args).validate()
    out = Path(cfg.out)
    result = write_run(cfg, out)
    print(accuracy_table(result))
    print(f"wrote {out / 'result.json'} and {out / 'result.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = config_from_args(args).validate()
    report = run_sweep(cfg, workers=args.workers)
    for r in report.rows:
        mean = "-" if r["mean"] is None else f"{r['mean']:.2f} +- {r['std']:.2f}"
        print(f"{r['setting']:8s} {r['variant']:9s} n={r['n']:<3d} {mean}")
    if report.skipped:
        print(f"resumed: {report.skipped} completed cells skipped")
    print(f"wrote {report.summary_path}")
    if report.failures:
        for (v, s), err in sorted(report.failures.items()):
            print(f"cell {v} seed {s} failed:\n{err}", file=sys.stderr)
        print(f"{len(report.failures)} cells failed", file=sys.stderr)
        return 1
    return 0


# --- diagnose -------------------------------------------------------------------

def _load_artifact(path):
    """Return ``("result" | "checkpoint" | "gradients", payload)``."""
    path = Path(path)
    if path.suffix == ".npy":
        return "gradients", np.load(path, allow_pickle=False)
    if path.suffix == ".csv":
        return "gradients", np.loadtxt(path, delimiter=",", ndmin=2)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path}: not valid JSON ({exc})") from exc
    if isinstance(doc, list):
        return "gradients", np.asarray(doc, dtype=np.float64)
    if isinstance(doc, dict) and doc.get("format") == CHECKPOINT_FORMAT:
        return "checkpoint", params_from_dict(doc)
    if isinstance(doc, dict) and "schema_version" in doc:
        return "result", dataio.read_result(path)
    if isinstance(doc, dict) and "gradients" in doc:
        return "gradients", np.asarray(doc["gradients"], dtype=np.float64)
    raise SchemaMismatch(f"{path}: not a result, checkpoint or gradient dump")


def _need(kind, allowed, which):
    if kind not in allowed:
        raise SchemaMismatch(f"'{which}' needs a {' or '.join(allowed)} file, got a {kind}")


def diagnose(which, path=None, tasks=5, trials=10_000, seed=0):
    """Compute one diagnostic; returns ``(json_doc, csv_header, csv_rows)``."""
    if which == "margin-check":
        rep = metrics.large_margin_inequality_check(RngStream(seed).split("margin"), trials)
        doc = {"trials": rep.trials, "violations_nonneg": rep.violations_nonneg,
               "violations_nonpos": rep.violations_nonpos, "zero_equal": rep.zero_equal,
               "max_excess": rep.max_excess, "passed": rep.passed}
        return doc, list(doc), [list(doc.values())]
    if path is None:
        raise ConfigError(f"'{which}' needs an artifact path")
    kind, art = _load_artifact(path)
    if which == "spectrum":
        _need(kind, ("result", "gradients"), which)
        grads = art if kind == "gradients" else art.diagnostics.get("old_class_gradients")
        if grads is None:
            raise SchemaMismatch("result holds no old-class gradient matrix")
        spec = metrics.gradient_spectrum(np.asarray(grads, dtype=np.float64))
        vals, norm = spec.values.tolist(), spec.normalized().tolist()
        doc = {"singular_values": vals, "normalized": norm, "sweeps": spec.sweeps}
        return doc, ["rank", "singular_value", "normalized"], [
            [i + 1, v, n] for i, (v, n) in enumerate(zip(vals, norm))]
    if which == "classifier-matrix":
        _need(kind, ("result", "checkpoint"), which)
        if kind == "checkpoint":
            mat = metrics.classifier_angle_matrix(
                art.classifier, dataio.contiguous_partition(art.num_classes, tasks)).tolist()
        else:
            mat = art.diagnostics["classifier_angle_matrix"]
        mat = [[None if v is None or not np.isfinite(v) else v for v in row] for row in mat]
        return ({"classifier_angle_matrix": mat}, ["task"] + [f"task_{j}" for j in range(len(mat))],
                [[i] + row for i, row in enumerate(mat)])
    _need(kind, ("result",), which)
    keys = (("old_angle_deviation", "new_angle_deviation") if which == "angles"
            else ("angular_fisher",))
    series = [{"step": b["step"], "task": b["task"], **{k: b.get(k) for k in keys}}
              for b in art.boundaries]
    final = {k: art.diagnostics.get(k) for k in keys}
    return ({"series": series, "final": final}, ["step", "task", *keys],
            [[r["step"], r["task"], *[r[k] for k in keys]] for r in series])


def cmd_diagnose(args) -> int:
    doc, header, rows = diagnose(args.which, args.path, args.tasks, args.trials, args.seed)
    if args.format == "json":
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows([[dataio._fmt(v) for v in row] for row in rows])
        text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.which == "margin-check" and not doc["passed"]:
        return 1
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"moca-lab: ConfigError: {exc}", file=sys.stderr)
        return 2
    except (OSError, IdxError, SchemaMismatch) as exc:
        print(f"moca-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except MocaLabError as exc:
        print(f"moca-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
