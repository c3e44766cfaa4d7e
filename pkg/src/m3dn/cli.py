"""Command-line entry point: ``m3dn gen | train | eval | inspect-metric``.

Exit codes: 0 success, 1 I/O failure, 2 validation error, 3 numerical failure.
"""

import argparse
import contextlib
import csv
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from . import kernel as km
from .data import GeneratorConfig, generate, make_dataset, read_dataset, split, write_dataset
from .errors import (
    EigenFailure,
    InvalidConfig,
    M3DNError,
    NonFiniteActivation,
    NonFiniteObjective,
    NotPSD,
    NumericalUnderflow,
    SingularSystem,
)
from .metrics import CRITERIA
from .trainer import TrainingConfig, evaluate_examples, fit, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
NUMERICAL = (NonFiniteObjective, NonFiniteActivation, NumericalUnderflow, SingularSystem, NotPSD, EigenFailure,
             ArithmeticError)


class CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _load_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise CommandError(EXIT_VALIDATION, f"{what} {path}: invalid JSON ({e.msg} at line {e.lineno})")
    if not isinstance(doc, dict):
        raise CommandError(EXIT_VALIDATION, f"{what} {path}: expected a JSON object")
    return doc


def _finite_or_null(obj):
    # strict JSON has no NaN; undefined criteria are written as null
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _atomic_write_json(path, obj):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _manifest(path, command, config, seed, artifacts, timings, threads=None):
    _atomic_write_json(path, {
        "tool": "m3dn",
        "tool_version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "threads": threads,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "timings_seconds": timings,
    })


@contextlib.contextmanager
def _thread_limit(threads):
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def _threads(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("M3DN_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CommandError(EXIT_VALIDATION, f"M3DN_THREADS must be an integer, got {env!r}")
    return None


# -- commands -------------------------------------------------------------------


def cmd_gen(config_path, out_path, seed=None):
    t0 = time.perf_counter()
    doc = _load_json(config_path, "generator config")
    if seed is not None:
        doc["seed"] = seed
    cfg = GeneratorConfig.from_dict(doc)
    data, truth = generate(cfg)
    ds = make_dataset(data, split(data, cfg))
    out_path = Path(out_path)
    write_dataset(ds, out_path)
    kernel_path = out_path.with_name(out_path.name + ".truth.csv")
    km.write_matrix_csv(kernel_path, truth, ds.label_names)
    manifest = out_path.with_name(out_path.name + ".manifest.json")
    _manifest(manifest, "gen", cfg.to_dict(), cfg.seed,
              {"dataset": out_path, "ground_truth_kernel": kernel_path, "manifest": manifest},
              {"total": time.perf_counter() - t0})
    return EXIT_OK


def cmd_train(dataset_path, config_path, out_dir, seed=None, threads=None):
    t0 = time.perf_counter()
    doc = _load_json(config_path, "training config")
    if seed is not None:
        doc["seed"] = seed
    cfg = TrainingConfig.from_dict(doc)
    data = read_dataset(dataset_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    log_path = out / "log.jsonl"
    artifacts["log"] = log_path
    # held-out rows with labels; monitored only, never used for stopping
    validation = [ex for ex in data.test if ex.labels is not None]

    def on_epoch(state):
        if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            p = out / f"checkpoint_epoch{state.epoch:04d}.json"
            save_checkpoint(p, state, cfg, data.label_names)
            artifacts[p.stem] = p

    t_fit = time.perf_counter()
    with open(log_path, "w", encoding="utf-8") as log_fh, _thread_limit(threads):
        def log(rec):
            log_fh.write(json.dumps(_finite_or_null(rec), sort_keys=True) + "\n")
            log_fh.flush()

        state = fit(data, cfg, log=log, on_epoch=on_epoch, validation=validation)
    fit_time = time.perf_counter() - t_fit

    ckpt = out / "checkpoint.json"
    save_checkpoint(ckpt, state, cfg, data.label_names)
    artifacts["checkpoint"] = ckpt
    s_path, m_path = out / "kernel_S.csv", out / "cost_M.csv"
    km.write_matrix_csv(s_path, state.kernel, data.label_names)
    km.write_matrix_csv(m_path, state.cost, data.label_names)
    artifacts.update(kernel=s_path, cost=m_path)
    manifest = out / "manifest.json"
    artifacts["manifest"] = manifest
    _manifest(manifest, "train", cfg.to_dict(), cfg.seed, artifacts,
              {"fit": fit_time, "total": time.perf_counter() - t0}, threads)
    return EXIT_OK


def cmd_eval(checkpoint, dataset_path, report_path):
    t0 = time.perf_counter()
    state, cfg, label_names = load_checkpoint(checkpoint)
    data = read_dataset(dataset_path)
    dims = tuple(net.input_dim for net in state.nets)
    if data.label_count != state.cost.shape[0] or tuple(data.dims) != dims:
        raise CommandError(EXIT_VALIDATION, f"dataset (L={data.label_count}, dims={tuple(data.dims)}) does not match "
                                            f"checkpoint (L={state.cost.shape[0]}, dims={dims})")
    examples = [ex for ex in data.test if ex.labels is not None]
    if not examples:
        raise CommandError(EXIT_VALIDATION, "empty evaluation set")
    views = evaluate_examples(state, examples, cfg)
    report = {"checkpoint": str(checkpoint), "dataset": str(dataset_path), "n_examples": len(examples),
              "views": views}
    report_path = Path(report_path)
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_finite_or_null(report), indent=2, sort_keys=True) + "\n")
    csv_path = report_path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("view",) + CRITERIA)
        for name in ("modality1", "modality2", "fused"):
            w.writerow([name] + [repr(float(views[name].get(c, float("nan")))) for c in CRITERIA])
    manifest = report_path.with_name(report_path.name + ".manifest.json")
    _manifest(manifest, "eval", cfg.to_dict(), cfg.seed,
              {"report_json": report_path, "report_csv": csv_path, "manifest": manifest},
              {"total": time.perf_counter() - t0})
    return EXIT_OK


def inspect_paths(out_csv):
    out_csv = Path(out_csv)
    stem = out_csv.with_suffix("")
    return {
        "cost": out_csv,
        "kernel": stem.with_name(stem.name + ".kernel.csv"),
        "correlation": stem.with_name(stem.name + ".correlation.csv"),
    }


def cmd_inspect_metric(checkpoint, out_csv):
    t0 = time.perf_counter()
    state, cfg, label_names = load_checkpoint(checkpoint)
    paths = inspect_paths(out_csv)
    km.write_matrix_csv(paths["cost"], state.cost, label_names)
    km.write_matrix_csv(paths["kernel"], state.kernel, label_names)
    km.write_matrix_csv(paths["correlation"], km.correlation_view(state.cost), label_names,
                        comment="view = 2*(max(M) - M)/(max(M) - min(M)) - 1; largest cost -> -1, zero cost -> +1")
    manifest = paths["cost"].with_name(paths["cost"].name + ".manifest.json")
    _manifest(manifest, "inspect-metric", cfg.to_dict(), cfg.seed, dict(paths, manifest=manifest),
              {"total": time.perf_counter() - t0})
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="m3dn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"m3dn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("config")
    g.add_argument("out")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train networks and the label metric")
    t.add_argument("dataset")
    t.add_argument("config")
    t.add_argument("out_dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int, help="BLAS threads (default: M3DN_THREADS or all cores)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the dataset's test rows")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("report")

    i = sub.add_parser("inspect-metric", help="export the learned cost, kernel and correlation view")
    i.add_argument("checkpoint")
    i.add_argument("out_csv")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            return cmd_gen(args.config, args.out, args.seed)
        if args.command == "train":
            return cmd_train(args.dataset, args.config, args.out_dir, args.seed, _threads(args))
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.dataset, args.report)
        return cmd_inspect_metric(args.checkpoint, args.out_csv)
    except CommandError as e:
        print(f"m3dn {args.command}: {e}", file=sys.stderr)
        return e.code
    except InvalidConfig as e:
        print(f"m3dn {args.command}: invalid config field {e.field!r}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NUMERICAL as e:
        print(f"m3dn {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (M3DNError, ValueError) as e:
        print(f"m3dn {args.command}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"m3dn {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
