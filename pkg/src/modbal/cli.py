"""``modbal`` command line: generate, train, report, ablate, profile.

Exit codes: 0 success, 2 configuration error, 3 I/O error (including a
refusal to overwrite existing outputs), 4 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import config as cfgmod
from . import data as datamod
from .config import ExperimentConfig
from .errors import ConfigError, NonFiniteLossError
from .fileio import FormatError
from .models import MODALITIES, load_checkpoint, save_checkpoint
from .trainer import OVERHEAD_COLUMNS, TrainReport, profile_overhead, train

log = logging.getLogger("modbal")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NAN = 0, 2, 3, 4

RUN_FILES = ("config.txt", "epochs.csv", "scores.csv", "balance.csv", "timing.csv", "summary.json", "model.ckpt")
ALPHA_PAIRS = ((0.0, 10000.0), (10000.0, 0.0), (10000.0, 10000.0), (10000.0, 20000.0),
                (20000.0, 0.0), (20000.0, 10000.0), (20000.0, 20000.0), (30000.0, 20000.0))
WINDOW_GRID = (10, 15, 20, 25)
TRAIN_FILE, TEST_FILE = "train.mbd", "test.mbd"


class OutputExists(OSError):
    pass


# -- helpers -------------------------------------------------------------------


def build_config(args) -> ExperimentConfig:
    """Config file (or defaults), then ``--set`` overrides, then dedicated flags."""
    if args.config:
        cfg = cfgmod.load(args.config)
    else:
        cfg = ExperimentConfig()
    cfgmod.apply_overrides(cfg, cfgmod.parse_set(args.set or []))
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
        cfg.data.seed = args.seed
    if getattr(args, "no_awc", False):
        cfg.balance.window_epochs = 0
    if getattr(args, "out", None):
        cfg.run.out_dir = str(args.out)
    return cfg.validate()


def prepare_dir(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise OutputExists(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise OutputExists(f"{path} is not empty; pass --force-overwrite to replace its contents")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns) if columns is not None else (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row[k]) for k in columns})


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _epoch_columns() -> list[str]:
    return (["epoch", "lr", "train_loss", "test_mpjpe", "test_pa_mpjpe"] + [f"phi_{m}" for m in MODALITIES]
            + ["partition", "awc_loss_mean", "l2_term_mean"])


def _score_columns() -> list[str]:
    return ["epoch", "batch"] + [f"phi_{m}" for m in MODALITIES] + ["full_profit"]


def _balance_columns() -> list[str]:
    return (["epoch", "partition", "alpha_S", "alpha_I", "awc_loss_value", "fim_sample_size"]
            + [f"fim_mean_{m}" for m in MODALITIES])


def write_run(report: TrainReport, out: Path) -> None:
    cfg = report.config
    (out / "config.txt").write_text(cfgmod.dumps(cfg))
    write_csv(out / "epochs.csv", report.epochs, _epoch_columns())
    write_csv(out / "scores.csv", report.scores, _score_columns())
    write_csv(out / "balance.csv", report.balance, _balance_columns())
    timing_cols = ["epoch", "fim", "pose_est", "correlation", "score_calc", "forward", "backward", "optim", "eval", "total"]
    write_csv(out / "timing.csv", report.timing, timing_cols)
    summary = {
        "seed": report.seed,
        "final": report.final,
        "window_epochs": cfg.balance.window_epochs,
        "alpha_superior": cfg.balance.alpha_superior,
        "alpha_inferior": cfg.balance.alpha_inferior,
        "config": cfgmod.to_flat(cfg),
    }
    checksum = save_checkpoint(report.model, out / "model.ckpt")
    summary["checkpoint_sha256"] = checksum
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    validate_run(out)


def validate_run(out: Path) -> dict:
    """Re-read every run file; raises on anything missing or corrupt."""
    for name in RUN_FILES:
        if not (out / name).is_file():
            raise FileNotFoundError(f"{out / name} was not written")
    summary = json.loads((out / "summary.json").read_text())
    load_checkpoint(out / "model.ckpt")
    if len(read_csv(out / "epochs.csv")) != summary["final"]["epochs"]:
        raise FormatError(f"{out / 'epochs.csv'} does not have one row per epoch")
    return summary


def load_datasets(path, cfg: ExperimentConfig):
    path = Path(path)
    train_ds = datamod.load(path / TRAIN_FILE)
    test_ds = datamod.load(path / TEST_FILE)
    if train_ds.config.joints != cfg.data.joints or train_ds.config.input_dims != cfg.data.input_dims:
        raise ConfigError(f"datasets in {path} do not match the data section (joints/input_dims)")
    return train_ds, test_ds


# -- commands ------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = build_config(args)
    out = prepare_dir(args.out or cfg.run.out_dir, args.force_overwrite)
    train_ds, test_ds = datamod.generate(cfg.data)
    for name, ds in ((TRAIN_FILE, train_ds), (TEST_FILE, test_ds)):
        checksum = datamod.save(ds, out / name)
        datamod.load(out / name)
        print(f"{out / name}  sha256={checksum}  samples={len(ds)}")
    (out / "config.txt").write_text(cfgmod.dumps(cfg))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = prepare_dir(cfg.run.out_dir, args.force_overwrite)
    datasets = load_datasets(args.data, cfg) if args.data else None
    report = train(cfg, datasets)
    write_run(report, out)
    f = report.final
    print(f"{out}: test MPJPE {f['test_mpjpe']:.3f} mm, PA-MPJPE {f['test_pa_mpjpe']:.3f} mm")
    return EXIT_OK


def shapley_curves(run_dir: Path) -> list[dict]:
    """Per-epoch means of the per-batch scores."""
    rows = read_csv(run_dir / "scores.csv")
    by_epoch: dict[int, list[dict]] = {}
    for r in rows:
        by_epoch.setdefault(int(r["epoch"]), []).append(r)
    out = []
    for epoch in sorted(by_epoch):
        group = by_epoch[epoch]
        rec = {"run": run_dir.name, "epoch": epoch}
        rec.update({m: float(np.mean([float(r[f"phi_{m}"]) for r in group])) for m in MODALITIES})
        out.append(rec)
    return out


def k_sweep_rows(run_dirs: Iterable[Path]) -> list[dict]:
    """One row per window length, averaged over the runs sharing it."""
    by_k: dict[int, list[dict]] = {}
    for d in run_dirs:
        summary = json.loads((d / "summary.json").read_text())
        by_k.setdefault(int(summary["window_epochs"]), []).append(summary)
    rows = []
    for k in sorted(by_k):
        group = by_k[k]
        rows.append({
            "K": k,
            "runs": len(group),
            "test_mpjpe": float(np.mean([s["final"]["test_mpjpe"] for s in group])),
            "test_pa_mpjpe": float(np.mean([s["final"]["test_pa_mpjpe"] for s in group])),
        })
    return rows


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.runs]
    run_dirs, profile_dirs = [], []
    for d in dirs:
        if (d / "overhead.json").is_file():
            profile_dirs.append(d)
            continue
        for name in ("scores.csv", "summary.json"):
            if not (d / name).is_file():
                raise FileNotFoundError(f"missing input {d / name}")
        run_dirs.append(d)
    out = prepare_dir(args.out, args.force_overwrite)
    curves = [row for d in run_dirs for row in shapley_curves(d)]
    write_csv(out / "shapley_curves.csv", curves, ["run", "epoch", *MODALITIES])
    write_csv(out / "k_sweep.csv", k_sweep_rows(run_dirs), ["K", "runs", "test_mpjpe", "test_pa_mpjpe"])
    overhead = [json.loads((d / "overhead.json").read_text()) for d in profile_dirs]
    write_csv(out / "overhead.csv", overhead, OVERHEAD_COLUMNS)
    for name in ("shapley_curves.csv", "k_sweep.csv", "overhead.csv"):
        read_csv(out / name)
        print(out / name)
    return EXIT_OK


def _run_cell(payload: tuple[str, str]) -> dict:
    """Train one grid cell in its own directory; returns its summary."""
    config_text, out_dir = payload
    cfg = cfgmod.loads(config_text, "<ablate cell>")
    cfg.run.out_dir = out_dir
    out = prepare_dir(out_dir, force=True)
    report = train(cfg)
    write_run(report, out)
    return json.loads((out / "summary.json").read_text())


def _parse_pairs(text: str) -> list[tuple[float, float]]:
    pairs = []
    for item in text.split(","):
        s, _, i = item.partition(":")
        try:
            pairs.append((float(s), float(i)))
        except ValueError:
            raise ConfigError(f"--pairs expects alpha_S:alpha_I items, got {item!r}") from None
    return pairs


def _parse_ints(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from None


def max_workers() -> int:
    raw = os.environ.get("MODBAL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MODBAL_THREADS must be an integer, got {raw!r}") from None


def cmd_ablate(args) -> int:
    base = build_config(args)
    seeds = _parse_ints(args.seeds, "--seeds")
    if args.grid == "alpha":
        settings = [{"alpha_superior": s, "alpha_inferior": i, "window_epochs": base.balance.window_epochs}
                    for s, i in (_parse_pairs(args.pairs) if args.pairs else ALPHA_PAIRS)]
    else:
        ks = _parse_ints(args.windows, "--windows") if args.windows else list(WINDOW_GRID)
        settings = [{"alpha_superior": base.balance.alpha_superior, "alpha_inferior": base.balance.alpha_inferior,
                     "window_epochs": k} for k in ks]
    out = prepare_dir(args.out or base.run.out_dir, args.force_overwrite)
    workers = max_workers()

    cells: list[tuple[str, int, dict]] = []
    for seed in seeds:
        cells.append(("baseline", seed, {"alpha_superior": base.balance.alpha_superior,
                                         "alpha_inferior": base.balance.alpha_inferior, "window_epochs": 0}))
        for idx, s in enumerate(settings):
            cells.append((f"cell{idx:02d}", seed, s))
    payloads = []
    for label, seed, s in cells:
        cfg = cfgmod.loads(cfgmod.dumps(base))
        cfg.run.seed = cfg.data.seed = seed
        cfg.balance.alpha_superior = s["alpha_superior"]
        cfg.balance.alpha_inferior = s["alpha_inferior"]
        cfg.balance.window_epochs = s["window_epochs"]
        payloads.append((cfgmod.dumps(cfg), str(out / "cells" / f"{label}_seed{seed}")))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_cell, payloads))
    else:
        summaries = [_run_cell(p) for p in payloads]

    results: dict[str, list[dict]] = {}
    for (label, _, _), summary in zip(cells, summaries):
        results.setdefault(label, []).append(summary)

    def mean(label, key):
        return float(np.mean([s["final"][key] for s in results[label]]))

    base_mpjpe, base_pa = mean("baseline", "test_mpjpe"), mean("baseline", "test_pa_mpjpe")
    rows = [{"setting": "baseline", "alpha_S": "", "alpha_I": "", "K": 0, "seeds": len(seeds),
             "test_mpjpe": base_mpjpe, "test_pa_mpjpe": base_pa,
             "delta_mpjpe_baseline_minus_run": 0.0, "delta_pa_mpjpe_baseline_minus_run": 0.0}]
    for idx, s in enumerate(settings):
        label = f"cell{idx:02d}"
        m, pa = mean(label, "test_mpjpe"), mean(label, "test_pa_mpjpe")
        rows.append({"setting": label, "alpha_S": s["alpha_superior"], "alpha_I": s["alpha_inferior"],
                     "K": s["window_epochs"], "seeds": len(seeds), "test_mpjpe": m, "test_pa_mpjpe": pa,
                     "delta_mpjpe_baseline_minus_run": base_mpjpe - m,
                     "delta_pa_mpjpe_baseline_minus_run": base_pa - pa})
    if args.grid == "alpha":
        name = "ablation.csv"
    else:
        # the window table keeps one row per K; the baseline goes to its own file
        name = "k_sweep.csv"
        write_csv(out / "baseline.csv", rows[:1])
        rows = rows[1:]
    write_csv(out / name, rows)
    read_csv(out / name)
    print(out / name)
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = build_config(args)
    out = prepare_dir(args.out or cfg.run.out_dir, args.force_overwrite)
    record = profile_overhead(cfg, args.batches)
    (out / "overhead.json").write_text(json.dumps(record, indent=2) + "\n")
    write_csv(out / "overhead.csv", [record], OVERHEAD_COLUMNS)
    read_csv(out / "overhead.csv")
    for col in OVERHEAD_COLUMNS:
        value = record[col]
        print(f"{col:>14}: {value:.3f}" if isinstance(value, float) else f"{col:>14}: {value}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modbal", description="Balanced multi-modal pose regression experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, out=True):
        p.add_argument("--config", help="plain-text key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="sets run.seed and data.seed")
        if out:
            p.add_argument("--out", help="output directory (default: run.out_dir)")
        p.add_argument("--force-overwrite", action="store_true", help="write into a non-empty output directory")

    p = sub.add_parser("generate", help="write train/test MBDATA1 files")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model and write its run directory")
    common(p)
    p.add_argument("--no-awc", action="store_true", help="disable the weight constraint (window of 0 epochs)")
    p.add_argument("--data", help="directory holding train.mbd/test.mbd from 'generate'")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="plot-ready CSVs from one or more run directories")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--force-overwrite", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="grid over (alpha_S, alpha_I) pairs or window lengths")
    common(p, seed=False)
    p.add_argument("--grid", choices=("alpha", "window"), default="alpha")
    p.add_argument("--pairs", help="alpha_S:alpha_I,... (default: 8 preset pairs)")
    p.add_argument("--windows", help="K values for --grid window (default: 10,15,20,25)")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("profile", help="per-batch timing of training vs contribution scoring")
    common(p)
    p.add_argument("--batches", type=int, default=60, help="number of batches timed (>= 50 recommended)")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
