"""Batch driver: prune, compile, simulate, sweep and report subcommands.

One JSON run configuration feeds the pipeline; the ``CSB_SEED`` environment
variable overrides the configured seed.  Exit codes: 0 success, 2 config or
validation problem, 3 data-format problem, 4 verification mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataflow, engine, pruning, scheduler, workloads
from .errors import ConfigError, CsbError, FormatError, VerifyMismatchError
from .format import BlockShape, load, nio, save

_TASK_KEYS = {
    "input_dim",
    "output_dim",
    "noise_sigma",
    "train_samples",
    "val_samples",
    "teacher_prune_fraction",
}
_SGD_KEYS = {"learning_rate", "batch_size", "steps_per_epoch"}
_PRUNE_KEYS = {
    "block_rows",
    "block_cols",
    "init_prune_fraction",
    "init_step",
    "target_loss",
    "target_loss_factor",
    "epochs_per_round",
    "rho",
    "max_fraction",
    "max_rounds",
    "sgd",
}
_ENGINE_KEYS = {"k", "l", "p", "q", "sharing_mode", "ew_unit_width"}
_SWEEP_KEYS = {"block_sizes", "sharing_modes", "seeds", "grid_blocks", "align", "styles"}
_TOP_KEYS = {"seed", "output_dir", "task", "prune", "engine", "sweep"}


def _check_keys(section: dict, allowed: set[str], ctx: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{ctx} must be a JSON object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {ctx}: {', '.join(sorted(unknown))}")


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    _check_keys(cfg, _TOP_KEYS, "config")
    for name, keys in (
        ("task", _TASK_KEYS),
        ("prune", _PRUNE_KEYS),
        ("engine", _ENGINE_KEYS),
        ("sweep", _SWEEP_KEYS),
    ):
        if name in cfg:
            _check_keys(cfg[name], keys, name)
    if "prune" in cfg and "sgd" in cfg["prune"]:
        _check_keys(cfg["prune"]["sgd"], _SGD_KEYS, "prune.sgd")
    env_seed = os.environ.get("CSB_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"CSB_SEED must be an integer, got {env_seed!r}") from None
    if "seed" not in cfg:
        raise ConfigError("config needs a seed")
    return cfg


def _prune_config(section: dict) -> pruning.PruneConfig:
    section = dict(section)
    sgd = pruning.SgdConfig(**section.pop("sgd", {}))
    shape = BlockShape(section.pop("block_rows", 8), section.pop("block_cols", 8))
    try:
        return pruning.PruneConfig(block_shape=shape, sgd=sgd, **section)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _engine_config(section: dict) -> scheduler.EngineConfig:
    try:
        return scheduler.EngineConfig(**section)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _build_task(cfg: dict, prune_cfg: pruning.PruneConfig) -> pruning.SyntheticTask:
    t = cfg.get("task", {})
    frac = t.get("teacher_prune_fraction")
    return pruning.make_task(
        seed=cfg["seed"],
        input_dim=t.get("input_dim", 64),
        output_dim=t.get("output_dim", 64),
        noise_sigma=t.get("noise_sigma", 0.01),
        n_train=t.get("train_samples", 256),
        n_val=t.get("val_samples", 128),
        teacher_prune=None if frac is None else (prune_cfg.block_shape, frac),
    )


def cmd_prune(args) -> int:
    cfg = load_config(args.config)
    prune_cfg = _prune_config(cfg.get("prune", {}))
    task = _build_task(cfg, prune_cfg)
    report = pruning.progressive_prune(task, prune_cfg)
    out_dir = Path(cfg.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    save(report.model, out_dir / "model.csb")
    doc = {
        "seed": cfg["seed"],
        "final_fraction": report.final_fraction,
        "compression_ratio": report.compression_ratio,
        "baseline_loss": report.baseline_loss,
        "target_loss": report.target_loss,
        "final_loss": report.final_loss,
        "rounds": [asdict(r) for r in report.rounds],
        "model_file": "model.csb",
    }
    (out_dir / "prune_report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(
        f"pruned to fraction {report.final_fraction:.4f} "
        f"(ratio {report.compression_ratio:.2f}x) in {len(report.rounds)} rounds"
    )
    return 0


def _parse_pair(text: str, what: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"{what} must look like 4x4, got {text!r}") from None


def _engine_from_args(args) -> scheduler.EngineConfig:
    k, l_ = _parse_pair(args.grid, "--grid")
    p, q = _parse_pair(args.pe, "--pe")
    return scheduler.EngineConfig(k=k, l=l_, p=p, q=q, sharing_mode=args.mode)


def cmd_compile(args) -> int:
    cfg = _engine_from_args(args)
    matrix = load(args.model)
    prog = scheduler.compile_micro(matrix, cfg)
    out = Path(args.out or Path(args.model).with_suffix(".micro.txt"))
    out.write_text(scheduler.format_micro(prog))
    print(f"wrote {out} ({len(prog.iterations)} block iterations)")
    if args.cell:
        graph = dataflow.build_cell_graph(args.cell, args.input_dim, args.hidden_dim)
        macro = dataflow.compile_macro(graph, cfg)
        macro_out = Path(args.macro_out or Path(args.model).with_suffix(".macro.txt"))
        macro_out.write_text(dataflow.format_macro(macro))
        print(f"wrote {macro_out} ({len(macro.words)} words)")
    return 0


def cmd_simulate(args) -> int:
    cfg = _engine_from_args(args)
    matrix = load(args.model)
    prog = scheduler.compile_micro(matrix, cfg)
    if args.input:
        x = np.asarray(json.loads(Path(args.input).read_text()), dtype=np.float64)
        if len(x) == matrix.orig_cols and matrix.orig_cols != matrix.cols:
            xp = np.zeros(matrix.cols)
            xp[: len(x)] = x
            x = xp
    else:
        x = np.random.default_rng(args.seed).uniform(-1.0, 1.0, size=matrix.cols)
    trace: list | None = [] if args.trace else None
    result = engine.simulate_mvm(prog, matrix, x, trace=trace)
    if args.verify:
        from .format import csb_mvm

        ref = csb_mvm(matrix, x)
        tol = 1e-9 * (1.0 + float(np.max(np.abs(ref))) if len(ref) else 1.0)
        err = float(np.max(np.abs(result.output - ref))) if len(ref) else 0.0
        if err > tol:
            raise VerifyMismatchError(f"simulated output off by {err:.3e} (> {tol:.3e})")
        print(f"verify ok (max abs err {err:.3e})")
    if args.trace:
        with open(args.trace, "w") as fh:
            for row in trace:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "output.json").write_text(json.dumps(result.output.tolist()))
    row = {
        "matrix_id": Path(args.model).stem,
        "rows": matrix.rows,
        "cols": matrix.cols,
        "block": matrix.block_shape.block_rows,
        "mode": cfg.sharing_mode,
        "prune_ratio": (matrix.rows * matrix.cols) / matrix.nnz if matrix.nnz else 0.0,
        "nnz": matrix.nnz,
        "cycles": result.stats.total_cycles,
        "utilization": result.utilization,
        "nio": nio(matrix) if matrix.nnz else 0.0,
    }
    _write_csv(out_dir / "stats.csv", [row])
    print(
        f"cycles={result.stats.total_cycles} utilization={result.utilization:.4f}"
    )
    return 0


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=engine.CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def _sweep_job(params: tuple) -> list[dict]:
    seed, block, style_idx, modes, grid_blocks, align, k, l_, p, q = params
    style = workloads.SUITE_STYLES[style_idx % len(workloads.SUITE_STYLES)]
    rng = np.random.default_rng(np.random.SeedSequence([seed, block]))
    shape = BlockShape(block, block)
    matrix = workloads.imbalance_matrix(rng, style, grid_blocks, shape, align)
    x = np.random.default_rng(np.random.SeedSequence([seed, block, 1])).uniform(
        -1.0, 1.0, size=matrix.cols
    )
    rows = []
    for mode in modes:
        cfg = scheduler.EngineConfig(k=k, l=l_, p=p, q=q, sharing_mode=mode)
        prog = scheduler.compile_micro(matrix, cfg)
        result = engine.simulate_mvm(prog, matrix, x)
        rows.append(
            {
                "matrix_id": f"{style}-b{block}-s{seed}",
                "rows": matrix.rows,
                "cols": matrix.cols,
                "block": block,
                "mode": mode,
                "prune_ratio": (matrix.rows * matrix.cols) / matrix.nnz,
                "nnz": matrix.nnz,
                "cycles": result.stats.total_cycles,
                "utilization": result.utilization,
                "nio": nio(matrix),
            }
        )
    return rows


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    sweep = cfg.get("sweep", {})
    eng = cfg.get("engine", {"k": 2, "l": 2, "p": 2, "q": 2})
    blocks = sweep.get("block_sizes", [16, 32, 64, 128])
    modes = sweep.get("sharing_modes", list(scheduler.SHARING_MODES))
    n_seeds = sweep.get("seeds", 10)
    grid_blocks = sweep.get("grid_blocks", 4)
    align = sweep.get("align", 2)
    for mode in modes:
        if mode not in scheduler.SHARING_MODES:
            raise ConfigError(f"unknown sharing mode {mode!r}")
    base = cfg["seed"]
    jobs = [
        (base + s, b, s, tuple(modes), grid_blocks, align,
         eng.get("k", 2), eng.get("l", 2), eng.get("p", 2), eng.get("q", 2))
        for s in range(n_seeds)
        for b in blocks
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            chunks = list(pool.map(_sweep_job, jobs))
    else:
        chunks = [_sweep_job(j) for j in jobs]
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r["matrix_id"], r["block"], r["mode"]))
    out_dir = Path(cfg.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / "sweep.csv"
    _write_csv(out, rows)
    print(f"wrote {out} ({len(rows)} rows)")
    return 0


def cmd_report(args) -> int:
    with open(args.csv) as fh:
        rows = []
        for raw in csv.DictReader(fh):
            rows.append(
                {
                    **raw,
                    "cycles": float(raw["cycles"]),
                    "utilization": float(raw["utilization"]),
                    "nio": float(raw["nio"]),
                }
            )
    if not rows:
        raise FormatError(f"no data rows in {args.csv}")
    means = engine.utilization_report(rows)
    print(f"{'mode':<12}{'n':>5}{'utilization':>14}{'cycles':>12}{'nio':>10}")
    for mode, stats in means.items():
        print(
            f"{mode:<12}{int(stats['count']):>5}{stats['utilization']:>14.4f}"
            f"{stats['cycles']:>12.1f}{stats['nio']:>10.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csb", description="CSB pruning, compilation and engine simulation"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="run the progressive ADMM pruning flow")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("compile", help="compile a .csb model to instruction listings")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", default="2x2", help="PEGroup grid KxL")
    p.add_argument("--pe", default="2x2", help="PE array PxQ per group")
    p.add_argument("--mode", default="two_d", choices=scheduler.SHARING_MODES)
    p.add_argument("--out", default=None)
    p.add_argument("--cell", default=None, choices=("gru", "lstm"))
    p.add_argument("--input-dim", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--macro-out", default=None)
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("simulate", help="simulate one matrix-vector product")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", default="2x2")
    p.add_argument("--pe", default="2x2")
    p.add_argument("--mode", default="two_d", choices=scheduler.SHARING_MODES)
    p.add_argument("--input", default=None, help="JSON file holding the input vector")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify", action="store_true")
    p.add_argument("--trace", default=None, help="write per-iteration JSON lines here")
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep", help="block-size x sharing-mode trend sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="per-mode averages of a sweep CSV")
    p.add_argument("--csv", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3
    except VerifyMismatchError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except CsbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
