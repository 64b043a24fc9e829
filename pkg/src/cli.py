"""
Command-line entry point.

    python -m src.cli price --config pricing --seed 7 --n-paths 100000
    python -m src.cli lva --config lva --seed 7 --output results/lva_grid.csv
    python -m src.cli train --config surrogate --seed 7 --train data/train --model-out models/net.flmmnet

Settings come from a flat JSON config, then flags (flags win). Every written
artifact starts with a reproducibility stanza (seed, config hash, version).
Errors are reported on stderr as JSON {code, message, context}.
"""
import argparse
import json
import logging
import sys
import time
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src import __version__
from src.analysis.reports import bench_substeps, check_superlinear, time_ratios
from src.engine.estimators import (
    delta_estimate,
    deltas_frame,
    estimates_frame,
    lva_table,
    price_estimate,
    price_from_paths,
    square_grid,
    write_csv,
)
from src.engine.sde import simulate_coupled_paths, write_path_dump
from src.models.impact import COUPLINGS, effective_coeffs, physical_drift
from src.models.margrabe import MarketState
from src.surrogate.dataset import (
    FEATURES,
    SampleInput,
    build_dataset,
    feature_matrix,
    inputs_from_frame,
    inputs_to_array,
    load_dataset,
)
from src.surrogate.network import evaluate, forward, load_model, save_model, train
from src.utils.config import RunConfig, config_hash, load_config, merge_overrides, validate_config
from src.utils.errors import EXIT_IO, EXIT_OK, FLMMError, InvalidParamsError
from src.utils.logging import setup_logger

logger = logging.getLogger(__name__)

TIMING_COLUMNS = ["wall_clock"]
PREDICTION_RHOS = [0.1, 0.3, 0.5, 0.7, 0.9]
PREDICTION_TAUS = [0.5, 1.0, 2.0]
PREDICTION_POINT = {"s1": 60.0, "s2": 80.0, "sigma1": 0.4, "sigma2": 0.2, "r": 0.05}

_OVERRIDES = [
    ("s1", float), ("s2", float), ("tau", float), ("sigma1", float),
    ("sigma2", float), ("rho", float), ("r", float), ("epsilon", float),
    ("beta", float), ("floor", float), ("cap", float), ("delta0", float),
    ("n_paths", int), ("n_steps", int), ("levy_substeps", int),
    ("block_size", int), ("workers", int), ("seed", int), ("coupling", str),
]
_CHOICES = {"coupling": COUPLINGS}


def stanza(run: RunConfig) -> Dict[str, Any]:
    return {
        "command": run.command,
        "seed": run.seed,
        "config_hash": config_hash(run.settings),
        "block_size": int(run.settings["block_size"]),
        "version": __version__,
    }


def _emit(run: RunConfig, frame: pd.DataFrame, timings: bool = False) -> None:
    if not timings:
        frame = frame.drop(columns=[c for c in TIMING_COLUMNS if c in frame.columns])
    print(frame.to_string(index=False))
    if not run.output:
        return
    path = Path(run.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    if run.fmt == "json":
        with open(path, "w") as f:
            json.dump(
                {"stanza": stanza(run), "rows": json.loads(frame.to_json(orient="records", double_precision=15))},
                f, indent=2, sort_keys=True,
            )
    else:
        write_csv(frame, str(path), stanza(run))
    logger.info("wrote %s", path)


def cmd_price(run: RunConfig, args) -> int:
    tau = float(run.settings["tau"])
    if not args.dump_paths:
        est = price_estimate(run.market(), tau, run.model(), run.impact(), run.grid(),
                             workers=int(run.settings["workers"]))
    else:
        grid = run.grid().horizon(tau)
        paths = simulate_coupled_paths(run.market(), grid, run.model(), run.impact(),
                                       workers=int(run.settings["workers"]))
        write_path_dump(args.dump_paths, paths, grid)
        est = price_from_paths(run.market(), tau, run.model(), paths)
    if est.vr_status == "degenerate":
        logger.info("degenerate control: FLMM and Margrabe payoffs coincide on every path")
    _emit(run, estimates_frame([est]), args.timings)
    return EXIT_OK


def cmd_coeffs(run: RunConfig, args) -> int:
    """Effective drift and loadings at one state, next to the real-world drift of asset 1."""
    tau = float(run.settings["tau"])
    t = float(args.t or 0.0)
    if not 0.0 <= t < tau:
        raise InvalidParamsError("t must lie in [0, tau)", {"t": t, "tau": tau})
    r = float(run.settings["r"])
    mu1 = r if args.mu1 is None else float(args.mu1)
    mu2 = r if args.mu2 is None else float(args.mu2)
    state, model, impact = run.market(), run.model(), run.impact()
    coeffs = effective_coeffs(t, state, tau, model, impact)
    row = {
        "t": t, "s1": state.s1, "s2": state.s2,
        "lam": float(coeffs.lam), "denom": float(coeffs.denom),
        "sig11": float(coeffs.sig11), "sig12": float(coeffs.sig12),
        "sig21": float(coeffs.sig21), "sig22": float(coeffs.sig22),
        "mu1": float(coeffs.mu1), "mu2": float(coeffs.mu2),
        "mu1_physical": float(physical_drift(t, state, tau, model, impact, mu1, mu2)),
        "mu2_physical": mu2 * state.s2,
    }
    _emit(run, pd.DataFrame([row]))
    return EXIT_OK


def _grid_from_args(args, run: RunConfig) -> List[tuple]:
    values = args.grid or run.settings.get("grid")
    if not values:
        return [(float(run.settings["s1"]), float(run.settings["s2"]))]
    return square_grid(float(v) for v in values)


def cmd_lva(run: RunConfig, args) -> int:
    grid = _grid_from_args(args, run)
    epsilons = args.epsilons or run.settings.get("epsilons") or [float(run.settings["epsilon"])]
    frames = []
    for eps in epsilons:
        impact = RunConfig(run.command, dict(run.settings, epsilon=float(eps))).impact()
        frame = lva_table(grid, float(run.settings["tau"]), run.model(), impact, run.grid(),
                          workers=int(run.settings["workers"]))
        frame.insert(0, "epsilon", float(eps))
        frames.append(frame)
    _emit(run, pd.concat(frames, ignore_index=True))
    return EXIT_OK


def cmd_delta(run: RunConfig, args) -> int:
    grid = _grid_from_args(args, run)
    rows = [
        delta_estimate(MarketState(s1, s2), float(run.settings["tau"]), run.model(), run.impact(),
                       run.grid(), workers=int(run.settings["workers"]))
        for s1, s2 in grid
    ]
    _emit(run, deltas_frame(rows), args.timings)
    return EXIT_OK


def cmd_bench(run: RunConfig, args) -> int:
    m_values = args.m_values or run.settings.get("m_values") or [100, 200, 400, 800]
    n_values = args.n_values or run.settings.get("n_values") or [int(run.settings["n_paths"])]
    scale = bool(args.scale_substeps or run.settings.get("scale_levy_substeps", False))
    strict = bool(args.assert_superlinear or run.settings.get("assert_superlinear", False))
    min_steps = min(int(m) for m in m_values)
    rows = []
    for n_paths, n_steps in product(n_values, m_values):
        substeps = int(run.settings["levy_substeps"])
        if scale:
            substeps = bench_substeps(substeps, int(n_steps), min_steps)
        settings = dict(run.settings, n_paths=int(n_paths), n_steps=int(n_steps), levy_substeps=substeps)
        sweep = RunConfig(run.command, settings)
        est = price_estimate(sweep.market(), float(settings["tau"]), sweep.model(), sweep.impact(),
                             sweep.grid(), workers=int(settings["workers"]))
        row = est.to_row()
        row.update(n_paths=int(n_paths), n_steps=int(n_steps), levy_substeps=substeps, ci_length=est.ci_length)
        rows.append(row)
    frame = pd.DataFrame(rows)
    ratios = {}
    for n_paths, group in frame.groupby("n_paths"):
        ratios[n_paths] = time_ratios(group, "n_steps")
        for _, r in ratios[n_paths].dropna().iterrows():
            level = logging.INFO if r["superlinear"] else logging.WARNING
            logger.log(level, "N=%d M=%d time ratio %.2f (superlinear=%s, near-quadratic=%s)",
                       n_paths, r["n_steps"], r["time_ratio"], r["superlinear"], r["near_quadratic"])
    columns = [
        "n_paths", "n_steps", "levy_substeps", "value", "ci_low", "ci_high",
        "ci_length", "std_error", "vr_factor", "wall_clock",
    ]
    _emit(run, frame[columns], timings=True)
    if strict:
        # largest N only
        check_superlinear(ratios[max(ratios)])
    return EXIT_OK


def cmd_dataset(run: RunConfig, args) -> int:
    count = int(args.count or run.settings.get("count", 1000))
    out = args.out or run.settings.get("out")
    if not out:
        raise InvalidParamsError("dataset needs an output stem (--out)")
    paths = build_dataset(
        count, run.grid(), run.impact(), out, run.seed,
        shard_size=int(args.shard_size or run.settings.get("shard_size", 10000)),
        workers=int(run.settings["workers"]),
        method2_variance=float(run.settings.get("method2_variance", 0.25)),
    )
    frame = pd.DataFrame({"shard": paths})
    _emit(run, frame)
    return EXIT_OK


def cmd_train(run: RunConfig, args) -> int:
    train_stem = args.train or run.settings.get("train")
    model_out = args.model_out or run.settings.get("model_out")
    if not train_stem or not model_out:
        raise InvalidParamsError("train needs --train and --model-out")
    x, y = feature_matrix(load_dataset(train_stem))
    val_stem = args.val or run.settings.get("val")
    val_x = val_y = None
    if val_stem:
        val_x, val_y = feature_matrix(load_dataset(val_stem))
    settings = dict(run.settings)
    if args.epochs:
        settings["max_epochs"] = args.epochs
    config = RunConfig(run.command, settings).net()
    model = train(x, y, config, val_x, val_y)
    Path(model_out).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_out)
    history = pd.DataFrame(model.history)
    _emit(run, history)
    return EXIT_OK


def cmd_eval(run: RunConfig, args) -> int:
    model = load_model(args.model)
    x, y = feature_matrix(load_dataset(args.data))
    metrics = evaluate(model, x, y)
    summary = {k: v for k, v in metrics.items() if k != "residuals"}
    _emit(run, pd.DataFrame([summary]))
    if args.residuals:
        pd.DataFrame({"residual": metrics["residuals"]}).to_csv(args.residuals, index=False, float_format="%.12g")
    return EXIT_OK


def prediction_grid() -> List[SampleInput]:
    return [SampleInput(rho=rho, tau=tau, **PREDICTION_POINT) for rho in PREDICTION_RHOS for tau in PREDICTION_TAUS]


def cmd_predict(run: RunConfig, args) -> int:
    model = load_model(args.model)
    inputs = inputs_from_frame(pd.read_csv(args.inputs)) if args.inputs else prediction_grid()
    rows = []
    for sample in inputs:
        began = time.perf_counter()
        price = forward(model, sample)
        latency = time.perf_counter() - began
        rows.append(dict(zip(FEATURES, sample.to_array()), prediction=price, wall_clock=latency))
    batch = forward(model, inputs_to_array(inputs))
    logger.info("batch/single max difference %.3g", float(np.max(np.abs(batch - [r["prediction"] for r in rows]))))
    _emit(run, pd.DataFrame(rows), args.timings)
    return EXIT_OK


COMMANDS = {
    "price": cmd_price,
    "coeffs": cmd_coeffs,
    "lva": cmd_lva,
    "delta": cmd_delta,
    "bench": cmd_bench,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flmm", description="Exchange-option pricing under finite liquidity")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="config name (config/<name>_config.json) or path")
        p.add_argument("--output", help="write results to this file")
        p.add_argument("--format", dest="fmt", choices=["csv", "json"])
        p.add_argument("--log-dir", default="logs")
        p.add_argument("--timings", action="store_true", help="include wall-clock columns")
        for key, kind in _OVERRIDES:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, choices=_CHOICES.get(key))
        if name in ("lva", "delta"):
            p.add_argument("--grid", type=float, nargs="+", help="price axis for an (s1, s2) square grid")
        if name == "lva":
            p.add_argument("--epsilons", type=float, nargs="+")
        if name == "price":
            p.add_argument("--dump-paths", help="binary dump of terminal states")
        if name == "bench":
            p.add_argument("--m-values", type=int, nargs="+")
            p.add_argument("--n-values", type=int, nargs="+")
            p.add_argument("--scale-substeps", action="store_true", help="grow levy_substeps in proportion to M")
            p.add_argument("--assert-superlinear", action="store_true", help="exit 3 unless every M doubling more than doubles run time")
        if name == "coeffs":
            p.add_argument("--t", type=float, help="time of the state, 0 <= t < tau")
            p.add_argument("--mu1", type=float, help="real-world drift rate of asset 1 (default r)")
            p.add_argument("--mu2", type=float, help="real-world drift rate of asset 2 (default r)")
        if name == "dataset":
            p.add_argument("--count", type=int)
            p.add_argument("--out")
            p.add_argument("--shard-size", type=int)
        if name == "train":
            p.add_argument("--train")
            p.add_argument("--val")
            p.add_argument("--model-out")
            p.add_argument("--epochs", type=int)
        if name in ("eval", "predict"):
            p.add_argument("--model", required=True)
        if name == "eval":
            p.add_argument("--data", required=True)
            p.add_argument("--residuals")
        if name == "predict":
            p.add_argument("--inputs", help="CSV with columns " + ",".join(FEATURES))
    return parser


def make_run(args) -> RunConfig:
    base = load_config(args.config) if args.config else {}
    if args.command in ("eval", "predict"):
        base.setdefault("seed", 0)
    overrides = {key: getattr(args, key) for key, _ in _OVERRIDES}
    settings = merge_overrides(base, overrides)
    if args.fmt:
        settings["format"] = args.fmt
    validate_config(settings)
    return RunConfig(args.command, settings, output=args.output, fmt=settings["format"])


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = make_run(args)
        setup_logger(args.command, f"seed{run.seed}", log_dir=args.log_dir)
        return COMMANDS[args.command](run, args)
    except FLMMError as exc:
        sys.stderr.write(exc.to_json() + "\n")
        return exc.exit_code
    except OSError as exc:
        error = {"code": "io_error", "message": str(exc), "context": {"path": getattr(exc, "filename", None)}}
        sys.stderr.write(json.dumps(error, default=str, sort_keys=True) + "\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
