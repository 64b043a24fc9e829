"""Space/path dimension sweeps and the liquidity premium grid."""
import argparse
import json
from datetime import datetime
from pathlib import Path
from typing import Dict, List

from src.analysis.reports import atm_peaks, bench_substeps, ci_scaling, excess_nonnegative, time_ratios
from src.engine.estimators import estimates_frame, lva_table, price_estimate, square_grid
from src.utils.config import RunConfig, load_config, merge_overrides, validate_config
from src.utils.logging import setup_logger


def run_space_sweep(run: RunConfig, n_values: List[int]) -> List[Dict]:
    """Fixed M, growing N: CI length against path count."""
    logger = setup_logger("space", f"seed{run.seed}")
    estimates = []
    for n_paths in n_values:
        sweep = RunConfig(run.command, dict(run.settings, n_paths=n_paths))
        est = price_estimate(sweep.market(), float(sweep.settings["tau"]), sweep.model(),
                             sweep.impact(), sweep.grid(), workers=int(sweep.settings["workers"]))
        logger.info(f"N={n_paths}: value={est.value:.6f} CI=[{est.ci_low:.6f}, {est.ci_high:.6f}] "
                    f"time={est.wall_clock:.2f}s")
        estimates.append(est)
    frame = estimates_frame(estimates).assign(n_paths=n_values)
    scaling = ci_scaling(frame)
    logger.info(f"CI length vs 1/sqrt(N):\n{scaling.to_string(index=False)}")
    return frame.to_dict("records")


def run_path_sweep(run: RunConfig, m_values: List[int]) -> List[Dict]:
    """Fixed N, growing M: run time against step count."""
    logger = setup_logger("path", f"seed{run.seed}")
    estimates = []
    substeps = int(run.settings["levy_substeps"])
    for n_steps in m_values:
        if run.settings.get("scale_levy_substeps"):
            substeps = bench_substeps(int(run.settings["levy_substeps"]), n_steps, min(m_values))
        sweep = RunConfig(run.command, dict(run.settings, n_steps=n_steps, levy_substeps=substeps))
        estimates.append(price_estimate(sweep.market(), float(sweep.settings["tau"]), sweep.model(),
                                        sweep.impact(), sweep.grid(), workers=int(sweep.settings["workers"])))
    frame = estimates_frame(estimates).assign(n_steps=m_values)
    logger.info(f"time ratios:\n{time_ratios(frame, 'n_steps').to_string(index=False)}")
    return frame.to_dict("records")


def run_lva_grid(run: RunConfig, values: List[float]) -> List[Dict]:
    """Liquidity premium over a square (s1, s2) grid."""
    logger = setup_logger("lva", f"seed{run.seed}")
    frame = lva_table(square_grid(values), float(run.settings["tau"]), run.model(), run.impact(),
                      run.grid(), workers=int(run.settings["workers"]))
    logger.info(f"excess >= -2 se everywhere: {excess_nonnegative(frame)}")
    logger.info(f"row maxima:\n{atm_peaks(frame).to_string(index=False)}")
    return frame.to_dict("records")


def save_results(results: List[Dict], name: str, output_dir: str = "results"):
    """Save experiment results to JSON file."""
    output_path = Path(output_dir)
    output_path.mkdir(exist_ok=True)

    timestamp = datetime.now().strftime("%Y-%m-%d-%H-%M-%S")
    filename = output_path / f"{name}_{timestamp}.json"

    with open(filename, 'w') as f:
        json.dump(results, f, indent=2, default=float)


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--table", choices=["space", "path", "lva"], required=True)
    parser.add_argument("--config", default=None, help="defaults to pricing (space/path) or lva")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    args = parser.parse_args()

    name = args.config or ("lva" if args.table == "lva" else "pricing")
    settings = merge_overrides(load_config(name), {"seed": args.seed, "workers": args.workers})
    validate_config(settings)
    run = RunConfig(args.table, settings)

    if args.table == "space":
        results = run_space_sweep(run, settings["n_values"])
    elif args.table == "path":
        results = run_path_sweep(run, settings["m_values"])
    else:
        results = run_lva_grid(run, settings["grid"])
    save_results(results, args.table)
