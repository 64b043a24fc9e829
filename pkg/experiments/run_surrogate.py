"""Surrogate pipeline: generate data, train, test, and price the prediction grid."""
import argparse
import json
from datetime import datetime
from pathlib import Path
from typing import Dict

import numpy as np

from src.cli import prediction_grid
from src.engine.estimators import price_estimate
from src.engine.sde import GridSpec
from src.surrogate.dataset import build_dataset, feature_matrix, inputs_to_array, load_dataset
from src.surrogate.network import evaluate, forward, save_model, train
from src.utils.config import RunConfig, load_config, merge_overrides, validate_config
from src.utils.logging import setup_logger


def run_experiment(run: RunConfig, data_dir: str, test_paths: int) -> Dict:
    """Desk-scale rerun of the training protocol."""
    logger = setup_logger("surrogate", f"seed{run.seed}")
    settings = run.settings
    count = int(settings["count"])
    workers = int(settings["workers"])
    net = run.net()
    fast = run.grid()
    accurate = GridSpec(n_paths=test_paths, n_steps=fast.n_steps, levy_substeps=fast.levy_substeps,
                        seed=run.seed + 1, T=fast.T, block_size=fast.block_size)
    n_val = max(1, int(round(count * net.validation_ratio)))

    data = Path(data_dir)
    build_dataset(count, fast, run.impact(), str(data / "train"), run.seed, workers=workers)
    build_dataset(n_val, accurate, run.impact(), str(data / "val"), run.seed + 1, workers=workers)
    build_dataset(1000, accurate, run.impact(), str(data / "test"), run.seed + 2, workers=workers)

    x, y = feature_matrix(load_dataset(str(data / "train")))
    vx, vy = feature_matrix(load_dataset(str(data / "val")))
    model = train(x, y, net, vx, vy)
    save_model(model, str(data / "surrogate.flmmnet"))

    tx, ty = feature_matrix(load_dataset(str(data / "test")))
    metrics = evaluate(model, tx, ty)
    logger.info(f"test MAE={metrics['mae']:.5f} MSE={metrics['mse']:.6g} "
                f"beyond 3 sigma={metrics['beyond_3sigma']}/{metrics['n']}")

    grid = prediction_grid()
    predictions = forward(model, inputs_to_array(grid))
    table = []
    for sample, pred in zip(grid, predictions):
        est = price_estimate(sample.market(), sample.tau, sample.model(), run.impact(),
                             accurate, workers=workers)
        table.append({"rho": sample.rho, "tau": sample.tau, "mc": est.value, "net": float(pred),
                      "rel_error": float(abs(pred - est.value) / est.value)})
        logger.info(f"rho={sample.rho} tau={sample.tau}: mc={est.value:.6f} net={pred:.6f}")

    return {
        "test": {k: v for k, v in metrics.items() if k != "residuals"},
        "prediction_grid": table,
        "epochs": model.provenance.get("epochs_run"),
        "max_rel_error": float(np.max([row["rel_error"] for row in table])),
    }


def save_results(results: Dict, output_dir: str = "results"):
    """Save experiment results to JSON file."""
    output_path = Path(output_dir)
    output_path.mkdir(exist_ok=True)

    timestamp = datetime.now().strftime("%Y-%m-%d-%H-%M-%S")
    filename = output_path / f"surrogate_{timestamp}.json"

    with open(filename, 'w') as f:
        json.dump(results, f, indent=2, default=float)


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default="surrogate")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--data-dir", default="data")
    parser.add_argument("--test-paths", type=int, default=100000)
    args = parser.parse_args()

    settings = merge_overrides(load_config(args.config), {"seed": args.seed})
    validate_config(settings)
    results = run_experiment(RunConfig("surrogate", settings), args.data_dir, args.test_paths)
    save_results(results)
