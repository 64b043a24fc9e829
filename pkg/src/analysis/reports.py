"""Post-processing of pricing run outputs: LVA grids, benchmark ratios, CI scaling."""
import math
from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import pandas as pd

from src.utils.errors import NotSuperlinearError


def load_results(results_dir: str) -> Dict[str, pd.DataFrame]:
    """Load CSV outputs (price, lva, delta, bench) into DataFrames keyed by kind."""
    results_path = Path(results_dir)
    dfs = {}

    for kind in ['price', 'lva', 'delta', 'bench']:
        files = sorted(results_path.glob(f"{kind}_*.csv"))
        frames = [pd.read_csv(f, comment='#').assign(run=f.stem) for f in files]
        dfs[kind] = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()

    return dfs


def lva_pivot(df: pd.DataFrame, value: str = 'excess') -> pd.DataFrame:
    """LVA table laid out with one row per s2 and one column per s1."""
    return df.pivot(index='s2', columns='s1', values=value).sort_index().sort_index(axis=1)


def atm_peaks(df: pd.DataFrame) -> pd.DataFrame:
    """Per s2 row: the s1 with the largest excess and whether it is the ATM cell."""
    idx = df.groupby('s2')['excess'].idxmax()
    peaks = df.loc[idx, ['s2', 's1', 'excess']].rename(columns={'s1': 'argmax_s1', 'excess': 'max_excess'})
    peaks['atm'] = np.isclose(peaks['argmax_s1'], peaks['s2'])
    return peaks.reset_index(drop=True)


def excess_nonnegative(df: pd.DataFrame, n_se: float = 2.0) -> bool:
    return bool((df['excess'] >= -n_se * df['std_error']).all())


def time_ratios(df: pd.DataFrame, size_col: str, time_col: str = 'wall_clock') -> pd.DataFrame:
    """Ratio of run time between consecutive sizes (e.g. M -> 2M)."""
    ordered = df.sort_values(size_col).reset_index(drop=True)
    out = ordered[[size_col, time_col]].copy()
    out['size_ratio'] = out[size_col] / out[size_col].shift(1)
    out['time_ratio'] = out[time_col] / out[time_col].shift(1)
    out['superlinear'] = out['time_ratio'] > out['size_ratio']
    out['near_quadratic'] = np.isclose(out['time_ratio'], out['size_ratio'] ** 2, rtol=0.25)
    return out


def bench_substeps(levy_substeps: int, n_steps: int, min_steps: int) -> int:
    """Levy substeps that keep the area resolution per unit time fixed as M grows."""
    return int(math.ceil(levy_substeps * n_steps / min_steps))


def check_superlinear(ratios: pd.DataFrame, size_col: str = 'n_steps') -> None:
    """Raise NotSuperlinearError unless every size step grew run time faster than size."""
    steps = ratios.dropna(subset=['time_ratio'])
    slow = steps[~steps['superlinear'].astype(bool)]
    if not slow.empty:
        raise NotSuperlinearError(
            "run time did not grow faster than the step count",
            {size_col: slow[size_col].tolist(), 'time_ratio': slow['time_ratio'].round(3).tolist()},
        )


def ci_scaling(df: pd.DataFrame, size_col: str = 'n_paths') -> pd.DataFrame:
    """CI length against sample size, with the 1/sqrt(N) prediction from the smallest run."""
    ordered = df.sort_values(size_col).reset_index(drop=True)
    out = ordered[[size_col]].copy()
    out['ci_length'] = ordered['ci_high'] - ordered['ci_low']
    base_n = out[size_col].iloc[0]
    base_len = out['ci_length'].iloc[0]
    out['predicted'] = base_len * np.sqrt(base_n / out[size_col])
    out['ratio_to_predicted'] = out['ci_length'] / out['predicted']
    return out


def calculate_statistics(df: pd.DataFrame, by: Sequence[str] = ('n_paths',)) -> pd.DataFrame:
    """Mean value, CI length and variance-reduction factor per group."""
    frame = df.assign(ci_length=df['ci_high'] - df['ci_low'])
    stats = frame.groupby(list(by)).agg({
        'value': ['mean', 'std'],
        'ci_length': ['mean'],
        'vr_factor': ['mean'],
        'wall_clock': ['mean'],
    }).round(8)
    stats.columns = ['mean_value', 'std_value', 'mean_ci_length', 'mean_vr_factor', 'mean_wall_clock']
    return stats
