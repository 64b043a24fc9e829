"""
Training data for the surrogate pricer.

Inputs come from two sampling schemes split evenly: method 1 is uniform over
the whole box, method 2 draws co-moving lognormal prices and a correlation
skewed towards positive values. Each input is labelled with a control-variate
Monte Carlo price; labelled rows are stored in binary shards

    <stem>.<shard>.flmmds   magic, u32 version, u32 header length, JSON header,
                            u64 row count, rows of 9 little-endian f64

next to a CSV twin. Shards already on disk with a matching header are skipped,
so an interrupted build resumes where it stopped; shards left over from a
larger build are removed. Labels are clamped to the no-arbitrage band
0 <= V <= s1 and the number of clamped rows is kept in the shard header.
"""
import glob
import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.engine.estimators import price_estimate
from src.engine.sde import GridSpec
from src.models.impact import ImpactParams
from src.models.margrabe import MarketState, ModelParams
from src.utils.errors import DatasetFileError, FLMMError, InvalidParamsError

logger = logging.getLogger(__name__)

FEATURES = ["s1", "s2", "sigma1", "sigma2", "r", "rho", "tau"]
COLUMNS = FEATURES + ["label", "label_se"]

DATASET_MAGIC = b"FLMMDSET"
DATASET_VERSION = 1
SHARD_SUFFIX = ".flmmds"
_PREFIX = struct.Struct("<8sII")
_COUNT = struct.Struct("<Q")

PRICE_HIGH = 100.0
SIGMA_HIGH = 0.5
RATE_HIGH = 0.1
TAU_HIGH = 2.0
TAU_MIN = 1e-3
METHOD2_MEAN = 0.5
METHOD2_VARIANCE = 0.25


@dataclass(frozen=True)
class SampleInput:
    s1: float
    s2: float
    sigma1: float
    sigma2: float
    r: float
    rho: float
    tau: float

    def __post_init__(self):
        problems = {}
        if not (self.s1 > 0.0 and self.s2 > 0.0):
            problems["prices"] = (self.s1, self.s2)
        if not (0.0 < self.sigma1 <= SIGMA_HIGH and 0.0 < self.sigma2 <= SIGMA_HIGH):
            problems["sigma"] = (self.sigma1, self.sigma2)
        if not 0.0 <= self.r <= RATE_HIGH:
            problems["r"] = self.r
        if not -1.0 <= self.rho <= 1.0:
            problems["rho"] = self.rho
        if not 0.0 < self.tau <= TAU_HIGH:
            problems["tau"] = self.tau
        if problems:
            raise InvalidParamsError("sample input outside the surrogate domain", problems)

    def market(self) -> MarketState:
        return MarketState(self.s1, self.s2)

    def model(self) -> ModelParams:
        return ModelParams(sigma1=self.sigma1, sigma2=self.sigma2, rho=self.rho, r=self.r)

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


@dataclass(frozen=True)
class LabeledSample:
    input: SampleInput
    label: float
    label_se: float
    n_paths: int
    n_steps: int
    clamped: bool = False

    def to_row(self) -> np.ndarray:
        return np.append(self.input.to_array(), [self.label, self.label_se])


def inputs_to_array(inputs: Sequence[SampleInput]) -> np.ndarray:
    """(n, 7) feature matrix in FEATURES order."""
    if not inputs:
        return np.empty((0, len(FEATURES)))
    return np.stack([x.to_array() for x in inputs])


def inputs_from_frame(frame: pd.DataFrame) -> List[SampleInput]:
    missing = [name for name in FEATURES if name not in frame.columns]
    if missing:
        raise InvalidParamsError("input table lacks feature columns", {"missing": missing})
    return [SampleInput(**{k: float(v) for k, v in row.items()}) for row in frame[FEATURES].to_dict("records")]


def _open_uniform(rng: np.random.Generator, high: float, size: int, minimum: float = 0.0) -> np.ndarray:
    """Uniform on (0, high) with draws <= minimum redrawn."""
    out = rng.uniform(0.0, high, size)
    bad = out <= minimum
    while np.any(bad):
        out[bad] = rng.uniform(0.0, high, int(bad.sum()))
        bad = out <= minimum
    return out


def sample_inputs(
    method: int,
    count: int,
    rng: np.random.Generator,
    method2_variance: float = METHOD2_VARIANCE,
) -> List[SampleInput]:
    if count < 1:
        raise InvalidParamsError("count must be at least 1", {"count": count})
    if method == 1:
        s1 = _open_uniform(rng, PRICE_HIGH, count)
        s2 = _open_uniform(rng, PRICE_HIGH, count)
        rho = rng.uniform(-1.0, 1.0, count)
    elif method == 2:
        scale = np.sqrt(method2_variance)
        x1 = rng.normal(METHOD2_MEAN, scale, count)
        x2 = rng.normal(METHOD2_MEAN, scale, count)
        s1 = 50.0 * np.exp(x1)
        s2 = 50.0 * np.exp(x1 - x2)
        rho = 2.0 * (rng.beta(5.0, 2.0, count) - 0.5)
    else:
        raise InvalidParamsError("sampling method must be 1 or 2", {"method": method})

    sigma1 = _open_uniform(rng, SIGMA_HIGH, count)
    sigma2 = _open_uniform(rng, SIGMA_HIGH, count)
    r = rng.uniform(0.0, RATE_HIGH, count)
    tau = _open_uniform(rng, TAU_HIGH, count, minimum=TAU_MIN)
    return [
        SampleInput(*map(float, row))
        for row in zip(s1, s2, sigma1, sigma2, r, rho, tau)
    ]


def method_rng(seed: int, method: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0, method))))


def sample_seed(seed: int, index: int) -> int:
    """Engine seed of sample ``index``, independent of shard layout."""
    state = np.random.SeedSequence(seed, spawn_key=(1, index)).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def split_inputs(count: int, seed: int, method2_variance: float = METHOD2_VARIANCE) -> List[SampleInput]:
    """Even split: ceil(count / 2) method-1 inputs followed by the method-2 ones."""
    n1 = (count + 1) // 2
    n2 = count - n1
    inputs = sample_inputs(1, n1, method_rng(seed, 1), method2_variance)
    if n2:
        inputs += sample_inputs(2, n2, method_rng(seed, 2), method2_variance)
    return inputs


def clamp_label(value: float, s1: float) -> Tuple[float, bool]:
    """Project a price onto [0, s1]; the flag says whether it moved."""
    bounded = float(np.clip(value, 0.0, s1))
    return bounded, bounded != value


def label_sample(sample: SampleInput, engine: GridSpec, impact: ImpactParams) -> LabeledSample:
    est = price_estimate(sample.market(), sample.tau, sample.model(), impact, engine)
    label, clamped = clamp_label(est.value, sample.s1)
    if clamped:
        logger.debug("label %.6g clamped to %.6g (s1=%.6g)", est.value, label, sample.s1)
    return LabeledSample(sample, label, est.std_error, engine.n_paths, engine.n_steps, clamped)


def _label_task(args) -> Tuple[int, Optional[np.ndarray], Optional[str], bool]:
    index, sample, engine, impact = args
    try:
        labeled = label_sample(sample, engine, impact)
        return index, labeled.to_row(), None, labeled.clamped
    except FLMMError as exc:
        return index, None, exc.code, False


def shard_path(stem: str, shard: int) -> str:
    return f"{stem}.{shard:05d}{SHARD_SUFFIX}"


def shard_files(stem: str) -> List[str]:
    """Shard files of ``stem`` in index order; sibling stems such as ``<stem>.val`` do not match."""
    pattern = f"{glob.escape(stem)}.{'[0-9]' * 5}{SHARD_SUFFIX}"
    return sorted(glob.glob(pattern))


def write_shard(path: str, header: Dict[str, object], rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f8").reshape(-1, len(COLUMNS))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as handle:
        handle.write(_PREFIX.pack(DATASET_MAGIC, DATASET_VERSION, len(blob)))
        handle.write(blob)
        handle.write(_COUNT.pack(rows.shape[0]))
        handle.write(rows.tobytes())
    os.replace(tmp, path)


def read_shard(path: str) -> Tuple[Dict[str, object], np.ndarray]:
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as exc:
        raise DatasetFileError("cannot read dataset shard", {"path": path, "error": str(exc)}) from exc
    if len(raw) < _PREFIX.size:
        raise DatasetFileError("dataset shard truncated", {"path": path})
    magic, version, blob_len = _PREFIX.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DatasetFileError("not a dataset shard", {"path": path})
    if version != DATASET_VERSION:
        raise DatasetFileError("unsupported dataset version", {"path": path, "version": version})
    offset = _PREFIX.size + blob_len
    if len(raw) < offset + _COUNT.size:
        raise DatasetFileError("dataset shard truncated", {"path": path})
    header = json.loads(raw[_PREFIX.size:offset].decode("utf-8"))
    (n_rows,) = _COUNT.unpack_from(raw, offset)
    body = raw[offset + _COUNT.size:]
    if len(body) != n_rows * len(COLUMNS) * 8:
        raise DatasetFileError("dataset shard truncated", {"path": path, "rows": n_rows})
    return header, np.frombuffer(body, dtype="<f8").reshape(n_rows, len(COLUMNS))


def _shard_header(seed, count, shard, lo, hi, engine, impact, dropped, clamped=0) -> Dict[str, object]:
    return {
        "schema_version": DATASET_VERSION,
        "columns": COLUMNS,
        "seed": seed,
        "count": count,
        "shard": shard,
        "first_index": lo,
        "stop_index": hi,
        "engine": engine.to_dict(),
        "impact": impact.to_dict(),
        "dropped": dropped,
        "clamped": clamped,
    }


def _shard_done(path: str, expected: Dict[str, object]) -> bool:
    if not os.path.exists(path):
        return False
    try:
        header, _ = read_shard(path)
    except DatasetFileError:
        logger.warning("rebuilding unreadable shard %s", path)
        return False
    keys = ("seed", "count", "first_index", "stop_index", "engine", "impact")
    return all(header.get(k) == expected[k] for k in keys)


def build_dataset(
    count: int,
    engine: GridSpec,
    impact: ImpactParams,
    out_stem: str,
    seed: int,
    shard_size: int = 10_000,
    workers: int = 1,
    method2_variance: float = METHOD2_VARIANCE,
) -> List[str]:
    """Sample, label and persist ``count`` inputs; returns the shard paths."""
    if count < 1 or shard_size < 1:
        raise InvalidParamsError("count and shard_size must be positive", {"count": count, "shard_size": shard_size})
    directory = os.path.dirname(out_stem)
    if directory:
        os.makedirs(directory, exist_ok=True)
    inputs = split_inputs(count, seed, method2_variance)
    paths = []
    for shard, lo in enumerate(range(0, count, shard_size)):
        hi = min(lo + shard_size, count)
        path = shard_path(out_stem, shard)
        paths.append(path)
        expected = _shard_header(seed, count, shard, lo, hi, engine, impact, {})
        if _shard_done(path, expected):
            logger.info("shard %d already complete, skipping", shard)
            continue

        tasks = [
            (i, inputs[i], _with_seed(engine, sample_seed(seed, i)), impact)
            for i in range(lo, hi)
        ]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_label_task, tasks, chunksize=64))
        else:
            results = [_label_task(task) for task in tasks]
        results.sort(key=lambda item: item[0])

        rows = [row for _, row, _, _ in results if row is not None]
        dropped: Dict[str, int] = {}
        for _, _, code, _ in results:
            if code is not None:
                dropped[code] = dropped.get(code, 0) + 1
        if dropped:
            logger.warning("shard %d dropped samples: %s", shard, dropped)
        clamped = sum(1 for *_, hit in results if hit)
        if clamped:
            logger.warning("shard %d clamped %d labels to [0, s1]", shard, clamped)

        matrix = np.array(rows).reshape(-1, len(COLUMNS))
        write_shard(path, _shard_header(seed, count, shard, lo, hi, engine, impact, dropped, clamped), matrix)
        pd.DataFrame(matrix, columns=COLUMNS).to_csv(_csv_twin(path), index=False, float_format="%.17g")
        logger.info("shard %d written: %d rows (%s)", shard, matrix.shape[0], path)
    _remove_stale_shards(out_stem, paths)
    return paths


def _csv_twin(path: str) -> str:
    return path[: -len(SHARD_SUFFIX)] + ".csv"


def _remove_stale_shards(stem: str, keep: Sequence[str]) -> None:
    """Delete shards (and CSV twins) of ``stem`` beyond the current layout."""
    keep = {os.path.normpath(p) for p in keep}
    for path in shard_files(stem):
        if os.path.normpath(path) in keep:
            continue
        logger.info("removing stale shard %s", path)
        os.remove(path)
        if os.path.exists(_csv_twin(path)):
            os.remove(_csv_twin(path))


def _with_seed(engine: GridSpec, seed: int) -> GridSpec:
    spec = engine.to_dict()
    spec["seed"] = seed
    return GridSpec(**spec)


def load_dataset(stem_or_path: str) -> pd.DataFrame:
    """All shards of a dataset (or one shard file) as a frame in COLUMNS order."""
    if stem_or_path.endswith(SHARD_SUFFIX):
        return pd.DataFrame(read_shard(stem_or_path)[1], columns=COLUMNS)
    files = shard_files(stem_or_path)
    if not files:
        raise DatasetFileError("no dataset shards found", {"path": stem_or_path})
    shards = [read_shard(f) for f in files]
    _check_shard_set(stem_or_path, [header for header, _ in shards], [rows for _, rows in shards])
    return pd.DataFrame(np.concatenate([rows for _, rows in shards], axis=0), columns=COLUMNS)


def _check_shard_set(stem: str, headers: List[Dict[str, object]], blocks: List[np.ndarray]) -> None:
    """Shards must come from one build and tile [0, count) without gaps."""
    first = headers[0]
    for shard, (header, rows) in enumerate(zip(headers, blocks)):
        for key in ("seed", "count", "engine", "impact"):
            if header.get(key) != first.get(key):
                raise DatasetFileError(
                    "dataset shards come from different builds",
                    {"stem": stem, "shard": shard, "key": key},
                )
        if header.get("shard") != shard:
            raise DatasetFileError("dataset shard missing", {"stem": stem, "expected": shard, "found": header.get("shard")})
        expected_lo = 0 if shard == 0 else headers[shard - 1].get("stop_index")
        if header.get("first_index") != expected_lo:
            raise DatasetFileError("dataset shards do not tile the sample range", {"stem": stem, "shard": shard})
        kept = int(header["stop_index"]) - int(header["first_index"]) - sum(header.get("dropped", {}).values())
        if rows.shape[0] != kept:
            raise DatasetFileError(
                "dataset shard row count disagrees with its header",
                {"stem": stem, "shard": shard, "rows": rows.shape[0], "expected": kept},
            )
    if headers[-1].get("stop_index") != first.get("count"):
        raise DatasetFileError("dataset is incomplete", {"stem": stem, "count": first.get("count")})


def labeled_samples(frame: pd.DataFrame, engine: Optional[GridSpec] = None) -> List[LabeledSample]:
    n_paths = engine.n_paths if engine else 0
    n_steps = engine.n_steps if engine else 0
    return [
        LabeledSample(
            SampleInput(*(float(row[k]) for k in FEATURES)),
            float(row["label"]),
            float(row["label_se"]),
            n_paths,
            n_steps,
        )
        for row in frame.to_dict("records")
    ]


def feature_matrix(frame: pd.DataFrame) -> Tuple[np.ndarray, np.ndarray]:
    """(X, y) arrays for training."""
    return frame[FEATURES].to_numpy(dtype=float), frame["label"].to_numpy(dtype=float)
