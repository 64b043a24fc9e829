"""
Feed-forward surrogate pricer written directly in numpy.

Hidden layers use ReLU, the single output uses SoftPlus so every prediction is
a positive price. Inputs are standardised with constants fitted on the
training set and stored inside the model. Training minimises the mean squared
error with ADAM on shuffled mini-batches and stops early once the validation
error stops improving.
"""
import copy
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from src.surrogate.dataset import FEATURES, SampleInput, inputs_to_array
from src.utils.errors import (
    CorruptModelFileError,
    EmptyDatasetError,
    InvalidParamsError,
    ModelFileError,
    ModelVersionError,
    ShapeMismatchError,
    TrainingDivergedError,
)

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"FLMMNET1"
MODEL_VERSION = 1
_PREFIX = struct.Struct("<8sII")


@dataclass
class NetConfig:
    layers: List[int] = field(default_factory=lambda: [7, 300, 300, 300, 300, 1])
    batch_size: int = 1024
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 1000
    patience: int = 20
    rel_tol: float = 1e-4
    early_stopping: bool = True
    validation_ratio: float = 0.01
    lr_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.layers) < 2 or self.layers[0] != len(FEATURES) or self.layers[-1] != 1:
            raise InvalidParamsError(
                f"layers must start at {len(FEATURES)} inputs and end in 1 output",
                {"layers": list(self.layers)},
            )
        if any(int(w) != w or w < 1 for w in self.layers):
            raise InvalidParamsError("layer widths must be positive integers", {"layers": list(self.layers)})
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise InvalidParamsError(
                "batch_size, max_epochs and patience must be positive",
                {"batch_size": self.batch_size, "max_epochs": self.max_epochs, "patience": self.patience},
            )
        if not (self.learning_rate > 0.0 and 0.0 < self.lr_decay <= 1.0):
            raise InvalidParamsError(
                "learning_rate must be positive and lr_decay in (0, 1]",
                {"learning_rate": self.learning_rate, "lr_decay": self.lr_decay},
            )
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.adam_eps > 0.0):
            raise InvalidParamsError("invalid ADAM constants", {"beta1": self.beta1, "beta2": self.beta2})
        if not 0.0 < self.validation_ratio < 1.0:
            raise InvalidParamsError("validation_ratio must lie in (0, 1)", {"validation_ratio": self.validation_ratio})

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass
class TrainedModel:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    history: Dict[str, List[float]] = field(default_factory=dict)
    provenance: Dict[str, object] = field(default_factory=dict)

    @property
    def layers(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "TrainedModel":
        return copy.deepcopy(self)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def init_model(config: NetConfig, rng: np.random.Generator) -> TrainedModel:
    """Uniform(-sqrt(6 / fan_in), sqrt(6 / fan_in)) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(config.layers[:-1], config.layers[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    n_in = config.layers[0]
    return TrainedModel(weights, biases, np.zeros(n_in), np.ones(n_in))


def _as_batch(x: Union[SampleInput, Sequence[SampleInput], np.ndarray]) -> Tuple[np.ndarray, bool]:
    if isinstance(x, SampleInput):
        return x.to_array()[None, :], True
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], SampleInput):
        return inputs_to_array(x), False
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def _check_shapes(model: TrainedModel, batch: np.ndarray):
    expected = model.weights[0].shape[1]
    if batch.ndim != 2 or batch.shape[1] != expected:
        raise ShapeMismatchError("input width does not match the network", {"expected": expected, "got": list(batch.shape)})
    if model.feature_mean.shape != (expected,) or model.feature_scale.shape != (expected,):
        raise ShapeMismatchError("normalisation constants do not match the network", {"expected": expected})
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        prev = expected if i == 0 else model.weights[i - 1].shape[0]
        if w.shape[1] != prev or b.shape != (w.shape[0],):
            raise ShapeMismatchError("inconsistent layer shapes", {"layer": i, "weight": list(w.shape), "bias": list(b.shape)})


def _forward_normalised(model: TrainedModel, h: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
    """Output pre-activation plus every layer's input and pre-activation."""
    inputs, pre = [], []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
    return pre[-1], inputs, pre


def forward(model: TrainedModel, x) -> Union[float, np.ndarray]:
    """Predicted price(s); a float for one input, an (n,) array for a batch."""
    batch, single = _as_batch(x)
    _check_shapes(model, batch)
    z, _, _ = _forward_normalised(model, (batch - model.feature_mean) / model.feature_scale)
    out = softplus(z[:, 0])
    return float(out[0]) if single else out


def loss_and_gradients(
    model: TrainedModel, x_norm: np.ndarray, y: np.ndarray
) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """Mean squared error on a normalised batch and its gradients by back-propagation."""
    z, inputs, pre = _forward_normalised(model, x_norm)
    pred = softplus(z[:, 0])
    resid = pred - y
    loss = float(np.mean(resid ** 2))

    # d loss / d z_out through the SoftPlus
    dz = (2.0 / y.shape[0] * resid * expit(z[:, 0]))[:, None]
    grad_w: List[np.ndarray] = [None] * len(model.weights)
    grad_b: List[np.ndarray] = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grad_w[i] = dz.T @ inputs[i]
        grad_b[i] = dz.sum(axis=0)
        if i:
            dz = (dz @ model.weights[i]) * (pre[i - 1] > 0.0)
    return loss, grad_w, grad_b


class _Adam:
    def __init__(self, model: TrainedModel, config: NetConfig):
        self.config = config
        self.lr = config.learning_rate
        self.step = 0
        params = model.weights + model.biases
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def update(self, model: TrainedModel, grad_w, grad_b):
        cfg = self.config
        self.step += 1
        c1 = 1.0 - cfg.beta1 ** self.step
        c2 = 1.0 - cfg.beta2 ** self.step
        params = model.weights + model.biases
        grads = list(grad_w) + list(grad_b)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def metrics_from_predictions(pred: np.ndarray, labels: np.ndarray) -> Dict[str, object]:
    pred = np.asarray(pred, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if labels.size == 0:
        raise EmptyDatasetError("cannot evaluate on an empty set")
    if pred.shape != labels.shape:
        raise ShapeMismatchError("predictions and labels differ in length", {"pred": pred.size, "labels": labels.size})
    resid = pred - labels
    spread = float(np.std(resid))
    centre = float(np.mean(resid))
    outliers = int(np.count_nonzero(np.abs(resid - centre) > 3.0 * spread)) if spread > 0.0 else 0
    return {
        "n": int(labels.size),
        "mse": float(np.mean(resid ** 2)),
        "mae": float(np.mean(np.abs(resid))),
        "residual_mean": centre,
        "residual_std": spread,
        "residual_se": spread / np.sqrt(labels.size),
        "beyond_3sigma": outliers,
        "mean_label": float(np.mean(labels)),
        "residuals": resid,
    }


def evaluate(model: TrainedModel, features: np.ndarray, labels: np.ndarray) -> Dict[str, object]:
    features = np.asarray(features, dtype=float)
    if features.size == 0:
        raise EmptyDatasetError("cannot evaluate on an empty set")
    return metrics_from_predictions(forward(model, features.reshape(-1, features.shape[-1])), labels)


def dataset_hash(features: np.ndarray, labels: np.ndarray) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(features, dtype="<f8").tobytes())
    digest.update(np.ascontiguousarray(labels, dtype="<f8").tobytes())
    return digest.hexdigest()


def holdout_split(x: np.ndarray, y: np.ndarray, config: NetConfig):
    """Set aside ``validation_ratio`` of the rows (at least one) for validation."""
    n_val = max(1, int(round(config.validation_ratio * y.size)))
    if n_val >= y.size:
        raise EmptyDatasetError(
            "too few rows to hold out a validation set", {"rows": int(y.size), "validation_ratio": config.validation_ratio}
        )
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(1,))))
    order = rng.permutation(y.size)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    logger.warning("no validation set given; holding out %d of %d training rows", n_val, y.size)
    return x[train_idx], y[train_idx], x[val_idx], y[val_idx]


def train(
    features: np.ndarray,
    labels: np.ndarray,
    config: NetConfig,
    val_features: Optional[np.ndarray] = None,
    val_labels: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> TrainedModel:
    """Fit a network; returns the parameters with the best validation MSE."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float).ravel()
    if x.shape[0] == 0:
        raise EmptyDatasetError("training set is empty")
    if x.ndim != 2 or x.shape[1] != config.layers[0] or x.shape[0] != y.shape[0]:
        raise ShapeMismatchError("training features/labels have the wrong shape", {"features": list(x.shape), "labels": list(y.shape)})
    if val_features is None:
        x, y, val_x, val_y = holdout_split(x, y, config)
    else:
        val_x = np.asarray(val_features, dtype=float)
        val_y = np.asarray(val_labels, dtype=float).ravel()
        if val_x.shape[0] == 0:
            raise EmptyDatasetError("validation set is empty")

    if rng is None:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
    model = init_model(config, rng)
    model.feature_mean = x.mean(axis=0)
    scale = x.std(axis=0)
    model.feature_scale = np.where(scale > 0.0, scale, 1.0)
    model.provenance = {"dataset_hash": dataset_hash(x, y), "config": config.to_dict(), "n_train": int(y.size)}
    x_norm = (x - model.feature_mean) / model.feature_scale

    history = {"epoch": [], "train_mse": [], "train_mae": [], "val_mse": [], "val_mae": [], "lr": []}
    model.history = history
    optimiser = _Adam(model, config)
    best = model.copy()
    best_val = np.inf
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(y.size)
        for lo in range(0, y.size, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grad_w, grad_b = loss_and_gradients(model, x_norm[idx], y[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grad_w):
                logger.error("training diverged at epoch %d (loss=%r)", epoch, loss)
                raise TrainingDivergedError(
                    "training loss became non-finite", checkpoint=best, context={"epoch": epoch}
                )
            optimiser.update(model, grad_w, grad_b)

        train_metrics = metrics_from_predictions(forward(model, x), y)
        val_metrics = metrics_from_predictions(forward(model, val_x), val_y)
        history["epoch"].append(epoch)
        history["train_mse"].append(train_metrics["mse"])
        history["train_mae"].append(train_metrics["mae"])
        history["val_mse"].append(val_metrics["mse"])
        history["val_mae"].append(val_metrics["mae"])
        history["lr"].append(optimiser.lr)
        logger.info(
            "epoch %d train_mse=%.6g val_mse=%.6g val_mae=%.6g",
            epoch, train_metrics["mse"], val_metrics["mse"], val_metrics["mae"],
        )
        if not np.isfinite(val_metrics["mse"]):
            raise TrainingDivergedError("validation error became non-finite", checkpoint=best, context={"epoch": epoch})

        if val_metrics["mse"] < best_val * (1.0 - config.rel_tol):
            best_val = val_metrics["mse"]
            best = model.copy()
            stale = 0
        else:
            stale += 1
            if config.early_stopping and stale >= config.patience:
                logger.info("early stop at epoch %d, best val_mse=%.6g", epoch, best_val)
                break
        optimiser.lr *= config.lr_decay

    best.history = history
    best.provenance = dict(model.provenance, epochs_run=history["epoch"][-1], best_val_mse=best_val)
    return best


def save_model(model: TrainedModel, path: str) -> None:
    header = {
        "layers": model.layers,
        "history": model.history,
        "provenance": model.provenance,
    }
    blob = json.dumps(header, sort_keys=True, default=float).encode("utf-8")
    arrays = [model.feature_mean, model.feature_scale]
    for w, b in zip(model.weights, model.biases):
        arrays.extend([w, b])
    with open(path, "wb") as handle:
        handle.write(_PREFIX.pack(MODEL_MAGIC, MODEL_VERSION, len(blob)))
        handle.write(blob)
        for arr in arrays:
            handle.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str) -> TrainedModel:
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as exc:
        raise ModelFileError("cannot read model file", {"path": path, "error": str(exc)}) from exc
    if len(raw) < _PREFIX.size:
        raise CorruptModelFileError("model file truncated", {"path": path})
    magic, version, blob_len = _PREFIX.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise CorruptModelFileError("not a surrogate model file", {"path": path})
    if version != MODEL_VERSION:
        raise ModelVersionError(
            "unsupported model file version", {"path": path, "version": version, "supported": MODEL_VERSION}
        )
    offset = _PREFIX.size + blob_len
    try:
        header = json.loads(raw[_PREFIX.size:offset].decode("utf-8"))
        layers = [int(n) for n in header["layers"]]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptModelFileError("model header unreadable", {"path": path}) from exc

    shapes = [(layers[0],), (layers[0],)]
    for fan_in, fan_out in zip(layers[:-1], layers[1:]):
        shapes.extend([(fan_out, fan_in), (fan_out,)])
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    body = raw[offset:]
    if len(body) != expected:
        raise CorruptModelFileError("model weights truncated", {"path": path, "expected": expected, "got": len(body)})

    flat = np.frombuffer(body, dtype="<f8")
    arrays, pos = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(flat[pos:pos + size].reshape(shape).astype(float))
        pos += size
    return TrainedModel(
        weights=arrays[2::2],
        biases=arrays[3::2],
        feature_mean=arrays[0],
        feature_scale=arrays[1],
        history=header.get("history", {}),
        provenance=header.get("provenance", {}),
    )
