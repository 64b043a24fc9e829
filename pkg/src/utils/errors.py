"""Error types shared by the pricing engine, the surrogate and the CLI."""
import json
from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class FLMMError(Exception):
    """Base error. Carries a machine-readable code and context for the CLI."""

    code = "flmm_error"
    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = context or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"code": self.code, "message": self.message, "context": self.context}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=str, sort_keys=True)


class InvalidParamsError(FLMMError, ValueError):
    code = "invalid_params"
    exit_code = EXIT_VALIDATION


class ShapeMismatchError(FLMMError, ValueError):
    code = "shape_mismatch"
    exit_code = EXIT_VALIDATION


class EmptyDatasetError(FLMMError, ValueError):
    code = "empty_dataset"
    exit_code = EXIT_VALIDATION


class DegenerateExpiryError(FLMMError):
    """Greeks requested at tau <= 0 or with zero effective volatility."""

    code = "degenerate_expiry"


class RegularityError(FLMMError):
    """1 - lambda * Gamma11 fell below the regularity margin."""

    code = "regularity_violation"


class NonPositivePriceError(FLMMError):
    code = "nonpositive_price"


class AllPathsDiscardedError(FLMMError):
    code = "all_paths_discarded"


class NotSuperlinearError(FLMMError):
    """A step-count doubling in the benchmark did not more than double run time."""

    code = "not_superlinear"


class TrainingDivergedError(FLMMError):
    """Loss became NaN/Inf. ``checkpoint`` holds the last good model."""

    code = "training_diverged"

    def __init__(self, message: str, checkpoint=None, context: Optional[Dict[str, Any]] = None):
        super().__init__(message, context)
        self.checkpoint = checkpoint


class ModelFileError(FLMMError):
    code = "model_file"
    exit_code = EXIT_IO


class CorruptModelFileError(ModelFileError):
    code = "corrupt_model_file"


class ModelVersionError(ModelFileError):
    code = "model_version"


class DatasetFileError(FLMMError):
    code = "dataset_file"
    exit_code = EXIT_IO
