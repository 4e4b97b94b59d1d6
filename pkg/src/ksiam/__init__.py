"""k-Siamese networks for whole-slide image classification, with baselines and a synthetic cohort."""

__version__ = "0.1.0"

from .data import DatasetManifest, Patient, Role, Slide, load_manifest  # noqa: E402
from .errors import CapacityError, ConfigError, DataError, DimensionError, FoldError, KSiamError  # noqa: E402
from .evaluation import cross_validate, make_folds, predict_patient, predict_slide  # noqa: E402
from .metrics import average_precision, roc_auc  # noqa: E402
from .model import KSiameseModel, ToyEncoder, aggregate, build_model, decode  # noqa: E402
from .synthetic import SyntheticSpec, generate_synthetic_dataset  # noqa: E402
from .tiling import TileSampler, TilingConfig, sample_bag  # noqa: E402
from .training import TrainConfig, lr_at, train  # noqa: E402

__all__ = [
    "CapacityError", "ConfigError", "DataError", "DatasetManifest", "DimensionError", "FoldError",
    "KSiamError", "KSiameseModel", "Patient", "Role", "Slide", "SyntheticSpec", "TileSampler",
    "TilingConfig", "ToyEncoder", "TrainConfig", "aggregate", "average_precision", "build_model",
    "cross_validate", "decode", "generate_synthetic_dataset", "load_manifest", "lr_at", "make_folds",
    "predict_patient", "predict_slide", "roc_auc", "sample_bag", "train",
]
