"""Multilingual text/audio fusion models for cognitive screening.

Feature records carry a token-embedding sequence per picture description,
a sentence-embedding reference bank, and an acoustic feature vector.  Six
model variants map them to an MCI screening label or an MMSE estimate;
training, subject-grouped cross-validation, and reporting live behind both
a scikit-learn estimator API and the ``cogfuse`` command line tool.
"""

from .data import (
    AudioNormalizer,
    Corpus,
    FeatureRecord,
    FoldPlan,
    SyntheticSpec,
    assign_folds,
    fold_split,
    generate_synthetic,
    load_corpus,
    save_corpus,
)
from .estimators import MciClassifier, MmseRegressor, make_estimator
from .metrics import (
    classification_report,
    confusion_counts,
    regression_report,
    aggregate_per_subject,
    summarize_folds,
)
from .models import ModelConfig, build_model, build_multimodal, cosine_similarity_matrix
from .train import TrainConfig, crossval, fit, refit_full

__version__ = "0.1.0"

__all__ = [
    "AudioNormalizer",
    "Corpus",
    "FeatureRecord",
    "FoldPlan",
    "MciClassifier",
    "MmseRegressor",
    "ModelConfig",
    "SyntheticSpec",
    "TrainConfig",
    "aggregate_per_subject",
    "assign_folds",
    "build_model",
    "build_multimodal",
    "classification_report",
    "confusion_counts",
    "cosine_similarity_matrix",
    "crossval",
    "fit",
    "fold_split",
    "generate_synthetic",
    "load_corpus",
    "make_estimator",
    "refit_full",
    "regression_report",
    "save_corpus",
    "summarize_folds",
    "__version__",
]
