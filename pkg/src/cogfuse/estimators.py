"""Scikit-learn style estimators wrapping the model variants.

:class:`MciClassifier` and :class:`MmseRegressor` follow the sklearn
contract: constructor arguments are stored verbatim, ``fit`` returns
``self``, fitted state lives in trailing-underscore attributes, and
``get_params``/``set_params``/``clone`` work out of the box.  Both accept
lists of :class:`~cogfuse.data.FeatureRecord`; labels and scores travel
inside the records, so ``y`` is accepted for API compatibility but never
required.

``fit`` handles the full preprocessing pipeline: the audio normalizer is
fitted on the training split only, regression targets are standardized
with training statistics (predictions are mapped back to the raw scale),
and for the multimodal variant the two branch models are trained first
and then frozen under the fusion head.
"""

from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import models as M
from . import train as T
from .data import AudioNormalizer, assign_folds
from .exceptions import ConfigurationError
from .validation import check_records


class _FusionBase(BaseEstimator):
    _task = "cls"

    def __init__(
        self,
        variant: str = "text",
        seq_len: int = 16,
        embed_dim: int = 32,
        n_heads: int = 4,
        audio_dim: int = 24,
        hidden: tuple[int, ...] = (64, 16),
        encoder_layers: int = 2,
        ffn_mult: int = 4,
        text_branch: str = "combined_similarity",
        learning_rate: float | None = None,
        text_learning_rate: float | None = None,
        audio_learning_rate: float | None = None,
        weight_decay: float = 0.01,
        batch_size: int = 16,
        max_epochs: int = 100,
        patience: int = 10,
        seed: int = 42,
        finetune_branches: bool = False,
    ):
        self.variant = variant
        self.seq_len = seq_len
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.audio_dim = audio_dim
        self.hidden = hidden
        self.encoder_layers = encoder_layers
        self.ffn_mult = ffn_mult
        self.text_branch = text_branch
        self.learning_rate = learning_rate
        self.text_learning_rate = text_learning_rate
        self.audio_learning_rate = audio_learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.finetune_branches = finetune_branches

    # -- config assembly ----------------------------------------------------

    @property
    def task(self) -> str:
        return self._task

    def _model_config(self, variant: str | None = None) -> M.ModelConfig:
        return M.ModelConfig(
            variant=self.variant if variant is None else variant,
            task=self._task,
            seq_len=self.seq_len,
            embed_dim=self.embed_dim,
            n_heads=self.n_heads,
            audio_dim=self.audio_dim,
            hidden=tuple(self.hidden),
            encoder_layers=self.encoder_layers,
            ffn_mult=self.ffn_mult,
            text_branch=self.text_branch,
        )

    def _train_config(self, learning_rate: float | None, seed: int) -> T.TrainConfig:
        return T.TrainConfig(
            learning_rate=learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=seed,
        )

    # -- fitting -------------------------------------------------------------

    def _internal_holdout(self, records):
        """Subject-grouped stratified 1/5 split when no validation set is given."""
        assignment = assign_folds(records, 5, self.seed)
        train = [r for r in records if assignment[r.subject_id] != 0]
        val = [r for r in records if assignment[r.subject_id] == 0]
        return train, val

    def fit(self, records, y=None, validation=None):
        records = check_records(records, self.seq_len, self.embed_dim, self.audio_dim)
        if validation is None:
            train_records, val_records = self._internal_holdout(records)
        else:
            train_records = records
            val_records = check_records(validation, self.seq_len, self.embed_dim, self.audio_dim)

        self.normalizer_ = AudioNormalizer().fit(train_records)
        train_n = self.normalizer_.transform(train_records)
        val_n = self.normalizer_.transform(val_records)

        self.target_stats_ = None
        if self._task == "reg":
            scores = np.asarray([r.mmse for r in train_records], dtype=np.float64)
            sd = float(scores.std())
            self.target_stats_ = (float(scores.mean()), sd if sd > 0 else 1.0)

        cfg = self._model_config()
        self.branch_histories_ = {}
        if self.variant == "multimodal":
            text_model = M.build_model(self._model_config(self.text_branch), self.seed)
            text_cfg = self._train_config(
                self.text_learning_rate
                if self.text_learning_rate is not None
                else T.default_learning_rate(self.text_branch, self._task),
                self.seed,
            )
            self.branch_histories_["text"] = T.fit(
                text_model, train_n, val_n, text_cfg, self.target_stats_
            )
            audio_model = M.build_model(self._model_config("audio"), self.seed + 1)
            audio_cfg = self._train_config(
                self.audio_learning_rate
                if self.audio_learning_rate is not None
                else T.default_learning_rate("audio", self._task),
                self.seed + 1,
            )
            self.branch_histories_["audio"] = T.fit(
                audio_model, train_n, val_n, audio_cfg, self.target_stats_
            )
            self.model_ = M.build_multimodal(
                cfg, text_model, audio_model, self.seed + 2, self.finetune_branches
            )
            fit_cfg = self._train_config(self.learning_rate, self.seed + 2)
        else:
            self.model_ = M.build_model(cfg, self.seed)
            fit_cfg = self._train_config(self.learning_rate, self.seed)

        result = T.fit(self.model_, train_n, val_n, fit_cfg, self.target_stats_)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.stopped_epoch_ = result.stopped_epoch
        self.best_val_loss_ = result.best_val_loss
        if self._task == "cls":
            self.classes_ = np.array([0, 1])
        return self

    def fine_tune(self, records, y=None, validation=None) -> T.FitResult:
        """Continue training the fitted model on new records.

        The audio normalizer and target statistics stay frozen so the model
        keeps seeing features on the scale it was trained on.
        """
        check_is_fitted(self, "model_")
        records = check_records(records, self.seq_len, self.embed_dim, self.audio_dim)
        if validation is None:
            raise ConfigurationError("fine_tune requires an explicit validation split")
        val_records = check_records(validation, self.seq_len, self.embed_dim, self.audio_dim)
        cfg = self._train_config(self.learning_rate, self.seed)
        result = T.fit(
            self.model_,
            self.normalizer_.transform(records),
            self.normalizer_.transform(val_records),
            cfg,
            self.target_stats_,
        )
        self.history_ = self.history_ + result.history
        self.best_epoch_ = result.best_epoch
        self.stopped_epoch_ = result.stopped_epoch
        self.best_val_loss_ = result.best_val_loss
        return result

    # -- inference -----------------------------------------------------------

    def _outputs(self, records) -> np.ndarray:
        check_is_fitted(self, "model_")
        records = check_records(records, self.seq_len, self.embed_dim, self.audio_dim)
        return M.predict_outputs(self.model_, self.normalizer_.transform(records))

    def save(self, path) -> None:
        """Write a self-contained JSON checkpoint (bitwise-exact float64)."""
        check_is_fitted(self, "model_")
        doc = {
            "estimator": {
                "class": type(self).__name__,
                "params": {
                    k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in self.get_params().items()
                },
            },
            "checkpoint": M.checkpoint_payload(self.model_),
            "normalizer": self.normalizer_.to_payload(),
            "target_stats": list(self.target_stats_) if self.target_stats_ else None,
            "fit": {
                "best_epoch": self.best_epoch_,
                "stopped_epoch": self.stopped_epoch_,
                "best_val_loss": self.best_val_loss_,
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path):
        est = load_estimator(path)
        if not isinstance(est, cls):
            raise ConfigurationError(
                f"{path} holds a {type(est).__name__}, not a {cls.__name__}"
            )
        return est


class MciClassifier(ClassifierMixin, _FusionBase):
    """Binary screening classifier; the positive class (1) is MCI."""

    _task = "cls"

    def predict_proba(self, records) -> np.ndarray:
        logits = self._outputs(records)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, records) -> np.ndarray:
        # argmax takes the first maximum, so an exact logit tie yields class 0
        return np.argmax(self._outputs(records), axis=1)

    def score(self, records, y=None) -> float:
        """Unweighted average recall on the given records."""
        from .metrics import classification_report, confusion_counts

        labels = np.asarray([r.label for r in records]) if y is None else np.asarray(y)
        return classification_report(confusion_counts(self.predict(records), labels)).uar


class MmseRegressor(RegressorMixin, _FusionBase):
    """Cognitive-score regressor on the raw 0-30 scale."""

    _task = "reg"

    def predict(self, records) -> np.ndarray:
        out = self._outputs(records)[:, 0]
        if self.target_stats_ is not None:
            mean, sd = self.target_stats_
            out = out * sd + mean
        return out

    def score(self, records, y=None) -> float:
        """Standard coefficient of determination on the given records."""
        from .metrics import r_squared

        targets = np.asarray([r.mmse for r in records]) if y is None else np.asarray(y)
        return r_squared(self.predict(records), targets)


def load_estimator(path):
    """Rebuild whichever estimator class a checkpoint file holds."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    klass = {"MciClassifier": MciClassifier, "MmseRegressor": MmseRegressor}[
        doc["estimator"]["class"]
    ]
    params = dict(doc["estimator"]["params"])
    params["hidden"] = tuple(params["hidden"])
    est = klass(**params)
    est.model_ = M.model_from_payload(doc["checkpoint"])
    est.normalizer_ = AudioNormalizer.from_payload(doc["normalizer"])
    est.target_stats_ = tuple(doc["target_stats"]) if doc["target_stats"] else None
    est.history_ = []
    est.branch_histories_ = {}
    est.best_epoch_ = doc["fit"]["best_epoch"]
    est.stopped_epoch_ = doc["fit"]["stopped_epoch"]
    est.best_val_loss_ = doc["fit"]["best_val_loss"]
    if est._task == "cls":
        est.classes_ = np.array([0, 1])
    return est


def make_estimator(
    variant: str,
    task: str,
    model_overrides: dict | None = None,
    train_cfg: T.TrainConfig | None = None,
):
    """Assemble an estimator from a variant name, task, and config objects."""
    if task not in ("cls", "reg"):
        raise ConfigurationError(f"unknown task {task!r}, expected 'cls' or 'reg'")
    cfg = train_cfg if train_cfg is not None else T.TrainConfig()
    kwargs = dict(
        variant=variant,
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        patience=cfg.patience,
        seed=cfg.seed,
    )
    if model_overrides:
        kwargs.update(model_overrides)
    cls = MciClassifier if task == "cls" else MmseRegressor
    return cls(**kwargs)
