"""Training protocol: losses, decoupled-decay Adam, early stopping, CV.

The reference protocol trains with AdamW (decoupled weight decay 0.01,
betas 0.9/0.999, eps 1e-8), batch size 16, at most 100 epochs, and stops
once the validation loss has not improved for 10 consecutive epochs,
restoring the best-epoch parameter snapshot.  Default learning rates are
1e-5 for text-family and multimodal variants and 1e-2 for audio;
regression uses 10x the classification rate.  Language-routed variants
see single-language batches whose order is interleaved by the seeded
shuffle.  No gradient clipping anywhere.

Cross-validation is 5-fold with subject-grouped, (language, label)-
stratified folds; each fold's model validates and evaluates on the
held-out fold.  ``refit_full`` continues the best fold's model on the
worst fold's training split (which contains the best fold's records, so
the two phases together touch every record) while early-stopping on the
best fold's held-out split.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Corpus, FoldPlan, fold_split, split_folds
from .exceptions import ConfigurationError, ContractError
from .metrics import (
    aggregate_per_subject,
    classification_report,
    confusion_counts,
    regression_report,
    summarize_folds,
)
from .models import ModelConfig


@dataclass
class TrainConfig:
    """Optimizer and schedule settings; ``learning_rate=None`` picks the variant default."""

    learning_rate: float | None = None
    weight_decay: float = 0.01
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("batch_size, max_epochs and patience must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be non-negative, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return asdict(self)


def default_learning_rate(variant: str, task: str) -> float:
    base = 1e-2 if variant == "audio" else 1e-5
    return base * (10.0 if task == "reg" else 1.0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ContractError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ContractError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c - 1}]")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = ad.mul(ad.log_softmax(logits), Tensor(onehot))
    return ad.scale(ad.tensor_sum(picked), -1.0 / b)


def mse(preds: Tensor, targets) -> Tensor:
    """Mean squared difference."""
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ContractError(f"mse shapes differ: {preds.shape} vs {targets.shape}")
    diff = ad.sub(preds, Tensor(targets))
    return ad.mean(ad.mul(diff, diff))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay.

    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * lambda * theta

    Moments and the step counter are tracked per parameter, so a parameter
    that sits out some steps (the idle language of a routed model) keeps a
    consistent bias correction.
    """

    def __init__(
        self,
        learning_rate: float,
        weight_decay: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {learning_rate}")
        self.lr = float(learning_rate)
        self.wd = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._state: dict[int, list] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise ContractError(f"missing gradient for trainable parameter {name!r}")
            state = self._state.get(id(p))
            if state is None:
                state = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
                self._state[id(p)] = state
            m, v, t = state
            t += 1
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            state[2] = t
            mhat = m / (1.0 - self.beta1**t)
            vhat = v / (1.0 - self.beta2**t)
            p.data = p.data - self.lr * (mhat / (np.sqrt(vhat) + self.eps)) - self.lr * self.wd * p.data


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


class EarlyStopping:
    """Halt after ``patience`` consecutive epochs without a strictly lower val loss."""

    def __init__(self, patience: int):
        self.patience = int(patience)
        self.best_loss = np.inf
        self.best_epoch = 0
        self.stalled = 0
        self._snapshot: dict[str, np.ndarray] | None = None

    def update(self, epoch: int, val_loss: float, params: dict[str, Tensor]) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = float(val_loss)
            self.best_epoch = int(epoch)
            self.stalled = 0
            self._snapshot = {name: t.data.copy() for name, t in params.items()}
        else:
            self.stalled += 1
        return self.stalled >= self.patience

    def restore(self, params: dict[str, Tensor]) -> None:
        if self._snapshot is None:
            return
        for name, t in params.items():
            t.data = self._snapshot[name].copy()


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    history: list[dict]  # one row per epoch: epoch, train_loss, val_loss
    best_epoch: int
    stopped_epoch: int
    best_val_loss: float


def _batch_targets(records, task: str, target_stats):
    if task == "cls":
        return np.asarray([r.label for r in records], dtype=np.int64)
    y = np.asarray([r.mmse for r in records], dtype=np.float64)
    if target_stats is not None:
        mean, sd = target_stats
        y = (y - mean) / sd
    return y.reshape(-1, 1)


def _loss_for(model, records, task: str, target_stats) -> Tensor:
    out, _ = model.forward(records)
    if task == "cls":
        return cross_entropy(out, _batch_targets(records, task, target_stats))
    return mse(out, _batch_targets(records, task, target_stats))


def _language_groups(records) -> list[list]:
    groups: dict[str, list] = {}
    for rec in records:
        groups.setdefault(rec.language, []).append(rec)
    return [groups[lang] for lang in sorted(groups)]


def evaluate_loss(model, records, target_stats=None) -> float:
    """Per-sample mean loss over a record list, outside any tape."""
    records = list(records)
    if not records:
        raise ConfigurationError("cannot evaluate loss on zero records")
    groups = _language_groups(records) if model.language_routed else [records]
    total = 0.0
    for group in groups:
        total += _loss_for(model, group, model.cfg.task, target_stats).item() * len(group)
    return total / len(records)


def _epoch_batches(records, batch_size: int, rng: np.random.Generator, routed: bool) -> list[list]:
    order = rng.permutation(len(records))
    shuffled = [records[i] for i in order]
    if routed:
        batches: list[list] = []
        for group in _language_groups(shuffled):
            batches.extend(group[i : i + batch_size] for i in range(0, len(group), batch_size))
        interleave = rng.permutation(len(batches))
        return [batches[i] for i in interleave]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


def fit(model, train_records, val_records, cfg: TrainConfig, target_stats=None) -> FitResult:
    """Train in place; on return the model holds the best-epoch snapshot."""
    train_records = list(train_records)
    val_records = list(val_records)
    if not train_records or not val_records:
        raise ConfigurationError("fit needs non-empty train and validation splits")
    task = model.cfg.task
    lr = cfg.learning_rate
    if lr is None:
        lr = default_learning_rate(model.cfg.variant, task)
    opt = AdamW(lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    early = EarlyStopping(cfg.patience)
    rng = np.random.default_rng(cfg.seed)
    all_params = model.named_params()

    history: list[dict] = []
    stopped_epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for batch in _epoch_batches(train_records, cfg.batch_size, rng, model.language_routed):
            with ad.Tape():
                loss = _loss_for(model, batch, task, target_stats)
                ad.backward(loss)
            group = model.trainable_params(batch[0].language if model.language_routed else None)
            opt.step(group)
            ad.zero_grad(group.values())
            total += loss.item() * len(batch)
        val_loss = evaluate_loss(model, val_records, target_stats)
        history.append(
            {"epoch": epoch, "train_loss": total / len(train_records), "val_loss": val_loss}
        )
        stopped_epoch = epoch
        if early.update(epoch, val_loss, all_params):
            break
    early.restore(all_params)
    return FitResult(
        history=history,
        best_epoch=early.best_epoch,
        stopped_epoch=stopped_epoch,
        best_val_loss=float(early.best_loss),
    )


# ---------------------------------------------------------------------------
# evaluation of a fitted estimator
# ---------------------------------------------------------------------------


def evaluate_estimator(est, records, subject_mean: bool = False):
    """Task-appropriate report on a record list.

    With ``subject_mean`` each subject's three outputs are averaged first
    (probability mean for classification with the strict >0.5 rule, score
    mean for regression) and the pooled value stands in for every record.
    """
    records = list(records)
    if est.task == "cls":
        labels = np.asarray([r.label for r in records])
        probs = est.predict_proba(records)[:, 1]
        if subject_mean:
            probs = aggregate_per_subject(records, probs)
        preds = (probs > 0.5).astype(int)
        return classification_report(confusion_counts(preds, labels))
    preds = est.predict(records)
    if subject_mean:
        preds = aggregate_per_subject(records, preds)
    return regression_report(preds, np.asarray([r.mmse for r in records]))


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldOutcome:
    fold: int
    report: object  # ClassificationReport | RegressionReport
    n_records: int
    n_subjects: int
    best_epoch: int
    stopped_epoch: int
    estimator: object = field(repr=False)


@dataclass
class CrossvalResult:
    variant: str
    task: str
    n_folds: int
    aggregation: str  # "sample" | "subject"
    plan: FoldPlan
    folds: list[FoldOutcome]
    summary: dict[str, dict[str, float]]

    def summary_payload(self) -> dict:
        """Deterministic JSON document (no timestamps, no object refs)."""
        return {
            "task": self.task,
            "variant": self.variant,
            "aggregation": self.aggregation,
            "n_folds": self.n_folds,
            "folds": [
                {
                    "fold": f.fold,
                    "n_records": f.n_records,
                    "n_subjects": f.n_subjects,
                    "best_epoch": f.best_epoch,
                    "stopped_epoch": f.stopped_epoch,
                    **f.report.to_dict(),
                }
                for f in self.folds
            ],
            "summary": self.summary,
        }


def crossval(
    corpus,
    variant: str,
    task: str,
    train_cfg: TrainConfig | None = None,
    model_overrides: dict | None = None,
    n_folds: int = 5,
    fold_seed: int | None = None,
    subject_mean: bool = False,
) -> CrossvalResult:
    """Train and evaluate one model per fold; summarize mean +/- population SD.

    Records are re-sorted by sample id before planning, so the input order
    of the corpus cannot influence folds or metrics.
    """
    from .estimators import make_estimator

    cfg = train_cfg if train_cfg is not None else TrainConfig()
    records = corpus.records if isinstance(corpus, Corpus) else list(corpus)
    records = sorted(records, key=lambda r: r.sample_id)
    # feature dimensions come from the data; explicit overrides still win
    overrides = {
        "seq_len": records[0].subject_seq.shape[0],
        "embed_dim": records[0].subject_seq.shape[1],
        "audio_dim": records[0].audio_feat.shape[0],
    }
    overrides.update(model_overrides or {})
    plan = split_folds(records, n_folds, cfg.seed if fold_seed is None else fold_seed)
    outcomes: list[FoldOutcome] = []
    for fold in range(n_folds):
        train_recs, held_recs = fold_split(records, plan, fold)
        est = make_estimator(variant, task, overrides, replace(cfg, seed=cfg.seed + fold))
        est.fit(train_recs, validation=held_recs)
        report = evaluate_estimator(est, held_recs, subject_mean=subject_mean)
        outcomes.append(
            FoldOutcome(
                fold=fold,
                report=report,
                n_records=len(held_recs),
                n_subjects=len({r.subject_id for r in held_recs}),
                best_epoch=est.best_epoch_,
                stopped_epoch=est.stopped_epoch_,
                estimator=est,
            )
        )
    summary = summarize_folds([o.report.metric_values() for o in outcomes])
    return CrossvalResult(
        variant=variant,
        task=task,
        n_folds=n_folds,
        aggregation="subject" if subject_mean else "sample",
        plan=plan,
        folds=outcomes,
        summary=summary,
    )


# ---------------------------------------------------------------------------
# full-data refit
# ---------------------------------------------------------------------------


@dataclass
class RefitResult:
    estimator: object
    best_fold: int
    worst_fold: int
    fit: FitResult


def select_folds(result: CrossvalResult) -> tuple[int, int]:
    """(best, worst) fold indices by UAR (max) or RMSE (min); ties take the lowest index.

    When every fold scores the same the worst fold moves to the next index
    so the two phases still cover two distinct folds.
    """
    if result.task == "cls":
        scores = np.asarray([o.report.uar for o in result.folds])
        best = int(np.argmax(scores))
        worst = int(np.argmin(scores))
    else:
        scores = np.asarray([o.report.rmse for o in result.folds])
        best = int(np.argmin(scores))
        worst = int(np.argmax(scores))
    if worst == best:
        worst = next(i for i in range(len(result.folds)) if i != best)
    return best, worst


def refit_full(result: CrossvalResult, corpus) -> RefitResult:
    """Continue the best fold's model on the worst fold's training split.

    Phase one (cross-validation) trained on everything but the best fold;
    phase two trains on everything but the worst fold, so their union is the
    whole corpus.  Early stopping keeps monitoring the best fold's held-out
    records.  The stored best-fold estimator is fine-tuned in place.
    """
    best, worst = select_folds(result)
    records = corpus.records if isinstance(corpus, Corpus) else list(corpus)
    records = sorted(records, key=lambda r: r.sample_id)
    phase_train, _ = fold_split(records, result.plan, worst)
    _, val_recs = fold_split(records, result.plan, best)
    est = result.folds[best].estimator
    fit_res = est.fine_tune(phase_train, validation=val_recs)
    return RefitResult(estimator=est, best_fold=best, worst_fold=worst, fit=fit_res)
