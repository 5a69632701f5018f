"""Losses, optimizer, early stopping, fitting, cross-validation, refit."""

import numpy as np
import pytest

import cogfuse.autodiff as ad
from cogfuse.autodiff import Tape, Tensor, backward
from cogfuse.data import fold_split, split_folds
from cogfuse.exceptions import ConfigurationError, ContractError
from cogfuse.models import ModelConfig, build_model
from cogfuse.train import (
    AdamW,
    EarlyStopping,
    TrainConfig,
    cross_entropy,
    crossval,
    default_learning_rate,
    evaluate_loss,
    fit,
    mse,
    refit_full,
    select_folds,
)

from conftest import build_subject

CFG = dict(seq_len=4, embed_dim=8, n_heads=2, audio_dim=5, hidden=(6,), encoder_layers=1)


def tiny_records(n_subjects_per_cell=2, seed=0, **dims):
    rng = np.random.default_rng(seed)
    recs = []
    i = 0
    for lang in ("en", "zh"):
        for label in (0, 1):
            for _ in range(n_subjects_per_cell):
                i += 1
                recs += build_subject(
                    f"s{i:04d}", lang, label, 28.0 - 4 * label, rng,
                    seq_len=CFG["seq_len"], embed_dim=CFG["embed_dim"], audio_dim=CFG["audio_dim"],
                )
    return recs


class TestLosses:
    def test_uniform_logits_give_log2(self):
        logits = Tensor(np.zeros((4, 2)))
        np.testing.assert_allclose(cross_entropy(logits, [0, 1, 0, 1]).item(), np.log(2.0), rtol=1e-15)

    def test_cross_entropy_matches_numpy_oracle(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((6, 2))
        labels = rng.integers(0, 2, size=6)
        shifted = z - z.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -logp[np.arange(6), labels].mean()
        np.testing.assert_allclose(cross_entropy(Tensor(z), labels).item(), expected, rtol=1e-12)

    def test_cross_entropy_contracts(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros(4)), [0, 1])
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 2))), [0])
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 2))), [0, 2])

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((3, 2)), grad_enabled=True)
        err = ad.grad_check(lambda t: cross_entropy(t, np.array([0, 1, 1])), x)
        assert err < 1e-7

    def test_mse_oracle(self):
        preds = Tensor([[1.0], [2.0]])
        assert mse(preds, np.zeros((2, 1))).item() == 2.5  # (1 + 4) / 2
        with pytest.raises(ContractError):
            mse(preds, np.zeros((3, 1)))


class TestAdamW:
    def manual_step(self, theta, g, state, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
        m, v, t = state
        t += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps) - lr * wd * theta
        return theta, (m, v, t)

    def test_single_step_oracle(self):
        # first step: mhat = g, vhat = g^2, so the Adam move is lr * sign(g)
        p = Tensor(np.array([1.0]), grad_enabled=True)
        p.grad = np.array([1.0])
        AdamW(learning_rate=0.1, weight_decay=0.0).step({"p": p})
        np.testing.assert_allclose(p.data, [1.0 - 0.1 / (1.0 + 1e-8)], rtol=1e-15)

    def test_decay_is_decoupled(self):
        # decay pulls on the incoming value, independent of the gradient
        p = Tensor(np.array([1.0]), grad_enabled=True)
        p.grad = np.array([1.0])
        AdamW(learning_rate=0.1, weight_decay=0.5).step({"p": p})
        expected = 1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * 0.5 * 1.0
        np.testing.assert_allclose(p.data, [expected], rtol=1e-15)

    def test_matches_manual_update_over_steps(self):
        rng = np.random.default_rng(2)
        p = Tensor(rng.standard_normal(5), grad_enabled=True)
        theta = p.data.copy()
        state = (np.zeros(5), np.zeros(5), 0)
        opt = AdamW(learning_rate=0.01, weight_decay=0.04)
        for _ in range(7):
            g = rng.standard_normal(5)
            p.grad = g.copy()
            opt.step({"p": p})
            theta, state = self.manual_step(theta, g, state, 0.01, 0.04)
        np.testing.assert_allclose(p.data, theta, rtol=1e-12)

    def test_per_parameter_step_counters(self):
        # b sits out the middle step and must keep its own bias correction
        rng = np.random.default_rng(3)
        a = Tensor(rng.standard_normal(3), grad_enabled=True)
        b = Tensor(rng.standard_normal(3), grad_enabled=True)
        tb = b.data.copy()
        sb = (np.zeros(3), np.zeros(3), 0)
        opt = AdamW(learning_rate=0.05, weight_decay=0.0)
        for step, group in enumerate(({"a": a, "b": b}, {"a": a}, {"a": a, "b": b})):
            for p in group.values():
                p.grad = rng.standard_normal(3)
            if "b" in group:
                tb, sb = self.manual_step(tb, group["b"].grad, sb, 0.05, 0.0)
            opt.step(group)
        np.testing.assert_allclose(b.data, tb, rtol=1e-12)

    def test_missing_gradient_rejected(self):
        p = Tensor(np.zeros(2), grad_enabled=True)
        with pytest.raises(ContractError, match="p"):
            AdamW(learning_rate=0.1).step({"p": p})

    def test_learning_rate_validated(self):
        with pytest.raises(ConfigurationError):
            AdamW(learning_rate=0.0)

    def test_variant_defaults(self):
        assert default_learning_rate("audio", "cls") == 1e-2
        assert default_learning_rate("text", "cls") == 1e-5
        assert default_learning_rate("audio", "reg") == 1e-1
        assert default_learning_rate("multimodal", "reg") == 1e-4


class TestEarlyStopping:
    def test_stalls_then_stops(self):
        # improvement at epochs 1 and 2, then a plateau: with patience 10 the
        # tenth stall lands at epoch 12
        p = {"w": Tensor(np.zeros(1), grad_enabled=True)}
        early = EarlyStopping(patience=10)
        losses = [1.0, 0.9] + [0.9] * 20
        stopped = None
        for epoch, loss in enumerate(losses, start=1):
            if early.update(epoch, loss, p):
                stopped = epoch
                break
        assert stopped == 12
        assert early.best_epoch == 2

    def test_equal_loss_is_a_stall(self):
        p = {"w": Tensor(np.zeros(1), grad_enabled=True)}
        early = EarlyStopping(patience=1)
        assert not early.update(1, 0.5, p)
        assert early.update(2, 0.5, p)  # not strictly lower

    def test_restore_returns_best_parameters(self):
        p = {"w": Tensor(np.array([0.0]), grad_enabled=True)}
        early = EarlyStopping(patience=5)
        for epoch, loss in ((1, 1.0), (2, 0.5), (3, 0.8)):
            p["w"].data = np.array([float(epoch)])
            early.update(epoch, loss, p)
        early.restore(p)
        np.testing.assert_array_equal(p["w"].data, [2.0])


class TestFit:
    def test_loss_decreases_and_best_is_restored(self):
        recs = tiny_records(3, seed=4)
        model = build_model(ModelConfig(variant="audio", **CFG), 0)
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=15, patience=15, batch_size=8, seed=1)
        result = fit(model, recs[:24], recs[24:], cfg)
        assert result.history[0]["train_loss"] > result.history[-1]["train_loss"]
        assert 1 <= result.best_epoch <= result.stopped_epoch
        # the model in hand is the best-epoch snapshot, not the last epoch
        np.testing.assert_allclose(
            evaluate_loss(model, recs[24:]), result.best_val_loss, rtol=1e-12
        )

    def test_early_stop_bound(self):
        recs = tiny_records(3, seed=5)
        model = build_model(ModelConfig(variant="audio", **CFG), 0)
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=60, patience=4, batch_size=8, seed=1)
        result = fit(model, recs[:24], recs[24:], cfg)
        assert result.stopped_epoch <= result.best_epoch + cfg.patience

    def test_determinism(self):
        recs = tiny_records(3, seed=6)
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=5, patience=5, batch_size=8, seed=2)
        r1 = fit(build_model(ModelConfig(variant="audio", **CFG), 0), recs[:24], recs[24:], cfg)
        r2 = fit(build_model(ModelConfig(variant="audio", **CFG), 0), recs[:24], recs[24:], cfg)
        assert r1.history == r2.history

    def test_training_touches_only_the_batch_language(self):
        # a routed model fitted on English alone must leave zh weights at init
        recs = [r for r in tiny_records(3, seed=7) if r.language == "en"]
        model = build_model(ModelConfig(variant="text", **CFG), 0)
        before = {k: v.data.copy() for k, v in model.named_params().items()}
        cfg = TrainConfig(learning_rate=1e-3, max_epochs=3, patience=3, batch_size=8, seed=3)
        fit(model, recs[:12], recs[12:], cfg)
        after = model.named_params()
        for name, v in after.items():
            if name.startswith("zh."):
                np.testing.assert_array_equal(v.data, before[name])
        assert any(
            not np.array_equal(after[name].data, before[name])
            for name in after if name.startswith("en.")
        )

    def test_empty_split_rejected(self):
        recs = tiny_records(2, seed=8)
        model = build_model(ModelConfig(variant="audio", **CFG), 0)
        with pytest.raises(ConfigurationError):
            fit(model, recs, [], TrainConfig())

    def test_evaluate_loss_weights_by_record(self):
        recs = tiny_records(2, seed=9)
        model = build_model(ModelConfig(variant="text", **CFG), 0)
        # weighted mean over language groups equals the direct per-record mean
        en = [r for r in recs if r.language == "en"]
        zh = [r for r in recs if r.language == "zh"]
        direct = (evaluate_loss(model, en) * len(en) + evaluate_loss(model, zh) * len(zh)) / len(recs)
        np.testing.assert_allclose(evaluate_loss(model, recs), direct, rtol=1e-12)


@pytest.fixture(scope="module")
def result(small_corpus):
    cfg = TrainConfig(learning_rate=1e-2, max_epochs=8, patience=4, batch_size=16, seed=5)
    return crossval(small_corpus.records, "audio", "cls", cfg, {"hidden": (8,)})


class TestCrossval:
    def test_shape_of_the_protocol(self, result, small_corpus):
        assert result.n_folds == 5
        assert len(result.folds) == 5
        assert sum(o.n_records for o in result.folds) == len(small_corpus.records)
        for outcome in result.folds:
            assert outcome.n_records == 3 * outcome.n_subjects

    def test_summary_payload_is_plain_data(self, result):
        import json

        payload = result.summary_payload()
        json.dumps(payload)  # nothing numpy-typed may leak through
        assert payload["task"] == "cls" and payload["variant"] == "audio"
        assert payload["aggregation"] == "sample"
        assert len(payload["folds"]) == 5
        assert set(payload["summary"]) == {"uar", "f1", "specificity", "sensitivity", "precision"}

    def test_determinism(self, result, small_corpus):
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=8, patience=4, batch_size=16, seed=5)
        again = crossval(small_corpus.records, "audio", "cls", cfg, {"hidden": (8,)})
        assert again.summary_payload() == result.summary_payload()

    def test_record_order_does_not_matter(self, result, small_corpus):
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=8, patience=4, batch_size=16, seed=5)
        shuffled = list(reversed(small_corpus.records))
        again = crossval(shuffled, "audio", "cls", cfg, {"hidden": (8,)})
        assert again.summary_payload() == result.summary_payload()

    def test_subject_mean_tagged(self, small_corpus):
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=2, patience=2, batch_size=16, seed=5)
        res = crossval(small_corpus.records, "audio", "cls", cfg, {"hidden": (8,)}, subject_mean=True)
        assert res.summary_payload()["aggregation"] == "subject"


class TestFoldSelection:
    class FakeReport:
        def __init__(self, **kw):
            self.__dict__.update(kw)

    def fake_result(self, task, scores):
        from cogfuse.train import CrossvalResult, FoldOutcome

        folds = [
            FoldOutcome(
                fold=i,
                report=self.FakeReport(uar=s, rmse=s),
                n_records=3,
                n_subjects=1,
                best_epoch=1,
                stopped_epoch=1,
                estimator=None,
            )
            for i, s in enumerate(scores)
        ]
        return CrossvalResult(
            variant="audio", task=task, n_folds=len(scores), aggregation="sample",
            plan=None, folds=folds, summary={},
        )

    def test_classification_picks_max_uar(self):
        best, worst = select_folds(self.fake_result("cls", [0.7, 0.8, 0.75, 0.72, 0.71]))
        assert (best, worst) == (1, 0)

    def test_regression_picks_min_rmse(self):
        best, worst = select_folds(self.fake_result("reg", [2.0, 1.5, 3.0]))
        assert (best, worst) == (1, 2)

    def test_ties_take_lowest_index(self):
        best, worst = select_folds(self.fake_result("cls", [0.8, 0.8, 0.5]))
        assert (best, worst) == (0, 2)

    def test_all_equal_still_yields_two_folds(self):
        best, worst = select_folds(self.fake_result("cls", [0.5, 0.5, 0.5]))
        assert (best, worst) == (0, 1)


class TestRefit:
    def test_two_phases_cover_the_corpus(self, small_corpus):
        cfg = TrainConfig(learning_rate=1e-2, max_epochs=6, patience=3, batch_size=16, seed=5)
        records = sorted(small_corpus.records, key=lambda r: r.sample_id)
        result = crossval(records, "audio", "cls", cfg, {"hidden": (8,)})
        best, worst = select_folds(result)
        refit = refit_full(result, records)
        assert (refit.best_fold, refit.worst_fold) == (best, worst)
        phase1_train, _ = fold_split(records, result.plan, best)
        phase2_train, _ = fold_split(records, result.plan, worst)
        covered = {r.sample_id for r in phase1_train} | {r.sample_id for r in phase2_train}
        assert covered == {r.sample_id for r in records}
        # the refit estimator is the best fold's estimator, tuned in place
        assert refit.estimator is result.folds[best].estimator
