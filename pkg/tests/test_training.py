import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import helpers
from emgdisent.autodiff import softmax_cross_entropy
from emgdisent.data import SynthConfig, build_split, make_folds, synthesize
from emgdisent.network import build_model, forward, load_checkpoint
from emgdisent.training import (
    ConfigError,
    TrainConfig,
    TrainingDivergedError,
    batches,
    compute_losses,
    fit,
    lambda_schedule,
    lambdas_at,
    progress,
    train,
    train_epoch,
)


@pytest.fixture(scope="module")
def toy():
    return helpers.toy_split()


class TestSchedule:
    def test_endpoints(self):
        assert lambda_schedule(0.0, 0.0, 0.1) == 0.0
        assert lambda_schedule(1.0, 0.0, 0.1) == 0.1
        assert lambda_schedule(0.0, 1.0, 1.5) == 1.0
        assert lambda_schedule(1.0, 1.0, 1.5) == 1.5

    @given(st.floats(0, 1), st.floats(0, 2), st.floats(0, 2))
    def test_between_endpoints(self, p, a, b):
        lo, hi = min(a, b), max(a, b)
        assert lo - 1e-12 <= lambda_schedule(p, lo, hi) <= hi + 1e-12

    def test_clamps_with_warning(self):
        with pytest.warns(UserWarning, match="clamped"):
            assert lambda_schedule(1.5, 1.0, 1.5) == 1.5
        with pytest.warns(UserWarning):
            assert lambda_schedule(-0.2, 0.0, 0.1) == 0.0

    def test_progress_reaches_one_on_last_epoch(self):
        cfg = TrainConfig(epochs=4)
        assert [progress(e, 4) for e in range(1, 5)] == [0.25, 0.5, 0.75, 1.0]
        assert lambdas_at(cfg, 4) == (0.1, 1.5)
        assert lambdas_at(cfg, 2) == pytest.approx((0.05, 1.25))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.learning_rate, cfg.iterations_per_step) == (256, 0.001, 1)
        assert (cfg.lambda_s_init, cfg.lambda_s_max, cfg.lambda_p_init, cfg.lambda_p_max) == (0, 0.1, 1.0, 1.5)

    @pytest.mark.parametrize("field,value", [("epochs", 0), ("batch_size", 1), ("learning_rate", 0.0),
                                             ("variant", "dann"), ("lambda_p_init", 2.0)])
    def test_validation(self, field, value):
        with pytest.raises(ConfigError):
            TrainConfig(**{field: value}).validate()

    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(variant="mtl", epochs=7, seed=3)
        cfg.to_json(tmp_path / "c.json")
        assert TrainConfig.from_json(tmp_path / "c.json") == cfg
        with pytest.raises(ConfigError, match="nope"):
            TrainConfig.from_dict({"nope": 1})


class TestLosses:
    def test_values_match_manual_cross_entropy(self, toy):
        train_set, _ = toy
        m = build_model("proposed", train_set.n_patterns, train_set.n_subjects, seed=0)
        idx = np.arange(6)
        out = forward(m, train_set.windows[idx], "eval", (0.1, 1.0))
        losses = compute_losses(out, train_set.pattern_onehot(idx), train_set.subject_onehot(idx))
        logits = out.logits_p.data.astype(np.float64)
        logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        manual = -logp[np.arange(6), train_set.pattern_index[idx]].mean()
        assert losses.values()["L_p_cls"] == pytest.approx(manual, rel=1e-5)
        assert all(v is not None and math.isfinite(v) for v in losses.values().values())

    def test_erm_has_only_pattern_loss(self, toy):
        train_set, _ = toy
        m = build_model("erm", train_set.n_patterns, train_set.n_subjects)
        out = forward(m, train_set.windows[:4], "eval")
        vals = compute_losses(out, train_set.pattern_onehot(slice(0, 4))).values()
        assert vals["L_p_cls"] is not None
        assert vals["L_s_cls"] is vals["L_s_adv"] is vals["L_p_adv"] is None

    def test_missing_labels(self, toy):
        train_set, _ = toy
        m = build_model("mtl", train_set.n_patterns, train_set.n_subjects)
        out = forward(m, train_set.windows[:2], "eval")
        with pytest.raises(ValueError, match="L_s_cls"):
            compute_losses(out, train_set.pattern_onehot(slice(0, 2)))


class TestBatches:
    def test_cover_and_drop_singleton(self):
        got = batches(33, 8, np.random.default_rng(0))
        assert [len(b) for b in got] == [8, 8, 8, 8]
        assert len(set(np.concatenate(got))) == 32


class TestAlternatingSteps:
    def test_optimizer_step_counts(self, toy):
        train_set, _ = toy
        one = train_set.subset(np.arange(8))
        for variant, expected in (("proposed", (1, 1)), ("erm", (1, None)), ("ponly", (1, None)),
                                  ("mtl", (1, 1))):
            model, cfg, state = helpers.make_run(variant, one, batch_size=8, epochs=1)
            train_epoch(model, one, state, cfg)
            got = (state.optimizer1.steps, state.optimizer2.steps if state.optimizer2 else None)
            assert got == expected, variant

    def test_step_isolation(self, toy):
        train_set, _ = toy
        model, cfg, state = helpers.make_run("proposed", train_set, epochs=2)
        seen = []

        def check(step, before, after):
            frozen = helpers.SUBJECT_SIDE if step == 1 else helpers.PATTERN_SIDE
            moving = helpers.PATTERN_SIDE if step == 1 else helpers.SUBJECT_SIDE
            assert helpers.changed(before, after, frozen) == []
            assert helpers.changed(before, after, moving)
            assert helpers.changed(before, after, ("extractor",))
            seen.append(step)

        helpers.watch_steps(model, state, check)
        fit(model, train_set, cfg, state=state)
        assert seen.count(1) == seen.count(2) > 0

    def test_zero_lambda_matches_mtl(self, toy):
        train_set, _ = toy
        traces = {}
        for variant in ("proposed", "mtl"):
            model, cfg, state = helpers.make_run(variant, train_set, lambda_s_max=0.0, lambda_p_init=0.0,
                                                 lambda_p_max=0.0, epochs=2)
            traces[variant] = []
            for _ in range(cfg.epochs):
                train_epoch(model, train_set, state, cfg, trace=traces[variant])
        shared = ("extractor", "encoder_p", "bottleneck_p", "encoder_s", "bottleneck_s")
        assert helpers.max_trace_gap(traces["proposed"], traces["mtl"], shared) <= 1e-6

    def test_reversal_is_linear_and_opposes(self, toy):
        """Step-1 extractor gradient is affine in lambda_s with slope equal to the
        negated gradient of the subject loss taken without reversal."""
        train_set, _ = toy
        idx = np.arange(8)
        xb, yp, ys = train_set.windows[idx], train_set.pattern_onehot(idx), train_set.subject_onehot(idx)
        model = build_model("proposed", train_set.n_patterns, train_set.n_subjects, seed=1).astype(np.float64)

        def grad(lam, paths):
            model.zero_grad()
            out = forward(model, xb, "eval", (lam, 0.0), paths=paths)
            compute_losses(out, yp, ys).total().backward()
            return model.extractor.weight.grad.copy()

        g0, g1, g2 = (grad(lam, {"p", "adv_s"}) for lam in (0.0, 0.5, 1.0))
        np.testing.assert_allclose(g2 - g1, g1 - g0, atol=1e-10)
        model.zero_grad()
        out = forward(model, xb, "eval", paths={"p"})
        z = out.z_p
        loss, _ = softmax_cross_entropy(model.classifier_s(z), ys, "mean")
        loss.backward()
        np.testing.assert_allclose(g1 - g0, -0.5 * model.extractor.weight.grad, atol=1e-10)


class TestFit:
    def test_erm_loss_decreases_on_single_gesture_toy(self):
        recs = [r for r in synthesize(SynthConfig(n_subjects=4, n_gestures=2, trials=2, duration=0.3, seed=2))
                if r.gesture_id == 1]
        ds = build_split(recs, [1, 2, 3, 4], [1, 2], [1, 2, 3, 4], "train", 408, 6).subset(np.arange(64))
        model, cfg, state = helpers.make_run("erm", ds, epochs=5, batch_size=16)
        losses = [row["L_p_cls"] for row in (train_epoch(model, ds, state, cfg) for _ in range(5))]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_divergence_reports_snapshot(self, toy):
        train_set, _ = toy
        bad = train_set.subset(np.arange(8))
        bad.windows = bad.windows.copy()
        bad.windows[0, 0, 0] = np.nan
        model, cfg, state = helpers.make_run("erm", bad, batch_size=8, epochs=1)
        with pytest.raises(TrainingDivergedError) as info:
            fit(model, bad, cfg, state=state)
        assert info.value.snapshot["epoch"] == 1 and info.value.snapshot["step"] == 1

    def test_class_count_mismatch(self, toy):
        train_set, _ = toy
        model = build_model("erm", train_set.n_patterns + 1, 2)
        with pytest.raises(ConfigError):
            fit(model, train_set, TrainConfig(variant="erm", epochs=1))

    def test_train_writes_deterministic_artifacts(self, tmp_path):
        recs = synthesize(SynthConfig(n_subjects=4, n_gestures=2, trials=2, duration=0.25, seed=1))
        plan = make_folds(range(1, 5), 4, 0)
        cfg = TrainConfig(variant="proposed", epochs=1, batch_size=16, learning_rate=0.01, seed=4)
        a = train(recs, plan, 1, cfg, tmp_path / "a", step=60)
        b = train(recs, plan, 1, cfg, tmp_path / "b", step=60)
        assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
        assert a.log.read_text() == b.log.read_text()
        _, meta = load_checkpoint(a.checkpoint)
        assert meta["test_subjects"] == plan.test_subjects(1) and meta["train_config"]["seed"] == 4
        assert json.loads((tmp_path / "a" / "config.json").read_text())["variant"] == "proposed"
        header = a.log.read_text().splitlines()[0].split(",")
        assert header[:3] == ["epoch", "lambda_s", "lambda_p"]
