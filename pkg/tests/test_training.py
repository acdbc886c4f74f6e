import math

import numpy as np
import pytest

from scmil.exceptions import TrainingError
from scmil.mil import VARIANTS, Bag, build_model, forward
from scmil.training import (AdamState, TrainConfig, adam_step, cosine_lr, decays, evaluate, fit,
                            grad_check, rel_error)


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 40, 1e-4) == 1e-4
        assert cosine_lr(20, 40, 1e-4) == pytest.approx(5e-5, rel=1e-12)
        assert cosine_lr(39, 40, 1.0) == pytest.approx(0.00154, abs=5e-6)

    def test_bounds(self):
        for total in (1, 7, 40):
            for e in range(total):
                assert 0 < cosine_lr(e, total, 3e-4) <= 3e-4

    def test_monotone(self):
        lrs = [cosine_lr(e, 40, 1.0) for e in range(40)]
        assert all(b < a for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("epoch", [-1, 40, 41])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            cosine_lr(epoch, 40, 1e-4)


class TestAdam:
    def test_zero_grads(self, rng):
        params = {"a": rng.standard_normal(5), "b": rng.standard_normal((2, 3))}
        before = {k: v.copy() for k, v in params.items()}
        cfg = TrainConfig(weight_decay=0.0)
        state = AdamState()
        for _ in range(10):
            adam_step(state, params, {k: np.zeros_like(v) for k, v in params.items()}, 1e-2, cfg)
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])
        assert state.step == 10

    @pytest.mark.parametrize("g", [3.0, -0.02])
    def test_unit_step(self, g):
        p = {"x": np.zeros(1)}
        state, cfg = AdamState(), TrainConfig(weight_decay=0.0)
        prev = 0.0
        for _ in range(500):
            adam_step(state, p, {"x": np.array([g])}, 1e-3, cfg)
            step = prev - p["x"][0]
            prev = p["x"][0]
            assert abs(abs(step) - 1e-3) < 1e-3 * 1e-6
            assert math.copysign(1.0, step) == math.copysign(1.0, g)

    def test_quadratic_bowl(self):
        p = {"x": np.array([1.0, -2.0])}
        curv = np.array([1.0, 5.0])
        state, cfg = AdamState(), TrainConfig(weight_decay=0.0)
        loss = lambda: 0.5 * float(np.sum(curv * p["x"] ** 2))
        for step in range(5000):
            if loss() < 1e-6:
                break
            adam_step(state, p, {"x": curv * p["x"]}, 1e-2, cfg)
        assert loss() < 1e-6

    def test_nan(self):
        p = {"good": np.ones(2), "bad": np.ones(2)}
        with pytest.raises(TrainingError) as err:
            adam_step(AdamState(), p, {"good": np.ones(2), "bad": np.array([1.0, np.nan])}, 1e-3, TrainConfig())
        assert err.value.param == "bad"
        np.testing.assert_array_equal(p["good"], 1.0)

    def test_decay_exemptions(self):
        assert decays("embed.weight") and decays("sc.dict") and decays("sc.lambda.w0")
        assert not decays("sc.log_mu") and not decays("sc.lambda.b2")
        p = {"w": np.ones(1), "sc.log_mu": np.ones(1)}
        adam_step(AdamState(), p, {k: np.zeros(1) for k in p}, 0.1, TrainConfig(weight_decay=0.5))
        assert p["w"][0] == pytest.approx(0.95) and p["sc.log_mu"][0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState(), {"a": np.ones(2)}, {"a": np.ones(3)}, 1e-3, TrainConfig())

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(lr0=0.0)


def separable_bags(n, d, seed):
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(n):
        x = rng.standard_normal((6, d)) * 0.5
        label = i % 2
        if label:
            x[rng.integers(6), 0] = 4.0
        bags.append(Bag(x, label, f"b{i}"))
    return bags


def tiny(variant="abmil_gated", sc=True, seed=0, d=6):
    return build_model(variant, d, 8, sc=sc, atoms=16 if sc else None, layers=2, attention_dim=8,
                       seed=seed, lambda_hidden=(8, 4))


class TestFit:
    def test_one_step(self):
        state = AdamState()
        fit(tiny(), separable_bags(1, 6, 0), TrainConfig(epochs=1), state=state)
        assert state.step == 1

    def test_deterministic(self):
        bags = separable_bags(10, 6, 1)
        runs = []
        for _ in range(2):
            model, hist = fit(tiny(seed=3), bags, TrainConfig(epochs=3, seed=5, lr0=1e-3))
            runs.append((model, hist))
        for a, b in zip(runs[0][0].named_parameters().values(), runs[1][0].named_parameters().values()):
            assert a.tobytes() == b.tobytes()
        assert [r["train_loss"] for r in runs[0][1]] == [r["train_loss"] for r in runs[1][1]]

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_separable(self, variant):
        bags = separable_bags(20, 6, 2)
        model, hist = fit(tiny(variant), bags, TrainConfig(epochs=40, lr0=1e-2))
        assert evaluate(model, bags)["accuracy"] == 1.0
        assert len(hist) == 40 and hist[-1]["train_loss"] < hist[0]["train_loss"]

    def test_best_validation_restored(self):
        bags = separable_bags(12, 6, 3)
        model, hist = fit(tiny(), bags[:8], TrainConfig(epochs=6, lr0=1e-2), val=bags[8:])
        best = max(r["val_accuracy"] for r in hist)
        assert evaluate(model, bags[8:])["accuracy"] == best

    def test_divergence_reports_epoch(self):
        model = tiny(sc=False)
        model.embed_w[0, 0] = np.nan
        with pytest.raises(TrainingError) as err:
            fit(model, separable_bags(2, 6, 0), TrainConfig(epochs=2))
        assert err.value.epoch == 0

    def test_empty(self):
        with pytest.raises(ValueError):
            fit(tiny(), [], TrainConfig())


class TestGradCheck:
    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("sc", [True, False])
    def test_all_variants(self, variant, sc):
        model = build_model(variant, 10, 8, sc=sc, atoms=16 if sc else None, layers=2, seed=1)
        bag = Bag(np.random.default_rng(0).standard_normal((3, 10)), 1)
        report = grad_check(model, bag)
        assert report.passed(1e-4 if sc else 1e-6), (report.worst_param, report.max_rel_err)
        assert report.margin >= 1e-3 and report.coords_checked <= 2000

    def test_parameters_restored(self):
        model = tiny()
        before = {k: v.copy() for k, v in model.named_parameters().items()}
        grad_check(model, Bag(np.ones((2, 6)), 0))
        for k, v in model.named_parameters().items():
            assert v.tobytes() == before[k].tobytes()

    def test_eps_zero(self):
        with pytest.raises(ValueError):
            grad_check(tiny(), Bag(np.ones((2, 6)), 0), eps=0.0)

    def test_detects_wrong_gradient(self, monkeypatch):
        import scmil.training as tr
        real = tr.backward

        def broken(model, trace, label):
            g = real(model, trace, label)
            g["head.bias"] = g["head.bias"] * 1.01
            return g

        monkeypatch.setattr(tr, "backward", broken)
        report = grad_check(tiny(sc=False), Bag(np.random.default_rng(1).standard_normal((3, 6)), 1))
        assert report.worst_param == "head.bias" and not report.passed(1e-6)

    def test_rel_error(self):
        assert rel_error(1.0, 1.0) == 0.0
        assert rel_error(2.0, 1.0) == 0.5
        assert rel_error(1e-9, 0.0, floor=1e-4) == pytest.approx(1e-5)
