import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umono import autograd as ag
from umono.autograd import Tensor
from umono.errors import ShapeError
from umono.objective import (
    LossConfig,
    MetricAccumulator,
    MetricsReport,
    compute_metrics,
    l2_loss,
    silog_loss,
    umono_loss,
    valid_mask,
)


def naive_metrics(pred, gt):
    d = {k: 0.0 for k in ("d1", "d2", "d3", "ar", "sr", "sq", "lg")}
    n = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g <= 1e-3:
            continue
        n += 1
        r = max(p / g, g / p)
        d["d1"] += r < 1.25
        d["d2"] += r < 1.25 ** 2
        d["d3"] += r < 1.25 ** 3
        d["ar"] += abs(p - g) / g
        d["sr"] += (p - g) ** 2 / g
        d["sq"] += (p - g) ** 2
        d["lg"] += abs(math.log10(p) - math.log10(g))
    return [d["d1"] / n, d["d2"] / n, d["d3"] / n, d["ar"] / n, d["sr"] / n, math.sqrt(d["sq"] / n), d["lg"] / n]


class TestMetrics:
    def test_matches_naive_loop(self, rng):
        pred, gt = rng.uniform(0.01, 1, (1, 16, 16)), rng.uniform(0.0, 1, (1, 16, 16))
        r = compute_metrics(pred, gt)
        got = [r.delta1, r.delta2, r.delta3, r.abs_rel, r.sq_rel, r.rmse, r.log10]
        np.testing.assert_allclose(got, naive_metrics(pred, gt), rtol=1e-12)

    def test_pixel_weighted_accumulation(self, rng):
        a = (rng.uniform(0.1, 1, (1, 4, 4)), rng.uniform(0.1, 1, (1, 4, 4)))
        b = (rng.uniform(0.1, 1, (1, 8, 8)), rng.uniform(0.1, 1, (1, 8, 8)))
        acc = MetricAccumulator()
        acc.update(*a)
        acc.update(*b)
        flat = compute_metrics(np.concatenate([a[0].ravel(), b[0].ravel()]),
                               np.concatenate([a[1].ravel(), b[1].ravel()]))
        np.testing.assert_allclose(list(acc.report().as_dict().values()), list(flat.as_dict().values()))

    def test_pred_convention(self):
        r = compute_metrics(np.array([0.5]), np.array([1.0]), convention="pred")
        assert r.abs_rel == pytest.approx(1.0)
        assert compute_metrics(np.array([0.5]), np.array([1.0])).abs_rel == pytest.approx(0.5)

    def test_text_roundtrip(self, rng):
        r = compute_metrics(rng.uniform(0.1, 1, 50), rng.uniform(0.1, 1, 50))
        back = MetricsReport.from_text(r.to_text())
        assert back.n == 50 and back.rmse == pytest.approx(r.rmse, abs=1e-6)

    def test_errors(self):
        with pytest.raises(ShapeError):
            compute_metrics(np.ones(3), np.ones(4))
        with pytest.raises(ValueError):
            compute_metrics(np.ones(3), np.zeros(3))
        with pytest.raises(ValueError):
            MetricAccumulator("mean")

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_delta_ordering(self, seed):
        r = np.random.default_rng(seed)
        rep = compute_metrics(r.uniform(0.01, 1, 20), r.uniform(0.01, 1, 20))
        assert rep.delta1 <= rep.delta2 <= rep.delta3 <= 1


class TestLosses:
    def test_mask_excludes_invalid(self, f64):
        gt = np.array([0.5, 0.0, 0.25])
        pred = Tensor([0.4, 0.9, 0.25])
        assert l2_loss(pred, gt).item() == pytest.approx(0.01 / 2)
        assert l2_loss(pred, gt, mode="l1").item() == pytest.approx(0.1 / 2)
        np.testing.assert_array_equal(valid_mask(gt), [True, False, True])

    def test_silog_closed_form(self, f64, rng):
        p, g = rng.uniform(0.1, 1, 30), rng.uniform(0.1, 1, 30)
        d = np.log(p) - np.log(g)
        ref = 10 * math.sqrt((d ** 2).mean() - 0.85 * d.mean() ** 2)
        assert silog_loss(Tensor(p), g).item() == pytest.approx(ref, rel=1e-12)

    def test_silog_gradient_finite_at_zero(self, f64):
        gt = np.array([0.3, 0.6])
        pred = Tensor(gt, requires_grad=True)
        ag.backward(silog_loss(pred, gt, beta=1.0))
        np.testing.assert_array_equal(pred.grad, 0.0)

    def test_umono_composition(self, f64, rng):
        p, g = rng.uniform(0.1, 1, 20), rng.uniform(0.1, 1, 20)
        cfg = LossConfig(lam=0.3, mu=0.6)
        expect = 0.3 * l2_loss(Tensor(p), g).item() + 0.6 * silog_loss(Tensor(p), g).item()
        assert umono_loss(Tensor(p), g, cfg=cfg).item() == expect

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="empty"):
            l2_loss(Tensor([0.5]), np.array([0.0]))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(beta=1.5).validate()
