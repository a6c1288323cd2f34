"""Acceptance suite: one ``criterion(n, title)`` marker per criterion.

The session summary prints one PASS/FAIL line per criterion (see conftest).
"""

import math
import time

import numpy as np
import pytest

from umono import autograd as ag
from umono import physics as P
from umono.autograd import Tensor
from umono.config import RunConfig
from umono.data.checkpoint import load_checkpoint, save_checkpoint
from umono.data.dataset import synthetic_samples
from umono.data.netpbm import quantize
from umono.decoder import UDIA, udia_aggregate
from umono.encoder import LGFF, Encoder, EncoderConfig, SRAttention
from umono.gradcheck import COMPOSITE_TOL, LAYER_TOL, run_suite
from umono.model import UMono
from umono.objective import LossConfig, compute_metrics, l2_loss, silog_loss, umono_loss
from umono.trainer import LOG_NAME, train

criterion = pytest.mark.criterion


# ---------------------------------------------------------------------------
# 1. gradient fidelity
# ---------------------------------------------------------------------------

@criterion(1, "gradient fidelity (finite differences, 64-bit, 20 trials per case, < 5 min)")
def test_gradient_fidelity(note):
    start = time.perf_counter()
    results = run_suite("all", trials=20, seed=0)
    elapsed = time.perf_counter() - start
    for r in results:
        print(r.line())
    worst = {sc: max(r.max_error for r in results if r.scope == sc) for sc in ("layer", "encoder", "decoder", "full")}
    note(f"{len(results)} cases in {elapsed:.1f}s; worst error per scope: "
         + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert all(r.trials >= 20 for r in results)
    assert worst["layer"] < LAYER_TOL == 1e-5
    assert max(worst.values()) < COMPOSITE_TOL == 1e-4
    assert [r.name for r in results if not r.passed] == []
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 2. attention equivalence
# ---------------------------------------------------------------------------

def dense_attention(x, att):
    """Textbook multi-head attention in plain numpy (no key bias: the layer has none)."""
    b, n, c = x.shape
    d = c // att.heads
    out = np.zeros((b, n, c))
    for bi in range(b):
        q = x[bi] @ att.q.weight.data + att.q.bias.data
        k = x[bi] @ att.k.weight.data
        v = x[bi] @ att.v.weight.data + att.v.bias.data
        heads = []
        for h in range(att.heads):
            sl = slice(h * d, (h + 1) * d)
            logits = q[:, sl] @ k[:, sl].T / math.sqrt(d)
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            heads.append((p / p.sum(axis=1, keepdims=True)) @ v[:, sl])
        out[bi] = np.concatenate(heads, axis=1) @ att.out.weight.data + att.out.bias.data
    return out


@criterion(2, "attention equivalence (R=1 vs dense oracle over 100 trials, rows sum to 1)")
def test_attention_matches_dense_oracle(note, f64):
    worst = 0.0
    for t in range(100):
        rng = np.random.default_rng([2, t])
        heads = int(rng.choice([1, 2, 4]))
        c = heads * int(rng.integers(1, 5))
        h, w = (int(v) for v in rng.integers(1, 7, size=2))
        att = SRAttention(c, heads, 1, rng)
        x = rng.standard_normal((int(rng.integers(1, 3)), h * w, c))
        worst = max(worst, np.abs(att(Tensor(x), (h, w)).data - dense_attention(x, att)).max())
    note(f"max |sra(R=1) - dense| over 100 trials = {worst:.1e}")
    assert worst < 1e-6


@criterion(2, "attention equivalence (R=1 vs dense oracle over 100 trials, rows sum to 1)")
@pytest.mark.parametrize("bits", [32, 64])
def test_attention_rows_sum_to_one(note, bits):
    worst = 0.0
    with ag.precision(bits), ag.no_grad():
        for t in range(20):
            rng = np.random.default_rng([22, t])
            r = int(rng.choice([1, 2, 4]))
            att = SRAttention(8, 2, r, rng)
            x = rng.standard_normal((2, 64, 8)) * 3
            _, w_std = att(Tensor(x), (8, 8), return_weights=True)
            udia = UDIA(8, 2, "layer", rng)
            _, w_neg = udia_aggregate(Tensor(x), Tensor(rng.uniform(size=(2, 64, 1))), udia, return_weights=True)
            for wts in (w_std, w_neg):
                assert (wts.data >= 0).all()
                worst = max(worst, float(np.abs(wts.data.astype(np.float64).sum(-1) - 1).max()))
    note(f"{bits}-bit: max |row sum - 1| (standard and negated softmax) = {worst:.1e}")
    assert worst < 1e-6


# ---------------------------------------------------------------------------
# 3. LGFF convexity
# ---------------------------------------------------------------------------

@criterion(3, "LGFF convexity (1e5 elements, zero envelope violations)")
@pytest.mark.parametrize("bits", [32, 64])
def test_lgff_envelope(note, bits):
    rng = np.random.default_rng(3)
    violations = total = 0
    with ag.precision(bits), ag.no_grad():
        for _ in range(4):
            lgff = LGFF(16, 2, rng)
            f_l = rng.standard_normal((4, 16, 20, 20)) * rng.uniform(0.01, 100)
            f_g = rng.standard_normal((4, 16, 20, 20))
            f_g[0] = f_l[0]  # equal branches must pass through unchanged
            fused = lgff(Tensor(f_l), Tensor(f_g)).data
            lo = np.minimum(f_l, f_g).astype(fused.dtype)
            hi = np.maximum(f_l, f_g).astype(fused.dtype)
            violations += int(((fused < lo) | (fused > hi)).sum())
            total += fused.size
    note(f"{bits}-bit: {violations} violations over {total} elements")
    assert total >= 100_000 and violations == 0


# ---------------------------------------------------------------------------
# 4. physics exactness
# ---------------------------------------------------------------------------

@criterion(4, "physics exactness (round trip, zero depth, UDCP recovery)")
def test_depth_transmission_round_trip(note):
    rng = np.random.default_rng(4)
    worst = 0.0
    for beta in P.FormationParams().beta + (0.3, 4.0):
        t = rng.uniform(1e-3, 1.0, 10_000)
        d = rng.uniform(0.0, 1.0, 10_000)
        worst = max(worst,
                    np.abs(P.depth_to_transmission(P.transmission_to_depth(t, beta), beta) - t).max(),
                    np.abs(P.transmission_to_depth(P.depth_to_transmission(d, beta), beta) - d).max())
    note(f"round trip max error {worst:.1e}")
    assert worst < 1e-6


@criterion(4, "physics exactness (round trip, zero depth, UDCP recovery)")
def test_zero_depth_returns_clean_image(note):
    rng = np.random.default_rng(44)
    worst = 0.0
    for kind in P.SCENE_KINDS:
        scene = P.generate_scene(int(rng.integers(1000)), 32, 32, kind)
        scene.depth[:] = 0.0
        params = P.FormationParams(beta=tuple(rng.uniform(0, 3, 3)), ambient=tuple(rng.uniform(0, 1, 3)))
        worst = max(worst, np.abs(P.synthesize_underwater(scene, params) - scene.image).max())
    note(f"d=0 synthesis max deviation from J {worst:.1e}")
    assert worst < 1e-7


def window_extrema(x, r):
    """Border-truncated (2r+1)^2 window min and max by direct scan."""
    h, w = x.shape
    lo, hi = np.empty_like(x), np.empty_like(x)
    for y in range(h):
        for xx in range(w):
            win = x[max(0, y - r):y + r + 1, max(0, xx - r):xx + r + 1]
            lo[y, xx], hi[y, xx] = win.min(), win.max()
    return lo, hi


def udcp_case(seed, kind, depth=None):
    """(reference T, UDCP estimate from the 16-bit image, depth map) for one scene."""
    params = P.FormationParams()
    scene = P.generate_scene(seed, 64, 64, kind)
    if depth is not None:
        scene.depth[:] = depth
    gb = np.minimum(scene.image[1], scene.image[2])
    assert window_extrema(gb, P.PATCH_RADIUS)[0].max() == 0.0, "scene lacks a G/B-dark pixel in some window"
    observed = quantize(P.synthesize_underwater(scene, params)) / 65535.0
    est = P.estimate_transmission_udcp(observed, params.ambient).t[0]
    # the G/B dark channel sees the less attenuated of the two channels
    ref = P.depth_to_transmission(scene.depth[0], min(params.beta[1], params.beta[2]))
    return ref, est, scene.depth[0]


@criterion(4, "physics exactness (round trip, zero depth, UDCP recovery)")
def test_udcp_recovers_transmission(note):
    r = P.PATCH_RADIUS
    flat_err, flat_count, env_excess = 0.0, 0, 0.0
    for kind in P.SCENE_KINDS:
        for seed in range(3):
            ref, est, depth = udcp_case(seed, kind)
            d_lo, d_hi = window_extrema(depth, r)
            flat = d_lo == d_hi
            if flat.any():
                flat_err = max(flat_err, np.abs(est - ref)[flat].max())
                flat_count += int(flat.sum())
            # elsewhere the estimate is the transmission of some pixel in the window
            t_lo, t_hi = window_extrema(ref, r)
            env_excess = max(env_excess, (t_lo - est).max(), (est - t_hi).max())
    const_err = 0.0
    for kind in P.SCENE_KINDS:
        for seed, depth in enumerate((0.0, 0.35, 0.8, 1.0)):
            ref, est, _ = udcp_case(seed, kind, depth)
            const_err = max(const_err, np.abs(est - ref).max())
    note(f"UDCP max error: constant-depth scenes {const_err:.1e}; {flat_count} constant-depth windows "
         f"in generated scenes {flat_err:.1e}; envelope excess elsewhere {env_excess:.1e}")
    assert flat_count > 0
    assert const_err < 1e-3 and flat_err < 1e-3 and env_excess < 1e-3


# ---------------------------------------------------------------------------
# 5. metric oracle
# ---------------------------------------------------------------------------

def naive_metrics(pred, gt, eps=1e-3):
    sums = dict.fromkeys(("delta1", "delta2", "delta3", "abs_rel", "sq_rel", "sq", "log10"), 0.0)
    n = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g <= eps:
            continue
        n += 1
        ratio = max(p / g, g / p)
        for k in (1, 2, 3):
            sums[f"delta{k}"] += ratio < 1.25 ** k
        sums["abs_rel"] += abs(p - g) / g
        sums["sq_rel"] += (p - g) ** 2 / g
        sums["sq"] += (p - g) ** 2
        sums["log10"] += abs(math.log10(p) - math.log10(g))
    out = {k: v / n for k, v in sums.items()}
    out["rmse"] = math.sqrt(out.pop("sq"))
    return out


@criterion(5, "metric oracle equivalence (50 random 32x32 pairs, 1e-9)")
def test_metrics_match_naive_loop(note):
    worst = 0.0
    for t in range(50):
        rng = np.random.default_rng([5, t])
        gt = rng.uniform(0.01, 1.0, (32, 32))
        gt[rng.uniform(size=gt.shape) < 0.1] = 0.0  # invalid pixels
        pred = np.clip(gt * np.exp(rng.normal(0, rng.uniform(0.05, 1.0), gt.shape)), 1e-3, 1.0)
        rep = compute_metrics(pred, gt)
        ref = naive_metrics(pred, gt)
        worst = max(worst, max(abs(getattr(rep, k) - v) for k, v in ref.items()))
        assert rep.delta1 <= rep.delta2 <= rep.delta3
    note(f"max |vectorized - loop| over 50 pairs = {worst:.1e}")
    assert worst < 1e-9


@criterion(5, "metric oracle equivalence (50 random 32x32 pairs, 1e-9)")
def test_perfect_prediction_metrics():
    gt = np.random.default_rng(55).uniform(0.01, 1.0, (32, 32))
    rep = compute_metrics(gt.copy(), gt)
    assert (rep.delta1, rep.delta2, rep.delta3) == (1.0, 1.0, 1.0)
    assert (rep.abs_rel, rep.sq_rel, rep.rmse, rep.log10) == (0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# 6. loss analytics
# ---------------------------------------------------------------------------

@criterion(6, "loss analytics (SILog scale invariance and closed form, exact composition)")
def test_silog_analytics(note, f64):
    rng = np.random.default_rng(6)
    gt = rng.uniform(0.05, 1.0, (2, 1, 16, 16))
    pred = rng.uniform(0.05, 1.0, gt.shape)
    base = silog_loss(Tensor(pred), gt, beta=1.0).item()
    invariance = max(abs(silog_loss(Tensor(k * pred), gt, beta=1.0).item() - base) / base
                     for k in (0.5, 2.0, 10.0))
    closed = max(abs(silog_loss(Tensor(k * gt), gt, beta=0.85).item() - 10.0 * abs(math.log(k)) * math.sqrt(0.15))
                 for k in (0.5, 0.9, 1.1, 2.0, 10.0))
    note(f"beta=1 relative change under scaling {invariance:.1e}; beta=0.85 closed-form error {closed:.1e}")
    assert invariance < 1e-6 and closed < 1e-6


@criterion(6, "loss analytics (SILog scale invariance and closed form, exact composition)")
@pytest.mark.parametrize("lam,mu", [(1.0, 1.0), (0.3, 0.6), (0.0, 2.0), (5.0, 0.0)])
def test_loss_composition_exact(lam, mu, f64):
    rng = np.random.default_rng(66)
    gt = rng.uniform(0.05, 1.0, (2, 1, 8, 8))
    gt[0, 0, 0, :3] = 0.0
    pred = rng.uniform(0.05, 1.0, gt.shape)
    total = umono_loss(Tensor(pred), gt, cfg=LossConfig(lam=lam, mu=mu)).item()
    assert total == lam * l2_loss(Tensor(pred), gt).item() + mu * silog_loss(Tensor(pred), gt).item()


# ---------------------------------------------------------------------------
# 7. overfit learning check
# ---------------------------------------------------------------------------

OVERFIT_STEPS = 300
OVERFIT_LR = 1e-3


def overfit_cfg(**sets):
    cfg = RunConfig.desk()  # depths [1,1,1,1], channels [16,32,64,128], batch 4
    cfg.train.steps = OVERFIT_STEPS
    cfg.optim.lr = OVERFIT_LR
    for key, value in sets.items():
        sec, _, name = key.partition("__")
        setattr(getattr(cfg, sec), name, value)
    return cfg


@pytest.fixture(scope="module")
def overfit_data():
    return synthetic_samples(8, 64, 64, seed=0)


def fmt_metrics(m):
    return f"rmse={m.rmse:.4f} delta1={m.delta1:.4f} abs_rel={m.abs_rel:.4f}"


@criterion(7, "overfit learning check (8 samples 64x64, 300 steps: RMSE < 0.05, delta1 > 0.90, < 15 min)")
def test_overfit(note, overfit_data, tmp_path):
    cfg = overfit_cfg()
    assert cfg.encoder.depths == [1, 1, 1, 1] and cfg.encoder.channels == [16, 32, 64, 128]
    start = time.perf_counter()
    _, report = train(overfit_data, cfg, out_dir=tmp_path)
    elapsed = time.perf_counter() - start
    m = report.final_metrics
    note(f"full model: {fmt_metrics(m)} in {elapsed:.0f}s (lr {OVERFIT_LR}, batch {cfg.train.batch_size})")
    assert report.steps == OVERFIT_STEPS
    assert m.rmse < 0.05 and m.delta1 > 0.90
    assert elapsed < 900


@criterion(7, "overfit learning check (8 samples 64x64, 300 steps: RMSE < 0.05, delta1 > 0.90, < 15 min)")
@pytest.mark.parametrize("name,sets", [
    ("w_cnn", {"encoder__ablation": "cnn_only"}),
    ("w_transformer", {"encoder__ablation": "transformer_only"}),
    ("wo_lgff", {"encoder__ablation": "fuse_add"}),
    ("guidance=none", {"decoder__guidance": "none"}),
    ("guidance=hef", {"decoder__guidance": "hef_only"}),
    ("guidance=mtm", {"decoder__guidance": "mtm_only"}),
])
def test_overfit_ablations_complete(note, overfit_data, tmp_path, name, sets):
    cfg = overfit_cfg(**sets)
    assert cfg.optim.clip_norm > 0
    _, report = train(overfit_data, cfg, out_dir=tmp_path)
    assert report.steps == OVERFIT_STEPS
    assert np.isfinite(report.step_losses).all()
    note(f"ablation {name}: {fmt_metrics(report.final_metrics)} (reported, not asserted)")


# ---------------------------------------------------------------------------
# 8. determinism and persistence
# ---------------------------------------------------------------------------

def small_cfg():
    cfg = RunConfig.desk()
    cfg.train.steps = 5  # 2 batches per epoch: step 3 falls mid-epoch
    cfg.optim.lr = OVERFIT_LR
    return cfg


@pytest.fixture(scope="module")
def small_data():
    return synthetic_samples(8, 64, 64, seed=8)


@criterion(8, "determinism and persistence (byte-identical logs/checkpoints, exact resume, bit-exact round trip)")
def test_same_seed_byte_identical(small_data, tmp_path):
    for run in ("a", "b"):
        train(small_data, small_cfg(), out_dir=tmp_path / run)
    for name in (LOG_NAME, "last.umck"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@criterion(8, "determinism and persistence (byte-identical logs/checkpoints, exact resume, bit-exact round trip)")
@pytest.mark.parametrize("k", [2, 3])
def test_resume_equals_uninterrupted(small_data, tmp_path, k):
    _, whole = train(small_data, small_cfg(), out_dir=tmp_path / "whole")
    train(small_data, small_cfg(), out_dir=tmp_path / "split", stop_after=k)
    _, rest = train(small_data, small_cfg(), out_dir=tmp_path / "split", resume=tmp_path / "split" / "last.umck")
    assert rest.steps == whole.steps
    for name in (LOG_NAME, "last.umck"):
        assert (tmp_path / "whole" / name).read_bytes() == (tmp_path / "split" / name).read_bytes()


@criterion(8, "determinism and persistence (byte-identical logs/checkpoints, exact resume, bit-exact round trip)")
def test_checkpoint_round_trip_bit_exact(small_data, tmp_path):
    model, _ = train(small_data, small_cfg(), out_dir=tmp_path)
    params, adam, meta = load_checkpoint(tmp_path / "last.umck")
    live = model.state_dict()
    assert list(params) == list(live)
    for key, arr in live.items():
        assert params[key].dtype == arr.dtype and params[key].tobytes() == arr.tobytes()
    save_checkpoint(tmp_path / "again.umck", params, adam, meta)
    assert (tmp_path / "again.umck").read_bytes() == (tmp_path / "last.umck").read_bytes()


# ---------------------------------------------------------------------------
# 9. shape contract
# ---------------------------------------------------------------------------

@criterion(9, "shape contract (default encoder pyramid at 64x64, full-resolution depth in (0, 1))")
def test_encoder_pyramid_default_config(note):
    cfg = EncoderConfig()
    assert cfg.depths == [3, 4, 6, 3] and cfg.channels == [64, 128, 256, 512]
    with ag.no_grad():
        feats = Encoder(cfg, np.random.default_rng(9))(Tensor(np.random.default_rng(9).uniform(size=(2, 3, 64, 64))))
    hwc = [(f.shape[2], f.shape[3], f.shape[1]) for f in feats]
    note(f"encoder features (HxWxC): {hwc}")
    assert hwc == [(16, 16, 64), (8, 8, 128), (4, 4, 256), (2, 2, 512)]
    assert all(f.shape[0] == 2 for f in feats)


@criterion(9, "shape contract (default encoder pyramid at 64x64, full-resolution depth in (0, 1))")
@pytest.mark.parametrize("h,w", [(64, 64), (32, 96)])
def test_decoder_full_resolution_open_interval(h, w):
    rng = np.random.default_rng(99)
    model = UMono(seed=9)
    model.eval()
    with ag.no_grad():
        depth = model(Tensor(rng.uniform(size=(2, 3, h, w))), rng.uniform(0.05, 1.0, (2, 1, h, w))).data
    assert depth.shape == (2, 1, h, w)
    assert (depth > 0).all() and (depth < 1).all()
