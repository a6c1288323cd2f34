import numpy as np
import pytest

from umono import autograd as ag
from umono.autograd import Tensor
from umono.decoder import UDIA, Decoder, DecoderConfig, DepthHead, invert_transmission, udia_aggregate
from umono.encoder import Encoder, EncoderConfig
from umono.errors import ConfigError, ShapeError
from umono.model import UMono

TINY_ENC = EncoderConfig(depths=[1, 1, 1, 1], channels=[8, 8, 16, 16])
TINY_DEC = DecoderConfig(channels=[16, 8, 8, 8])


def naive_udia(e, tbar, m):
    q = tbar @ m.q.weight.data + m.q.bias.data
    k = e @ m.k.weight.data
    v = e @ m.v.weight.data + m.v.bias.data
    logits = -(q @ np.swapaxes(k, -1, -2)) / np.sqrt(e.shape[-1])
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    i = p @ v
    mu = i.mean(-1, keepdims=True)
    var = i.var(-1, keepdims=True)
    return e + (i - mu) / np.sqrt(var + 1e-5) * m.norm.gamma.data + m.norm.beta.data


class TestUDIA:
    def test_matches_naive(self, f64, rng):
        m = UDIA(6, 1, "layer", rng)
        e, t = rng.standard_normal((2, 9, 6)), rng.uniform(0, 1, (2, 9, 1))
        np.testing.assert_allclose(udia_aggregate(Tensor(e), Tensor(t), m).data, naive_udia(e, t, m), atol=1e-10)

    def test_zero_context_returns_features(self, f64, rng):
        m = UDIA(4, 1, "layer", rng)
        e = rng.standard_normal((1, 4, 4))
        out = udia_aggregate(Tensor(e), Tensor(np.full((1, 4, 1), 0.5)), m, zero_context=True)
        np.testing.assert_allclose(out.data, e)

    def test_negated_softmax_rows(self, f64, rng):
        m = UDIA(8, 2, "batch", rng)
        _, w = udia_aggregate(Tensor(rng.standard_normal((2, 16, 8))), Tensor(rng.uniform(size=(2, 16, 1))), m,
                              return_weights=True)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)

    def test_guidance_shape_mismatch(self, rng):
        with pytest.raises(ShapeError, match="guidance"):
            udia_aggregate(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 5, 1))), UDIA(4, rng=rng))

    def test_inverted_transmission(self):
        np.testing.assert_allclose(invert_transmission(np.array([0.2, 1.0])), [0.8, 0.0])


class TestDecoder:
    def _feats(self, rng, b=2, size=64):
        enc = Encoder(TINY_ENC, rng)
        with ag.no_grad():
            return enc(Tensor(rng.uniform(size=(b, 3, size, size))))

    @pytest.mark.parametrize("guidance", ["udia", "none", "hef_only", "mtm_only"])
    def test_full_resolution_open_unit_interval(self, rng, guidance):
        dec = Decoder(TINY_ENC.channels, DecoderConfig(TINY_DEC.channels, guidance=guidance), rng)
        with ag.no_grad():
            out = dec(self._feats(rng), rng.uniform(0.05, 1, (2, 1, 64, 64)))
        assert out.shape == (2, 1, 64, 64)
        assert ((out.data > 0) & (out.data < 1)).all()

    def test_transmission_shape_checked(self, rng):
        dec = Decoder(TINY_ENC.channels, TINY_DEC, rng)
        with pytest.raises(ShapeError):
            dec(self._feats(rng), np.ones((2, 64, 64)))

    def test_transmission_changes_prediction(self, rng):
        dec = Decoder(TINY_ENC.channels, TINY_DEC, rng)
        feats = self._feats(rng)
        with ag.no_grad():
            a = dec(feats, np.full((2, 1, 64, 64), 0.2)).data
            b = dec(feats, np.full((2, 1, 64, 64), 0.9)).data
        assert np.abs(a - b).max() > 1e-6

    def test_head_upsamples_quarter_scale(self, rng):
        head = DepthHead(3, rng)
        assert head(Tensor(rng.standard_normal((1, 3, 8, 8)))).shape == (1, 1, 32, 32)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            DecoderConfig(guidance="both").validate()


class TestModel:
    def test_seeded_and_counts(self):
        a, b = UMono(TINY_ENC, TINY_DEC, seed=4), UMono(TINY_ENC, TINY_DEC, seed=4)
        sa, sb = a.state_dict(), b.state_dict()
        assert list(sa) == list(sb) and all(np.array_equal(sa[k], sb[k]) for k in sa)
        assert a.num_parameters() == sum(p.size for p in a.parameters())

    def test_end_to_end_backward_reaches_every_parameter(self, rng):
        m = UMono(TINY_ENC, TINY_DEC, seed=0)
        out = m(Tensor(rng.uniform(size=(2, 3, 32, 32))), rng.uniform(0.1, 1, (2, 1, 32, 32)))
        ag.backward(out.mean())
        missing = [n for n, p in m.named_parameters() if p.grad is None]
        assert missing == []
