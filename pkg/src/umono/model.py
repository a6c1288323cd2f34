"""The full encoder-decoder network."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .decoder import Decoder, DecoderConfig
from .encoder import Encoder, EncoderConfig
from .layers import Module


class UMono(Module):
    """Hybrid encoder + transmission-guided decoder.

    Parameters are drawn from two independent streams derived from ``seed``
    so that changing the decoder never perturbs encoder initialization.
    """

    def __init__(self, enc_cfg: EncoderConfig | None = None, dec_cfg: DecoderConfig | None = None,
                 seed: int = 0):
        super().__init__()
        enc_cfg = enc_cfg or EncoderConfig()
        dec_cfg = dec_cfg or DecoderConfig()
        enc_seq, dec_seq = np.random.SeedSequence(seed).spawn(2)
        self.encoder = Encoder(enc_cfg, np.random.default_rng(enc_seq))
        self.decoder = Decoder(enc_cfg.channels, dec_cfg, np.random.default_rng(dec_seq))

    def forward(self, image, transmission):
        if not isinstance(image, Tensor):
            image = Tensor(image)
        return self.decoder(self.encoder(image), transmission)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())
