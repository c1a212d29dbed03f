"""Task models built from the layers: a token transformer with pooled head, and a linear map."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers.attention import CopresheafAttention
from .nn import MLP, Linear, Module, make_rng, sinusoidal_encoding


class TransformerBlock(Module):
    """``h + attention(h)`` followed by ``h + FFN(h)``."""

    def __init__(self, d, heads, head_dim, family, family_options, wiring, condition, ffn_hidden, rng, family_rng):
        self.attn = CopresheafAttention(
            d, heads=heads, head_dim=head_dim, family=family, family_options=family_options,
            wiring=wiring, condition=condition, update="residual", rng=rng, family_rng=family_rng,
        )
        self.ffn = MLP([d, ffn_hidden, d], rng) if ffn_hidden else None

    def forward(self, h, mask=None):
        h = self.attn(h, h, mask)
        if self.ffn is not None:
            h = h + self.ffn(h)
        return h


class TokenTransformer(Module):
    """Embed tokens, add positions, run transformer blocks, mean-pool, linear head.

    Input ``(B, L, in_dim)``; output ``(B, out_dim)``.
    """

    def __init__(self, in_dim, out_dim, d=64, layers=2, heads=4, head_dim=None, family="constant-identity",
                 family_options=None, wiring="split", condition="qk", ffn_hidden=None, positional=True,
                 seq_len=None, seed=0):
        rng = make_rng([seed, 0])
        family_rng = make_rng([seed, 1])
        self.embed = Linear(in_dim, d, rng)
        self.blocks = [
            TransformerBlock(d, heads, head_dim, family, family_options, wiring, condition, ffn_hidden, rng, family_rng)
            for _ in range(layers)
        ]
        self.head = Linear(d, out_dim, rng)
        self.d = d
        self.positional = positional
        self._pe = sinusoidal_encoding(seq_len, d) if positional and seq_len else None

    def forward(self, x: Tensor, mask=None) -> Tensor:
        x = ad.as_tensor(x)
        B, L, _ = x.shape
        h = self.embed(x)
        if self.positional:
            pe = self._pe if self._pe is not None and self._pe.shape[0] == L else sinusoidal_encoding(L, self.d)
            h = h + np.broadcast_to(pe, (B, L, self.d))
        for blk in self.blocks:
            h = blk(h, mask)
        return self.head(ad.mean(h, axis=1))


class LinearModel(Module):
    """A single affine map on flat inputs ``(B, in_dim)``."""

    def __init__(self, in_dim, out_dim, seed=0):
        self.lin = Linear(in_dim, out_dim, make_rng([seed, 0]))

    def forward(self, x: Tensor, mask=None) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 3:
            x = ad.reshape(x, (x.shape[0], -1))
        return self.lin(x)
