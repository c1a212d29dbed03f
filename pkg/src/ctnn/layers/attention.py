"""Copresheaf self- and cross-attention, and a transformer layer over a complex.

Attention is computed densely over ``(batch, targets, sources)`` with a
boolean admissibility mask. Each head scores pairs with
``<q_x, k_y> / sqrt(p)``, normalizes over admissible sources and aggregates
``a_xy rho_{y->x} v_y``. With the constant-identity family this is ordinary
scaled dot-product attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..complex import CombinatorialComplex, NeighborhoodSpec, neighborhood
from ..errors import DimensionMismatch
from ..families import TransportFamily, make_family
from ..nn import Linear, Module, make_rng
from .message_passing import _make_update


def _pairs(x: Tensor, n_t: int, n_s: int, target_side: bool) -> Tensor:
    """Expand ``(B, n, c)`` to ``(B, n_t, n_s, c)`` along the target or source axis."""
    B, _, c = x.shape
    if target_side:
        return ad.broadcast_to(ad.reshape(x, (B, n_t, 1, c)), (B, n_t, n_s, c))
    return ad.broadcast_to(ad.reshape(x, (B, 1, n_s, c)), (B, n_t, n_s, c))


def transported_attention(family: TransportFamily, A: Tensor, V: Tensor, qc: Tensor, kc: Tensor) -> Tensor:
    """``m_x = sum_y A_xy rho(qc_x, kc_y) v_y`` for ``A (B, nt, ns)``, ``V (B, ns, dv)``.

    Uses the family's structure to avoid materializing per-pair matrices when
    it can. ``qc`` and ``kc`` are the conditioning inputs, ``(B, nt, c)`` and
    ``(B, ns, c)``.
    """
    B, nt, ns = A.shape
    dv = V.shape[-1]
    s = family.structure
    base = ad.matmul(A, V)
    if s == "identity":
        return base
    if s == "outer":
        u, w = family.factors(qc, kc)
        c = ad.reshape(ad.tsum(w * V, axis=-1), (B, ns, 1))
        t = ad.matmul(A, c)
        return u * ad.broadcast_to(t, (B, nt, dv))
    if s == "query":
        Rq = family.query_matrix(qc)
        return ad.reshape(ad.matmul(Rq, ad.reshape(base, (B, nt, dv, 1))), (B, nt, dv))
    Q = _pairs(qc, nt, ns, True)
    K = _pairs(kc, nt, ns, False)
    if s == "scalar":
        return ad.matmul(A * family.scalar(Q, K), V)
    Vp = _pairs(V, nt, ns, False)
    Ap = ad.broadcast_to(ad.reshape(A, (B, nt, ns, 1)), (B, nt, ns, dv))
    if s == "diagonal":
        return ad.tsum(Ap * family.diagonal(Q, K) * Vp, axis=2)
    Vc = ad.reshape(Vp, (B, nt, ns, dv, 1))
    if s == "residual":
        dV = ad.reshape(ad.matmul(family.delta(Q, K), Vc), (B, nt, ns, dv))
        return base + ad.tsum(Ap * dV, axis=2)
    RV = ad.reshape(ad.matmul(family.matrix(Q, K), Vc), (B, nt, ns, dv))
    return ad.tsum(Ap * RV, axis=2)


class CopresheafAttention(Module):
    """Multi-head copresheaf attention from sources of width ``d_s`` into targets of width ``d_t``.

    ``wiring="full"``: every head carries a ``d_t``-wide value and a
    ``d_t x d_t`` transport; heads are concatenated and mixed back to ``d_t``.
    ``wiring="split"``: head values are ``d_t / heads`` wide, as in standard
    multi-head attention. ``condition="qk"`` feeds the head's queries and keys
    to the family, ``"h"`` feeds the raw target and source features.
    """

    def __init__(
        self,
        d_t: int,
        d_s: int | None = None,
        heads: int = 1,
        head_dim: int | None = None,
        family: str = "constant-identity",
        family_options: dict | None = None,
        wiring: str = "split",
        condition: str = "qk",
        update: str = "residual-mlp",
        hidden: int | None = None,
        rng=None,
        family_rng=None,
    ):
        rng = rng if rng is not None else make_rng(0)
        family_rng = family_rng if family_rng is not None else rng
        d_s = d_t if d_s is None else d_s
        if wiring not in ("full", "split"):
            raise ValueError(f"unknown wiring {wiring!r}")
        if wiring == "split" and d_t % heads:
            raise DimensionMismatch(f"model width {d_t} not divisible by {heads} heads")
        self.d_t, self.d_s, self.heads, self.wiring, self.condition = d_t, d_s, heads, wiring, condition
        self.dv = d_t if wiring == "full" else d_t // heads
        self.p = head_dim or self.dv
        self.wq = [Linear(d_t, self.p, rng, bias=False) for _ in range(heads)]
        self.wk = [Linear(d_s, self.p, rng, bias=False) for _ in range(heads)]
        self.wv = [Linear(d_s, self.dv, rng, bias=False) for _ in range(heads)]
        self.wo = Linear(heads * self.dv, d_t, rng, bias=False) if heads > 1 else None
        self.update_kind = update
        self._update, self.update_net = _make_update(update, d_t, d_t, d_t, hidden or 2 * d_t, rng)
        cond = self.p if condition == "qk" else d_t
        if condition == "h" and d_s != d_t:
            raise DimensionMismatch("conditioning on raw features needs equal source and target widths")
        self.families = [
            make_family(family, self.dv, cond_dim=cond, rng=family_rng, **(family_options or {}))
            for _ in range(heads)
        ]
        self.family_kind = family
        self.last_attention: list[np.ndarray] = []
        self.last_empty: np.ndarray = np.zeros(0, dtype=bool)

    def message(self, h_t: Tensor, h_s: Tensor, mask=None) -> Tensor:
        h_t, h_s = ad.as_tensor(h_t), ad.as_tensor(h_s)
        if h_t.ndim != 3 or h_s.ndim != 3 or h_t.shape[0] != h_s.shape[0]:
            raise DimensionMismatch(f"expected (batch, cells, width) inputs, got {h_t.shape} and {h_s.shape}")
        if h_t.shape[-1] != self.d_t or h_s.shape[-1] != self.d_s:
            raise DimensionMismatch(f"widths {h_t.shape[-1]}, {h_s.shape[-1]} != {self.d_t}, {self.d_s}")
        B, nt, _ = h_t.shape
        ns = h_s.shape[1]
        if mask is None:
            mask = np.ones((B, nt, ns), dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape == (nt, ns):
                mask = np.broadcast_to(mask, (B, nt, ns))
            if mask.shape != (B, nt, ns):
                raise DimensionMismatch(f"mask shape {mask.shape} does not match {(B, nt, ns)}")
        self.last_empty = ~mask.any(axis=-1)
        self.last_attention = []
        outs = []
        scale = 1.0 / math.sqrt(self.p)
        for wq, wk, wv, fam in zip(self.wq, self.wk, self.wv, self.families):
            q, k, v = wq(h_t), wk(h_s), wv(h_s)
            S = ad.matmul(q, ad.transpose(k)) * scale
            A = ad.softmax(S, axis=-1, mask=mask)
            self.last_attention.append(A.data)
            qc, kc = (q, k) if self.condition == "qk" else (h_t, h_s)
            outs.append(transported_attention(fam, A, v, qc, kc))
        m = outs[0] if self.wo is None else self.wo(ad.concat(outs, axis=-1))
        return m

    def forward(self, h_t: Tensor, h_s: Tensor | None = None, mask=None) -> Tensor:
        h_t = ad.as_tensor(h_t)
        h_s = h_t if h_s is None else h_s
        return self._update(h_t, self.message(h_t, h_s, mask))


def self_attention_forward(layer: CopresheafAttention, h: Tensor, mask=None) -> Tensor:
    return layer(h, h, mask)


def cross_attention_forward(layer: CopresheafAttention, h_src: Tensor, h_tgt: Tensor, mask=None) -> Tensor:
    return layer(h_tgt, h_src, mask)


def neighborhood_mask(cc: CombinatorialComplex, spec: NeighborhoodSpec | None, targets: Sequence[int], sources: Sequence[int]) -> np.ndarray:
    """``mask[i, j]`` true iff ``sources[j]`` is a neighbor of ``targets[i]``; ``None`` means all pairs."""
    if spec is None:
        return np.ones((len(targets), len(sources)), dtype=bool)
    spos = {s: j for j, s in enumerate(sources)}
    M = np.zeros((len(targets), len(sources)), dtype=bool)
    for i, t in enumerate(targets):
        for s in neighborhood(cc, spec, t):
            if s in spos:
                M[i, spos[s]] = True
    return M


@dataclass
class TransformerConfig:
    """Self-attention per rank and cross-attention per ordered rank pair.

    ``self_attention[r] = (layer, spec)``; ``cross_attention`` is a list of
    ``(source_rank, target_rank, layer, spec)``. A ``None`` spec is full
    attention among the involved cells.
    """

    self_attention: dict = field(default_factory=dict)
    cross_attention: list = field(default_factory=list)


class CopresheafTransformerLayer(Module):
    def __init__(self, config: TransformerConfig):
        self.self_layers = {r: lay for r, (lay, _) in config.self_attention.items()}
        self.self_specs = {r: spec for r, (_, spec) in config.self_attention.items()}
        self.cross_layers = [c[2] for c in config.cross_attention]
        self.cross = [(c[0], c[1], c[3]) for c in config.cross_attention]

    def forward(self, cc: CombinatorialComplex, h: dict) -> dict:
        """``h[r]`` is ``(1, n_r, d_r)`` with rows in ``cc.cells_of_rank(r)`` order."""
        out = dict(h)
        # first loop: self-attention within each rank on the input features
        for r in sorted(self.self_layers):
            cells = cc.cells_of_rank(r)
            mask = neighborhood_mask(cc, self.self_specs[r], cells, cells)
            out[r] = self.self_layers[r](h[r], h[r], mask)
        # second loop: cross-attention pairs in declared order on the updated features
        for (s, t, spec), lay in zip(self.cross, self.cross_layers):
            mask = neighborhood_mask(cc, spec, cc.cells_of_rank(t), cc.cells_of_rank(s))
            out[t] = lay(out[t], out[s], mask)
        return out


def transformer_layer_forward(layer: CopresheafTransformerLayer, cc: CombinatorialComplex, h: dict) -> dict:
    return layer(cc, h)
