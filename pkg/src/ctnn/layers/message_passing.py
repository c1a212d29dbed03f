"""Copresheaf message passing on one digraph, and over several neighborhoods at once."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..complex import CombinatorialComplex, InducedDigraph, NeighborhoodSpec, induced_digraph
from ..copresheaf import CochainField
from ..errors import DimensionMismatch
from ..families import ConstantIdentity, FixedPerEdge, TransportFamily, apply_transport
from ..nn import MLP, Linear, Module, make_rng

# message(h_target, transported, edges) and update(h, m)
MessageFn = Callable[[Tensor, Tensor, Sequence[tuple[int, int]]], Tensor]
UpdateFn = Callable[[Tensor, Tensor], Tensor]


def transport_edges(family: TransportFamily, h: Tensor, src: np.ndarray, dst: np.ndarray, edges) -> Tensor:
    """``rho_{y->x} h_y`` for every edge, with feature families conditioned on ``(h_x, h_y)``."""
    hs = ad.take(h, src, axis=0)
    if isinstance(family, FixedPerEdge):
        R = family.edge_matrices(edges)
        if R.shape[1:] != (family.dim, h.shape[1]):
            raise DimensionMismatch(f"edge maps {R.shape[1:]} do not act on features of width {h.shape[1]}")
        return ad.reshape(ad.matmul(R, ad.reshape(hs, hs.shape + (1,))), (len(edges), family.dim))
    if family.structure == "identity":
        return hs
    hd = ad.take(h, dst, axis=0)
    return apply_transport(family, hd, hs, hs)


def aggregate(msgs: Tensor, dst: np.ndarray, n: int, how: str) -> Tensor:
    m = ad.segment_sum(msgs, dst, n)
    if how == "sum":
        return m
    if how == "mean":
        deg = np.bincount(dst, minlength=n).astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
        return m * np.repeat(inv[:, None], m.shape[1], axis=1)
    raise ValueError(f"unknown aggregator {how!r}")


def _make_update(update, d_in, d_msg, d_out, hidden, rng):
    if callable(update):
        return update, None
    if update == "mlp":
        mlp = MLP([d_in + d_msg, hidden, d_out], rng)
        return (lambda h, m: mlp(ad.concat([h, m], axis=-1))), mlp
    if update == "residual-mlp":
        if d_in != d_out:
            raise DimensionMismatch("residual update needs d_in == d_out")
        mlp = MLP([d_in + d_msg, hidden, d_out], rng)
        return (lambda h, m: h + mlp(ad.concat([h, m], axis=-1))), mlp
    if update == "replace":
        return (lambda h, m: m), None
    if update == "residual":
        return (lambda h, m: h + m), None
    raise ValueError(f"unknown update {update!r}")


class CmpnnLayer(Module):
    """``h'_x = update(h_x, aggregate_{y->x} message(h_x, rho_{y->x} h_y))``.

    ``message`` defaults to the transported neighbor itself; ``update``
    defaults to a one-hidden-layer tanh perceptron on ``[h_x; m_x]``.
    """

    def __init__(
        self,
        family: TransportFamily | None,
        d_in: int,
        d_out: int | None = None,
        message: MessageFn | None = None,
        aggregator: str = "sum",
        update: str | UpdateFn = "mlp",
        hidden: int | None = None,
        rng=None,
        msg_dim: int | None = None,
    ):
        rng = rng if rng is not None else make_rng(0)
        self.family = family if family is not None else ConstantIdentity(d_in)
        self.d_in = d_in
        self.d_out = d_out if d_out is not None else d_in
        self.message = message
        self.aggregator = aggregator
        self.msg_dim = msg_dim if msg_dim is not None else (self.family.dim or d_in)
        self._update, self.update_net = _make_update(update, d_in, self.msg_dim, self.d_out, hidden or 2 * d_in, rng)
        self.last_isolated: list[int] = []

    def messages(self, g: InducedDigraph, h: Tensor) -> Tensor:
        src, dst = g.index_arrays()
        if not g.edges:
            return Tensor(np.zeros((h.shape[0], self.msg_dim)))
        t = transport_edges(self.family, h, src, dst, g.edges)
        if self.message is not None:
            t = self.message(ad.take(h, dst, axis=0), t, g.edges)
        return aggregate(t, dst, h.shape[0], self.aggregator)

    def forward(self, g: InducedDigraph, h: Tensor) -> Tensor:
        """``h`` has one row per digraph vertex, in ``g.vertices`` order."""
        h = ad.as_tensor(h)
        if h.ndim != 2 or h.shape != (g.num_vertices, self.d_in):
            raise DimensionMismatch(f"expected features of shape {(g.num_vertices, self.d_in)}, got {h.shape}")
        _, dst = g.index_arrays()
        indeg = np.bincount(dst, minlength=g.num_vertices)
        self.last_isolated = [g.vertices[i] for i in np.nonzero(indeg == 0)[0]]
        return self._update(h, self.messages(g, h))


def cmpnn_forward(layer: CmpnnLayer, g: InducedDigraph, h: CochainField) -> CochainField:
    X = Tensor(np.stack([h[v] for v in g.vertices])) if g.vertices else Tensor(np.zeros((0, layer.d_in)))
    out = layer(g, X).data
    return CochainField({v: out[i] for i, v in enumerate(g.vertices)})


class HompLayer(Module):
    """Message passing over several neighborhoods sharing a target rank.

    Each neighborhood is ``(spec, family, message)``. Per-neighborhood
    aggregates are concatenated in declared order and mixed by one linear
    map (skipped for a single neighborhood), then passed to ``update``.
    Features are indexed by cell id; the output has one row per target cell.
    """

    def __init__(
        self,
        neighborhoods: Sequence[tuple[NeighborhoodSpec, TransportFamily | None, MessageFn | None]],
        d: int,
        d_out: int | None = None,
        aggregator: str = "sum",
        update: str | UpdateFn = "mlp",
        hidden: int | None = None,
        rng=None,
    ):
        rng = rng if rng is not None else make_rng(0)
        self.specs = [n[0] for n in neighborhoods]
        self.families = [n[1] if n[1] is not None else ConstantIdentity(d) for n in neighborhoods]
        self.messages = [n[2] for n in neighborhoods]
        self.d = d
        self.d_out = d_out if d_out is not None else d
        self.aggregator = aggregator
        k = len(neighborhoods)
        self.combine = Linear(k * d, d, rng, bias=False) if k > 1 else None
        self._update, self.update_net = _make_update(update, d, d, self.d_out, hidden or 2 * d, rng)

    def targets(self, cc: CombinatorialComplex) -> list[int]:
        out = set()
        for s in self.specs:
            if s.kind == "custom":
                out.update(t for _, t in s.edges)
            else:
                out.update(cc.cells_of_rank(s.r))
        return sorted(out)

    def forward(self, cc: CombinatorialComplex, h: Tensor) -> Tensor:
        """``h`` has one row per cell of ``cc`` (by id); returns rows for :meth:`targets`."""
        h = ad.as_tensor(h)
        if h.shape != (len(cc), self.d):
            raise DimensionMismatch(f"expected features of shape {(len(cc), self.d)}, got {h.shape}")
        tg = self.targets(cc)
        tpos = {c: i for i, c in enumerate(tg)}
        aggs = []
        for spec, fam, msg in zip(self.specs, self.families, self.messages):
            g = induced_digraph(cc, spec)
            if not g.edges:
                aggs.append(Tensor(np.zeros((len(tg), self.d))))
                continue
            src = np.array([s for s, _ in g.edges])
            dst_cell = np.array([t for _, t in g.edges])
            t = transport_edges(fam, h, src, dst_cell, g.edges)
            if msg is not None:
                t = msg(ad.take(h, dst_cell, axis=0), t, g.edges)
            dst = np.array([tpos[c] for c in dst_cell])
            aggs.append(aggregate(t, dst, len(tg), self.aggregator))
        m = aggs[0] if self.combine is None else self.combine(ad.concat(aggs, axis=1))
        return self._update(ad.take(h, np.array(tg, dtype=np.int64), axis=0), m)


def homp_forward(layer: HompLayer, cc: CombinatorialComplex, h: CochainField) -> CochainField:
    X = Tensor(np.stack([h[c.id] for c in cc.cells]))
    out = layer(cc, X).data
    return CochainField({c: out[i] for i, c in enumerate(layer.targets(cc))})
