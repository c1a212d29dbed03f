"""Copresheaf variants of GCN, GraphSAGE and GIN node updates.

Each edge carries ``rho_ij = I + Delta_ij`` conditioned on ``[h_i; h_j]``;
GCN and SAGE use a diagonal ``Delta``, GIN a full one. All three finish with
``(1 + eps) h + h'``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import DimensionMismatch
from ..families import apply_transport, make_family
from ..nn import Module, make_rng

DEFAULT_FAMILY = {"gcn": "sheaf-diag", "sage": "sheaf-diag", "gin": "sheaf-fc"}


class CopresheafGNN(Module):
    def __init__(self, variant: str, d: int, family: str | None = None, family_options=None, eps: float = 0.0, rng=None):
        if variant not in DEFAULT_FAMILY:
            raise ValueError(f"unknown variant {variant!r}")
        rng = rng if rng is not None else make_rng(0)
        self.variant = variant
        self.d = d
        kind = family or DEFAULT_FAMILY[variant]
        opts = dict(family_options or {})
        if kind == "sheaf-fc":
            opts.setdefault("bias", True)
        self.family = make_family(kind, d, cond_dim=d, rng=rng, **opts)
        self.eps = Tensor(np.asarray(float(eps)), trainable=True)
        self.last_isolated: list[int] = []

    def forward(self, n: int, edges: Sequence[tuple[int, int]], h: Tensor) -> Tensor:
        """``edges`` are undirected pairs of a simple graph on ``n`` nodes; ``h`` is ``(n, d)``."""
        h = ad.as_tensor(h)
        if h.shape != (n, self.d):
            raise DimensionMismatch(f"expected features of shape {(n, self.d)}, got {h.shape}")
        und = sorted({(min(a, b), max(a, b)) for a, b in edges if a != b})
        directed = sorted([(a, b) for a, b in und] + [(b, a) for a, b in und], key=lambda e: (e[1], e[0]))
        deg = np.zeros(n)
        for a, b in und:
            deg[a] += 1
            deg[b] += 1
        self.last_isolated = [int(i) for i in np.nonzero(deg == 0)[0]]
        if directed:
            src = np.array([s for s, _ in directed])
            dst = np.array([t for _, t in directed])
            hs = ad.take(h, src, axis=0)
            hd = ad.take(h, dst, axis=0)
            t = apply_transport(self.family, hd, hs, hs)
            if self.variant == "gcn":
                c = 1.0 / np.sqrt(deg[dst] * deg[src])
            else:
                c = 1.0 / deg[dst]
            t = t * np.repeat(c[:, None], self.d, axis=1)
            agg = ad.segment_sum(t, dst, n)
        else:
            agg = Tensor(np.zeros((n, self.d)))
        return (self.eps + 1.0) * h + agg


def copresheaf_gnn_forward(layer: CopresheafGNN, n: int, edges, h: Tensor) -> Tensor:
    return layer(n, edges, h)
