"""Finite-difference gradient checks over ops, layers and the transport energy."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck
from .complex import InducedDigraph, NeighborhoodSpec, graph_complex
from .copresheaf import Copresheaf, StalkSpace
from .laplacian import TransportOperator, symmetrize
from .layers import CmpnnLayer, CopresheafAttention, CopresheafConv, CopresheafGNN, HompLayer
from .families import make_family
from .nn import make_rng

TOLERANCE = 1e-4
EPSILON = 1e-5


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def _ring(n):
    return [(i, (i + 1) % n) for i in range(n)] + [(0, n // 2)]


def _randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


def _against(run, point, rng):
    target = run(point).data + rng.standard_normal(run(point).shape)
    return lambda p: ad.mse_loss(run(p), Tensor(target))


def op_checks(points: int = 10) -> dict[str, float]:
    out = {}
    for name, f, shape in [
        ("tanh-matmul", lambda M: lambda p: ad.tsum(ad.tanh(ad.matmul(p, M))), (4, 3)),
        ("softmax-mask", lambda M: lambda p: ad.tsum(ad.softmax(ad.matmul(p, M), axis=1, mask=np.tril(np.ones((4, 3), bool))) * ad.exp(p * 0.1)[:, :3]), (4, 3)),
        ("sigmoid-outer", lambda M: lambda p: ad.mean(ad.outer(ad.sigmoid(p[0]), p[1]) * M[:3, :3]), (2, 3)),
        ("cross-entropy", lambda M: lambda p: ad.cross_entropy(ad.matmul(p, M), [0, 2, 1, 0]), (4, 3)),
    ]:
        worst = 0.0
        for i in range(points):
            rng = _rng(1000 + i)
            M = Tensor(rng.standard_normal((3, 3)))
            worst = max(worst, gradcheck(f(M), Tensor(rng.standard_normal(shape)), EPSILON))
        out[name] = worst
    return out


def _layer_cases():
    def cmpnn(rng):
        g = InducedDigraph.from_edges([e for a, b in _ring(5) for e in ((a, b), (b, a))], range(5))
        lay = CmpnnLayer(make_family("sheaf-mlp", 3, rng=make_rng(1)), 3, rng=make_rng(2))
        return lay, Tensor(rng.standard_normal((5, 3))), lambda x: lay(g, x)

    def homp(rng):
        cc = graph_complex(4, [(0, 1), (1, 2), (0, 2), (2, 3)], [(0, 1, 2)])
        lay = HompLayer([(NeighborhoodSpec.adjacency(0, 1), make_family("diagonal-mlp", 2, rng=make_rng(1)), None),
                         (NeighborhoodSpec.incidence(0, 1), None, None)], 2, rng=make_rng(2))
        return lay, Tensor(rng.standard_normal((len(cc), 2))), lambda x: lay(cc, x)

    def attention(rng):
        lay = CopresheafAttention(4, heads=2, family="shared-local", rng=make_rng(1))
        return lay, Tensor(rng.standard_normal((1, 4, 4))), lambda x: lay(x)

    def cross(rng):
        lay = CopresheafAttention(3, d_s=2, family="dynamic", rng=make_rng(1))
        src = Tensor(rng.standard_normal((1, 3, 2)))
        return lay, Tensor(rng.standard_normal((1, 4, 3))), lambda x: lay(x, src)

    def conv(rng):
        lay = CopresheafConv((3, 3), 2, 2, family="sheaf-fc", rng=make_rng(1))
        return lay, Tensor(rng.standard_normal((3, 3, 2))), lambda x: lay(x)

    def gnn(variant):
        def build(rng):
            lay = CopresheafGNN(variant, 2, eps=0.1)
            return lay, Tensor(rng.standard_normal((5, 2))), lambda x: lay(5, _ring(5), x)
        return build

    return {"cmpnn": cmpnn, "homp": homp, "attention": attention, "cross-attention": cross, "conv": conv,
            "gcn": gnn("gcn"), "sage": gnn("sage"), "gin": gnn("gin")}


def layer_checks(points: int = 10) -> dict[str, float]:
    out = {}
    for name, build in _layer_cases().items():
        worst = 0.0
        for i in range(points):
            rng = _rng(2000 + i)
            lay, x, run = build(rng)
            _randomize(lay, rng)
            loss = _against(run, x, rng)
            worst = max(worst, gradcheck(loss, x, EPSILON))
            worst = max(worst, gradcheck(lambda _: loss(x), lay.parameters(), EPSILON, max_coords=30, seed=i))
        out[name] = worst
    return out


def energy_checks(points: int = 10) -> dict[str, float]:
    worst = 0.0
    for i in range(points):
        rng = _rng(3000 + i)
        n, d = 5, 2
        g = InducedDigraph.from_edges(_ring(n), range(n))
        cp = Copresheaf(StalkSpace.uniform(g, d), {e: rng.standard_normal((d, d)) for e in g.edges},
                        {e: float(rng.uniform(0.5, 2)) for e in g.edges})
        op = TransportOperator(symmetrize(cp))
        worst = max(worst, gradcheck(lambda h: op.energy_tensor(h) * 0.5, Tensor(rng.standard_normal(n * d)), EPSILON))
    return {"energy": worst}


TARGETS = {"ops": op_checks, "layers": layer_checks, "energy": energy_checks}
