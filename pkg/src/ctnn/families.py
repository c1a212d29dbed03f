"""Transport-map families producing an edge map ``rho(q_x, k_y)`` of shape ``(dim, dim)``.

Every family is evaluated on batches: ``q`` and ``k`` carry matching leading
axes and a trailing conditioning axis of size ``cond_dim``. Families also
expose a ``structure`` tag so layers can aggregate without building full
per-edge matrices when the map has a cheaper form:

``identity``  rho = I
``scalar``    rho = s(q, k) I
``diagonal``  rho = diag(g(q, k))
``outer``     rho = u(q) w(k)^T
``query``     rho = R(q), independent of the source
``residual``  rho = I + Delta(q, k)
``full``      arbitrary matrix
``fixed``     one stored matrix per edge
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatch
from .nn import MLP, Linear, Module, make_rng, uniform_init

FAMILY_KINDS = (
    "general",
    "pre-linear",
    "diagonal-mlp",
    "graph-attention",
    "outer-product",
    "nonlinear-mlp",
    "gaussian-rbf",
    "dynamic",
    "bilinear",
    "sheaf-fc",
    "sheaf-mlp",
    "sheaf-spd",
    "sheaf-diag",
    "shared-local",
    "constant-identity",
    "fixed-matrix-per-edge",
)

SIGMA_FLOOR = 1e-3


def _eye_like(lead, d) -> np.ndarray:
    return np.broadcast_to(np.eye(d), tuple(lead) + (d, d)).copy()


def _expand(x: Tensor, shape) -> Tensor:
    return x if x.shape == tuple(shape) else ad.broadcast_to(x, shape)


class TransportFamily(Module):
    """Base class; subclasses set ``kind`` and ``structure``."""

    kind = "abstract"
    structure = "full"

    def __init__(self, dim: int, cond_dim: int | None = None):
        self.dim = dim
        self.cond_dim = dim if cond_dim is None else cond_dim

    def _check(self, q: Tensor, k: Tensor | None):
        if q.shape[-1] != self.cond_dim or (k is not None and k.shape[-1] != self.cond_dim):
            ks = None if k is None else k.shape
            raise DimensionMismatch(f"{self.kind}: expected conditioning dim {self.cond_dim}, got {q.shape} and {ks}")
        if k is not None and q.shape != k.shape:
            raise DimensionMismatch(f"{self.kind}: q {q.shape} and k {k.shape} must match")

    def matrix(self, q, k) -> Tensor:
        """Full map of shape ``(..., dim, dim)`` for each (q, k) pair."""
        q, k = ad.as_tensor(q), ad.as_tensor(k)
        self._check(q, k)
        return self._matrix(q, k)

    def _matrix(self, q, k) -> Tensor:
        raise NotImplementedError

    def __call__(self, q, k):
        return self.matrix(q, k)

    def spec(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "cond_dim": self.cond_dim}


class ConstantIdentity(TransportFamily):
    kind = "constant-identity"
    structure = "identity"

    def _matrix(self, q, k):
        return Tensor(_eye_like(q.shape[:-1], self.dim))


class _QKLinear(Module):
    """``tanh``-free linear read of ``[q; k]`` reshaped to ``(..., dim, dim)``."""

    def __init__(self, cond_dim, dim, rng, bias, zero):
        self.dim = dim
        self.lin = Linear(2 * cond_dim, dim * dim, rng, bias=bias, zero=zero)

    def forward(self, q, k):
        z = self.lin(ad.concat([q, k], axis=-1))
        return ad.reshape(z, q.shape[:-1] + (self.dim, self.dim))


class General(TransportFamily):
    kind = "general"

    def __init__(self, dim, cond_dim=None, rng=None, bias=False):
        super().__init__(dim, cond_dim)
        self.proj = _QKLinear(self.cond_dim, dim, rng, bias, zero=False)

    def _matrix(self, q, k):
        return ad.tanh(self.proj(q, k))


class PreLinear(TransportFamily):
    kind = "pre-linear"
    structure = "outer"

    def __init__(self, dim, cond_dim=None, rng=None):
        super().__init__(dim, cond_dim)
        if self.cond_dim != dim:
            raise DimensionMismatch("pre-linear needs cond_dim == dim")

    def factors(self, q, k):
        return q, k

    def _matrix(self, q, k):
        return ad.outer(q, k)


class OuterProduct(TransportFamily):
    kind = "outer-product"
    structure = "outer"

    def __init__(self, dim, cond_dim=None, rng=None):
        super().__init__(dim, cond_dim)
        self.wq = Linear(self.cond_dim, dim, rng, bias=False)
        self.wk = Linear(self.cond_dim, dim, rng, bias=False)

    def factors(self, q, k):
        return self.wq(q), self.wk(k)

    def _matrix(self, q, k):
        u, w = self.factors(q, k)
        return ad.outer(u, w)


class DiagonalMLP(TransportFamily):
    kind = "diagonal-mlp"
    structure = "diagonal"

    def __init__(self, dim, cond_dim=None, rng=None, hidden=None):
        super().__init__(dim, cond_dim)
        self.mlp = MLP([2 * self.cond_dim, hidden or 2 * self.cond_dim, dim], rng)

    def diagonal(self, q, k):
        return ad.sigmoid(self.mlp(ad.concat([q, k], axis=-1)))

    def _matrix(self, q, k):
        g = self.diagonal(q, k)
        eye = Tensor(_eye_like(g.shape[:-1], self.dim))
        return ad.broadcast_to(ad.reshape(g, g.shape + (1,)), g.shape + (self.dim,)) * eye


class _ScalarFamily(TransportFamily):
    structure = "scalar"

    def scalar(self, q, k) -> Tensor:
        raise NotImplementedError

    def _matrix(self, q, k):
        s = self.scalar(q, k)
        eye = Tensor(_eye_like(s.shape, self.dim))
        return ad.broadcast_to(ad.reshape(s, s.shape + (1, 1)), s.shape + (self.dim, self.dim)) * eye


class GraphAttention(_ScalarFamily):
    kind = "graph-attention"

    def __init__(self, dim, cond_dim=None, rng=None, hidden=None):
        super().__init__(dim, cond_dim)
        self.mlp = MLP([2 * self.cond_dim, hidden or 2 * self.cond_dim, 1], rng)

    def scalar(self, q, k):
        z = self.mlp(ad.concat([q, k], axis=-1))
        return ad.reshape(ad.sigmoid(z), z.shape[:-1])


class GaussianRBF(_ScalarFamily):
    kind = "gaussian-rbf"

    def __init__(self, dim, cond_dim=None, rng=None, sigma=1.0):
        super().__init__(dim, cond_dim)
        self.sigma = Tensor(np.asarray(float(sigma)), trainable=True)

    def scalar(self, q, k):
        diff = q - k
        sq = ad.tsum(diff * diff, axis=-1)
        s = ad.clamp_min(self.sigma, SIGMA_FLOOR)
        inv = ad.reciprocal(s * s) * -0.5
        return ad.exp(sq * inv)


class Bilinear(_ScalarFamily):
    kind = "bilinear"

    def __init__(self, dim, cond_dim=None, rng=None):
        super().__init__(dim, cond_dim)
        self.B = uniform_init(rng, (self.cond_dim, self.cond_dim), self.cond_dim)

    def scalar(self, q, k):
        lead = q.shape[:-1]
        q2 = ad.reshape(q, (-1, self.cond_dim))
        k2 = ad.reshape(k, (-1, self.cond_dim))
        s = ad.tsum(ad.matmul(q2, self.B) * k2, axis=-1)
        return ad.reshape(s, lead)


class NonlinearMLP(TransportFamily):
    kind = "nonlinear-mlp"

    def __init__(self, dim, cond_dim=None, rng=None, hidden=None):
        super().__init__(dim, cond_dim)
        self.mlp = MLP([2 * self.cond_dim, hidden or 2 * self.cond_dim, dim * dim], rng)

    def _matrix(self, q, k):
        z = self.mlp(ad.concat([q, k], axis=-1))
        return ad.reshape(z, q.shape[:-1] + (self.dim, self.dim))


class Dynamic(TransportFamily):
    kind = "dynamic"
    structure = "query"

    def __init__(self, dim, cond_dim=None, rng=None):
        super().__init__(dim, cond_dim)
        self.wf = Linear(self.cond_dim, dim * dim, rng, bias=False)

    def query_matrix(self, q):
        return ad.reshape(self.wf(q), q.shape[:-1] + (self.dim, self.dim))

    def _matrix(self, q, k):
        return self.query_matrix(q)


class _Residual(TransportFamily):
    """``rho = I + Delta``; layers use ``delta`` so a zero Delta leaves the baseline untouched."""

    structure = "residual"

    def delta(self, q, k) -> Tensor:
        raise NotImplementedError

    def _matrix(self, q, k):
        d = self.delta(q, k)
        return d + Tensor(_eye_like(d.shape[:-2], self.dim))


class SheafFC(_Residual):
    kind = "sheaf-fc"

    def __init__(self, dim, cond_dim=None, rng=None, bias=False):
        super().__init__(dim, cond_dim)
        self.proj = _QKLinear(self.cond_dim, dim, rng, bias, zero=True)

    def delta(self, q, k):
        return ad.tanh(self.proj(q, k))


class SheafMLP(_Residual):
    kind = "sheaf-mlp"

    def __init__(self, dim, cond_dim=None, rng=None, hidden=None):
        super().__init__(dim, cond_dim)
        self.mlp = MLP([2 * self.cond_dim, hidden or 2 * self.cond_dim, dim * dim], rng, zero_last=True)

    def delta(self, q, k):
        z = self.mlp(ad.concat([q, k], axis=-1))
        return ad.tanh(ad.reshape(z, q.shape[:-1] + (self.dim, self.dim)))


class SheafSPD(_Residual):
    """``I + Q Q^T`` with ``Q`` read linearly from ``[q; k]``.

    ``init="zero"`` gives ``rho = I`` exactly, but the gradient of ``Q Q^T``
    vanishes at ``Q = 0``; ``init="uniform"`` makes the family trainable.
    """

    kind = "sheaf-spd"

    def __init__(self, dim, cond_dim=None, rng=None, init="zero"):
        super().__init__(dim, cond_dim)
        self.proj = _QKLinear(self.cond_dim, dim, rng, bias=False, zero=(init == "zero"))

    def delta(self, q, k):
        Q = self.proj(q, k)
        return ad.matmul(Q, ad.transpose(Q))


class SheafDiag(_Residual):
    """``I + diag(tanh(Linear([q; k])))``."""

    kind = "sheaf-diag"

    def __init__(self, dim, cond_dim=None, rng=None, bias=True):
        super().__init__(dim, cond_dim)
        self.lin = Linear(2 * self.cond_dim, dim, rng, bias=bias, zero=True)

    def diag_delta(self, q, k):
        return ad.tanh(self.lin(ad.concat([q, k], axis=-1)))

    def delta(self, q, k):
        g = self.diag_delta(q, k)
        eye = Tensor(_eye_like(g.shape[:-1], self.dim))
        return ad.broadcast_to(ad.reshape(g, g.shape + (1,)), g.shape + (self.dim,)) * eye


class SharedLocal(_Residual):
    """``I + a(q, k) Delta(q, k)`` with a sigmoid gate ``a`` and a tanh matrix ``Delta``."""

    kind = "shared-local"

    def __init__(self, dim, cond_dim=None, rng=None, hidden=None):
        super().__init__(dim, cond_dim)
        h = hidden or 2 * self.cond_dim
        self.delta_mlp = MLP([2 * self.cond_dim, h, dim * dim], rng, zero_last=True)
        self.gate_mlp = MLP([2 * self.cond_dim, h, 1], rng)

    def delta(self, q, k):
        qk = ad.concat([q, k], axis=-1)
        lead = q.shape[:-1]
        D = ad.tanh(ad.reshape(self.delta_mlp(qk), lead + (self.dim, self.dim)))
        a = ad.sigmoid(self.gate_mlp(qk))
        a = ad.broadcast_to(ad.reshape(a, lead + (1, 1)), lead + (self.dim, self.dim))
        return a * D


class FixedPerEdge(TransportFamily):
    """One constant matrix per directed edge ``(src, dst)``; shapes may be rectangular."""

    kind = "fixed-matrix-per-edge"
    structure = "fixed"

    def __init__(self, table: dict, dim: int | None = None):
        self.table = {(int(s), int(t)): np.asarray(m, dtype=np.float64) for (s, t), m in table.items()}
        if dim is None:
            dims = {m.shape[0] for m in self.table.values()}
            dim = dims.pop() if len(dims) == 1 else 0
        super().__init__(dim, 0)

    def edge_matrix(self, src: int, dst: int) -> np.ndarray:
        try:
            return self.table[(src, dst)]
        except KeyError:
            raise KeyError(f"no matrix stored for edge {src}->{dst}") from None

    def edge_matrices(self, edges) -> Tensor:
        mats = [self.edge_matrix(s, t) for s, t in edges]
        if not mats:
            return Tensor(np.zeros((0, self.dim, self.dim)))
        return Tensor(np.stack(mats))

    def matrix(self, q, k):
        raise TypeError("fixed-matrix-per-edge maps are looked up by edge, not by features")

    def to_json(self) -> str:
        edges = [{"src": s, "dst": t, "matrix": m.tolist()} for (s, t), m in sorted(self.table.items())]
        return json.dumps({"edges": edges})

    @classmethod
    def from_json(cls, text: str) -> "FixedPerEdge":
        doc = json.loads(text)
        return cls({(e["src"], e["dst"]): e["matrix"] for e in doc["edges"]})


_REGISTRY = {
    "general": General,
    "pre-linear": PreLinear,
    "diagonal-mlp": DiagonalMLP,
    "graph-attention": GraphAttention,
    "outer-product": OuterProduct,
    "nonlinear-mlp": NonlinearMLP,
    "gaussian-rbf": GaussianRBF,
    "dynamic": Dynamic,
    "bilinear": Bilinear,
    "sheaf-fc": SheafFC,
    "sheaf-mlp": SheafMLP,
    "sheaf-spd": SheafSPD,
    "sheaf-diag": SheafDiag,
    "shared-local": SharedLocal,
    "constant-identity": ConstantIdentity,
}


def make_family(kind: str, dim: int, cond_dim: int | None = None, rng=None, **options) -> TransportFamily:
    """Build a feature-conditioned family by name."""
    if kind == "fixed-matrix-per-edge":
        return FixedPerEdge(options["table"], dim)
    try:
        cls = _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown family {kind!r}; expected one of {FAMILY_KINDS}") from None
    if kind == "constant-identity":
        return cls(dim, cond_dim)
    if rng is None:
        rng = make_rng(0)
    return cls(dim, cond_dim, rng=rng, **options)


def eval_transport(family: TransportFamily, q, k) -> np.ndarray:
    """Evaluate a single map for one (q, k) pair; returns a ``(dim, dim)`` array."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 1 or k.ndim != 1:
        raise DimensionMismatch("eval_transport expects vectors")
    return family.matrix(Tensor(q), Tensor(k)).data.copy()


def apply_transport(family: TransportFamily, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Per-edge ``rho(q_e, k_e) v_e`` for stacked edges, using the family's cheap form.

    ``q``, ``k`` have shape ``(E, cond_dim)`` and ``v`` has shape ``(E, dim)``.
    The residual path returns ``v + Delta v`` so an all-zero Delta returns ``v``
    bit for bit.
    """
    E, d = v.shape
    s = family.structure
    if s == "identity":
        return v
    if s == "scalar":
        g = ad.reshape(family.scalar(q, k), (E, 1))
        return ad.broadcast_to(g, (E, d)) * v
    if s == "diagonal":
        return family.diagonal(q, k) * v
    if s == "outer":
        u, w = family.factors(q, k)
        c = ad.reshape(ad.tsum(w * v, axis=-1), (E, 1))
        return u * ad.broadcast_to(c, (E, d))
    vc = ad.reshape(v, (E, d, 1))
    if s == "residual":
        dv = ad.reshape(ad.matmul(family.delta(q, k), vc), (E, d))
        return v + dv
    return ad.reshape(ad.matmul(family.matrix(q, k), vc), (E, family.dim))
