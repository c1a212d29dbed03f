"""Transport discrepancy, its adjoint, energy, the copresheaf Laplacian and diffusion.

Fields are handled internally as flat vectors: vertex blocks concatenated in
digraph vertex order, edge blocks (each of the target's dimension)
concatenated in digraph edge order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .complex import InducedDigraph
from .copresheaf import CochainField, Copresheaf, StalkSpace
from .errors import DimensionMismatch, NonConvergence, SymmetrizationViolation

Edge = tuple[int, int]
KERNEL_CUTOFF = 1e-8
DENSE_LIMIT = 64


class EdgeField:
    """A vector in the target stalk for every directed edge."""

    def __init__(self, values: Mapping[Edge, np.ndarray]):
        self.values = {(int(s), int(t)): np.asarray(v, dtype=np.float64) for (s, t), v in values.items()}

    def __getitem__(self, e):
        return self.values[e]

    def __len__(self):
        return len(self.values)

    def flatten(self, edges: Sequence[Edge]) -> np.ndarray:
        if not edges:
            return np.zeros(0)
        return np.concatenate([self.values[e] for e in edges])


class _Group(NamedTuple):
    edges: np.ndarray  # positions into the edge list
    src: np.ndarray  # (E, d_s) indices into the flat vertex vector
    dst: np.ndarray  # (E, d_t)
    eoff: np.ndarray  # (E, d_t) indices into the flat edge vector
    rho: np.ndarray  # (E, d_t, d_s)
    w: np.ndarray  # (E,)


class TransportOperator:
    """Precomputed index plan for applying ``B``, ``B^T`` and ``L = B^T W B``.

    Edges are grouped by ``(d_target, d_source)`` so every group is one
    batched matrix product; reductions use ``np.add.at``, which accumulates
    in edge order.
    """

    def __init__(self, cp: Copresheaf):
        self.cp = cp
        g = cp.digraph
        dims = cp.stalks.dim
        self.vertices = g.vertices
        self.edges = g.edges
        voff = cp.stalks.offsets()
        self.vdim = cp.stalks.total_dim
        eoffs, acc = [], 0
        for s, t in g.edges:
            eoffs.append(acc)
            acc += dims[t]
        self.edim = acc
        buckets: dict[tuple[int, int], list[int]] = {}
        for i, (s, t) in enumerate(g.edges):
            buckets.setdefault((dims[t], dims[s]), []).append(i)
        self.groups = []
        for (dt, ds), idx in sorted(buckets.items()):
            es = [g.edges[i] for i in idx]
            self.groups.append(
                _Group(
                    np.array(idx),
                    np.array([voff[s] + np.arange(ds) for s, _ in es]).reshape(len(es), ds),
                    np.array([voff[t] + np.arange(dt) for _, t in es]).reshape(len(es), dt),
                    np.array([eoffs[i] + np.arange(dt) for i in idx]).reshape(len(es), dt),
                    np.stack([cp.maps[e] for e in es]),
                    np.array([cp.weights[e] for e in es]),
                )
            )

    # flat-vector primitives

    def B(self, h: np.ndarray) -> np.ndarray:
        out = np.zeros(self.edim)
        for gr in self.groups:
            r = h[gr.dst] - np.einsum("eij,ej->ei", gr.rho, h[gr.src])
            out[gr.eoff] = r
        return out

    def Bt(self, xi: np.ndarray) -> np.ndarray:
        out = np.zeros(self.vdim)
        for gr in self.groups:
            x = xi[gr.eoff]
            np.add.at(out, gr.dst, x)
            np.add.at(out, gr.src, -np.einsum("eij,ei->ej", gr.rho, x))
        return out

    def W(self, xi: np.ndarray) -> np.ndarray:
        out = xi.copy()
        for gr in self.groups:
            out[gr.eoff] = xi[gr.eoff] * gr.w[:, None]
        return out

    def L(self, h: np.ndarray) -> np.ndarray:
        return self.Bt(self.W(self.B(h)))

    def energy(self, h: np.ndarray) -> float:
        r = self.B(h)
        return float(np.dot(self.W(r), r))

    def energy_tensor(self, h: Tensor) -> Tensor:
        """Differentiable energy of a flat field tensor."""
        total = None
        for gr in self.groups:
            E, dt = gr.dst.shape
            ds = gr.src.shape[1]
            ht = ad.reshape(ad.take(h, gr.dst.reshape(-1)), (E, dt))
            hs = ad.reshape(ad.take(h, gr.src.reshape(-1)), (E, ds, 1))
            r = ht - ad.reshape(ad.matmul(Tensor(gr.rho), hs), (E, dt))
            term = ad.tsum(r * r * np.repeat(gr.w[:, None], dt, axis=1))
            total = term if total is None else total + term
        return total if total is not None else ad.tsum(h * 0.0)

    # dense oracles

    def dense_B(self) -> np.ndarray:
        if self.vdim > DENSE_LIMIT:
            raise ValueError(f"dense materialization limited to total dim {DENSE_LIMIT}")
        return np.stack([self.B(e) for e in np.eye(self.vdim)], axis=1) if self.vdim else np.zeros((self.edim, 0))

    def dense_L(self) -> np.ndarray:
        if self.vdim > DENSE_LIMIT:
            raise ValueError(f"dense materialization limited to total dim {DENSE_LIMIT}")
        return np.stack([self.L(e) for e in np.eye(self.vdim)], axis=1) if self.vdim else np.zeros((0, 0))

    # field conversions

    def flat(self, h: CochainField) -> np.ndarray:
        h.check(self.cp.stalks)
        return h.flatten(self.vertices)

    def field(self, vec: np.ndarray) -> CochainField:
        return CochainField.unflatten(vec, self.vertices, self.cp.stalks.dim)

    def edge_field(self, vec: np.ndarray) -> EdgeField:
        dims = self.cp.stalks.dim
        out, i = {}, 0
        for s, t in self.edges:
            out[(s, t)] = vec[i:i + dims[t]].copy()
            i += dims[t]
        return EdgeField(out)

    def flat_edges(self, xi: EdgeField) -> np.ndarray:
        dims = self.cp.stalks.dim
        for s, t in self.edges:
            if (s, t) not in xi.values:
                raise DimensionMismatch(f"edge field has no value on {s}->{t}")
            if xi[(s, t)].shape != (dims[t],):
                raise DimensionMismatch(f"edge {s}->{t}: value shape {xi[(s, t)].shape}, target dim {dims[t]}")
        return xi.flatten(self.edges)


def _op(cp: Copresheaf) -> TransportOperator:
    return cp if isinstance(cp, TransportOperator) else TransportOperator(cp)


def transport_discrepancy(cp: Copresheaf, h: CochainField) -> EdgeField:
    """``h_x - rho_{y->x} h_y`` on every edge ``y -> x``."""
    op = _op(cp)
    return op.edge_field(op.B(op.flat(h)))


def adjoint_apply(cp: Copresheaf, xi: EdgeField) -> CochainField:
    """Incoming edge values minus transposed-transported outgoing ones."""
    op = _op(cp)
    return op.field(op.Bt(op.flat_edges(xi)))


def energy(cp: Copresheaf, h: CochainField) -> float:
    op = _op(cp)
    return op.energy(op.flat(h))


# symmetrization


class SymmetrizedCopresheaf(Copresheaf):
    """A copresheaf closed under edge reversal with transposed maps and shared weights."""

    def __init__(self, cp: Copresheaf, atol: float = 1e-12):
        check_symmetrized(cp, atol)
        super().__init__(cp.stalks, dict(cp.maps), dict(cp.weights))


def check_symmetrized(cp: Copresheaf, atol: float = 1e-12) -> None:
    for s, t in cp.edges:
        if (t, s) not in cp.maps:
            raise SymmetrizationViolation(f"edge {s}->{t} has no reverse edge")
        if not np.allclose(cp.maps[(t, s)], cp.maps[(s, t)].T, rtol=0, atol=atol):
            raise SymmetrizationViolation(f"map on {t}->{s} is not the transpose of {s}->{t}")
        if cp.weights[(t, s)] != cp.weights[(s, t)]:
            raise SymmetrizationViolation(f"weights on {s}->{t} and {t}->{s} differ")


def symmetrize(cp: Copresheaf, atol: float = 1e-12) -> SymmetrizedCopresheaf:
    """Add each missing reverse edge with the transposed map and the same weight.

    Existing reverse edges must already follow that convention.
    """
    maps, weights = dict(cp.maps), dict(cp.weights)
    for s, t in cp.edges:
        if (t, s) not in cp.maps:
            maps[(t, s)] = cp.maps[(s, t)].T.copy()
            weights[(t, s)] = cp.weights[(s, t)]
    g = InducedDigraph.from_edges(maps.keys(), cp.digraph.vertices)
    out = Copresheaf(StalkSpace(g, dict(cp.stalks.dim)), maps, weights)
    return SymmetrizedCopresheaf(out, atol)


def laplacian_apply(scp: SymmetrizedCopresheaf, h: CochainField) -> CochainField:
    """``B^T W B h``.

    Block form at ``x``: sum over in-edges of ``w (h_x - rho h_y)`` plus sum over
    out-edges ``x -> z`` of ``w rho^T (rho h_x - h_z)``.
    """
    if not isinstance(scp, SymmetrizedCopresheaf):
        check_symmetrized(scp)
    op = _op(scp)
    return op.field(op.L(op.flat(h)))


def laplacian_nodewise(cp: Copresheaf, h: CochainField) -> CochainField:
    """In-edge discrepancy sum ``sum_{y->x} w (h_x - rho_{y->x} h_y)`` at each vertex.

    On a symmetrized copresheaf with orthogonal maps this is exactly half of
    :func:`laplacian_apply`; in general it is not symmetric.
    """
    out = {v: np.zeros(cp.stalks.dim[v]) for v in cp.digraph.vertices}
    for s, t in cp.edges:
        out[t] = out[t] + cp.weights[(s, t)] * (h[t] - cp.maps[(s, t)] @ h[s])
    return CochainField(out)


def diffusion_step(scp: SymmetrizedCopresheaf, h: CochainField, eta: float) -> CochainField:
    """``h - eta L h``."""
    if not eta > 0:
        raise ValueError("step size must be positive")
    op = _op(scp)
    v = op.flat(h)
    return op.field(v - eta * op.L(v))


def diffuse(scp: SymmetrizedCopresheaf, h: CochainField, eta: float, steps: int) -> tuple[CochainField, list[float]]:
    """Run ``steps`` diffusion steps; returns the final field and the energy trace (length steps + 1)."""
    op = _op(scp)
    v = op.flat(h)
    trace = [op.energy(v)]
    for _ in range(steps):
        v = v - eta * op.L(v)
        trace.append(op.energy(v))
    return op.field(v), trace


@dataclass(frozen=True)
class SpectralEstimate:
    value: float
    converged: bool
    iterations: int

    def __float__(self):
        return self.value


def spectral_norm_estimate(scp, max_iter: int = 200, tol: float = 1e-8, seed: int = 0) -> SpectralEstimate:
    """Power iteration on ``L``; warns with :class:`NonConvergence` if ``tol`` is not reached."""
    op = _op(scp)
    n = op.vdim
    if n == 0 or not op.edges:
        return SpectralEstimate(0.0, True, 0)
    x = np.random.Generator(np.random.Philox(seed)).standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for it in range(1, max_iter + 1):
        y = op.L(x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return SpectralEstimate(0.0, True, it)
        new = float(np.dot(x, y))
        x = y / ny
        if it > 1 and abs(new - lam) <= tol * abs(new):
            return SpectralEstimate(new, True, it)
        lam = new
    warnings.warn(f"power iteration did not converge in {max_iter} iterations", NonConvergence)
    return SpectralEstimate(lam, False, max_iter)


def kernel_projector(scp, cutoff: float = KERNEL_CUTOFF) -> np.ndarray:
    """Orthogonal projector onto ``ker L`` from a dense symmetric eigensolve."""
    L = _op(scp).dense_L()
    vals, vecs = np.linalg.eigh(0.5 * (L + L.T))
    K = vecs[:, vals < cutoff]
    return K @ K.T


def spectral_report(scp, h: CochainField | None = None, steps: int = 50, seed: int = 0) -> dict:
    """``lambda_max``, a diffusion energy trace at step ``0.9 / lambda_max`` and the kernel dimension."""
    op = _op(scp)
    est = spectral_norm_estimate(op, seed=seed)
    if h is None:
        v = np.random.Generator(np.random.Philox(seed + 1)).standard_normal(op.vdim)
        h = op.field(v)
    if est.value > 0:
        _, trace = diffuse(op.cp, h, 0.9 / est.value, steps)
    else:
        trace = [op.energy(op.flat(h))]
    if op.vdim <= DENSE_LIMIT:
        kdim = int(np.sum(np.linalg.eigvalsh(op.dense_L()) < KERNEL_CUTOFF))
    else:
        kdim = None
    return {"lambda_max": est.value, "converged": est.converged, "energy_trace": trace, "kernel_dim": kdim}


# sheaf bridge


@dataclass
class CellularSheaf:
    """Vertex and edge stalks on an undirected graph with restriction maps ``F[(v, e)]``.

    ``edges[e] = (u, v)``; ``restriction[(v, e)]`` has shape ``(edge_dims[e], vertex_dims[v])``.
    """

    num_vertices: int
    edges: list[tuple[int, int]]
    vertex_dims: list[int]
    edge_dims: list[int]
    restriction: dict[tuple[int, int], np.ndarray]

    def __post_init__(self):
        for e, (u, v) in enumerate(self.edges):
            for x in (u, v):
                if (x, e) not in self.restriction:
                    raise DimensionMismatch(f"missing restriction map for vertex {x} on edge {e}")
                F = np.asarray(self.restriction[(x, e)], dtype=np.float64)
                if F.shape != (self.edge_dims[e], self.vertex_dims[x]):
                    raise DimensionMismatch(f"restriction ({x},{e}) has shape {F.shape}")
                self.restriction[(x, e)] = F

    def laplacian_dense(self) -> np.ndarray:
        off = np.concatenate([[0], np.cumsum(self.vertex_dims)])
        D = np.zeros((off[-1], off[-1]))
        for e, (u, v) in enumerate(self.edges):
            Fu, Fv = self.restriction[(u, e)], self.restriction[(v, e)]
            D[off[u]:off[u + 1], off[u]:off[u + 1]] += Fu.T @ Fu
            D[off[v]:off[v + 1], off[v]:off[v + 1]] += Fv.T @ Fv
            D[off[u]:off[u + 1], off[v]:off[v + 1]] -= Fu.T @ Fv
            D[off[v]:off[v + 1], off[u]:off[u + 1]] -= Fv.T @ Fu
        return D

    def laplacian_block(self, x: int, y: int) -> np.ndarray:
        off = np.concatenate([[0], np.cumsum(self.vertex_dims)])
        return self.laplacian_dense()[off[x]:off[x + 1], off[y]:off[y + 1]]


def sheaf_to_copresheaf(sheaf: CellularSheaf) -> Copresheaf:
    """Bidirected copresheaf with ``rho_{y->x} = F_{x,e}^T F_{y,e}``."""
    maps = {}
    for e, (u, v) in enumerate(sheaf.edges):
        Fu, Fv = sheaf.restriction[(u, e)], sheaf.restriction[(v, e)]
        for y, x, Fy, Fx in ((u, v, Fu, Fv), (v, u, Fv, Fu)):
            m = Fx.T @ Fy
            maps[(y, x)] = maps[(y, x)] + m if (y, x) in maps else m
    g = InducedDigraph.from_edges(maps.keys(), range(sheaf.num_vertices))
    return Copresheaf(StalkSpace(g, {v: sheaf.vertex_dims[v] for v in g.vertices}), maps)


def is_reciprocal(cp: Copresheaf, atol: float = 1e-12) -> bool:
    """True iff every edge has a reverse and ``rho_{x->y} = rho_{y->x}^T``."""
    for s, t in cp.edges:
        r = cp.maps.get((t, s))
        if r is None or r.shape != cp.maps[(s, t)].T.shape:
            return False
        if not np.allclose(r, cp.maps[(s, t)].T, rtol=0, atol=atol):
            return False
    return True


def nsd_update(sheaf: CellularSheaf, H, W1: np.ndarray, W2: np.ndarray) -> np.ndarray:
    """``H - (I_n (x) W2) Delta_F (I_n (x) W1) H`` on the stacked vertex vector.

    ``H`` is ``(n, d)`` (one row per vertex) or a flat ``(n d,)`` vector; the
    result has the same layout.
    """
    d = sheaf.vertex_dims[0]
    if any(k != d for k in sheaf.vertex_dims):
        raise DimensionMismatch("nsd_update needs a uniform vertex stalk dimension")
    W1 = np.asarray(W1, dtype=np.float64)
    W2 = np.asarray(W2, dtype=np.float64)
    if W1.shape != (d, d) or W2.shape != (d, d):
        raise DimensionMismatch(f"W1, W2 must be {d}x{d}")
    H = np.asarray(H, dtype=np.float64)
    n = sheaf.num_vertices
    flat = H.reshape(n * d)
    I = np.eye(n)
    out = flat - np.kron(I, W2) @ sheaf.laplacian_dense() @ np.kron(I, W1) @ flat
    return out.reshape(H.shape)
