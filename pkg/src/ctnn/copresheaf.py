"""Stalks, transport maps on a digraph, cochain fields and copresheaf neighborhood matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .complex import CombinatorialComplex, InducedDigraph, NeighborhoodSpec, induced_digraph, neighborhood
from .errors import DimensionMismatch, NeighborOutsideZ, NonPositiveWeight
from .families import FixedPerEdge, TransportFamily

Edge = tuple[int, int]


@dataclass(frozen=True)
class StalkSpace:
    digraph: InducedDigraph
    dim: Mapping[int, int]

    def __post_init__(self):
        for v in self.digraph.vertices:
            if self.dim.get(v, 0) < 1:
                raise DimensionMismatch(f"vertex {v} needs a stalk dimension >= 1")

    @classmethod
    def uniform(cls, digraph: InducedDigraph, d: int) -> "StalkSpace":
        return cls(digraph, {v: d for v in digraph.vertices})

    def offsets(self) -> dict[int, int]:
        """Start index of each vertex's block in the flattened field, in vertex order."""
        out, acc = {}, 0
        for v in self.digraph.vertices:
            out[v] = acc
            acc += self.dim[v]
        return out

    @property
    def total_dim(self) -> int:
        return sum(self.dim[v] for v in self.digraph.vertices)


class CochainField:
    """A vector per cell, keyed by cell id."""

    def __init__(self, values: Mapping[int, np.ndarray]):
        self.values = {int(k): np.asarray(v, dtype=np.float64) for k, v in values.items()}

    def __getitem__(self, cell):
        return self.values[cell]

    def __contains__(self, cell):
        return cell in self.values

    def __iter__(self):
        return iter(sorted(self.values))

    def __len__(self):
        return len(self.values)

    def check(self, stalks: StalkSpace, cells: Sequence[int] | None = None):
        for c in stalks.digraph.vertices if cells is None else cells:
            if c not in self.values:
                raise DimensionMismatch(f"field has no value at cell {c}")
            if self.values[c].shape != (stalks.dim[c],):
                raise DimensionMismatch(f"cell {c}: value shape {self.values[c].shape}, stalk dim {stalks.dim[c]}")

    def flatten(self, order: Sequence[int]) -> np.ndarray:
        if not order:
            return np.zeros(0)
        return np.concatenate([self.values[c] for c in order])

    @classmethod
    def unflatten(cls, vec: np.ndarray, order: Sequence[int], dims: Mapping[int, int]) -> "CochainField":
        out, i = {}, 0
        for c in order:
            out[c] = np.array(vec[i:i + dims[c]])
            i += dims[c]
        if i != len(vec):
            raise DimensionMismatch(f"vector of length {len(vec)} does not match total dim {i}")
        return cls(out)

    @classmethod
    def zeros(cls, stalks: StalkSpace) -> "CochainField":
        return cls({v: np.zeros(stalks.dim[v]) for v in stalks.digraph.vertices})

    def allclose(self, other: "CochainField", atol=0.0) -> bool:
        return set(self.values) == set(other.values) and all(
            np.allclose(self.values[c], other.values[c], rtol=0, atol=atol) for c in self.values
        )


@dataclass
class Copresheaf:
    """Concrete transport maps ``rho[(y, x)] : F(y) -> F(x)`` and positive weights per edge."""

    stalks: StalkSpace
    maps: dict[Edge, np.ndarray]
    weights: dict[Edge, float] = field(default_factory=dict)

    def __post_init__(self):
        self.maps = {(int(s), int(t)): np.asarray(m, dtype=np.float64) for (s, t), m in self.maps.items()}
        for e in self.digraph.edges:
            if e not in self.maps:
                raise DimensionMismatch(f"no transport map for edge {e[0]}->{e[1]}")
            s, t = e
            want = (self.stalks.dim[t], self.stalks.dim[s])
            if self.maps[e].shape != want:
                raise DimensionMismatch(f"edge {s}->{t}: map shape {self.maps[e].shape}, expected {want}")
        for e in self.digraph.edges:
            w = float(self.weights.get(e, 1.0))
            if not w > 0:
                raise NonPositiveWeight(f"edge {e[0]}->{e[1]} has weight {w}")
            self.weights[e] = w

    @property
    def digraph(self) -> InducedDigraph:
        return self.stalks.digraph

    @property
    def edges(self) -> tuple[Edge, ...]:
        return self.digraph.edges

    def rho(self, src: int, dst: int) -> np.ndarray:
        return self.maps[(src, dst)]

    @classmethod
    def from_fixed(cls, digraph: InducedDigraph, family: FixedPerEdge, dims: Mapping[int, int] | int, weights=None):
        stalks = StalkSpace.uniform(digraph, dims) if isinstance(dims, int) else StalkSpace(digraph, dims)
        return cls(stalks, {e: family.edge_matrix(*e) for e in digraph.edges}, dict(weights or {}))

    @classmethod
    def from_family(cls, digraph: InducedDigraph, family: TransportFamily, features: "CochainField", weights=None):
        """Evaluate a feature-conditioned family on ``(h_target, h_source)`` for every edge."""
        stalks = StalkSpace.uniform(digraph, family.dim)
        maps = {}
        if isinstance(family, FixedPerEdge):
            return cls.from_fixed(digraph, family, family.dim, weights)
        if digraph.edges:
            q = np.stack([features[t] for _, t in digraph.edges])
            k = np.stack([features[s] for s, _ in digraph.edges])
            mats = family.matrix(Tensor(q), Tensor(k)).data
            maps = {e: mats[i].copy() for i, e in enumerate(digraph.edges)}
        return cls(stalks, maps, dict(weights or {}))


# block matrices


class BlockMatrix:
    """Block-sparse matrix stored row-major by target; absent blocks are zero.

    ``rows`` are target cells (the ``Y`` ordering), ``cols`` source cells
    (the ``Z`` ordering). Block ``(i, j)`` maps ``F(cols[j])`` into ``F(rows[i])``.
    """

    def __init__(self, rows: Sequence[int], cols: Sequence[int], row_dims, col_dims, blocks: Mapping[tuple[int, int], np.ndarray]):
        self.rows = tuple(rows)
        self.cols = tuple(cols)
        self.row_dims = tuple(row_dims)
        self.col_dims = tuple(col_dims)
        ordered = sorted(blocks.items())
        self.row_ptr = np.zeros(len(self.rows) + 1, dtype=np.int64)
        self.col_idx = np.array([j for (_, j), _ in ordered], dtype=np.int64)
        self.blocks = [np.asarray(b, dtype=np.float64) for _, b in ordered]
        for (i, j), b in ordered:
            if b.shape != (self.row_dims[i], self.col_dims[j]):
                raise DimensionMismatch(f"block ({i},{j}) has shape {b.shape}")
            self.row_ptr[i + 1] += 1
        self.row_ptr = np.cumsum(self.row_ptr)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.rows), len(self.cols)

    def block(self, i: int, j: int) -> np.ndarray | None:
        for p in range(self.row_ptr[i], self.row_ptr[i + 1]):
            if self.col_idx[p] == j:
                return self.blocks[p]
        return None

    def items(self):
        for i in range(len(self.rows)):
            for p in range(self.row_ptr[i], self.row_ptr[i + 1]):
                yield (i, int(self.col_idx[p])), self.blocks[p]

    def support(self) -> np.ndarray:
        S = np.zeros(self.shape, dtype=np.int8)
        for (i, j), _ in self.items():
            S[i, j] = 1
        return S

    def to_dense(self) -> np.ndarray:
        ro = np.concatenate([[0], np.cumsum(self.row_dims)])
        co = np.concatenate([[0], np.cumsum(self.col_dims)])
        D = np.zeros((ro[-1], co[-1]))
        for (i, j), b in self.items():
            D[ro[i]:ro[i + 1], co[j]:co[j + 1]] = b
        return D


def assemble_cnm(
    cp: Copresheaf,
    spec: NeighborhoodSpec,
    cc: CombinatorialComplex,
    Y: Sequence[int],
    Z: Sequence[int],
    dims: Mapping[int, int] | None = None,
) -> BlockMatrix:
    """Blocks ``rho_{z_j -> y_i}`` wherever ``z_j`` is a neighbor of ``y_i``.

    ``dims`` supplies block sizes for cells outside the digraph (cells with no
    neighbor relation at all); it defaults to the copresheaf's stalks.
    """
    zpos = {z: j for j, z in enumerate(Z)}
    blocks = {}
    for i, y in enumerate(Y):
        for z in neighborhood(cc, spec, y):
            if z not in zpos:
                raise NeighborOutsideZ(f"neighbor {z} of {y} is not in Z")
            blocks[(i, zpos[z])] = cp.rho(z, y)
    d = dict(dims or {})
    d.update(cp.stalks.dim)
    try:
        return BlockMatrix(Y, Z, [d[y] for y in Y], [d[z] for z in Z], blocks)
    except KeyError as e:
        raise DimensionMismatch(f"no stalk dimension for cell {e.args[0]}") from None


def apply_cnm(cnm: BlockMatrix, field: CochainField) -> CochainField:
    """``y_i`` receives the sum over ``j`` (ascending) of block ``(i, j)`` times ``h_{z_j}``."""
    out = {}
    for i, y in enumerate(cnm.rows):
        acc = np.zeros(cnm.row_dims[i])
        for p in range(cnm.row_ptr[i], cnm.row_ptr[i + 1]):
            j = int(cnm.col_idx[p])
            z = cnm.cols[j]
            hz = field[z]
            if hz.shape != (cnm.col_dims[j],):
                raise DimensionMismatch(f"cell {z}: value shape {hz.shape}, block expects {cnm.col_dims[j]}")
            acc = acc + cnm.blocks[p] @ hz
        out[y] = acc
    return CochainField(out)


def _copresheaf_for(cc, spec, family, features, dim) -> Copresheaf:
    g = induced_digraph(cc, spec)
    if isinstance(family, FixedPerEdge):
        return Copresheaf.from_fixed(g, family, dim)
    return Copresheaf.from_family(g, family, features)


def cam(cc: CombinatorialComplex, r: int, k: int, family: TransportFamily, features: CochainField | None = None, dim: int | None = None) -> BlockMatrix:
    """Copresheaf adjacency matrix over the rank-``r`` cells through shared rank-``r+k`` cells."""
    spec = NeighborhoodSpec.adjacency(r, k)
    cells = cc.cells_of_rank(r)
    d = dim or family.dim
    cp = _copresheaf_for(cc, spec, family, features, d)
    return assemble_cnm(cp, spec, cc, cells, cells, dims={c: d for c in cells})


def cim(cc: CombinatorialComplex, r: int, k: int, family: TransportFamily, features: CochainField | None = None, dim: int | None = None) -> BlockMatrix:
    """Copresheaf incidence matrix: rank-``r`` targets receive from rank-``k`` sources."""
    spec = NeighborhoodSpec.incidence(r, k)
    d = dim or family.dim
    cp = _copresheaf_for(cc, spec, family, features, d)
    Y, Z = cc.cells_of_rank(r), cc.cells_of_rank(k)
    return assemble_cnm(cp, spec, cc, Y, Z, dims={c: d for c in (*Y, *Z)})
