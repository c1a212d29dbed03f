"""Combinatorial complexes, neighborhood functions and induced digraphs."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ComplexError,
    DuplicateCell,
    NeighborOutsideZ,
    RankMismatch,
    RankMonotonicityViolation,
    SingletonRankNonzero,
    UnknownCell,
)

MAX_CELLS = 10_000


@dataclass(frozen=True)
class Cell:
    id: int
    vertices: tuple[int, ...]
    rank: int

    def __contains__(self, v):
        return v in self.vertices

    def issubset(self, other: "Cell") -> bool:
        return set(self.vertices) <= set(other.vertices)


class CombinatorialComplex:
    """A finite ranked family of vertex sets.

    Cells are ordered by ``(rank, sorted vertex tuple)`` and their ids are
    positions in that order. The complex is immutable once built.
    """

    def __init__(self, vertex_count: int, cells: Sequence[Cell]):
        self.vertex_count = vertex_count
        self.cells: tuple[Cell, ...] = tuple(cells)
        self._by_vertices = {c.vertices: c.id for c in self.cells}
        rank_index: dict[int, list[int]] = {}
        for c in self.cells:
            rank_index.setdefault(c.rank, []).append(c.id)
        self.rank_index = {r: tuple(ids) for r, ids in sorted(rank_index.items())}
        # vertex -> ids of cells containing it, used for superset queries
        self._containing: list[set[int]] = [set() for _ in range(vertex_count)]
        for c in self.cells:
            for v in c.vertices:
                self._containing[v].add(c.id)

    def __len__(self):
        return len(self.cells)

    def __repr__(self):
        counts = {r: len(ids) for r, ids in self.rank_index.items()}
        return f"CombinatorialComplex(vertices={self.vertex_count}, cells_per_rank={counts})"

    @property
    def dim(self) -> int:
        return max(self.rank_index) if self.rank_index else -1

    def cells_of_rank(self, r: int) -> tuple[int, ...]:
        return self.rank_index.get(r, ())

    def rank(self, cell_id: int) -> int:
        return self.cell(cell_id).rank

    def cell(self, cell_id: int) -> Cell:
        if not 0 <= cell_id < len(self.cells):
            raise UnknownCell(f"no cell with id {cell_id}")
        return self.cells[cell_id]

    def find(self, vertices: Iterable[int]) -> int:
        key = tuple(sorted(set(vertices)))
        try:
            return self._by_vertices[key]
        except KeyError:
            raise UnknownCell(f"no cell with vertices {key}") from None

    def supersets(self, cell_id: int) -> list[int]:
        """Ids of cells strictly containing the given cell, ascending."""
        verts = self.cell(cell_id).vertices
        common = set.intersection(*(self._containing[v] for v in verts))
        common.discard(cell_id)
        return sorted(common)

    def subsets(self, cell_id: int) -> list[int]:
        """Ids of cells strictly contained in the given cell, ascending."""
        verts = set(self.cell(cell_id).vertices)
        candidates = set().union(*(self._containing[v] for v in verts))
        out = [i for i in candidates if i != cell_id and set(self.cells[i].vertices) <= verts]
        return sorted(out)

    def check(self) -> None:
        """Re-validate the rank conditions; raises on violation."""
        _validate(self.cells, self._containing)

    # serialization

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertex_count,
            "cells": [{"v": list(c.vertices), "rank": c.rank} for c in self.cells],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CombinatorialComplex":
        specs = [(c["v"], c["rank"]) for c in doc["cells"]]
        return build_complex(specs, vertex_count=doc.get("vertices"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CombinatorialComplex":
        return cls.from_dict(json.loads(text))


def _validate(cells: Sequence[Cell], containing: list[set[int]]) -> None:
    for c in cells:
        if len(c.vertices) == 1 and c.rank != 0:
            raise SingletonRankNonzero(f"singleton {c.vertices} has rank {c.rank}")
    for x in cells:
        sup = set.intersection(*(containing[v] for v in x.vertices))
        for yid in sup:
            y = cells[yid]
            if y.id != x.id and x.rank > y.rank:
                raise RankMonotonicityViolation(
                    f"{x.vertices} (rank {x.rank}) is contained in {y.vertices} (rank {y.rank})"
                )


def build_complex(cell_specs: Iterable[tuple[Iterable[int], int]], vertex_count: int | None = None) -> CombinatorialComplex:
    """Validate ``(vertex-set, rank)`` pairs and build a complex.

    ``vertex_count`` defaults to one more than the largest vertex id seen.
    """
    normalized: list[tuple[tuple[int, ...], int]] = []
    seen: dict[tuple[int, ...], int] = {}
    for verts, rank in cell_specs:
        key = tuple(sorted(set(int(v) for v in verts)))
        if not key:
            raise ComplexError("cells must be non-empty")
        if key[0] < 0:
            raise ComplexError(f"negative vertex id in {key}")
        rank = int(rank)
        if rank < 0:
            raise ComplexError(f"negative rank {rank} for {key}")
        if key in seen:
            raise DuplicateCell(f"cell {key} listed twice (ranks {seen[key]} and {rank})")
        seen[key] = rank
        normalized.append((key, rank))

    n = max((k[-1] for k, _ in normalized), default=-1) + 1
    if vertex_count is None:
        vertex_count = n
    elif vertex_count < n:
        raise ComplexError(f"vertex id {n - 1} out of range for {vertex_count} vertices")
    if len(normalized) > MAX_CELLS:
        warnings.warn(f"complex has {len(normalized)} cells; sizes beyond {MAX_CELLS} are not tuned for")

    normalized.sort(key=lambda kr: (kr[1], kr[0]))
    cells = [Cell(i, k, r) for i, (k, r) in enumerate(normalized)]
    containing: list[set[int]] = [set() for _ in range(vertex_count)]
    for c in cells:
        for v in c.vertices:
            containing[v].add(c.id)
    _validate(cells, containing)
    return CombinatorialComplex(vertex_count, cells)


def graph_complex(num_nodes: int, edges: Iterable[tuple[int, int]], faces: Iterable[Iterable[int]] = ()) -> CombinatorialComplex:
    """Complex with every node as a 0-cell, edges as 1-cells and faces as 2-cells."""
    specs = [((v,), 0) for v in range(num_nodes)]
    specs += [((a, b), 1) for a, b in edges]
    specs += [(tuple(f), 2) for f in faces]
    return build_complex(specs, vertex_count=num_nodes)


# neighborhoods


@dataclass(frozen=True)
class NeighborhoodSpec:
    """``adjacency`` (r, k): r-cells sharing an (r+k)-cell.
    ``incidence`` (r, k): k-cells containing an r-cell (for k < r: k-cells contained in it).
    ``custom``: explicit directed pairs (source, target) of cell ids.
    """

    kind: str
    r: int = 0
    k: int = 1
    edges: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        if self.kind not in ("adjacency", "incidence", "custom"):
            raise ValueError(f"unknown neighborhood kind {self.kind!r}")
        if self.kind == "adjacency" and self.k < 1:
            raise ValueError("adjacency needs k >= 1")
        if self.kind == "incidence" and self.k == self.r:
            raise ValueError("incidence needs k != r")

    @classmethod
    def adjacency(cls, r, k):
        return cls("adjacency", r, k)

    @classmethod
    def incidence(cls, r, k):
        return cls("incidence", r, k)

    @classmethod
    def custom(cls, edges):
        return cls("custom", edges=tuple((int(s), int(t)) for s, t in edges))

    def to_dict(self) -> dict:
        if self.kind == "custom":
            return {"kind": "custom-edge-list", "edges": [list(e) for e in self.edges]}
        return {"kind": self.kind, "r": self.r, "k": self.k}

    @classmethod
    def from_dict(cls, doc: dict) -> "NeighborhoodSpec":
        kind = doc["kind"]
        if kind in ("custom", "custom-edge-list"):
            return cls.custom(doc["edges"])
        return cls(kind, int(doc["r"]), int(doc["k"]))


def neighborhood(cc: CombinatorialComplex, spec: NeighborhoodSpec, x: int) -> list[int]:
    """Neighbors of cell ``x`` under ``spec``, ascending by id."""
    cell = cc.cell(x)
    if spec.kind == "custom":
        return sorted({s for s, t in spec.edges if t == x})
    if cell.rank != spec.r:
        raise RankMismatch(f"cell {x} has rank {cell.rank}, spec expects {spec.r}")
    if spec.kind == "incidence":
        if spec.k > spec.r:
            return [y for y in cc.supersets(x) if cc.cells[y].rank == spec.k]
        return [y for y in cc.subsets(x) if cc.cells[y].rank == spec.k]
    # adjacency through a common (r+k)-cell
    upper = [z for z in cc.supersets(x) if cc.cells[z].rank == spec.r + spec.k]
    out: set[int] = set()
    for z in upper:
        out.update(y for y in cc.subsets(z) if cc.cells[y].rank == spec.r)
    out.discard(x)
    return sorted(out)


def _targets(cc: CombinatorialComplex, spec: NeighborhoodSpec) -> Sequence[int]:
    if spec.kind == "custom":
        return sorted({t for _, t in spec.edges})
    return cc.cells_of_rank(spec.r)


@dataclass(frozen=True)
class InducedDigraph:
    """Directed graph ``y -> x`` for every ``y in N(x)``.

    ``vertices`` are cell ids (effective support plus all neighbors), ascending.
    ``edges`` are ``(source, target)`` pairs sorted by target then source.
    """

    vertices: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_edges(self):
        return len(self.edges)

    def position(self) -> dict[int, int]:
        return {v: i for i, v in enumerate(self.vertices)}

    def index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Source and target positions (into ``vertices``) for every edge."""
        pos = self.position()
        src = np.array([pos[s] for s, _ in self.edges], dtype=np.int64)
        dst = np.array([pos[t] for _, t in self.edges], dtype=np.int64)
        return src, dst

    def in_neighbors(self, x: int) -> list[int]:
        return [s for s, t in self.edges if t == x]

    def reversed(self) -> "InducedDigraph":
        return InducedDigraph(self.vertices, tuple(sorted(((t, s) for s, t in self.edges), key=lambda e: (e[1], e[0]))))

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, int]], vertices: Iterable[int] = ()) -> "InducedDigraph":
        edges = sorted(set((int(s), int(t)) for s, t in edges), key=lambda e: (e[1], e[0]))
        verts = set(vertices)
        for s, t in edges:
            verts.update((s, t))
        return cls(tuple(sorted(verts)), tuple(edges))


def induced_digraph(cc: CombinatorialComplex, spec: NeighborhoodSpec) -> InducedDigraph:
    edges = []
    verts = set()
    for x in _targets(cc, spec):
        cc.cell(x)
        nbrs = neighborhood(cc, spec, x)
        if nbrs:
            verts.add(x)
            verts.update(nbrs)
            edges.extend((y, x) for y in nbrs)
    return InducedDigraph.from_edges(edges, verts)


def neighborhood_matrix(cc: CombinatorialComplex, spec: NeighborhoodSpec, Y: Sequence[int], Z: Sequence[int]) -> np.ndarray:
    """Binary matrix of shape ``(len(Z), len(Y))`` with entry 1 iff ``Z[i] in N(Y[j])``."""
    zpos = {z: i for i, z in enumerate(Z)}
    G = np.zeros((len(Z), len(Y)), dtype=np.int8)
    for j, y in enumerate(Y):
        for z in neighborhood(cc, spec, y):
            if z not in zpos:
                raise NeighborOutsideZ(f"neighbor {z} of {y} is not in Z")
            G[zpos[z], j] = 1
    return G
