"""The two small worked complexes used across tests."""

import numpy as np

from ctnn.complex import NeighborhoodSpec, build_complex
from ctnn.families import FixedPerEdge

A, B, C, D = 0, 1, 2, 3


def two_triangles():
    cells = [((v,), 0) for v in (A, B, C, D)]
    cells += [((A, B), 1), ((B, C), 1), ((C, A), 1), ((D, B), 1), ((C, D), 1)]
    cells += [((A, B, C), 2), ((D, B, C), 2)]
    return build_complex(cells)


def edge_order(cc):
    """Cell ids of e1..e5 in the worked example's order."""
    return [cc.find(e) for e in ((A, B), (B, C), (C, A), (D, B), (C, D))]


EDGE_VIA_FACE = NeighborhoodSpec.adjacency(1, 1)


def triangle_maps(cc):
    e = edge_order(cc)
    diag = lambda a, b: np.diag([a, b])
    I = np.eye(2)
    table = {
        (e[1], e[0]): diag(1, 0.8), (e[2], e[0]): diag(1, 0.6),
        (e[0], e[1]): diag(1, 0.8), (e[2], e[1]): diag(1, 0.8), (e[3], e[1]): I, (e[4], e[1]): diag(1, 0.6),
        (e[0], e[2]): diag(1, 0.6), (e[1], e[2]): diag(1, 0.8),
        (e[1], e[3]): I, (e[4], e[3]): diag(1, 0.7),
        (e[1], e[4]): diag(1, 0.6), (e[3], e[4]): diag(1, 0.7),
    }
    return FixedPerEdge(table, 2)


def abc():
    return build_complex([((A,), 0), ((B,), 0), ((C,), 0), ((A, B), 1), ((B, C), 1)])


INC01 = NeighborhoodSpec.incidence(0, 1)


def abc_maps(cc):
    a, b, c = cc.find([A]), cc.find([B]), cc.find([C])
    ab, bc = cc.find([A, B]), cc.find([B, C])
    table = {
        (ab, a): np.diag([1.0, 0.5]),
        (ab, b): np.eye(2),
        (bc, b): np.eye(2),
        (bc, c): np.diag([1.0, 0.75]),
    }
    return FixedPerEdge(table, 2)
