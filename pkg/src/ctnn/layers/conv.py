"""Copresheaf convolution on a regular D-dimensional grid."""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import ShapeMismatch
from ..families import apply_transport, make_family
from ..nn import Module, make_rng, uniform_init


def grid_offsets(D: int, kind: str = "full", include_center: bool = False) -> list[tuple[int, ...]]:
    """``full``: the ``3^D - 1`` surrounding offsets; ``cross``: the ``2D`` axis neighbors."""
    if kind == "full":
        offs = [o for o in itertools.product((-1, 0, 1), repeat=D) if any(o)]
    elif kind == "cross":
        offs = []
        for a in range(D):
            for s in (-1, 1):
                o = [0] * D
                o[a] = s
                offs.append(tuple(o))
        offs.sort()
    else:
        raise ValueError(f"unknown offset set {kind!r}")
    if include_center:
        offs = sorted(offs + [(0,) * D])
    return offs


def shift_plan(grid: Sequence[int], offset: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Flat source index of ``x + offset`` for every grid point, and a validity mask (zero padding)."""
    coords = np.indices(grid).reshape(len(grid), -1).T
    nb = coords + np.asarray(offset)
    valid = np.all((nb >= 0) & (nb < np.asarray(grid)), axis=1)
    nb = np.where(valid[:, None], nb, 0)
    return np.ravel_multi_index(nb.T, grid), valid


class CopresheafConv(Module):
    """``h'_x = sum_o K_o rho(h_x, h_{x+o}) h_{x+o}`` over an offset set, zero-padded.

    ``rho`` comes from a square family on the input channels, conditioned on
    the raw features of both endpoints. ``kernels=True`` adds one trainable
    ``C_out x C_in`` matrix per offset; without kernels ``C_out`` must equal
    ``C_in``. With the constant-identity family this is a plain
    cross-correlation with kernel ``{K_o}``.
    """

    def __init__(
        self,
        grid: Sequence[int],
        c_in: int,
        c_out: int | None = None,
        offsets: str | Sequence[Sequence[int]] = "full",
        family: str = "constant-identity",
        family_options: dict | None = None,
        kernels: bool = True,
        include_center: bool = False,
        rng=None,
        family_rng=None,
    ):
        rng = rng if rng is not None else make_rng(0)
        family_rng = family_rng if family_rng is not None else rng
        self.grid = tuple(int(g) for g in grid)
        self.c_in = c_in
        self.c_out = c_out if c_out is not None else c_in
        if isinstance(offsets, str):
            offsets = grid_offsets(len(self.grid), offsets, include_center)
        self.offsets = [tuple(int(v) for v in o) for o in offsets]
        if kernels:
            fan_in = c_in * len(self.offsets)
            self.kernels = [uniform_init(rng, (self.c_out, c_in), fan_in) for _ in self.offsets]
        else:
            if self.c_out != c_in:
                raise ShapeMismatch("without kernels the output width must equal the input width")
            self.kernels = None
        self.family = make_family(family, c_in, cond_dim=c_in, rng=family_rng, **(family_options or {}))
        self._plans = [shift_plan(self.grid, o) for o in self.offsets]

    def forward(self, h: Tensor) -> Tensor:
        """``h`` is ``(*grid, C_in)``; returns ``(*grid, C_out)``."""
        h = ad.as_tensor(h)
        if h.shape != self.grid + (self.c_in,):
            raise ShapeMismatch(f"expected field of shape {self.grid + (self.c_in,)}, got {h.shape}")
        N = int(np.prod(self.grid))
        flat = ad.reshape(h, (N, self.c_in))
        out = None
        for i, (idx, valid) in enumerate(self._plans):
            hy = ad.take(flat, idx, axis=0) * np.repeat(valid[:, None].astype(np.float64), self.c_in, axis=1)
            t = apply_transport(self.family, flat, hy, hy)
            if self.kernels is not None:
                t = ad.matmul(t, ad.transpose(self.kernels[i]))
            out = t if out is None else out + t
        if out is None:
            out = Tensor(np.zeros((N, self.c_out)))
        return ad.reshape(out, self.grid + (self.c_out,))


def copresheaf_conv_forward(layer: CopresheafConv, field) -> Tensor:
    return layer(field)


def direct_convolution(field: np.ndarray, kernels: dict[tuple[int, ...], np.ndarray]) -> np.ndarray:
    """Reference loop: ``out[x] = sum_o K_o field[x + o]`` with zero padding."""
    grid = field.shape[:-1]
    c_out = next(iter(kernels.values())).shape[0]
    out = np.zeros(grid + (c_out,))
    for x in itertools.product(*(range(g) for g in grid)):
        acc = np.zeros(c_out)
        for o, K in kernels.items():
            y = tuple(a + b for a, b in zip(x, o))
            if all(0 <= y[i] < grid[i] for i in range(len(grid))):
                acc += K @ field[y]
        out[x] = acc
    return out
