"""Soft spatial attention driven by the recurrent hidden state.

Feature cubes are stored as ``(..., K*K, N)``: location index ``i = row*K + col``
on the last-but-one axis, channels last.  Attention maps are ``(..., K*K)``
probability vectors.  Leading axes (batch, time) pass through unchanged.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError
from .layers import Module, init_params
from .tensor import Tensor

QUADRANT_MASS_FLOOR = 1e-8
ENERGY_EPS = 1e-8


class AttentionParams(Module):
    """Location logits ``W_att @ h``; one row per grid location."""

    def __init__(self, n_locations: int, hidden: int, seed=0):
        super().__init__()
        self.w_att = self.register("w_att", init_params((n_locations, hidden), seed))

    @property
    def n_locations(self) -> int:
        return self.w_att.shape[0]


class PyramidLayout:
    """Full grid plus its four quadrants (TL, TR, BL, BR)."""

    def __init__(self, k: int):
        if k < 2 or k % 2:
            raise ConfigError(f"spatial pyramid needs an even grid side, got K={k}")
        self.k = k
        half = k // 2
        grid = np.arange(k * k).reshape(k, k)
        self.full = grid.ravel()
        self.quadrants = [
            grid[:half, :half].ravel(),
            grid[:half, half:].ravel(),
            grid[half:, :half].ravel(),
            grid[half:, half:].ravel(),
        ]
        self.perm = np.concatenate(self.quadrants)

    @property
    def n_regions(self) -> int:
        return 1 + len(self.quadrants)


def compute_attention(h_prev: Tensor, params: AttentionParams) -> Tensor:
    """softmax(W_att h_{t-1}) over the K*K locations."""
    return tn.softmax(tn.linear(h_prev, params.w_att), axis=-1)


def attend(cube: Tensor, att: Tensor) -> Tensor:
    """Attention-weighted average of location vectors: ``sum_i att_i X_i``."""
    if cube.shape[:-1] != att.shape:
        raise DimensionError(f"attend: cube {cube.shape} does not match attention {att.shape}")
    n = cube.shape[-1]
    weights = tn.reshape(att, att.shape[:-1] + (1, att.shape[-1]))
    out = tn.matmul(weights, cube)
    return tn.reshape(out, att.shape[:-1] + (n,))


def renormalize(x: Tensor, floor: float = QUADRANT_MASS_FLOOR) -> Tensor:
    """Rescale the last axis to unit sum; rows whose mass is below ``floor``
    become uniform (and pass no gradient)."""
    xd = x.data
    mass = xd.sum(axis=-1, keepdims=True)
    dead = mass < floor
    safe = np.where(dead, 1.0, mass)
    m = xd.shape[-1]
    y = np.where(dead, 1.0 / m, xd / safe)

    def grad(g):
        gx = (g - (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(dead, 0.0, gx),)

    return tn.make_op("renormalize", y, (x,), grad)


def pyramid_readout(cube: Tensor, att: Tensor, layout: PyramidLayout) -> Tensor:
    """``[x_full, x_q1, x_q2, x_q3, x_q4]`` of length ``5N``.

    Each quadrant block uses the global map restricted to that quadrant and
    renormalized to unit mass.
    """
    k2 = layout.k * layout.k
    if cube.shape[-2] != k2 or att.shape[-1] != k2:
        raise DimensionError(f"pyramid_readout: layout has {k2} locations, cube {cube.shape}, att {att.shape}")
    lead = att.shape[:-1]
    n = cube.shape[-1]
    q = k2 // 4
    full = attend(cube, att)
    att_q = renormalize(tn.reshape(tn.take(att, layout.perm, axis=-1), lead + (4, q)))
    cube_q = tn.reshape(tn.take(cube, layout.perm, axis=-2), lead + (4, q, n))
    quad = tn.matmul(tn.reshape(att_q, lead + (4, 1, q)), cube_q)
    return tn.concat([full, tn.reshape(quad, lead + (4 * n,))], axis=-1)


def energy_distribution(cube: Tensor, eps: float = ENERGY_EPS) -> Tensor:
    """Per-location channel sum over the total sum (+eps)."""
    per_loc = tn.sum_axis(cube, axis=-1)
    total = tn.shift(tn.sum_axis(per_loc, axis=-1, keepdims=True), eps)
    return tn.div(per_loc, tn.broadcast(total, per_loc.shape))
