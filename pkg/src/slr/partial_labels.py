"""Constraint sets and partial labels derived from rasterized weak annotations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .annotations import RegionMasks


@dataclass(frozen=True)
class ConstraintSets:
    """Pixels where water, sky or obstacle respectively cannot appear."""

    c_water: np.ndarray
    c_sky: np.ndarray
    c_obstacle: np.ndarray

    def stack(self) -> np.ndarray:
        """(H, W, 3) boolean, channel order water, sky, obstacle."""
        return np.stack([self.c_water, self.c_sky, self.c_obstacle], axis=-1)

    def flip(self) -> "ConstraintSets":
        return ConstraintSets(*(np.ascontiguousarray(m[:, ::-1]) for m in (self.c_water, self.c_sky, self.c_obstacle)))


@dataclass(frozen=True)
class PartialLabels:
    y: np.ndarray  # (H, W, 3)
    w: np.ndarray  # (H, W)

    @property
    def labeled(self) -> np.ndarray:
        return self.w > 0

    def flip(self) -> "PartialLabels":
        return PartialLabels(np.ascontiguousarray(self.y[:, ::-1]), np.ascontiguousarray(self.w[:, ::-1]))


def constraint_sets(regions: RegionMasks) -> ConstraintSets:
    return ConstraintSets(
        c_water=regions.h_above | regions.w_above,
        c_sky=regions.h_below | regions.w_below,
        c_obstacle=~regions.o & ~regions.w_above,
    )


def edge_distance(regions: RegionMasks) -> np.ndarray:
    """Euclidean pixel distance from each above-edge pixel to the nearest below-edge pixel.

    +inf outside the above-edge region and everywhere when no below-edge pixel exists.
    """
    out = np.full(regions.shape, np.inf)
    if not regions.w_below.any():
        return out
    dist = ndimage.distance_transform_edt(regions.w_above)
    out[regions.w_above] = dist[regions.w_above]
    return out


def edge_band_weight(d, theta: float = 11.0, omega_min: float = 0.005):
    """``exp(-alpha d)`` with ``alpha = -ln(omega_min) / theta``, evaluated per element with libm ``exp``
    so results do not depend on the array length or SIMD path."""
    alpha = -math.log(omega_min) / theta
    d = np.asarray(d, dtype=float)
    return np.array([math.exp(-alpha * v) for v in d.ravel()]).reshape(d.shape)


def build_partial_labels(
    regions: RegionMasks,
    theta: float = 11.0,
    omega_min: float = 0.005,
    edge_heuristic: bool = True,
    constraints: ConstraintSets | None = None,
) -> PartialLabels:
    if theta <= 0 or not 0 < omega_min < 1:
        raise ValueError("need theta > 0 and 0 < omega_min < 1")
    cons = constraints or constraint_sets(regions)
    allowed = ~cons.stack()
    n_allowed = allowed.sum(axis=-1)
    h, w = regions.shape
    y = np.zeros((h, w, 3))
    weights = np.zeros((h, w))

    unambiguous = n_allowed == 1
    y[unambiguous] = allowed[unambiguous].astype(float)
    weights[unambiguous] = 1.0

    if edge_heuristic:
        d = edge_distance(regions)
        band = regions.w_above & (d < theta) & ~unambiguous
        wb = edge_band_weight(d[band], theta, omega_min)
        wb[wb < omega_min] = 0.0
        y[band, 2] = (wb > 0).astype(float)
        weights[band] = wb
    return PartialLabels(y=y, w=weights)
