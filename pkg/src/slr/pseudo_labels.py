"""Dense pseudo labels from prototype similarities in the learned feature space.

Stages: constrain predictions, pool class and per-object prototypes at feature
resolution, cosine-similarity maps, merge obstacle maps by box, upsample,
temperature softmax, and fill the unlabeled part of the partial labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotations import Box, WeakAnnotations, rasterize_regions
from .partial_labels import ConstraintSets, PartialLabels, build_partial_labels, constraint_sets

NORM_EPS = 1e-12


class ConstraintConsistencyError(ValueError):
    """A pixel where every class is forbidden."""


@dataclass
class Prototypes:
    p_water: np.ndarray | None
    p_sky: np.ndarray | None
    p_static: np.ndarray | None
    p_dyn: list = field(default_factory=list)


@dataclass(frozen=True)
class PseudoLabels:
    y: np.ndarray  # (H, W, 3)
    w: np.ndarray  # (H, W)

    def flip(self) -> "PseudoLabels":
        return PseudoLabels(np.ascontiguousarray(self.y[:, ::-1]), np.ascontiguousarray(self.w[:, ::-1]))


def constrain(probs: np.ndarray, constraints: ConstraintSets) -> np.ndarray:
    forbidden = constraints.stack()
    if forbidden.all(axis=-1).any():
        r, c = np.argwhere(forbidden.all(axis=-1))[0]
        raise ConstraintConsistencyError(f"all classes forbidden at pixel (row {r}, col {c})")
    out = np.where(forbidden, 0.0, probs)
    mass = out.sum(axis=-1, keepdims=True)
    # prediction mass entirely on forbidden classes: spread over the admissible ones
    fallback = (~forbidden) / (~forbidden).sum(axis=-1, keepdims=True)
    safe = np.where(mass > 0, mass, 1.0)
    return np.where(mass > 0, out / safe, fallback)


def area_downsample(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Mean over each (H/h x W/w) block; leading two axes are spatial."""
    h, w = shape
    H, W = arr.shape[:2]
    if H % h or W % w:
        raise ValueError(f"cannot area-downsample {H}x{W} to {h}x{w}")
    fy, fx = H // h, W // w
    return arr.reshape((h, fy, w, fx) + arr.shape[2:]).mean(axis=(1, 3))


def box_cells(box: Box, image_size: tuple[int, int], grid: tuple[int, int]) -> np.ndarray:
    """Feature cells overlapping a pixel box."""
    W, H = image_size
    h, w = grid
    fy, fx = H / h, W / w
    x0, y0, x1, y1 = box
    rows = np.arange(h)
    cols = np.arange(w)
    r_in = (rows * fy < y1) & ((rows + 1) * fy > y0)
    c_in = (cols * fx < x1) & ((cols + 1) * fx > x0)
    return r_in[:, None] & c_in[None, :]


def _pool(features: np.ndarray, mass: np.ndarray) -> np.ndarray | None:
    total = mass.sum()
    if not total > 0:
        return None
    return (features * mass[..., None]).sum(axis=(0, 1)) / total


def compute_prototypes(features: np.ndarray, constrained: np.ndarray, boxes) -> Prototypes:
    """Masked average pooling of features weighted by (downsampled) class probabilities."""
    h, w = features.shape[:2]
    H, W = constrained.shape[:2]
    r = area_downsample(constrained, (h, w))
    box_frac = [area_downsample(_box_mask(b, (W, H)).astype(float), (h, w)) for b in boxes]
    outside = np.ones((h, w))
    if box_frac:
        union = np.zeros((H, W), dtype=bool)
        for b in boxes:
            union |= _box_mask(b, (W, H))
        outside = 1.0 - area_downsample(union.astype(float), (h, w))
    return Prototypes(
        p_water=_pool(features, r[..., 0]),
        p_sky=_pool(features, r[..., 1]),
        p_static=_pool(features, r[..., 2] * outside),
        p_dyn=[_pool(features, r[..., 2] * f) for f in box_frac],
    )


def _box_mask(box: Box, size: tuple[int, int]) -> np.ndarray:
    W, H = size
    m = np.zeros((H, W), dtype=bool)
    x0, y0, x1, y1 = box
    m[max(y0, 0):y1, max(x0, 0):x1] = True
    return m


def cosine_map(features: np.ndarray, proto: np.ndarray | None) -> np.ndarray:
    h, w = features.shape[:2]
    if proto is None:
        return np.full((h, w), -1.0)
    fn = np.linalg.norm(features, axis=-1)
    pn = np.linalg.norm(proto)
    dot = features @ proto
    ok = (fn >= NORM_EPS) & (pn >= NORM_EPS)
    return np.where(ok, dot / np.where(ok, fn * pn, 1.0), 0.0)


def similarity_maps(features: np.ndarray, protos: Prototypes) -> dict:
    return {
        "water": cosine_map(features, protos.p_water),
        "sky": cosine_map(features, protos.p_sky),
        "static": cosine_map(features, protos.p_static),
        "dyn": [cosine_map(features, p) for p in protos.p_dyn],
    }


def merge_obstacle_similarity(s_static: np.ndarray, s_dyn, cells) -> np.ndarray:
    """Per-object maps inside their (feature-grid) boxes, max where boxes overlap, static elsewhere."""
    out = s_static.copy()
    best = np.full(s_static.shape, -np.inf)
    covered = np.zeros(s_static.shape, dtype=bool)
    for s, m in zip(s_dyn, cells):
        best = np.where(m, np.maximum(best, s), best)
        covered |= m
    return np.where(covered, best, out)


def bilinear_upsample(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping (leading two axes spatial)."""
    h, w = arr.shape[:2]
    H, W = shape

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(H, h)
    x0, x1, fx = axis(W, w)
    extra = (None,) * (arr.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def soft_assign(similarities: np.ndarray, beta: float = 20.0) -> np.ndarray:
    """Softmax over the last axis of ``beta * S`` with max subtraction."""
    z = beta * np.asarray(similarities, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def compose_pseudo_labels(p_tilde: np.ndarray, partial: PartialLabels, constraints: ConstraintSets | None,
                          omega_r: float = 0.5) -> PseudoLabels:
    """Keep labeled pixels of the partial labels; fill the rest with (constrained) estimates at weight omega_r."""
    est = constrain(p_tilde, constraints) if constraints is not None else p_tilde
    labeled = partial.w > 0
    y = np.where(labeled[..., None], partial.y, est)
    w = np.where(labeled, partial.w, omega_r)
    return PseudoLabels(y=y, w=w)


def similarity_probabilities(features: np.ndarray, constrained: np.ndarray, boxes, image_size, beta: float) -> np.ndarray:
    """Prototype pooling -> similarities -> obstacle merge -> upsample -> softmax."""
    W, H = image_size
    protos = compute_prototypes(features, constrained, boxes)
    sims = similarity_maps(features, protos)
    grid = features.shape[:2]
    cells = [box_cells(b, image_size, grid) for b in boxes]
    s_o = merge_obstacle_similarity(sims["static"], sims["dyn"], cells)
    s = np.stack([sims["water"], sims["sky"], s_o], axis=-1)
    if grid != (H, W):
        s = bilinear_upsample(s, (H, W))
    return soft_assign(s, beta)


def estimate_pseudo_labels(model, image: np.ndarray, annotations: WeakAnnotations, cfg,
                           partial: PartialLabels | None = None,
                           constraints: ConstraintSets | None = None) -> PseudoLabels:
    """Full estimation for one image.  ``model.predict(image)`` returns (features, probs)."""
    H, W = image.shape[:2]
    if partial is None or constraints is None:
        regions = rasterize_regions(annotations, (W, H))
        constraints = constraint_sets(regions)
        partial = build_partial_labels(regions, cfg.theta, cfg.omega_min, cfg.edge_heuristic, constraints)
    if (partial.w > 0).all():
        return PseudoLabels(y=partial.y.copy(), w=partial.w.copy())
    features, probs = model.predict(image)
    features = np.asarray(features, dtype=float)
    probs = np.asarray(probs, dtype=float)
    r = constrain(probs, constraints) if cfg.constraints_r else probs
    if cfg.feature_clustering:
        p_tilde = similarity_probabilities(features, r, annotations.obstacles, (W, H), cfg.beta)
    else:
        p_tilde = probs
    return compose_pseudo_labels(p_tilde, partial, constraints if cfg.constraints_r else None, cfg.omega_r)
