"""Parametric synthetic maritime scenes with exact ground truth.

A flat-water pinhole camera looks at sky, a shoreline (static obstacles) and a
handful of floating objects (dynamic obstacles).  Water texture carries waves,
mirrored reflections, sun glitter and wakes, so models trained on weak labels
meet the same kinds of distractors that make real water hard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .annotations import (
    AnnotationError,
    Box,
    Polyline,
    WeakAnnotations,
    above_mask,
    edge_elevation,
    horizon_from_line,
)
from .config import AnnotationNoise, ConfigError, SceneConfig

WATER, SKY, OBSTACLE = 0, 1, 2
CLASS_NAMES = ("water", "sky", "obstacle")


@dataclass(frozen=True)
class CameraModel:
    height_m: float
    pitch_rad: float
    focal_px: float
    image_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        if self.height_m <= 0 or self.focal_px <= 0:
            raise ConfigError("camera height and focal length must be positive")
        if self.horizon_row >= self.image_size[1]:
            raise ConfigError("camera pitch puts the horizon below the image")

    @property
    def cx(self) -> float:
        return self.image_size[0] / 2

    @property
    def cy(self) -> float:
        return self.image_size[1] / 2

    @property
    def horizon_row(self) -> float:
        return self.cy - self.focal_px * math.tan(self.pitch_rad)

    def ground_distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Distance on the water plane from the camera foot to the backprojection of (x, y).

        Points at or above the horizon map to +inf.
        """
        u = (np.asarray(x, dtype=float) - self.cx) / self.focal_px
        v = (np.asarray(y, dtype=float) - self.cy) / self.focal_px
        cp, sp = math.cos(self.pitch_rad), math.sin(self.pitch_rad)
        down = v * cp + sp
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(down > 1e-12, self.height_m / down, np.inf)
            gx = t * u
            gz = t * (cp - v * sp)
            d = np.hypot(gx, gz)
        return np.where(down > 1e-12, d, np.inf)

    def project_ground(self, lateral_m: float, forward_m: float) -> tuple[float, float, float]:
        """Image position of a water-plane point and the pixels-per-metre scale there."""
        cp, sp = math.cos(self.pitch_rad), math.sin(self.pitch_rad)
        h = self.height_m
        v = (h * cp - forward_m * sp) / (forward_m * cp + h * sp)
        t = h / (v * cp + sp)
        return self.cx + self.focal_px * lateral_m / t, self.cy + self.focal_px * v, self.focal_px / t


@dataclass(frozen=True)
class Obstacle:
    box: Box
    mask: np.ndarray  # full-frame boolean mask


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    gt_labels: np.ndarray  # (H, W) uint8
    horizon_gt: tuple[tuple[float, float], tuple[float, float]]
    water_edge_gt: Polyline
    obstacles_gt: tuple[Obstacle, ...]
    danger_mask: np.ndarray
    camera: CameraModel
    seed: int
    extra_edges: tuple[Polyline, ...] = ()

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[0]

    @property
    def water_edges(self) -> tuple[Polyline, ...]:
        return (self.water_edge_gt,) + self.extra_edges

    def ground_truth_annotations(self) -> WeakAnnotations:
        return WeakAnnotations(self.water_edges, tuple(o.box for o in self.obstacles_gt), self.horizon_gt)


def camera_from_config(cfg: SceneConfig) -> CameraModel:
    return CameraModel(cfg.camera_height_m, cfg.camera_pitch_rad, cfg.focal_px, (cfg.width, cfg.height))


def danger_zone_mask(camera: CameraModel, radius_m: float = 15.0) -> np.ndarray:
    w, h = camera.image_size
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    return camera.ground_distance(xs, ys) < radius_m


def tight_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


# --- geometry helpers ---------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], cell: int) -> np.ndarray:
    """Bilinearly upsampled uniform noise in [-1, 1]."""
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(-1, 1, size=(gh, gw))
    ys = (np.arange(h) + 0.5) / cell
    xs = (np.arange(w) + 0.5) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy


def _polygon_mask(poly: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test for pixel centres."""
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (ys >= min(y1, y2)) & (ys < max(y1, y2))
        xint = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < xint)
    return inside


_PALETTE = np.array([
    [0.95, 0.95, 0.93],  # white hull
    [0.85, 0.20, 0.15],  # red
    [0.95, 0.55, 0.10],  # orange
    [0.95, 0.85, 0.20],  # yellow
    [0.25, 0.25, 0.28],  # dark grey
    [0.55, 0.40, 0.30],  # wood
])


def _object_colour(rng: np.random.Generator, water_rgb: np.ndarray) -> np.ndarray:
    if rng.random() < 0.2:
        # water-like paint: the hard case for colour-only cues
        base = water_rgb + rng.uniform(-0.12, 0.12, 3)
    else:
        base = _PALETTE[rng.integers(len(_PALETTE))] + rng.uniform(-0.05, 0.05, 3)
    return np.clip(base, 0, 1)


def _obstacle_parts(rng, kind, cx, base_y, scale):
    """Polygons (in pixels) for one object sitting on the water at (cx, base_y)."""
    parts = []
    if kind == "boat":
        wm = rng.uniform(2.0, 6.0) * scale
        hh = rng.uniform(0.5, 1.2) * scale
        parts.append(np.array([[cx - wm / 2, base_y - hh], [cx + wm / 2, base_y - hh],
                               [cx + 0.35 * wm, base_y], [cx - 0.35 * wm, base_y]]))
        cw = wm * rng.uniform(0.3, 0.6)
        ch = rng.uniform(0.5, 1.5) * scale
        off = rng.uniform(-0.2, 0.2) * wm
        parts.append(np.array([[cx + off - cw / 2, base_y - hh - ch], [cx + off + cw / 2, base_y - hh - ch],
                               [cx + off + cw / 2, base_y - hh], [cx + off - cw / 2, base_y - hh]]))
    elif kind == "sail":
        wm = rng.uniform(2.0, 4.0) * scale
        hh = rng.uniform(0.4, 0.8) * scale
        parts.append(np.array([[cx - wm / 2, base_y - hh], [cx + wm / 2, base_y - hh],
                               [cx + 0.3 * wm, base_y], [cx - 0.3 * wm, base_y]]))
        sh = rng.uniform(2.0, 4.5) * scale
        parts.append(np.array([[cx - 0.05 * wm, base_y - hh - sh], [cx + 0.4 * wm, base_y - hh],
                               [cx - 0.35 * wm, base_y - hh]]))
    else:
        if kind == "buoy":
            rx = rng.uniform(0.4, 0.9) * scale
            ry = rx * rng.uniform(1.0, 1.5)
        else:  # swimmer / debris
            rx = rng.uniform(0.4, 0.8) * scale
            ry = rng.uniform(0.25, 0.45) * scale
        t = np.linspace(0, 2 * np.pi, 24, endpoint=False)
        parts.append(np.stack([cx + rx * np.cos(t), base_y - ry + ry * np.sin(t)], axis=1))
    return parts


# --- generation -----------------------------------------------------------

def _water_edge(rng: np.random.Generator, cfg: SceneConfig, horizon_row: float) -> Polyline:
    w = cfg.width
    n = max(w // 8, 2) + 1
    xs = np.linspace(0.0, float(w), n)
    base = rng.uniform(0.0, 4.0)
    walk = np.cumsum(rng.uniform(-1.5, 1.5, n))
    offs = np.clip(base + walk - walk.mean(), 0.0, 8.0)
    if rng.random() < 0.4:
        # a stretch of open sea where the edge coincides with the horizon
        a = rng.integers(0, n - 1)
        b = min(n, a + rng.integers(2, max(3, n // 2)))
        offs[a:b] = 0.0
    return tuple((float(x), float(horizon_row + o)) for x, o in zip(xs, offs))


def generate_scene(seed: int, cfg: SceneConfig) -> Scene:
    cfg.validate()
    camera = camera_from_config(cfg)
    w, h = cfg.width, cfg.height
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    y_h = camera.horizon_row

    edge = _water_edge(rng, cfg, y_h)
    extra: tuple[Polyline, ...] = ()
    edges = (edge,)
    if cfg.multi_edge:
        # two disjoint shorelines; the skipped middle vertex leaves a gap
        mid = len(edge) // 2
        edges = (edge[:mid], edge[mid + 1:])
        edge, extra = edges[0], (edges[1],)
    elev = edge_elevation(edges, w)
    water = ~above_mask(elev, h)

    # shoreline: static obstacles between a skyline and the water edge
    shore_h = np.clip(6 + 6 * _smooth_noise(rng, (1, w), 16)[0], 0, None)
    shore_h = shore_h * (elev - y_h > 0.5) + shore_h * (elev - y_h <= 0.5) * (rng.random() < 0.5)
    bumps = np.zeros(w)
    for _ in range(rng.integers(0, 4)):
        a = rng.integers(0, w)
        bumps[a:a + rng.integers(2, 8)] += rng.uniform(2, 8)
    skyline = elev - shore_h - bumps * (shore_h > 0)
    static = above_mask(elev, h) & ~above_mask(skyline, h)

    labels = np.full((h, w), SKY, dtype=np.uint8)
    labels[static] = OBSTACLE
    labels[water] = WATER

    # palette for this scene
    water_rgb = np.clip(np.array([0.15, 0.35, 0.50]) + rng.uniform(-0.1, 0.1, 3), 0, 1)
    sky_top = np.clip(np.array([0.45, 0.65, 0.90]) + rng.uniform(-0.1, 0.1, 3), 0, 1)
    sky_hor = np.clip(np.array([0.80, 0.85, 0.90]) + rng.uniform(-0.08, 0.08, 3), 0, 1)
    shore_rgb = np.clip(np.array([0.30, 0.40, 0.22]) + rng.uniform(-0.12, 0.12, 3), 0, 1)

    # dynamic obstacles, placed on the water plane far-to-near without overlap
    n_obj = int(rng.integers(cfg.min_obstacles, cfg.max_obstacles + 1))
    objects: list[tuple[float, np.ndarray, list, list]] = []
    occupied = np.zeros((h, w), dtype=bool)
    attempts = 0
    while len(objects) < n_obj and attempts < 40 * max(n_obj, 1):
        attempts += 1
        forward = float(np.exp(rng.uniform(np.log(4.0), np.log(40.0))))
        u = rng.uniform(0.05, 0.95)
        kind = ("boat", "sail", "buoy", "swimmer")[rng.choice(4, p=[0.45, 0.2, 0.2, 0.15])]
        cols = [_object_colour(rng, water_rgb) for _ in range(2)]
        # lateral position chosen so the object lands at image fraction u
        bx, by, scale = camera.project_ground(0.0, forward)
        cx = u * w
        if by >= h - 1 or by <= y_h:
            continue
        parts = _obstacle_parts(rng, kind, cx, by, scale)
        masks = [_polygon_mask(p, xs, ys) for p in parts]
        mask = np.logical_or.reduce(masks)
        col = min(max(int(cx), 0), w - 1)
        if by <= elev[col] + 1.0:
            continue
        if mask.sum() < cfg.min_obstacle_area:
            continue
        grown = mask.copy()
        grown[1:] |= mask[:-1]
        grown[:-1] |= mask[1:]
        grown[:, 1:] |= mask[:, :-1]
        grown[:, :-1] |= mask[:, 1:]
        if (grown & occupied).any():
            continue
        occupied |= mask
        objects.append((by, mask, masks, cols))
    objects.sort(key=lambda o: o[0])

    # --- rendering (random draws are independent of the amplitude settings)
    img = np.zeros((h, w, 3))
    t_sky = np.clip((ys - 0) / max(y_h, 1.0), 0, 1)[..., None]
    clouds = _smooth_noise(rng, (h, w), 8)[..., None]
    img[:] = sky_top * (1 - t_sky) + sky_hor * t_sky + 0.06 * clouds

    shore_tex = _smooth_noise(rng, (h, w), 3)[..., None]
    shore_img = shore_rgb + 0.08 * shore_tex
    n_build = rng.integers(0, 4)
    for _ in range(n_build):
        bx0 = rng.integers(0, w)
        bw = rng.integers(2, 7)
        bh = rng.uniform(2, 6)
        bcol = np.clip(rng.uniform(0.3, 0.9, 3), 0, 1)
        region = (xs >= bx0) & (xs < bx0 + bw) & (ys >= elev[None, :] - bh)
        shore_img = np.where(region[..., None], bcol, shore_img)
    img = np.where(static[..., None], shore_img, img)

    depth = np.clip((ys - y_h) / max(h - y_h, 1.0), 0, 1)[..., None]
    phase = rng.uniform(0, 2 * np.pi, 3)
    wave = (np.sin(xs * 0.9 + ys * (3.0 - 2.0 * depth[..., 0]) + phase[0])
            * np.sin(xs * 0.31 + phase[1])) * (0.5 + 0.5 * depth[..., 0])
    water_img = water_rgb * (0.85 + 0.25 * depth) + 0.035 * wave[..., None]

    # reflections mirror content above a contact line into the water below it
    refl = np.zeros((h, w, 3))
    refl_w = np.zeros((h, w))
    shift = np.round(1.2 * np.sin(ys * 1.7 + phase[2])).astype(int)
    col_idx = np.clip(np.arange(w)[None, :] + shift, 0, w - 1)
    src_img = img.copy()
    mirror = np.floor(2 * elev[None, :] - ys).astype(int)
    ok = water & (mirror >= 0) & (mirror < h)
    mr = np.clip(mirror, 0, h - 1)
    hit = ok & static[mr, col_idx]
    decay = np.exp(-(ys - elev[None, :]) / 6.0)
    refl[hit] = src_img[mr[hit], col_idx[hit]]
    refl_w[hit] = 0.6 * decay[hit]
    for by, mask, masks, cols in objects:
        obj_rgb = np.zeros((h, w, 3))
        for m, c in zip(masks, cols):
            obj_rgb[m] = c
        mirror = np.floor(2 * by - ys).astype(int)
        mr = np.clip(mirror, 0, h - 1)
        hit = water & (ys > by) & (mirror >= 0) & mask[mr, col_idx] & ~occupied
        refl[hit] = obj_rgb[mr[hit], col_idx[hit]]
        refl_w[hit] = 0.75 * np.exp(-(ys[hit] - by) / 10.0)
    water_img = water_img * (1 - (cfg.reflection_amp * refl_w)[..., None]) + refl * (cfg.reflection_amp * refl_w)[..., None]

    # sun glitter: sparse bright specks concentrated in a vertical band
    band_x = rng.uniform(0.2, 0.8) * w
    band = np.exp(-((xs - band_x) / (0.18 * w)) ** 2)
    speck = rng.random((h, w)) < 0.08 * band
    glitter = speck * rng.uniform(0.5, 1.0, (h, w))
    water_img = water_img + (cfg.glitter_amp * glitter)[..., None] * (1.0 - water_img)

    # wakes: foam streaks trailing from objects at their waterline
    wake = np.zeros((h, w))
    for by, mask, masks, cols in objects:
        x_cols = np.flatnonzero(mask.any(axis=0))
        side = rng.choice([-1, 1])
        length = rng.uniform(1.0, 2.5) * len(x_cols)
        start = x_cols[-1] + 1 if side > 0 else x_cols[0]
        dist = (xs - start) * side
        spread = 0.5 + 0.15 * np.clip(dist, 0, None)
        streak = (dist >= 0) & (dist < length) & (np.abs(ys - by) < spread)
        wake = np.maximum(wake, streak * rng.uniform(0.5, 0.9) * np.exp(-np.clip(dist, 0, None) / length))
    wake = wake * ~occupied
    water_img = water_img + (cfg.wake_amp * wake)[..., None] * (0.95 - water_img)

    img = np.where(water[..., None], water_img, img)
    for by, mask, masks, cols in objects:
        shade = 0.9 + 0.1 * _smooth_noise(rng, (h, w), 2)[..., None]
        for m, c in zip(masks, cols):
            img = np.where(m[..., None], c * shade, img)
        labels[mask] = OBSTACLE

    pix_noise = rng.normal(0.0, 1.0, (h, w, 3))
    img = np.clip(img + 0.04 * cfg.noise_amp * pix_noise, 0.0, 1.0)

    obstacles = tuple(Obstacle(tight_box(mask), mask) for _, mask, _, _ in objects)
    danger = danger_zone_mask(camera) & (ys > y_h)
    return Scene(
        image=img,
        gt_labels=labels,
        horizon_gt=((0.0, float(y_h)), (float(w), float(y_h))),
        water_edge_gt=edge,
        obstacles_gt=obstacles,
        danger_mask=danger,
        camera=camera,
        seed=int(seed),
        extra_edges=extra,
    )


# --- weak annotations ------------------------------------------------------

def derive_weak_annotations(scene: Scene, noise: AnnotationNoise, rng: np.random.Generator | int) -> WeakAnnotations:
    """Simulated annotator output: jittered edge vertices, loosened boxes, IMU horizon error."""
    noise.validate()
    rng = np.random.default_rng(rng)
    w, h = scene.size
    (_, hy0), (_, hy1) = scene.horizon_gt
    dy = rng.uniform(-1, 1) * noise.horizon_jitter_px
    da = rng.uniform(-1, 1) * noise.horizon_jitter_rad
    y_left = hy0 + dy - da * w / 2
    y_right = hy1 + dy + da * w / 2
    if noise.horizon_jitter_px == 0 and noise.horizon_jitter_rad == 0:
        horizon = scene.horizon_gt
    else:
        horizon = horizon_from_line(y_left, y_right, w, h)

    edges = []
    for line in scene.water_edges:
        jit = rng.uniform(-1, 1, len(line)) * noise.edge_jitter_px
        new = []
        for (x, y), j in zip(line, jit):
            y_new = y + j
            if j != 0:
                # a jittered edge vertex never rises above the jittered horizon
                hz = y_left + (y_right - y_left) * x / w
                y_new = max(y_new, hz, y - noise.edge_jitter_px)
                y_new = min(y_new, y + noise.edge_jitter_px)
            new.append((x, y_new))
        edges.append(tuple(new))

    boxes = []
    for ob in scene.obstacles_gt:
        x0, y0, x1, y1 = ob.box
        grow = noise.box_dilation_px + rng.integers(0, noise.box_jitter_px + 1, 4)
        boxes.append((max(0, x0 - int(grow[0])), max(0, y0 - int(grow[1])),
                      min(w, x1 + int(grow[2])), min(h, y1 + int(grow[3]))))
    ann = WeakAnnotations(tuple(edges), tuple(boxes), horizon)
    try:
        ann.validate(scene.size)
    except AnnotationError as exc:  # pragma: no cover - generator bug guard
        raise AnnotationError(f"scene {scene.seed}: {exc}") from None
    return ann


# --- augmentation ----------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    gain: np.ndarray
    offset: np.ndarray

    def apply_image(self, image: np.ndarray) -> np.ndarray:
        out = image[:, ::-1] if self.flip else image
        return np.clip(out * self.gain + self.offset, 0.0, 1.0)

    def apply_map(self, arr: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(arr[:, ::-1]) if self.flip else arr


def sample_augmentation(seed: int, cfg: SceneConfig) -> AugmentParams:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < cfg.flip_prob)
    gain = 1.0 + rng.uniform(-1, 1, 3) * cfg.color_jitter
    offset = rng.uniform(-0.5, 0.5, 3) * cfg.color_jitter
    return AugmentParams(flip, gain, offset)


def flip_polyline(line: Polyline, width: int) -> Polyline:
    return tuple((width - x, y) for x, y in reversed(line))


def flip_box(box: Box, width: int) -> Box:
    x0, y0, x1, y1 = box
    return (width - x1, y0, width - x0, y1)


def flip_annotations(ann: WeakAnnotations, width: int) -> WeakAnnotations:
    (x0, y0), (x1, y1) = ann.horizon
    return WeakAnnotations(
        tuple(flip_polyline(line, width) for line in ann.water_edges),
        tuple(flip_box(b, width) for b in ann.obstacles),
        tuple(sorted(((width - x0, y0), (width - x1, y1)))),
    )


def flip_scene(scene: Scene) -> Scene:
    w = scene.size[0]
    (hx0, hy0), (hx1, hy1) = scene.horizon_gt
    obstacles = tuple(Obstacle(flip_box(o.box, w), np.ascontiguousarray(o.mask[:, ::-1])) for o in scene.obstacles_gt)
    return replace(
        scene,
        image=np.ascontiguousarray(scene.image[:, ::-1]),
        gt_labels=np.ascontiguousarray(scene.gt_labels[:, ::-1]),
        horizon_gt=tuple(sorted(((w - hx0, hy0), (w - hx1, hy1)))),
        water_edge_gt=flip_polyline(scene.water_edge_gt, w),
        extra_edges=tuple(flip_polyline(e, w) for e in scene.extra_edges),
        obstacles_gt=obstacles,
        danger_mask=np.ascontiguousarray(scene.danger_mask[:, ::-1]),
    )


def augment(scene: Scene, seed: int, cfg: SceneConfig | None = None) -> Scene:
    """Random horizontal flip plus channel-wise colour jitter."""
    params = sample_augmentation(seed, cfg or SceneConfig())
    out = flip_scene(scene) if params.flip else scene
    return replace(out, image=np.clip(out.image * params.gain + params.offset, 0.0, 1.0))


# --- planted features -----------------------------------------------------

def plant_features(labels: np.ndarray, dim: int = 16, sigma: float = 0.05,
                   rng: np.random.Generator | int = 0) -> np.ndarray:
    """Per-class orthogonal one-hot embeddings plus Gaussian noise, one vector per pixel."""
    rng = np.random.default_rng(rng)
    emb = np.eye(dim)[: len(CLASS_NAMES)]
    return emb[labels] + rng.normal(0.0, sigma, labels.shape + (dim,))
