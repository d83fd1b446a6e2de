"""Weak annotations (water edges, obstacle boxes, horizon) and their rasterization.

Image coordinates are continuous: pixel ``(col, row)`` covers
``[col, col + 1) x [row, row + 1)`` and its centre sits at ``(col + .5, row + .5)``.
Boxes are integer pixel edges ``(x_min, y_min, x_max, y_max)`` covering columns
``x_min .. x_max - 1`` and rows ``y_min .. y_max - 1``.  Arrays are indexed
``[row, col]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

Point = tuple[float, float]
Polyline = tuple[Point, ...]
Box = tuple[int, int, int, int]


class AnnotationError(ValueError):
    """Annotation violates an invariant or cannot be parsed."""


@dataclass(frozen=True)
class WeakAnnotations:
    water_edges: tuple[Polyline, ...]
    obstacles: tuple[Box, ...]
    horizon: tuple[Point, Point]

    def __post_init__(self):
        edges = tuple(tuple((float(x), float(y)) for x, y in line) for line in self.water_edges)
        boxes = tuple(tuple(int(v) for v in b) for b in self.obstacles)
        (hx0, hy0), (hx1, hy1) = self.horizon
        object.__setattr__(self, "water_edges", edges)
        object.__setattr__(self, "obstacles", boxes)
        object.__setattr__(self, "horizon", ((float(hx0), float(hy0)), (float(hx1), float(hy1))))
        for i, line in enumerate(edges):
            if len(line) < 2:
                raise AnnotationError(f"water_edges[{i}]: needs at least 2 vertices")
            xs = [p[0] for p in line]
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise AnnotationError(f"water_edges[{i}]: x must be strictly increasing")
        for i, b in enumerate(boxes):
            if len(b) != 4:
                raise AnnotationError(f"obstacles[{i}]: expected 4 integers")
            if b[2] <= b[0] or b[3] <= b[1]:
                raise AnnotationError(f"obstacles[{i}]: box {b} has non-positive area")
        if hx0 == hx1:
            raise AnnotationError("horizon: endpoints must differ in x")

    def validate(self, size: tuple[int, int]) -> None:
        """Check the size-dependent invariants (boxes inside, horizon on border)."""
        w, h = size
        for i, (x0, y0, x1, y1) in enumerate(self.obstacles):
            if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                raise AnnotationError(f"obstacles[{i}]: box outside {w}x{h} image")
        for x, y in self.horizon:
            if not (np.isclose(x, 0) or np.isclose(x, w) or np.isclose(y, 0) or np.isclose(y, h)):
                raise AnnotationError(f"horizon endpoint {(x, y)} not on the image border")


@dataclass(frozen=True)
class RegionMasks:
    h_above: np.ndarray
    h_below: np.ndarray
    w_above: np.ndarray
    w_below: np.ndarray
    o: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.o.shape

    def flip(self) -> "RegionMasks":
        return RegionMasks(*(np.ascontiguousarray(m[:, ::-1]) for m in
                             (self.h_above, self.h_below, self.w_above, self.w_below, self.o)))


def polyline_elevation(line: Polyline, xs: np.ndarray) -> np.ndarray:
    """Linear interpolation of a polyline; constant extension past its ends."""
    px = np.array([p[0] for p in line])
    py = np.array([p[1] for p in line])
    return np.interp(xs, px, py)


def edge_elevation(edges: tuple[Polyline, ...], width: int) -> np.ndarray:
    """Per-column water-edge elevation (row coordinate) evaluated at column centres.

    Inside any polyline's x-span the lowest (largest-y) covering polyline wins;
    columns outside every span take the elevation of the nearest endpoint.
    """
    xs = np.arange(width) + 0.5
    if not edges:
        return np.full(width, -np.inf)
    elev = np.full(width, -np.inf)
    covered = np.zeros(width, dtype=bool)
    for line in edges:
        inside = (xs >= line[0][0]) & (xs <= line[-1][0])
        e = polyline_elevation(line, xs)
        elev = np.where(inside, np.maximum(elev, e), elev)
        covered |= inside
    if not covered.all():
        ends = [(line[0][0], line[0][1]) for line in edges] + [(line[-1][0], line[-1][1]) for line in edges]
        ex = np.array([p[0] for p in ends])
        ey = np.array([p[1] for p in ends])
        for col in np.flatnonzero(~covered):
            elev[col] = ey[np.argmin(np.abs(ex - xs[col]))]
    return elev


def horizon_elevation(horizon: tuple[Point, Point], width: int) -> np.ndarray:
    (x0, y0), (x1, y1) = horizon
    xs = np.arange(width) + 0.5
    return y0 + (y1 - y0) * (xs - x0) / (x1 - x0)


def above_mask(elev: np.ndarray, height: int) -> np.ndarray:
    """Pixels whose centre lies strictly above the per-column elevation."""
    rows = np.arange(height)[:, None] + 0.5
    return rows < elev[None, :]


def boundary_rows(elev: np.ndarray, height: int) -> np.ndarray:
    """First row (per column) that is not strictly above ``elev``, clipped to [0, height]."""
    return np.clip(np.ceil(elev - 0.5), 0, height).astype(int)


def box_mask(box: Box, size: tuple[int, int]) -> np.ndarray:
    w, h = size
    m = np.zeros((h, w), dtype=bool)
    x0, y0, x1, y1 = box
    m[max(y0, 0):min(y1, h), max(x0, 0):min(x1, w)] = True
    return m


def rasterize_regions(ann: WeakAnnotations, size: tuple[int, int]) -> RegionMasks:
    w, h = size
    ann.validate(size)
    w_above = above_mask(edge_elevation(ann.water_edges, w), h)
    h_above = above_mask(horizon_elevation(ann.horizon, w), h)
    o = np.zeros((h, w), dtype=bool)
    for box in ann.obstacles:
        o |= box_mask(box, size)
    return RegionMasks(h_above=h_above, h_below=~h_above, w_above=w_above, w_below=~w_above, o=o)


def horizon_from_line(y_left: float, y_right: float, width: int, height: int) -> tuple[Point, Point]:
    """Clip the line through (0, y_left)-(W, y_right) to border endpoints.

    Lines that never enter the image keep their x = 0 / x = W endpoints.
    """
    slope = (y_right - y_left) / width

    def at_y(y):
        return (y - y_left) / slope if slope else None

    pts: list[Point] = []
    for x, y in ((0.0, y_left), (float(width), y_right)):
        if 0 <= y <= height:
            pts.append((x, y))
    for y in (0.0, float(height)):
        x = at_y(y)
        if x is not None and 0 < x < width:
            pts.append((x, y))
    pts = sorted(set(pts))
    if len(pts) < 2:
        return (0.0, y_left), (float(width), y_right)
    return pts[0], pts[-1]


# --- JSON file format -------------------------------------------------------

def annotations_to_dict(ann: WeakAnnotations) -> dict:
    return {
        "water_edges": [[[x, y] for x, y in line] for line in ann.water_edges],
        "obstacles": [list(b) for b in ann.obstacles],
        "horizon": [list(p) for p in ann.horizon],
    }


def annotations_from_dict(data: dict) -> WeakAnnotations:
    if not isinstance(data, dict):
        raise AnnotationError("annotation file must hold a JSON object")
    for key in ("water_edges", "obstacles", "horizon"):
        if key not in data:
            raise AnnotationError(f"missing required field {key!r}")
    try:
        edges = tuple(tuple((float(p[0]), float(p[1])) for p in line) for line in data["water_edges"])
    except (TypeError, ValueError, IndexError) as exc:
        raise AnnotationError(f"field 'water_edges': {exc}") from None
    boxes = []
    for i, b in enumerate(data["obstacles"]):
        if not isinstance(b, list) or len(b) != 4 or not all(isinstance(v, int) for v in b):
            raise AnnotationError(f"field 'obstacles[{i}]': expected [x_min, y_min, x_max, y_max] integers")
        boxes.append(tuple(b))
    hz = data["horizon"]
    try:
        (hx0, hy0), (hx1, hy1) = hz
        horizon = ((float(hx0), float(hy0)), (float(hx1), float(hy1)))
    except (TypeError, ValueError):
        raise AnnotationError("field 'horizon': expected [[x0, y0], [x1, y1]]") from None
    return WeakAnnotations(water_edges=edges, obstacles=tuple(boxes), horizon=horizon)


def write_annotations(ann: WeakAnnotations, path: str | Path) -> None:
    # repr-exact floats keep the round trip lossless
    Path(path).write_text(json.dumps(annotations_to_dict(ann), indent=1))


def read_annotations(path: str | Path) -> WeakAnnotations:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    try:
        return annotations_from_dict(data)
    except AnnotationError as exc:
        raise AnnotationError(f"{path}: {exc}") from None
