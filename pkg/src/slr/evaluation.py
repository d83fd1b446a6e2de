"""Detection-oriented evaluation: water-edge robustness, obstacle Pr/Re/F1 (overall and
inside the danger zone) and segmentation IoU.

Protocol version ``desk-1``: detections are 4-connected obstacle components
below the water edge, matched greedily one-to-one to ground-truth boxes by
descending intersection when the intersection covers at least half of the
smaller of (detection area, box area).  Counts are micro-averaged over frames.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .annotations import Box, Polyline, RegionMasks, boundary_rows, box_mask, edge_elevation
from .scenegen import OBSTACLE, SKY, WATER

PROTOCOL = "desk-1"
AVERAGING = "micro"
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    pixels: np.ndarray  # (N, 2) row, col
    box: Box
    area: int
    centroid: tuple[float, float]  # (x, y) in continuous image coordinates


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def rates(c: Counts) -> tuple[float, float, float]:
    pr = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    re = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * pr * re / (pr + re) if pr + re else 0.0
    return pr, re, f1


@dataclass
class DetectionReport:
    tp: int
    fp: int
    fn: int
    tp_d: int
    fp_d: int
    fn_d: int
    pr: float
    re: float
    f1: float
    pr_d: float
    re_d: float
    f1_d: float
    mu_r: float
    iou_water: float
    iou_sky: float
    iou_obstacle: float
    miou: float
    protocol: str = PROTOCOL
    averaging: str = AVERAGING

    def as_dict(self) -> dict:
        return asdict(self)


def water_edge_robustness(pred_labels: np.ndarray, gt_edge: Polyline | tuple[Polyline, ...], tol_px: float = 20,
                          ignore_boxes=()) -> float:
    """Fraction of edge-covered columns whose predicted water boundary lies within ``tol_px`` rows.

    The predicted boundary in a column is the topmost row of the contiguous
    water run containing the lowest water pixel.  Pixels inside ``ignore_boxes``
    below the true edge count as water, and columns where such a box covers the
    true edge row are skipped (the shoreline is occluded there).
    """
    edges = (gt_edge,) if gt_edge and isinstance(gt_edge[0][0], (int, float)) else tuple(gt_edge)
    h, w = pred_labels.shape
    xs = np.arange(w) + 0.5
    covered = np.zeros(w, dtype=bool)
    for line in edges:
        covered |= (xs >= line[0][0]) & (xs <= line[-1][0])
    gt_rows = boundary_rows(edge_elevation(edges, w), h)
    water = pred_labels == WATER
    below = np.arange(h)[:, None] >= gt_rows[None, :]
    for b in ignore_boxes:
        m = box_mask(b, (w, h))
        water = water | (m & below)
        x0, y0, x1, y1 = b
        occl = (gt_rows >= y0) & (gt_rows < y1)
        covered[max(x0, 0):x1] &= ~occl[max(x0, 0):x1]
    cols = np.flatnonzero(covered)
    if cols.size == 0:
        return 1.0
    correct = 0
    for c in cols:
        col = water[:, c]
        idx = np.flatnonzero(col)
        if idx.size == 0:
            continue
        r = idx[-1]
        while r > 0 and col[r - 1]:
            r -= 1
        if abs(r - gt_rows[c]) <= tol_px:
            correct += 1
    return correct / cols.size


def extract_detections(pred_labels: np.ndarray, regions: RegionMasks | np.ndarray, min_det_area: int = 25) -> list[Detection]:
    below = regions.w_below if isinstance(regions, RegionMasks) else np.asarray(regions, dtype=bool)
    mask = (pred_labels == OBSTACLE) & below
    lab, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    dets = []
    for k in range(1, n + 1):
        pix = np.argwhere(lab == k)
        if len(pix) < min_det_area:
            continue
        r0, c0 = pix.min(0)
        r1, c1 = pix.max(0)
        dets.append(Detection(
            pixels=pix,
            box=(int(c0), int(r0), int(c1) + 1, int(r1) + 1),
            area=len(pix),
            centroid=(float(pix[:, 1].mean() + 0.5), float(pix[:, 0].mean() + 0.5)),
        ))
    return dets


def _inside(mask: np.ndarray, x: float, y: float) -> bool:
    h, w = mask.shape
    c, r = int(np.floor(x)), int(np.floor(y))
    return 0 <= r < h and 0 <= c < w and bool(mask[r, c])


def box_center(box: Box) -> tuple[float, float]:
    x0, y0, x1, y1 = box
    return (x0 + x1) / 2, (y0 + y1) / 2


def match_detections(dets: list[Detection], gt_boxes, danger_mask: np.ndarray,
                     match_fraction: float = 0.5) -> tuple[Counts, Counts]:
    """Greedy one-to-one matching; returns (overall counts, danger-zone counts)."""
    gt_boxes = list(gt_boxes)
    cands = []
    for i, d in enumerate(dets):
        for j, (x0, y0, x1, y1) in enumerate(gt_boxes):
            rr, cc = d.pixels[:, 0], d.pixels[:, 1]
            inter = int(((rr >= y0) & (rr < y1) & (cc >= x0) & (cc < x1)).sum())
            box_area = (x1 - x0) * (y1 - y0)
            if inter > 0 and inter >= match_fraction * min(d.area, box_area):
                cands.append((-inter, i, j))
    cands.sort()
    det_used, gt_used = set(), set()
    pairs = []
    for _, i, j in cands:
        if i in det_used or j in gt_used:
            continue
        det_used.add(i)
        gt_used.add(j)
        pairs.append((i, j))
    overall = Counts(tp=len(pairs), fp=len(dets) - len(pairs), fn=len(gt_boxes) - len(pairs))
    gt_in = [_inside(danger_mask, *box_center(b)) for b in gt_boxes]
    det_in = [_inside(danger_mask, *d.centroid) for d in dets]
    zone = Counts(
        tp=sum(1 for _, j in pairs if gt_in[j]),
        fp=sum(1 for i in range(len(dets)) if i not in det_used and det_in[i]),
        fn=sum(1 for j in range(len(gt_boxes)) if j not in gt_used and gt_in[j]),
    )
    return overall, zone


def confusion(pred_labels: np.ndarray, gt_labels: np.ndarray) -> np.ndarray:
    """(3, 2) per-class [intersection, union] pixel counts."""
    out = np.zeros((3, 2), dtype=np.int64)
    for c in (WATER, SKY, OBSTACLE):
        p, g = pred_labels == c, gt_labels == c
        out[c] = (p & g).sum(), (p | g).sum()
    return out


def iou_from_confusion(conf: np.ndarray) -> tuple[list[float], float]:
    ious = [float(i / u) if u else float("nan") for i, u in conf]
    valid = [v for v in ious if not np.isnan(v)]
    return ious, float(np.mean(valid)) if valid else float("nan")


def miou(pred_labels: np.ndarray, gt_labels: np.ndarray) -> tuple[list[float], float]:
    if pred_labels.shape != gt_labels.shape:
        raise EvaluationError("prediction and ground truth differ in shape")
    return iou_from_confusion(confusion(pred_labels, gt_labels))


@dataclass
class FrameResult:
    overall: Counts
    zone: Counts
    mu_r: float
    conf: np.ndarray


def evaluate_frame(pred_labels: np.ndarray, scene, eval_cfg) -> FrameResult:
    from .annotations import rasterize_regions

    gt_ann = scene.ground_truth_annotations()
    regions = rasterize_regions(gt_ann, scene.size)
    dets = extract_detections(pred_labels, regions, eval_cfg.min_det_area)
    boxes = [o.box for o in scene.obstacles_gt]
    overall, zone = match_detections(dets, boxes, scene.danger_mask, eval_cfg.match_fraction)
    mu = water_edge_robustness(pred_labels, scene.water_edges, eval_cfg.tol_px, ignore_boxes=boxes)
    return FrameResult(overall, zone, mu, confusion(pred_labels, scene.gt_labels))


def aggregate(frames: list[FrameResult]) -> DetectionReport:
    if not frames:
        raise EvaluationError("cannot evaluate an empty test set")
    overall, zone = Counts(), Counts()
    conf = np.zeros((3, 2), dtype=np.int64)
    for fr in frames:
        overall += fr.overall
        zone += fr.zone
        conf += fr.conf
    pr, re, f1 = rates(overall)
    pr_d, re_d, f1_d = rates(zone)
    ious, m = iou_from_confusion(conf)
    return DetectionReport(
        tp=overall.tp, fp=overall.fp, fn=overall.fn,
        tp_d=zone.tp, fp_d=zone.fp, fn_d=zone.fn,
        pr=pr, re=re, f1=f1, pr_d=pr_d, re_d=re_d, f1_d=f1_d,
        mu_r=float(np.mean([fr.mu_r for fr in frames])),
        iou_water=ious[0], iou_sky=ious[1], iou_obstacle=ious[2], miou=m,
    )


def evaluate_frames(model, testset, eval_cfg, threads: int = 1) -> list[FrameResult]:
    from .parallel import ordered_map

    scenes = list(testset)
    if not scenes:
        raise EvaluationError("cannot evaluate an empty test set")
    preds = [model.predict(sc.image)[1].argmax(-1).astype(np.uint8) for sc in scenes]
    return ordered_map(lambda args: evaluate_frame(args[0], args[1], eval_cfg), list(zip(preds, scenes)), threads)


def evaluate(model, testset, eval_cfg, threads: int = 1) -> DetectionReport:
    """``model.predict(image)`` -> (features, probs); ``testset`` is a sequence of scenes."""
    return aggregate(evaluate_frames(model, testset, eval_cfg, threads))


FRAME_COLUMNS = ("tp", "fp", "fn", "tp_d", "fp_d", "fn_d", "mu_r", "iou_water", "iou_sky", "iou_obstacle")


def frame_rows(frames: list[FrameResult]) -> list[dict]:
    """One detail row per frame; IoUs are per-frame and empty when a class is absent from both maps."""
    rows = []
    for fr in frames:
        ious, _ = iou_from_confusion(fr.conf)
        rows.append({
            "tp": fr.overall.tp, "fp": fr.overall.fp, "fn": fr.overall.fn,
            "tp_d": fr.zone.tp, "fp_d": fr.zone.fp, "fn_d": fr.zone.fn, "mu_r": fr.mu_r,
            **{k: ("" if np.isnan(v) else v) for k, v in zip(FRAME_COLUMNS[-3:], ious)},
        })
    return rows


METRIC_COLUMNS = ("mu_r", "pr", "re", "f1", "pr_d", "re_d", "f1_d", "iou_water", "iou_sky", "iou_obstacle", "miou")
