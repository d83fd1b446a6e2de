"""Training objectives for warm-up and fine-tuning.

All functions take channel-last tensors for a single image: probabilities
``(H, W, 3)`` in class order water, sky, obstacle; features ``(h, w, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .annotations import Box

P_CLAMP = 1e-7
# 8-neighbourhood at stride 1, each undirected pair once
NEIGHBOUR_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))


class PriorError(ValueError):
    pass


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(like.dtype)


def _zero(like: torch.Tensor) -> torch.Tensor:
    # keeps the graph connected so callers can always call backward
    return like.sum() * 0.0


def focal_loss(probs: torch.Tensor, target, weights, gamma: float = 2.0) -> torch.Tensor:
    """Weighted focal loss, averaged over pixels with positive weight; soft targets allowed."""
    target = _as_tensor(target, probs)
    weights = _as_tensor(weights, probs)
    labeled = weights > 0
    n = int(labeled.sum())
    if n == 0:
        return _zero(probs)
    p = probs.clamp(P_CLAMP, 1 - P_CLAMP)
    per_class = target * (1 - p) ** gamma * (-torch.log(p))
    per_pixel = weights * per_class.sum(dim=-1)
    return per_pixel[labeled].sum() / n


def projection_loss(obstacle_probs: torch.Tensor, box: Box) -> torch.Tensor:
    """Dice between in-box row/column max-projections and all-ones vectors."""
    x0, y0, x1, y1 = box
    h, w = obstacle_probs.shape
    if x1 <= x0 or y1 <= y0 or x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"degenerate or out-of-image box {box}")
    crop = obstacle_probs[y0:y1, x0:x1]
    loss = _zero(obstacle_probs)
    for proj in (crop.max(dim=1).values, crop.max(dim=0).values):
        dice = 2 * proj.sum() / ((proj ** 2).sum() + proj.numel())
        loss = loss + (1 - dice)
    return loss


def pairwise_affinity_masks(image, tau: float = 0.9, sigma_col: float = 0.1) -> list[torch.Tensor]:
    """Per neighbour offset, a boolean mask of pairs whose colour affinity reaches ``tau``."""
    img = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image).detach()
    masks = []
    for dy, dx in NEIGHBOUR_OFFSETS:
        a, b = _shifted_pair(img, dy, dx)
        aff = torch.exp(-((a - b) ** 2).sum(-1) / sigma_col ** 2)
        masks.append(aff >= tau)
    return masks


def _shifted_pair(t: torch.Tensor, dy: int, dx: int):
    h, w = t.shape[:2]
    ya, yb = slice(0, h - dy), slice(dy, h)
    if dx >= 0:
        xa, xb = slice(0, w - dx), slice(dx, w)
    else:
        xa, xb = slice(-dx, w), slice(0, w + dx)
    return t[ya, xa], t[yb, xb]


def pairwise_loss(probs: torch.Tensor, image=None, tau: float = 0.9, sigma_col: float = 0.1,
                  masks: list[torch.Tensor] | None = None) -> torch.Tensor:
    """Mean of -log P(same class) over colour-similar neighbouring pixel pairs."""
    if masks is None:
        if not 0 < tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        masks = pairwise_affinity_masks(image, tau, sigma_col)
    total = _zero(probs)
    count = 0
    for (dy, dx), m in zip(NEIGHBOUR_OFFSETS, masks):
        k = int(m.sum())
        if k == 0:
            continue
        a, b = _shifted_pair(probs, dy, dx)
        same = (a * b).sum(-1).clamp_min(P_CLAMP)
        total = total - torch.log(same[m]).sum()
        count += k
    return total / count if count else total


@dataclass(frozen=True)
class ObjectPrior:
    box: Box
    prior_mask: np.ndarray  # (H, W) float in [0, 1], zero outside the box


def make_object_prior(box: Box, size: tuple[int, int], mode: str = "oracle_corrupt",
                      gt_mask: np.ndarray | None = None, noise_px: int = 0,
                      rng: np.random.Generator | int | None = None) -> ObjectPrior:
    """Per-object segmentation prior standing in for a class-agnostic box segmenter.

    ``oracle_corrupt`` grows or shrinks the true mask by up to ``noise_px``
    pixels; ``ellipse`` is the box's inscribed ellipse.
    """
    w, h = size
    x0, y0, x1, y1 = box
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate box {box}")
    inside = np.zeros((h, w), dtype=bool)
    inside[max(y0, 0):min(y1, h), max(x0, 0):min(x1, w)] = True
    if mode == "oracle_corrupt":
        if gt_mask is None:
            raise PriorError("oracle_corrupt prior needs a ground-truth mask")
        m = np.asarray(gt_mask, dtype=bool) & inside
        if noise_px:
            k = int(np.random.default_rng(rng).integers(-noise_px, noise_px + 1))
            if k > 0:
                m = ndimage.binary_dilation(m, iterations=k)
            elif k < 0:
                eroded = ndimage.binary_erosion(m, iterations=-k)
                m = eroded if eroded.any() else m
        m &= inside
    elif mode == "ellipse":
        ys, xs = np.mgrid[0:h, 0:w] + 0.5
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        a, b = (x1 - x0) / 2, (y1 - y0) / 2
        m = (((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0) & inside
    else:
        raise PriorError(f"unknown prior mode {mode!r}")
    return ObjectPrior(box=tuple(box), prior_mask=m.astype(float))


def aux_loss(obstacle_probs: torch.Tensor, prior: ObjectPrior, gamma: float = 2.0) -> torch.Tensor:
    """Binary focal loss between obstacle probabilities and the prior, over box pixels."""
    x0, y0, x1, y1 = prior.box
    p = obstacle_probs[y0:y1, x0:x1].clamp(P_CLAMP, 1 - P_CLAMP)
    t = _as_tensor(prior.prior_mask[y0:y1, x0:x1], p)
    per = t * (1 - p) ** gamma * (-torch.log(p)) + (1 - t) * p ** gamma * (-torch.log(1 - p))
    return per.mean()


def water_separation_loss(features: torch.Tensor, water_mask, obstacle_mask,
                          lambda_ws: float = 0.01, eps: float = 1e-8) -> torch.Tensor:
    """Variance-ratio surrogate: small when water and obstacle features separate per channel."""
    wm = torch.as_tensor(np.asarray(water_mask, dtype=bool) if not isinstance(water_mask, torch.Tensor) else water_mask)
    om = torch.as_tensor(np.asarray(obstacle_mask, dtype=bool) if not isinstance(obstacle_mask, torch.Tensor) else obstacle_mask)
    if not wm.any() or not om.any() or lambda_ws == 0:
        return _zero(features)
    fw, fo = features[wm], features[om]
    mu_w, mu_o = fw.mean(0), fo.mean(0)
    var_w = ((fw - mu_w) ** 2).mean(0)
    var_o = ((fo - mu_o) ** 2).mean(0)
    spread = var_w + var_o
    return lambda_ws * (spread / ((mu_w - mu_o) ** 2 + spread + eps)).sum()


@dataclass
class LossTerms:
    foc: torch.Tensor
    pair: torch.Tensor
    proj: torch.Tensor
    aux: torch.Tensor
    ws: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.foc + self.pair + self.proj + self.aux + self.ws

    def values(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in ("foc", "pair", "proj", "aux", "ws")}
        out["total"] = float(self.total.detach())
        return out


def warmup_loss(probs: torch.Tensor, features: torch.Tensor | None, partial, objects, image=None,
                gamma: float = 2.0, tau: float = 0.9, sigma_col: float = 0.1, use_aux: bool = True,
                weights=(1.0, 1.0, 1.0, 1.0), pair_masks=None) -> LossTerms:
    """Focal on partial labels + pairwise + per-object projection and auxiliary terms.

    ``objects`` is a sequence of ``(box, prior)``; ``prior`` may be None when
    ``use_aux`` is off.  ``weights`` scales (foc, pair, proj, aux).
    """
    w_foc, w_pair, w_proj, w_aux = weights
    zero = _zero(probs)
    foc = w_foc * focal_loss(probs, partial.y, partial.w, gamma)
    pair = w_pair * pairwise_loss(probs, image, tau, sigma_col, masks=pair_masks)
    proj, aux = zero, zero
    obstacle = probs[..., 2]
    for box, prior in objects:
        proj = proj + w_proj * projection_loss(obstacle, box)
        if use_aux and prior is not None:
            aux = aux + w_aux * aux_loss(obstacle, prior, gamma)
    return LossTerms(foc, pair, proj, aux, zero)


def pseudo_label_masks(pseudo_y: np.ndarray, feature_shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Water / obstacle masks at feature resolution from the pseudo-label argmax (majority of each cell)."""
    h, w = feature_shape
    H, W = pseudo_y.shape[:2]
    fy, fx = H // h, W // w
    hard = pseudo_y.argmax(-1)
    labeled = pseudo_y.sum(-1) > 0
    frac_w = ((hard == 0) & labeled).reshape(h, fy, w, fx).mean(axis=(1, 3))
    frac_o = ((hard == 2) & labeled).reshape(h, fy, w, fx).mean(axis=(1, 3))
    return frac_w > 0.5, frac_o > 0.5


def finetune_loss(probs: torch.Tensor, features: torch.Tensor | None, pseudo, image=None,
                  lambda_ws: float = 0.01, gamma: float = 2.0, tau: float = 0.9, sigma_col: float = 0.1,
                  weights=(1.0, 1.0), pair_masks=None, ws_masks=None) -> LossTerms:
    """Focal on dense pseudo labels + pairwise + water-separation on encoder features."""
    w_foc, w_pair = weights
    zero = _zero(probs)
    foc = w_foc * focal_loss(probs, pseudo.y, pseudo.w, gamma)
    pair = w_pair * pairwise_loss(probs, image, tau, sigma_col, masks=pair_masks)
    ws = zero
    if features is not None and lambda_ws > 0:
        if ws_masks is None:
            ws_masks = pseudo_label_masks(np.asarray(pseudo.y), tuple(features.shape[:2]))
        ws = water_separation_loss(features, ws_masks[0], ws_masks[1], lambda_ws)
    return LossTerms(foc, pair, zero, zero, ws)
