"""Randomized small loss instances and a float64 central-difference checker.

Each case builds a scalar function of one float64 tensor (logits or
features) so the analytic gradient from autograd can be compared against
central differences element by element.
"""

from __future__ import annotations

import numpy as np
import torch

from slr.losses import (
    ObjectPrior,
    aux_loss,
    pairwise_affinity_masks,
    finetune_loss,
    focal_loss,
    pairwise_loss,
    projection_loss,
    warmup_loss,
    water_separation_loss,
)
from slr.partial_labels import PartialLabels
from slr.pseudo_labels import PseudoLabels

FD_EPS = 1e-6
REL_TOL = 1e-4


def max_relative_error(fn, x: torch.Tensor, eps: float = FD_EPS) -> float:
    """max |fd - analytic| / max |analytic| over all elements of ``x``."""
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().numpy().ravel()
    flat = x.detach().numpy().ravel().copy()
    fd = np.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(torch.as_tensor(flat.reshape(x.shape))).item()
            flat[i] = orig - eps
            down = fn(torch.as_tensor(flat.reshape(x.shape))).item()
            flat[i] = orig
            fd[i] = (up - down) / (2 * eps)
    scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-12)
    return float(np.abs(fd - analytic).max() / scale)


def _size(rng):
    return int(rng.integers(4, 13)), int(rng.integers(4, 13))


def _smooth_image(rng, h, w):
    # piecewise-constant colour patches plus tiny noise: many pairs pass the affinity threshold
    base = rng.uniform(0, 1, (2, 2, 3))
    img = np.repeat(np.repeat(base, -(-h // 2), 0), -(-w // 2), 1)[:h, :w]
    return img + rng.normal(0, 0.005, img.shape)


def _box(rng, h, w):
    x0, y0 = int(rng.integers(0, w - 1)), int(rng.integers(0, h - 1))
    return x0, y0, int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1))


def _partial(rng, h, w):
    y = np.eye(3)[rng.integers(0, 3, (h, w))]
    wt = rng.uniform(0, 1, (h, w)) * (rng.random((h, w)) < 0.7)
    y[wt == 0] = 0
    return PartialLabels(y, wt)


def _prior(rng, box, h, w):
    m = np.zeros((h, w))
    x0, y0, x1, y1 = box
    m[y0:y1, x0:x1] = rng.random((y1 - y0, x1 - x0)) < 0.5
    return ObjectPrior(box, m)


def _probs(z):
    return torch.softmax(z, dim=-1)


def make_case(kind: str, seed: int):
    """Returns (scalar function of one tensor, initial tensor)."""
    rng = np.random.default_rng([seed, sum(map(ord, kind))])
    h, w = _size(rng)
    logits = torch.as_tensor(rng.normal(0, 1.5, (h, w, 3)))
    if kind in ("focal_g0", "focal_g2"):
        gamma = 0.0 if kind == "focal_g0" else 2.0
        target = rng.dirichlet(np.ones(3), (h, w))
        weights = rng.uniform(0, 1, (h, w)) * (rng.random((h, w)) < 0.8)
        return (lambda z: focal_loss(_probs(z), target, weights, gamma)), logits
    if kind == "projection":
        box = _box(rng, h, w)
        return (lambda z: projection_loss(_probs(z)[..., 2], box)), logits
    if kind == "pairwise":
        img = _smooth_image(rng, h, w)
        return (lambda z: pairwise_loss(_probs(z), img, 0.9, 0.1)), logits
    if kind == "aux":
        box = _box(rng, h, w)
        prior = _prior(rng, box, h, w)
        return (lambda z: aux_loss(_probs(z)[..., 2], prior, 2.0)), logits
    if kind == "water_separation":
        fh, fw, c = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
        feats = torch.as_tensor(rng.normal(0, 1, (fh, fw, c)))
        lab = rng.integers(0, 3, (fh, fw))
        lab.flat[0], lab.flat[1] = 0, 2
        wm, om = lab == 0, lab == 2
        return (lambda f: water_separation_loss(f, wm, om, 0.01)), feats
    if kind == "warmup_composite":
        img = _smooth_image(rng, h, w)
        partial = _partial(rng, h, w)
        boxes = [_box(rng, h, w) for _ in range(int(rng.integers(1, 3)))]
        objects = [(b, _prior(rng, b, h, w)) for b in boxes]
        pm = pairwise_affinity_masks(img)
        return (lambda z: warmup_loss(_probs(z), None, partial, objects, pair_masks=pm).total), logits
    if kind == "finetune_composite":
        img = _smooth_image(rng, h, w)
        y = rng.dirichlet(np.ones(3), (h, w))
        pseudo = PseudoLabels(y, rng.uniform(0.2, 1, (h, w)))
        c = 3
        fh, fw = max(h // 4, 2), max(w // 4, 2)
        lab = rng.integers(0, 3, (fh, fw))
        lab.flat[0], lab.flat[1] = 0, 2
        masks = (lab == 0, lab == 2)
        n_logit = h * w * 3
        pm = pairwise_affinity_masks(img)
        feats0 = rng.normal(0, 1, (fh, fw, c))
        packed = torch.as_tensor(np.concatenate([logits.numpy().ravel(), feats0.ravel()]))

        def fn(v):
            z = v[:n_logit].reshape(h, w, 3)
            f = v[n_logit:].reshape(fh, fw, c)
            return finetune_loss(_probs(z), f, pseudo, lambda_ws=0.01, pair_masks=pm, ws_masks=masks).total

        return fn, packed
    raise KeyError(kind)


GRADIENT_KINDS = ("focal_g0", "focal_g2", "projection", "pairwise", "aux", "water_separation",
                  "warmup_composite", "finetune_composite")
