"""Planted-feature model: stands in for the network during pseudo-label recovery checks.

Features are per-class orthogonal one-hot embeddings plus Gaussian noise,
placed at image resolution.  The class head is weakly informative: a
unit-temperature softmax over the first three feature channels, so it leans
toward the right class without being confident.
"""

from __future__ import annotations

import numpy as np

from slr.config import AnnotationNoise, SceneConfig, SlrConfig
from slr.partial_labels import build_partial_labels, constraint_sets
from slr.annotations import rasterize_regions
from slr.pseudo_labels import estimate_pseudo_labels, soft_assign
from slr.scenegen import derive_weak_annotations, generate_scene, plant_features

HEAD_TEMPERATURE = 1.0


class PlantedModel:
    def __init__(self, labels: np.ndarray, sigma: float = 0.05, dim: int = 16, seed: int = 0):
        self.features = plant_features(labels, dim=dim, sigma=sigma, rng=seed)
        self.probs = soft_assign(self.features[..., :3], HEAD_TEMPERATURE)

    def predict(self, image):
        return self.features, self.probs


def recovery_on_scene(seed: int, cfg: SlrConfig | None = None, sigma: float = 0.05) -> tuple[int, int]:
    """(correct, total) over the unlabeled pixels of one generated scene."""
    cfg = cfg or SlrConfig()
    scene = generate_scene(seed, SceneConfig())
    ann = derive_weak_annotations(scene, AnnotationNoise(), seed)
    regions = rasterize_regions(ann, scene.size)
    cons = constraint_sets(regions)
    partial = build_partial_labels(regions, cfg.theta, cfg.omega_min, cfg.edge_heuristic, cons)
    model = PlantedModel(scene.gt_labels, sigma=sigma, seed=seed)
    pseudo = estimate_pseudo_labels(model, scene.image, ann, cfg, partial, cons)
    unlabeled = partial.w == 0
    correct = int((pseudo.y.argmax(-1)[unlabeled] == scene.gt_labels[unlabeled]).sum())
    return correct, int(unlabeled.sum())
