import math

import numpy as np
import pytest

from oracles import random_regions
from planted import PlantedModel, recovery_on_scene
from slr.config import SlrConfig
from slr.partial_labels import ConstraintSets, PartialLabels, build_partial_labels, constraint_sets
from slr.pseudo_labels import (
    ConstraintConsistencyError,
    area_downsample,
    bilinear_upsample,
    box_cells,
    compose_pseudo_labels,
    compute_prototypes,
    constrain,
    cosine_map,
    estimate_pseudo_labels,
    merge_obstacle_similarity,
    similarity_maps,
    soft_assign,
)


def cons_at(shape, water=False, sky=False, obstacle=False):
    return ConstraintSets(np.full(shape, water), np.full(shape, sky), np.full(shape, obstacle))


def consistent(cons):
    """Drops the obstacle ban wherever a random annotation forbade every class."""
    clash = cons.c_water & cons.c_sky & cons.c_obstacle
    return ConstraintSets(cons.c_water, cons.c_sky, cons.c_obstacle & ~clash)


def test_constrain_unconstrained_unchanged():
    p = np.array([[[0.5, 0.3, 0.2]]])
    np.testing.assert_array_equal(constrain(p, cons_at((1, 1))), p)


def test_constrain_water_forbidden():
    out = constrain(np.array([[[0.5, 0.3, 0.2]]]), cons_at((1, 1), water=True))
    np.testing.assert_allclose(out, [[[0.0, 0.6, 0.4]]], rtol=0, atol=1e-15)


def test_constrain_unambiguous_pixel_is_one_hot():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = rng.dirichlet(np.ones(3), (1, 1))
        np.testing.assert_array_equal(constrain(p, cons_at((1, 1), water=True, obstacle=True)), [[[0, 1, 0]]])


def test_constrain_all_forbidden_raises():
    with pytest.raises(ConstraintConsistencyError):
        constrain(np.full((2, 2, 3), 1 / 3), cons_at((2, 2), True, True, True))


def test_constrain_zero_mass_falls_back_to_uniform_admissible():
    out = constrain(np.array([[[1.0, 0.0, 0.0]]]), cons_at((1, 1), water=True))
    np.testing.assert_array_equal(out, [[[0.0, 0.5, 0.5]]])


def test_constrain_matches_per_pixel_reference():
    rng = np.random.default_rng(1)
    _, regions = random_regions(rng, 32, 32)
    cons = consistent(constraint_sets(regions))
    p = rng.dirichlet(np.ones(3), (32, 32))
    out = constrain(p, cons)
    forb = cons.stack()
    for r in range(32):
        for c in range(32):
            v = [0.0 if forb[r, c, k] else p[r, c, k] for k in range(3)]
            s = v[0] + v[1] + v[2]
            np.testing.assert_array_equal(out[r, c], [x / s for x in v])


def test_single_cell_prototype():
    rng = np.random.default_rng(2)
    feats = rng.normal(0, 1, (4, 4, 5))
    r = np.zeros((4, 4, 3))
    r[1, 2, 0] = 1.0
    r[..., 1] = 1.0
    protos = compute_prototypes(feats, r, [])
    np.testing.assert_allclose(protos.p_water, feats[1, 2], rtol=1e-15)


def test_two_cell_prototype_average():
    feats = np.zeros((1, 2, 2))
    feats[0, 0] = [1, 0]
    feats[0, 1] = [0, 1]
    r = np.zeros((1, 2, 3))
    r[..., 0] = 0.4
    protos = compute_prototypes(feats, r, [])
    np.testing.assert_allclose(protos.p_water, [0.5, 0.5])


def test_prototype_scale_invariance_in_mass():
    rng = np.random.default_rng(3)
    feats = rng.normal(0, 1, (4, 4, 3))
    r = rng.dirichlet(np.ones(3), (4, 4))
    a = compute_prototypes(feats, r, [(0, 0, 2, 2)])
    b = compute_prototypes(feats, 7.5 * r, [(0, 0, 2, 2)])
    for pa, pb in zip([a.p_water, a.p_sky, a.p_static] + a.p_dyn, [b.p_water, b.p_sky, b.p_static] + b.p_dyn):
        np.testing.assert_allclose(pa, pb, rtol=1e-12)


def test_absent_prototype_gives_minus_one():
    feats = np.ones((2, 2, 3))
    r = np.zeros((2, 2, 3))
    r[..., 0] = 1.0
    protos = compute_prototypes(feats, r, [])
    assert protos.p_sky is None
    np.testing.assert_array_equal(similarity_maps(feats, protos)["sky"], -1.0)


def test_static_and_dynamic_split():
    feats = np.zeros((4, 4, 2))
    feats[:2, :2] = [1, 0]
    feats[2:, 2:] = [0, 1]
    r = np.zeros((8, 8, 3))
    r[..., 2] = 1.0
    protos = compute_prototypes(feats, r, [(0, 0, 4, 4)])
    np.testing.assert_allclose(protos.p_dyn[0], [1, 0])
    # static pools the twelve cells outside the box, four of which carry (0, 1)
    np.testing.assert_allclose(protos.p_static, [0, 4 / 12])


def test_cosine_examples():
    feats = np.array([[[2.0, 4.0], [0.0, 3.0], [1.0, 1.0]]])
    s = cosine_map(feats, np.array([1.0, 2.0]))
    assert s[0, 0] == pytest.approx(1.0)
    s = cosine_map(feats, np.array([1.0, 0.0]))
    assert s[0, 1] == 0.0
    assert s[0, 2] == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert s[0, 2] == pytest.approx(0.70711, abs=1e-5)


def test_cosine_zero_vector_guard():
    feats = np.zeros((1, 2, 3))
    feats[0, 1] = [1, 0, 0]
    np.testing.assert_array_equal(cosine_map(feats, np.array([1.0, 0, 0])), [[0.0, 1.0]])
    np.testing.assert_array_equal(cosine_map(feats, np.zeros(3)), [[0.0, 0.0]])


def test_cosine_matches_per_cell_reference():
    rng = np.random.default_rng(4)
    feats = rng.normal(0, 1, (8, 8, 6))
    p = rng.normal(0, 1, 6)
    s = cosine_map(feats, p)
    for r in range(8):
        for c in range(8):
            f = feats[r, c]
            ref = sum(f[k] * p[k] for k in range(6)) / (math.sqrt(sum(v * v for v in f)) * math.sqrt(sum(v * v for v in p)))
            assert s[r, c] == pytest.approx(ref, rel=1e-12)


def test_merge_no_boxes():
    s = np.random.default_rng(5).uniform(-1, 1, (3, 4))
    np.testing.assert_array_equal(merge_obstacle_similarity(s, [], []), s)


def test_merge_one_box():
    s_static = np.zeros((4, 4))
    s_dyn = np.full((4, 4), 0.5)
    cells = box_cells((0, 0, 8, 8), (16, 16), (4, 4))
    out = merge_obstacle_similarity(s_static, [s_dyn], [cells])
    np.testing.assert_array_equal(out[:2, :2], 0.5)
    assert out[2:].sum() == 0 and out[:, 2:].sum() == 0


def test_merge_overlap_takes_max():
    a, b = np.full((2, 2), 0.2), np.full((2, 2), 0.7)
    full = np.ones((2, 2), bool)
    np.testing.assert_array_equal(merge_obstacle_similarity(np.zeros((2, 2)), [a, b], [full, full]), 0.7)
    np.testing.assert_array_equal(merge_obstacle_similarity(np.zeros((2, 2)), [b, a], [full, full]), 0.7)


def test_box_cells_overlap_rule():
    cells = box_cells((3, 0, 5, 4), (16, 16), (4, 4))
    # columns 3..4 touch cells 0 (px 0..3) and 1 (px 4..7)
    np.testing.assert_array_equal(cells[0], [True, True, False, False])
    np.testing.assert_array_equal(cells[1], False)


def test_soft_assign_examples():
    np.testing.assert_allclose(soft_assign(np.array([0.4, 0.4, 0.4])), [1 / 3] * 3)
    first = soft_assign(np.array([1.0, 0.9, 0.0]), 20)[0]
    assert first == pytest.approx(1 / (1 + math.exp(-2) + math.exp(-20)), rel=1e-12)
    assert first == pytest.approx(0.88079, abs=1e-5)
    np.testing.assert_allclose(soft_assign(np.array([1.0, -1.0, 0.3]), 0), [1 / 3] * 3)


def test_soft_assign_large_beta_is_stable():
    out = soft_assign(np.array([1.0, 0.99, -1.0]), 1e4)
    assert np.isfinite(out).all() and out[0] == pytest.approx(1.0)


def test_bilinear_upsample_matches_torch():
    import torch
    import torch.nn.functional as F

    rng = np.random.default_rng(6)
    s = rng.normal(0, 1, (3, 5, 2))
    ref = F.interpolate(torch.as_tensor(s).permute(2, 0, 1)[None], size=(12, 20), mode="bilinear",
                        align_corners=False)[0].permute(1, 2, 0).numpy()
    np.testing.assert_allclose(bilinear_upsample(s, (12, 20)), ref, atol=1e-12)


def test_area_downsample():
    a = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(area_downsample(a, (2, 2)), [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError):
        area_downsample(a, (3, 3))


def test_compose_fully_labeled_is_identity():
    y = np.eye(3)[np.random.default_rng(7).integers(0, 3, (4, 4))]
    partial = PartialLabels(y, np.full((4, 4), 0.8))
    out = compose_pseudo_labels(np.full((4, 4, 3), 1 / 3), partial, cons_at((4, 4)), 0.5)
    np.testing.assert_array_equal(out.y, y)
    np.testing.assert_array_equal(out.w, 0.8)


def test_compose_unlabeled_pixel():
    partial = PartialLabels(np.zeros((1, 1, 3)), np.zeros((1, 1)))
    out = compose_pseudo_labels(np.array([[[0.5, 0.3, 0.2]]]), partial, cons_at((1, 1), water=True), 0.5)
    np.testing.assert_allclose(out.y, [[[0, 0.6, 0.4]]], atol=1e-15)
    assert out.w[0, 0] == 0.5


def test_compose_keeps_edge_band_weight():
    partial = PartialLabels(np.array([[[0.0, 0.0, 1.0]]]), np.array([[0.2357]]))
    out = compose_pseudo_labels(np.array([[[0.1, 0.8, 0.1]]]), partial, cons_at((1, 1), water=True), 0.5)
    np.testing.assert_array_equal(out.y, [[[0, 0, 1]]])
    assert out.w[0, 0] == 0.2357


class RandomModel:
    def __init__(self, h, w, seed=0, scale=1.0):
        rng = np.random.default_rng(seed)
        self.f = rng.normal(0, 1, (h // 4, w // 4, 6)) * scale
        self.p = rng.dirichlet(np.ones(3), (h, w))

    def predict(self, image):
        return self.f, self.p


def _scene(seed=8, h=32, w=32):
    ann, regions = random_regions(np.random.default_rng(seed), h, w)
    return ann, regions, np.zeros((h, w, 3))


def test_estimate_is_valid_and_sound():
    cfg = SlrConfig()
    for seed in range(5):
        ann, regions, img = _scene(seed)
        cons = consistent(constraint_sets(regions))
        partial = build_partial_labels(regions, constraints=cons)
        pseudo = estimate_pseudo_labels(RandomModel(32, 32, seed), img, ann, cfg, partial, cons)
        est = pseudo.w == cfg.omega_r
        np.testing.assert_allclose(pseudo.y[est].sum(-1), 1.0, atol=1e-12)
        assert (pseudo.y >= 0).all()
        assert not ((pseudo.y > 0) & cons.stack()).any()


def test_estimate_deterministic():
    ann, _, img = _scene()
    m = RandomModel(32, 32)
    a = estimate_pseudo_labels(m, img, ann, SlrConfig())
    b = estimate_pseudo_labels(m, img, ann, SlrConfig())
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.w, b.w)


def test_estimate_feature_scale_invariance():
    ann, _, img = _scene(9)
    a = estimate_pseudo_labels(RandomModel(32, 32, 1, 1.0), img, ann, SlrConfig())
    b = estimate_pseudo_labels(RandomModel(32, 32, 1, 13.0), img, ann, SlrConfig())
    np.testing.assert_allclose(a.y, b.y, atol=1e-6)


def test_estimate_with_nothing_unlabeled_returns_partial():
    class Exploding:
        def predict(self, image):
            raise AssertionError("model must not be queried")

    ann, regions, img = _scene(10)
    cons = constraint_sets(regions)
    full = PartialLabels(np.eye(3)[np.zeros((32, 32), int)], np.ones((32, 32)))
    out = estimate_pseudo_labels(Exploding(), img, ann, SlrConfig(), full, cons)
    np.testing.assert_array_equal(out.y, full.y)


def test_flags_bypass_stages():
    ann, regions, img = _scene(11)
    m = RandomModel(32, 32, 2)
    partial = build_partial_labels(regions)
    unl = partial.w == 0
    raw = estimate_pseudo_labels(m, img, ann, SlrConfig(constraints_r=False, feature_clustering=False))
    np.testing.assert_array_equal(raw.y[unl], m.p[unl])
    constrained = estimate_pseudo_labels(m, img, ann, SlrConfig(feature_clustering=False))
    np.testing.assert_allclose(constrained.y[unl], constrain(m.p, constraint_sets(regions))[unl])


def test_planted_features_recover_labels():
    correct = total = 0
    for seed in range(5):
        c, n = recovery_on_scene(seed)
        correct += c
        total += n
    assert correct / total >= 0.99


def test_planted_model_shapes():
    labels = np.zeros((8, 12), int)
    m = PlantedModel(labels)
    f, p = m.predict(None)
    assert f.shape == (8, 12, 16) and p.shape == (8, 12, 3)
