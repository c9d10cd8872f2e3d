import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from primcascade import cloud as cl
from primcascade import patching as pt
from primcascade.primitives import Rectangle, SphereCap


def test_gt_scale_marks_small_primitives():
    # counts 90, 6, 4 of N=100: with eta 0.05 only label 2 is small
    labels = np.repeat([0, 1, 2], [90, 6, 4])
    h = pt.gt_scale_heatmap(labels, 0.05)
    assert h.scores.tolist() == [0.0] * 96 + [1.0] * 4
    # threshold is strict: exactly 5 points at eta 0.05 is not small
    labels = np.repeat([0, 1], [95, 5])
    assert pt.gt_scale_heatmap(labels, 0.05).scores.sum() == 0


def test_gt_scale_subset_uses_full_counts():
    labels = np.repeat([0, 1], [96, 4])
    h = pt.gt_scale_heatmap(labels, 0.05, subset=[0, 97, 99])
    assert h.scores.tolist() == [0.0, 1.0, 1.0]


@given(st.lists(st.integers(0, 5), min_size=20, max_size=200),
       st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_gt_scale_monotone_in_eta(labels, a, b):
    lo, hi = sorted((a, b))
    s_lo = pt.gt_scale_heatmap(np.array(labels), lo).scores
    s_hi = pt.gt_scale_heatmap(np.array(labels), hi).scores
    assert np.all(s_lo <= s_hi)


def test_binarize_is_strict():
    h = pt.Heatmap(np.array([0.4, 0.6, 0.5]), pt.GT_SCALE)
    assert pt.binarize_and_pool(h, 0.5).tolist() == [1]


def test_heatmap_range_checked():
    with pytest.raises(ValueError):
        pt.Heatmap(np.array([1.5]), pt.GT_SCALE)


def test_single_pool_point_gives_one_patch(small_scene):
    pts = small_scene.cloud.points
    cover = pt.sample_covering_patches(pts, pts[[123]], 512)
    assert len(cover) == 1 and cover.complete
    p = cover[0]
    assert p.seed_index == 123 and len(p.member_indices) == 512
    assert 123 in p.member_indices


def test_whole_cloud_pool_is_covered(small_scene):
    pts = small_scene.cloud.points
    cover = pt.sample_covering_patches(pts, pts, 8192, max_patches=32, seed=0)
    assert 2 <= len(cover) <= 32 and cover.complete
    members = np.unique(np.concatenate([p.member_indices for p in cover]))
    assert len(members) == len(pts)


def test_patch_budget_caps_coverage():
    # 33 far-apart clusters of 50 points; each patch of 50 covers exactly one cluster
    rng = np.random.default_rng(0)
    centers = np.column_stack([np.arange(33) * 10.0, np.zeros(33), np.zeros(33)])
    pts = (centers[:, None, :] + rng.normal(scale=0.1, size=(33, 50, 3))).reshape(-1, 3)
    cover = pt.sample_covering_patches(pts, centers, 50, max_patches=32)
    assert len(cover) == 32
    assert not cover.complete and cover.uncovered_count == 1


def test_empty_pool():
    cover = pt.sample_covering_patches(np.zeros((10, 3)) + np.arange(10)[:, None], [], 4)
    assert len(cover) == 0 and cover.complete


def test_patch_size_larger_than_cloud_rejected():
    with pytest.raises(ValueError):
        pt.sample_covering_patches(np.zeros((10, 3)), np.zeros((1, 3)), 11)


def test_covering_deterministic(small_scene):
    pts = small_scene.cloud.points
    pool = pts[::97]
    a = pt.sample_covering_patches(pts, pool, 1024, seed=4)
    b = pt.sample_covering_patches(pts, pool, 1024, seed=4)
    assert [p.seed_index for p in a] == [p.seed_index for p in b]


def test_normalize_identity_for_normalized_patch():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(200, 3))
    pts -= pts.mean(axis=0)
    pts /= np.max(np.linalg.norm(pts, axis=1))
    local, _, p = pt.normalize_patch(pt.Patch(0, np.arange(200)), pts)
    assert np.array_equal(p.center, np.zeros(3)) and p.scale == 1.0
    assert np.array_equal(local, pts)


def test_normalize_translation_invariant():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(200, 3))
    a, _, pa = pt.normalize_patch(pt.Patch(0, np.arange(200)), pts)
    b, _, pb = pt.normalize_patch(pt.Patch(0, np.arange(200)), pts + 5.0)
    assert np.allclose(a, b, atol=1e-12)
    assert np.allclose(pb.center - pa.center, 5.0) and pa.scale == pytest.approx(pb.scale)
    assert np.max(np.linalg.norm(a, axis=1)) == pytest.approx(1.0)
    assert np.allclose(pa.from_frame(a), pts, atol=1e-12)


def test_curvature_flat_plane():
    rect = Rectangle(np.zeros(3), np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), 1.0, 1.0)
    pts, _ = rect.sample(4000, np.random.default_rng(0))
    assert np.max(pt.mean_curvature(pts)) <= 1e-6


def test_curvature_sphere():
    r = 0.5
    cap = SphereCap(np.zeros(3), r, np.array([0, 0, 1.0]), math.pi)
    pts, _ = cap.sample(20000, np.random.default_rng(0))
    curv = pt.mean_curvature(pts)
    assert np.median(curv) == pytest.approx(1 / r, rel=0.10)


def test_curvature_heatmap_prefers_sphere():
    rect = Rectangle(np.array([0, 0, -1.0]), np.array([0, 0, 1.0]), np.array([1.0, 0, 0]),
                     1.0, 1.0)
    cap = SphereCap(np.array([0, 0, 0.5]), 0.25, np.array([0, 0, 1.0]), math.pi)
    spec = cl.SceneSpec(seed=0, surfaces=(rect, cap))
    sc = cl.synthesize_scene(spec, 8192, 0.0)
    h = pt.curvature_heatmap(sc.cloud, top_fraction=0.2)
    top = h.scores > 0.5
    assert top.sum() == round(0.2 * 8192)
    assert np.mean(sc.cloud.gt_label[top] == 1) >= 0.8


def test_patch_set_round_trip(tmp_path, small_scene):
    cl.save_cloud(small_scene.cloud, tmp_path / "c.cpf")
    pts = small_scene.cloud.points
    cover = pt.sample_covering_patches(pts, pts[::500], 1024)
    cover.patches = [pt.normalize_patch(p, pts)[2] for p in cover]
    pt.save_patch_set(cover, tmp_path / "p.json", tmp_path / "c.cpf")
    back, _ = pt.load_patch_set(tmp_path / "p.json")
    assert len(back) == len(cover)
    for a, b in zip(cover, back):
        assert a.seed_index == b.seed_index and np.array_equal(a.member_indices, b.member_indices)
        assert np.array_equal(a.center, b.center) and a.scale == b.scale
    assert np.array_equal(back.covered, cover.covered)


def test_patch_set_hash_mismatch(tmp_path, small_scene):
    cl.save_cloud(small_scene.cloud, tmp_path / "c.cpf")
    pts = small_scene.cloud.points
    cover = pt.sample_covering_patches(pts, pts[:1], 64)
    pt.save_patch_set(cover, tmp_path / "p.json", tmp_path / "c.cpf")
    cl.save_cloud(cl.PointCloud(pts[:100]), tmp_path / "c.cpf")
    with pytest.raises(ValueError, match="hash"):
        pt.load_patch_set(tmp_path / "p.json")
