import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disorient.cloud import PointCloud, RigidTransform, Trajectory, axis_angle
from disorient.registration.features import feature_register
from disorient.registration.kabsch import Correspondence, RegistrationResult
from disorient.saliency import (AttackPlan, GroundModel, Patch, ScoredCandidate, ScoreSource,
                                ScreenParams, Strategy, estimate_ground, extract_candidates,
                                normalize_scores, place_patches, screen, select)

scores_st = st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40)


def cand(x, y, z, score=0.5, raw=None):
    return ScoredCandidate(np.array([x, y, z], dtype=float), score if raw is None else raw, score)


def flat_ground(z=0.0, cell=2.0, extent=30):
    return GroundModel(cell, {(i, j): z for i in range(-extent, extent) for j in range(-extent, extent)})


# --- normalisation -------------------------------------------------------------

def test_normalize_examples():
    np.testing.assert_array_equal(normalize_scores([2, 4, 6]), [0, 0.5, 1])
    np.testing.assert_array_equal(normalize_scores([7, 7, 7]), [0.5, 0.5, 0.5])
    np.testing.assert_array_equal(normalize_scores([0, 1]), [0, 1])
    with pytest.raises(ValueError):
        normalize_scores([])
    with pytest.raises(ValueError):
        normalize_scores([1.0, float("nan")])


@given(scores_st)
def test_normalize_order_preserving(raw):
    out = normalize_scores(raw)
    assert np.all((out >= 0) & (out <= 1))
    r = np.asarray(raw)
    for i in range(len(r)):
        for j in range(len(r)):
            if r[i] < r[j]:
                assert out[i] <= out[j]
            if r[i] == r[j]:
                assert out[i] == out[j]


# --- candidates ---------------------------------------------------------------

def _result(src_pts, tgt_pts, corrs):
    return RegistrationResult(RigidTransform.identity(), corrs, True,
                              src_points=np.asarray(src_pts, float), tgt_points=np.asarray(tgt_pts, float))


def test_single_candidate():
    res = _result([[1.0, 2.0, 3.0]], [[0.0, 0, 0]], [Correspondence(0, 0, 0.7)])
    (c,) = extract_candidates(res, None, None, RigidTransform.identity())
    np.testing.assert_array_equal(c.position_ref, [1, 2, 3])
    assert c.norm_score == 0.5 and c.raw_score == 0.7
    assert c.source_of_score is ScoreSource.CORRESPONDENCE_WEIGHT


def test_candidates_shift_with_gt():
    res = _result([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], [[0.0, 0, 0]] * 2,
                  [Correspondence(0, 0, 0.2), Correspondence(1, 1, 0.9)])
    cs = extract_candidates(res, None, None, RigidTransform.from_translation((0, 10, 0)))
    np.testing.assert_array_equal([c.position_ref for c in cs], [[1, 12, 3], [4, 15, 6]])
    assert [c.norm_score for c in cs] == [0.0, 1.0]


def test_mismatch_uses_source_position():
    a, b = np.array([[5.0, 0, 0]]), np.array([[-30.0, 7.0, 1.0]])
    gt = RigidTransform.from_translation((1, 0, 0))
    (c,) = extract_candidates(_result(a, b, [Correspondence(0, 0, 1.0)]), None, None, gt)
    np.testing.assert_array_equal(c.position_ref, [6, 0, 0])


def test_empty_correspondences_rejected():
    with pytest.raises(ValueError):
        extract_candidates(_result(np.zeros((1, 3)), np.zeros((1, 3)), []), None, None,
                           RigidTransform.identity())


def test_unmatched_keypoints_optional():
    res = RegistrationResult(RigidTransform.identity(), [Correspondence(1, 0, 0.5)], True,
                             src_points=np.eye(3), tgt_points=np.eye(3),
                             src_scores=np.array([0.1, 0.2, 0.3]))
    assert len(extract_candidates(res, None, None, RigidTransform.identity())) == 1
    cs = extract_candidates(res, None, None, RigidTransform.identity(), include_unmatched=True)
    assert [c.src_index for c in cs] == [1, 0, 2]
    assert cs[1].source_of_score is ScoreSource.KEYPOINT_SALIENCY


def test_self_registration_candidates_are_keypoints(small_scan):
    res = feature_register(small_scan, small_scan)
    cs = extract_candidates(res, small_scan, small_scan, RigidTransform.identity())
    kp = {tuple(p) for p in res.src_points}
    assert cs and all(tuple(c.position_ref) in kp for c in cs)


# --- selection ----------------------------------------------------------------

def _three():
    return [cand(1, 0, 0, 0.9), cand(2, 0, 0, 0.5), cand(3, 0, 0, 0.1)]


def test_select_examples():
    cs = _three()
    assert {cs.index(c) for c in select(cs, Strategy.TOPK, 2)} == {0, 1}
    assert {cs.index(c) for c in select(cs, Strategy.MINK, 2)} == {1, 2}
    assert select(cs, Strategy.TOPK, 0) == []
    assert len(select(cs, Strategy.RANDK, 10, seed=3)) == 3
    with pytest.raises(ValueError):
        select(cs, Strategy.TOPK, -1)


def test_select_ties_prefer_lower_index():
    cs = [cand(i, 0, 0, 0.5) for i in range(5)]
    assert [c.position_ref[0] for c in select(cs, Strategy.TOPK, 2)] == [0, 1]
    assert [c.position_ref[0] for c in select(cs, Strategy.MINK, 2)] == [0, 1]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(0, 35),
       st.integers(0, 2 ** 64 - 1))
def test_select_properties(scores, k, seed):
    cs = [cand(i, 0, 0, s) for i, s in enumerate(scores)]
    top = select(cs, Strategy.TOPK, k)
    rest = [c for c in cs if all(c is not t for t in top)]
    assert len(top) == min(k, len(cs))
    assert all(t.norm_score >= r.norm_score for t in top for r in rest)
    low = select(cs, Strategy.MINK, k)
    rest = [c for c in cs if all(c is not t for t in low)]
    assert all(t.norm_score <= r.norm_score for t in low for r in rest)
    a = select(cs, Strategy.RANDK, k, seed)
    b = select(cs, Strategy.RANDK, k, seed)
    assert [id(c) for c in a] == [id(c) for c in b]
    assert len({id(c) for c in a}) == len(a) == min(k, len(cs))


# --- ground -------------------------------------------------------------------

def test_flat_ground():
    g = np.random.default_rng(0)
    pts = np.column_stack([g.uniform(-10, 10, (2000, 2)), np.full(2000, -1.7)])
    model = estimate_ground(PointCloud(pts), 2.0)
    assert set(model.heights.values()) == {-1.7}


def test_box_keeps_ground_height():
    g = np.random.default_rng(1)
    ground = np.column_stack([g.uniform(-10, 10, (4000, 2)), np.zeros(4000)])
    box = np.column_stack([g.uniform(2, 4, (500, 2)), g.uniform(0.5, 2.0, 500)])
    model = estimate_ground(PointCloud(np.vstack([ground, box])), 2.0)
    np.testing.assert_array_equal(model.height_at([[3.0, 3.0]]), [0.0])


def test_inclined_plane_matches_analytic_heights():
    slope = np.tan(np.radians(5))
    g = np.random.default_rng(2)
    xy = g.uniform(-20, 20, (20000, 2))
    model = estimate_ground(PointCloud(np.column_stack([xy, slope * xy[:, 0]])), 2.0)
    for (a, b), h in model.heights.items():
        if -8 <= a <= 7:  # interior cells have a full 3x3 block
            assert abs(h - slope * (a + 0.5) * 2.0) <= 1.0 * slope + 1e-9


def test_missing_cell_uses_nearest():
    model = GroundModel(1.0, {(0, 0): -1.0, (10, 10): 5.0})
    np.testing.assert_array_equal(model.height_at([[2.5, 1.5], [9.0, 9.5]]), [-1.0, 5.0])


def test_ground_errors():
    with pytest.raises(ValueError):
        estimate_ground(PointCloud(np.zeros((0, 3))))
    with pytest.raises(ValueError):
        estimate_ground(PointCloud(np.zeros((3, 3))), 0.0)


# --- screening ----------------------------------------------------------------

def test_screen_examples():
    g = flat_ground()
    assert screen([cand(10, 10, 4.0)], g, None) == []
    traj = Trajectory([RigidTransform.from_translation((x, 0, 0)) for x in range(0, 20, 5)], range(4))
    assert screen([cand(8, 1.0, 1.0)], g, traj) == []
    near, far = cand(5 * np.cos(0.0), 5 * np.sin(0.0), 1), cand(9 * np.cos(np.radians(1)),
                                                             9 * np.sin(np.radians(1)), 1)
    assert screen([far, near], g, None) == [near]


def test_screen_ground_clearance():
    g = flat_ground()
    assert screen([cand(5, 5, 0.1)], g, None) == []
    assert len(screen([cand(5, 5, 0.5)], g, None, ScreenParams(ground_clearance=0.2))) == 1


@given(st.lists(st.tuples(st.floats(-30, 30), st.floats(-30, 30), st.floats(-1, 5)), max_size=25))
def test_screen_idempotent_and_order_preserving(pts):
    g = flat_ground()
    traj = Trajectory([RigidTransform.from_translation((x, 0, 0)) for x in (-10, 0, 10)], range(3))
    cs = [cand(x, y, z) for x, y, z in pts]
    once = screen(cs, g, traj)
    assert screen(once, g, traj) == once
    idx = [next(i for i, c in enumerate(cs) if c is o) for o in once]
    assert idx == sorted(idx)


# --- placement ----------------------------------------------------------------

def test_place_examples():
    plan = place_patches([cand(10, 0, 1.5), cand(0, 5, 1)], 2.0)
    a, b = plan.patches
    np.testing.assert_allclose(a.center, [9, 0, 1.5], atol=1e-15)
    np.testing.assert_allclose(a.normal, [-1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(b.center, [0, 4, 1], atol=1e-15)
    np.testing.assert_allclose(b.normal, [0, -1, 0], atol=1e-15)


def test_place_yaw_rotates_normal():
    (p,) = place_patches([cand(10, 0, 1.5)], 2.0, 30.0).patches
    np.testing.assert_allclose(p.normal, axis_angle((0, 0, 1), np.radians(30)) @ [-1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(p.target, [10, 0, 1.5], atol=1e-12)


def test_place_skips_axis_point(caplog):
    plan = place_patches([cand(0, 0, 2)], 1.0)
    assert len(plan) == 0 and "axis" in caplog.text
    with pytest.raises(ValueError):
        place_patches([], 0.0)


def test_place_ground_clamp():
    (p,) = place_patches([cand(10, 0, 0.5)], 2.0, ground=flat_ground(0.0)).patches
    assert p.center[2] == pytest.approx(1.0)


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-2, 5)), max_size=20),
       st.floats(-90, 90), st.floats(0.1, 4.0))
def test_place_centers_one_metre_away(pts, yaw, side):
    cs = [cand(x, y, z) for x, y, z in pts if np.hypot(x, y) > 1e-6]
    plan = place_patches(cs, side, yaw)
    assert len(plan) == len(cs)
    for c, p in zip(cs, plan.patches):
        assert np.hypot(*(p.center - c.position_ref)[:2]) == pytest.approx(1.0, abs=1e-9)
        assert p.center[2] == c.position_ref[2]
        assert abs(p.normal[2]) == 0 and np.linalg.norm(p.normal) == pytest.approx(1.0, abs=1e-12)


# --- types --------------------------------------------------------------------

def test_patch_validation():
    with pytest.raises(ValueError):
        Patch(np.zeros(3), 0.0, 0.0, np.array([1.0, 0, 0]))
    with pytest.raises(ValueError):
        Patch(np.zeros(3), 1.0, 91.0, np.array([1.0, 0, 0]))
    with pytest.raises(ValueError):
        Patch(np.zeros(3), 1.0, 0.0, np.array([0.0, 0, 1.0]))


def test_plan_json_round_trip():
    plan = place_patches([cand(10, 3, 1.5), cand(-4, 8, 0.7)], 2.1, -20.0, Strategy.RANDK, 5, 77,
                         frame=3, pair=(3, 4))
    back = AttackPlan.from_json(plan.to_json())
    assert back.to_json() == plan.to_json()
    assert back.strategy is Strategy.RANDK and back.k == 5 and back.seed == 77 and back.pair == (3, 4)
    for a, b in zip(plan.patches, back.patches):
        assert np.array_equal(a.center, b.center) and np.array_equal(a.normal, b.normal)
    doc = json.loads(plan.to_json())
    assert set(doc["patches"][0]) == {"center", "side", "yaw", "normal"}
    with pytest.raises(ValueError):
        AttackPlan.from_json('{"k": 1}')
    with pytest.raises(ValueError):
        AttackPlan.from_json("not json")


def test_plan_transform_round_trip(rng):
    plan = place_patches([cand(10, 3, 1.5)], 2.0, 10.0)
    T = RigidTransform(axis_angle((0, 0, 1), 0.7), rng.normal(size=3))
    back = plan.transformed(T).transformed(T.inverse())
    np.testing.assert_allclose(back.patches[0].center, plan.patches[0].center, atol=1e-12)
    np.testing.assert_allclose(back.patches[0].normal, plan.patches[0].normal, atol=1e-12)
