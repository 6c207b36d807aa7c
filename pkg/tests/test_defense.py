import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disorient.cloud import PointCloud, RigidTransform, axis_angle, transform_cloud
from disorient.defense import (ALERT_COLUMNS, VoidAlert, VoidParams, VoidTracker, detect_voids,
                               label_recall, predict_scan, write_alerts_csv)
from disorient.occlusion import occlude, shadow_mask
from disorient.saliency import AttackPlan, Patch, Strategy


def scene(g, n=40000):
    """Ground at -1.7 plus a ring of walls 10-25 m out, in sensor coordinates."""
    ground = np.column_stack([g.uniform(-30, 30, (n // 2, 2)), np.full(n // 2, -1.7)])
    ang = g.uniform(0, 2 * np.pi, n // 2)
    r = np.where(ang < np.pi, 12.0, 20.0)
    walls = np.column_stack([r * np.cos(ang), r * np.sin(ang), g.uniform(-1.7, 3.0, n // 2)])
    return PointCloud(np.vstack([ground, walls]))


def test_predict_examples(rng):
    c = PointCloud(rng.uniform(-5, 5, (50, 3)))
    assert np.array_equal(predict_scan(c, RigidTransform.identity()).points, c.points)
    fwd = RigidTransform.from_translation((1, 0, 0))
    np.testing.assert_allclose(predict_scan(c, fwd).points, c.points - [1, 0, 0], atol=1e-15)
    T = RigidTransform(axis_angle((0, 1, 1), 0.3), np.array([1.0, 2.0, 0.5]))
    np.testing.assert_allclose(predict_scan(predict_scan(c, T), T.inverse()).points, c.points, atol=1e-12)


def test_identical_clouds_no_alerts(rng):
    c = scene(rng)
    assert detect_voids(c, c) == []


@given(st.floats(0.2, 2.0), st.integers(1, 10), st.integers(1, 10), st.floats(0, 1))
def test_identical_clouds_no_alerts_any_params(voxel, min_expected, min_cluster, clearance):
    c = scene(np.random.default_rng(0), 4000)
    p = VoidParams(voxel=voxel, min_expected=min_expected, min_cluster=min_cluster,
                   ground_clearance=clearance)
    assert detect_voids(c, c, p) == []


def test_cube_void_single_alert(rng):
    c = scene(rng)
    lo, hi = np.array([11.0, 3.0, -0.5]), np.array([13.0, 5.0, 1.5])
    inside = np.all((c.points >= lo) & (c.points <= hi), axis=1)
    assert inside.sum() >= 20
    alerts = detect_voids(c, c.select(~inside))
    assert len(alerts) == 1
    a = alerts[0]
    assert np.all(a.centroid >= lo) and np.all(a.centroid <= hi)
    assert a.voxel_count >= VoidParams().min_cluster and a.persistence == 1


def test_monotone_in_thresholds(rng):
    c = scene(rng)
    cut = np.linalg.norm(c.points[:, :2] - [0, 12], axis=1) < 3
    counts_c = [len(detect_voids(c, c.select(~cut), VoidParams(min_cluster=m))) for m in (1, 2, 4, 8, 16)]
    counts_e = [len(detect_voids(c, c.select(~cut), VoidParams(min_expected=m))) for m in (1, 3, 5, 10)]
    assert counts_c == sorted(counts_c, reverse=True)
    assert counts_e == sorted(counts_e, reverse=True)


def test_range_gate_ignores_far_voids(rng):
    c = scene(rng)
    far = np.linalg.norm(c.points[:, :2], axis=1) > 18
    assert detect_voids(c, c.select(~far), VoidParams(max_range=15.0)) == []


def test_alert_centroids_near_shadowed_points():
    g = np.random.default_rng(7)
    c = scene(g)
    patches = []
    for ang in (0.4, 1.3, 2.2):
        u = -np.array([np.cos(ang), np.sin(ang), 0.0])
        p = 12.0 * -u
        patches.append(Patch(p + u + [0, 0, 0.5], 2.1, 0.0, u))
    attacked, report = occlude(c, AttackPlan(Strategy.TOPK, 3, tuple(patches)))
    removed = c.points[list(report.removed_indices)]
    alerts = detect_voids(c, attacked)
    assert len(alerts) >= 3
    diag = np.sqrt(3) * VoidParams().voxel
    for a in alerts:
        assert np.min(np.linalg.norm(removed - a.centroid, axis=1)) <= diag
    per_patch = [c.points[shadow_mask(c.points, p)] for p in patches]
    assert label_recall(alerts, per_patch) == (3, 3)


def test_tracker_persistence():
    tr = VoidTracker(VoidParams(match_radius=1.0, min_persistence=2))
    a = VoidAlert(np.array([10.0, 0, 0]), 5)
    first = tr.update([a])
    assert first[0].persistence == 1 and tr.reportable(first) == []
    # the vehicle moved 1 m forward: the same spot is now at x = 9
    moved = VoidAlert(np.array([9.1, 0, 0]), 5)
    second = tr.update([moved], RigidTransform.from_translation((-1, 0, 0)))
    assert second[0].persistence == 2 and tr.reportable(second) == second
    third = tr.update([VoidAlert(np.array([0.0, 20, 0]), 5)])
    assert third[0].persistence == 1


def test_alerts_csv(tmp_path):
    write_alerts_csv(tmp_path / "a.csv", [(3, [VoidAlert(np.array([1.0, 2.0, 3.0]), 4, 2)])])
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == ",".join(ALERT_COLUMNS)
    assert lines[1] == "3,0,1.0,2.0,3.0,4,2"


def test_voxel_must_be_positive(rng):
    c = scene(rng, 100)
    with pytest.raises(ValueError):
        detect_voids(c, c, VoidParams(voxel=0.0))


def test_motion_compensated_prediction_is_quiet(rng):
    world = scene(rng)
    odom = RigidTransform(axis_angle((0, 0, 1), 0.02), np.array([1.0, 0.1, 0.0]))
    current = transform_cloud(world, odom.inverse())
    assert detect_voids(predict_scan(world, odom), current) == []


def test_void_behind_new_occluder_is_explained(rng):
    # a box appears 6 m out in front of the 12 m wall: the wall patch behind it
    # disappears from the current scan, but a nearer return explains it
    prev = scene(rng)
    p = prev.points
    shadowed = (np.abs(np.arctan2(p[:, 1], p[:, 0]) - np.pi / 2) < 0.12) & (p[:, 2] > -1.0) \
        & (p[:, 2] < 1.5) & (np.linalg.norm(p[:, :2], axis=1) > 11)
    assert shadowed.sum() > 200
    a = rng.uniform(np.pi / 2 - 0.15, np.pi / 2 + 0.15, 3000)
    box = np.column_stack([6 * np.cos(a), 6 * np.sin(a), rng.uniform(-1.2, 1.9, 3000)])
    cur = PointCloud(np.vstack([p[~shadowed], box]))
    assert detect_voids(prev, cur) == []
    assert len(detect_voids(prev, cur, VoidParams(occlusion_angle_deg=None))) >= 1
    # without the occluder the same hole is reported
    assert len(detect_voids(prev, PointCloud(p[~shadowed]))) >= 1
