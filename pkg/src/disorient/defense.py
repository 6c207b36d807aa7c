"""LiDAR-only scan-consistency check: flag regions whose expected returns vanish.

A motion-compensated previous scan predicts where returns should appear;
voxels that were well populated in the prediction but are empty now are
grouped into clusters and reported as void alerts. This is the single-sensor
core of a consistency defense; camera cross-checks are not modelled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .cloud import PointCloud, RigidTransform, transform_cloud
from .saliency import GroundModel, estimate_ground

ALERT_COLUMNS = ["frame", "cluster_id", "cx", "cy", "cz", "voxels", "persistence"]


@dataclass(frozen=True, eq=False)
class VoidAlert:
    centroid: np.ndarray
    voxel_count: int
    persistence: int = 1
    voxels: np.ndarray | None = None  # (n, 3) integer voxel keys


@dataclass
class VoidParams:
    voxel: float = 0.5
    min_range: float = 3.0
    max_range: float = 40.0
    ground_clearance: float = 0.3
    ground_cell: float = 2.0
    min_expected: int = 5
    min_cluster: int = 4
    match_radius: float = 1.0
    min_persistence: int = 2
    # a void voxel is explained (not reported) when the current scan has a
    # return nearer than it along the same line of sight; None disables
    occlusion_angle_deg: float | None = 0.5


def predict_scan(prev: PointCloud, odom: RigidTransform) -> PointCloud:
    """Previous scan expressed in the current frame (``odom`` maps current to previous)."""
    return transform_cloud(prev, odom.inverse())


def _gate(cloud: PointCloud, ground: GroundModel | None, params: VoidParams) -> np.ndarray:
    pts = cloud.points
    r = np.linalg.norm(pts, axis=1)
    keep = (r >= params.min_range) & (r <= params.max_range)
    if ground is not None and keep.any():
        idx = np.flatnonzero(keep)
        g = ground.height_at(pts[idx, :2])
        keep[idx[pts[idx, 2] <= g + params.ground_clearance]] = False
    return pts[keep]


def detect_voids(predicted: PointCloud, current: PointCloud,
                 params: VoidParams | None = None, ground: GroundModel | None = None) -> list:
    params = params or VoidParams()
    if not params.voxel > 0:
        raise ValueError("voxel size must be positive")
    if len(predicted) == 0:
        return []
    if ground is None and params.ground_clearance is not None:
        ground = estimate_ground(predicted, params.ground_cell)
    p = _gate(predicted, ground, params)
    c = _gate(current, ground, params)
    if len(p) == 0:
        return []
    pk = np.floor(p / params.voxel).astype(np.int64)
    keys, inv, counts = np.unique(pk, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    occupied = set(map(tuple, np.floor(c / params.voxel).astype(np.int64))) if len(c) else set()
    void = np.array([n >= params.min_expected and tuple(k) not in occupied
                     for k, n in zip(keys, counts)], dtype=bool)
    vidx = np.flatnonzero(void)
    if params.occlusion_angle_deg is not None and len(vidx) and len(c):
        vidx = vidx[~_line_of_sight_blocked(keys[vidx], c, params)]
    if len(vidx) < params.min_cluster:
        return []
    vk = keys[vidx]
    pairs = cKDTree(vk.astype(np.float64)).query_pairs(np.sqrt(3.0) + 1e-6, output_type="ndarray")
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                     shape=(len(vk), len(vk))) if len(pairs) else coo_matrix((len(vk), len(vk)))
    n_comp, label = connected_components(adj, directed=False)
    sizes = np.bincount(label, minlength=n_comp)

    # predicted points per void voxel feed the centroid
    voxel_label = np.full(len(keys), -1)
    voxel_label[vidx] = label
    pt_label = voxel_label[inv]
    alerts = []
    for comp in range(n_comp):
        if sizes[comp] < params.min_cluster:
            continue
        members = p[pt_label == comp]
        alerts.append(VoidAlert(members.mean(axis=0), int(sizes[comp]), 1, vk[label == comp]))
    alerts.sort(key=lambda a: tuple(a.centroid))
    return alerts


def _line_of_sight_blocked(vkeys: np.ndarray, current: np.ndarray,
                           params: VoidParams) -> np.ndarray:
    """True where some current return lies in front of the voxel center.

    Returns near the same bearing but at least one voxel closer mean the
    region was hidden by geometry that the sensor now sees, not erased.
    """
    centers = (vkeys + 0.5) * params.voxel
    r = np.linalg.norm(centers, axis=1)
    rc = np.linalg.norm(current, axis=1)
    tree = cKDTree(current / rc[:, None])
    # chord length on the unit sphere for the angular tolerance, widened to
    # cover the voxel's own angular size
    ang = np.maximum(np.radians(params.occlusion_angle_deg), np.arctan2(0.5 * params.voxel, r))
    chord = 2.0 * np.sin(ang / 2.0)
    out = np.zeros(len(centers), dtype=bool)
    for n, (d, lim) in enumerate(zip(centers / r[:, None], chord)):
        idx = tree.query_ball_point(d, lim)
        out[n] = bool(idx) and bool((rc[idx] < r[n] - params.voxel).any())
    return out


class VoidTracker:
    """Carries persistence counts across consecutive frames.

    ``prev_to_cur`` maps the previous frame's coordinates into the current
    frame, so that stored centroids can be matched against new alerts.
    """

    def __init__(self, params: VoidParams | None = None):
        self.params = params or VoidParams()
        self._last: list = []

    def update(self, alerts, prev_to_cur: RigidTransform | None = None) -> list:
        last = self._last
        if prev_to_cur is not None and last:
            last = [replace(a, centroid=prev_to_cur.apply(a.centroid)) for a in last]
        out = []
        for a in alerts:
            best = None
            for b in last:
                d = np.linalg.norm(a.centroid - b.centroid)
                if d <= self.params.match_radius and (best is None or d < best[0]):
                    best = (d, b)
            out.append(replace(a, persistence=best[1].persistence + 1 if best else 1))
        self._last = out
        return out

    def reportable(self, alerts) -> list:
        return [a for a in alerts if a.persistence >= self.params.min_persistence]


def write_alerts_csv(path, frame_alerts) -> None:
    """``frame_alerts``: iterable of (frame, alerts)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ALERT_COLUMNS)
        for frame, alerts in frame_alerts:
            for i, a in enumerate(alerts):
                w.writerow([frame, i, *(repr(round(float(v), 9)) for v in a.centroid),
                            a.voxel_count, a.persistence])


def label_recall(alerts, removed_per_patch, params: VoidParams | None = None,
                 min_points: int | None = None) -> tuple:
    """(detected, positives) over patches.

    A patch is a positive when it removed at least ``min_points`` returns
    (default ``min_expected * min_cluster``, the smallest void the detector
    can report); it is detected when an alert voxel lies within one voxel of
    a removed point.
    """
    params = params or VoidParams()
    if min_points is None:
        min_points = params.min_expected * params.min_cluster
    alert_keys = set()
    for a in alerts:
        for k in a.voxels:
            alert_keys.add(tuple(int(v) for v in k))
    detected = positives = 0
    offsets = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)]
    for pts in removed_per_patch:
        if len(pts) < min_points:
            continue
        positives += 1
        keys = {tuple(int(v) for v in k) for k in np.floor(np.asarray(pts) / params.voxel)}
        if any((a + i, b + j, c + k) in alert_keys for a, b, c in keys for i, j, k in offsets):
            detected += 1
    return detected, positives
