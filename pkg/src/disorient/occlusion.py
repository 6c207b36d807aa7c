"""Point removal by absorbing patches ("shadow") or by cubes around targets ("crop")."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud, RigidTransform
from .saliency import AttackPlan, Patch

E_Z = np.array([0.0, 0.0, 1.0])


class Mode(str, enum.Enum):
    SHADOW = "shadow"
    CROP = "crop"


class AttackTarget(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"
    BOTH = "both"


@dataclass(frozen=True)
class OcclusionReport:
    removed_indices: tuple
    per_patch_counts: tuple

    @property
    def removed_count(self) -> int:
        return len(self.removed_indices)

    def rows(self, pair_id) -> list:
        """(pair_id, patch_id, removed_count) rows for the run CSV."""
        return [(pair_id, i, int(n)) for i, n in enumerate(self.per_patch_counts)]


def patch_axes(patch: Patch):
    e_h = np.cross(patch.normal, E_Z)
    return e_h, E_Z


def patch_corners(patch: Patch) -> np.ndarray:
    """(4, 3) corners, counterclockwise seen from the side the normal faces."""
    e_h, e_z = patch_axes(patch)
    h = patch.side / 2
    c = patch.center
    return np.array([c + h * e_h - h * e_z, c - h * e_h - h * e_z,
                     c - h * e_h + h * e_z, c + h * e_h + h * e_z])


def shadow_mask(points: np.ndarray, patch: Patch, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Points whose ray from ``origin`` crosses the patch at s in (0, 1]."""
    o = np.asarray(origin, dtype=np.float64)
    q = points - o
    n = patch.normal
    denom = q @ n
    num = float((patch.center - o) @ n)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = num / denom
    ok = (denom != 0) & (s > 0) & (s <= 1)
    hit = s[ok, None] * q[ok] + o - patch.center
    e_h, e_z = patch_axes(patch)
    half = patch.side / 2
    inside = (np.abs(hit @ e_h) <= half) & (np.abs(hit @ e_z) <= half)
    mask = np.zeros(len(points), dtype=bool)
    mask[np.flatnonzero(ok)[inside]] = True
    return mask


def crop_mask(points: np.ndarray, patch: Patch) -> np.ndarray:
    half = patch.side / 2
    return np.all(np.abs(points - patch.target) <= half, axis=1)


def occlude(cloud: PointCloud, plan: AttackPlan, mode=Mode.SHADOW):
    mode = Mode(mode)
    removed = np.zeros(len(cloud), dtype=bool)
    counts = []
    for patch in plan.patches:
        m = shadow_mask(cloud.points, patch) if mode is Mode.SHADOW else crop_mask(cloud.points, patch)
        counts.append(int(m.sum()))
        removed |= m
    report = OcclusionReport(tuple(int(i) for i in np.flatnonzero(removed)), tuple(counts))
    if not removed.any():
        return cloud, report
    return cloud.select(~removed), report


def apply_plan_to_pair(src: PointCloud, tgt: PointCloud, plan: AttackPlan, mode=Mode.SHADOW,
                       attack_target=AttackTarget.BOTH, gt: RigidTransform | None = None):
    """Occlude the chosen scan(s) of a pair.

    ``plan`` is expressed in the target (reference) frame; the source scan is
    occluded with the plan mapped through ``gt^-1`` (``gt`` maps source to
    target coordinates). Returns ``(src', tgt', {"source": report, "target": report})``.
    """
    attack_target = AttackTarget(attack_target)
    reports = {}
    if attack_target in (AttackTarget.SOURCE, AttackTarget.BOTH):
        src_plan = plan.transformed(gt.inverse()) if gt is not None else plan
        src, reports["source"] = occlude(src, src_plan, mode)
    if attack_target in (AttackTarget.TARGET, AttackTarget.BOTH):
        tgt, reports["target"] = occlude(tgt, plan, mode)
    return src, tgt, reports
