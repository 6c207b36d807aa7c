"""Registration error metrics, recall, trajectory chaining and vulnerable pairs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .cloud import RigidTransform, Trajectory, compose

PAIR_COLUMNS = ["seq", "frame_i", "frame_j", "strategy", "k", "side_m", "yaw_deg", "mode",
                "converged", "rre_deg", "rte_m", "removed_points"]
SUMMARY_COLUMNS = ["strategy", "k", "side_m", "yaw_deg", "mean_rre", "mean_rte", "rr", "n_pairs"]


@dataclass(frozen=True)
class PairError:
    pair_id: tuple
    rre_deg: float
    rte_m: float
    converged: bool = True

    def __post_init__(self):
        if not (0.0 <= self.rre_deg <= 180.0):
            raise ValueError(f"rre out of range: {self.rre_deg}")
        if not (math.isfinite(self.rte_m) and self.rte_m >= 0):
            raise ValueError(f"rte must be finite and non-negative: {self.rte_m}")


@dataclass(frozen=True)
class EvalConfig:
    rre_threshold_deg: float = 0.5
    rte_threshold_m: float = 0.3
    frame_stride: int = 1
    vulnerable_rre_deg: float = 15.0
    vulnerable_rte_m: float = 2.0

    def __post_init__(self):
        for name in ("rre_threshold_deg", "rte_threshold_m", "frame_stride",
                     "vulnerable_rre_deg", "vulnerable_rte_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


def rre(R_est, R_gt) -> float:
    """Geodesic angle between two rotations, in degrees.

    atan2 of the sine (from the skew part) and cosine (from the trace) keeps
    full precision near 0 and 180 degrees, where arccos of the trace does not.
    """
    M = np.asarray(R_gt, dtype=float).T @ np.asarray(R_est, dtype=float)
    c = (np.trace(M) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(min(np.degrees(np.arctan2(s, c)), 180.0))


def rte(t_est, t_gt) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=float) - np.asarray(t_gt, dtype=float)))


def pair_error(pair_id, est: RigidTransform | None, gt: RigidTransform,
               converged: bool = True) -> PairError:
    """Error of an estimate; a failed registration is scored as the identity."""
    if est is None or not converged:
        est = RigidTransform.identity()
    return PairError(tuple(pair_id), rre(est.rotation, gt.rotation),
                     rte(est.translation, gt.translation), bool(converged))


def _sorted(errors):
    if not errors:
        raise ValueError("empty error list")
    return sorted(errors, key=lambda e: tuple(e.pair_id))


def registration_recall(errors, cfg: EvalConfig | None = None) -> float:
    cfg = cfg or EvalConfig()
    errors = _sorted(errors)
    ok = sum(1 for e in errors if e.converged and e.rre_deg < cfg.rre_threshold_deg
             and e.rte_m < cfg.rte_threshold_m)
    return ok / len(errors)


def summarize(errors, cfg: EvalConfig | None = None) -> tuple:
    """(mean RRE, mean RTE, RR) averaged over every pair."""
    errors = _sorted(errors)
    mean_rre = math.fsum(e.rre_deg for e in errors) / len(errors)
    mean_rte = math.fsum(e.rte_m for e in errors) / len(errors)
    return mean_rre, mean_rte, registration_recall(errors, cfg)


def chain_trajectory(rel) -> Trajectory:
    poses = [RigidTransform.identity()]
    for r in rel:
        poses.append(compose(poses[-1], r))
    return Trajectory(poses, range(len(poses)))


def relatives(traj: Trajectory, stride: int = 1) -> list:
    """Relative transforms between frames ``stride`` apart."""
    return [traj.relative(i, i + stride) for i in range(0, len(traj) - stride, stride)]


def endpoint_drift(est: Trajectory, gt: Trajectory) -> float:
    return rte(est.poses[-1].translation, gt.poses[-1].translation)


def find_vulnerable_pairs(errors, cfg: EvalConfig | None = None) -> list:
    cfg = cfg or EvalConfig()
    hit = [e for e in errors if e.rre_deg > cfg.vulnerable_rre_deg or e.rte_m > cfg.vulnerable_rte_m]
    hit.sort(key=lambda e: (-e.rte_m, tuple(e.pair_id)))
    return [tuple(e.pair_id) for e in hit]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
