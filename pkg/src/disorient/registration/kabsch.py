from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..cloud import RigidTransform


class DegenerateGeometryError(ValueError):
    """Correspondences do not determine a unique rigid transform."""


@dataclass(frozen=True)
class Correspondence:
    src_index: int
    tgt_index: int
    weight: float = 1.0

    def __post_init__(self):
        if self.src_index < 0 or self.tgt_index < 0:
            raise ValueError("correspondence indices must be non-negative")
        if not (np.isfinite(self.weight) and self.weight >= 0):
            raise ValueError("correspondence weight must be finite and >= 0")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    correspondences: list = field(default_factory=list)
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0
    # positions the correspondences index into (source keypoints, target keypoints)
    src_points: np.ndarray | None = None
    tgt_points: np.ndarray | None = None
    src_scores: np.ndarray | None = None


def weighted_kabsch(src_pts, tgt_pts, weights=None, rank_tol: float = 1e-9) -> RigidTransform:
    """Closed-form minimiser of sum_i w_i |R p_i + t - q_i|^2.

    Raises DegenerateGeometryError for fewer than three positively weighted
    pairs or (near-)collinear configurations.
    """
    P = np.asarray(src_pts, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(tgt_pts, dtype=np.float64).reshape(-1, 3)
    if len(P) != len(Q):
        raise ValueError("source and target lists differ in length")
    w = np.ones(len(P)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(P):
        raise ValueError("weights length does not match points")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be finite and non-negative")
    keep = w > 0
    if keep.sum() < 3:
        raise DegenerateGeometryError("need at least 3 positively weighted pairs")
    P, Q, w = P[keep], Q[keep], w[keep]
    w = w / w.sum()

    mu_p = w @ P
    mu_q = w @ Q
    Pc = P - mu_p
    Qc = Q - mu_q
    H = (Pc * w[:, None]).T @ Qc
    U, S, Vt = np.linalg.svd(H)
    scale = max(S[0], np.finfo(float).tiny)
    # rank <= 1 leaves rotation about the common line undetermined
    if S[1] <= rank_tol * scale or S[0] <= 1e-300:
        raise DegenerateGeometryError("collinear or coincident correspondences")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mu_q - R @ mu_p
    return RigidTransform(R, t)
