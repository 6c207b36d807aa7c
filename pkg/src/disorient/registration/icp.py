from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cloud import PointCloud, RigidTransform, SpatialIndex, compose, voxel_downsample
from .kabsch import Correspondence, DegenerateGeometryError, RegistrationResult, weighted_kabsch


@dataclass
class IcpParams:
    max_distance: float = 2.0
    max_iter: int = 50
    tol: float = 1e-6
    voxel: float = 0.0


def icp_register(src: PointCloud, tgt: PointCloud, init: RigidTransform | None = None,
                 params: IcpParams | None = None, tgt_index: SpatialIndex | None = None
                 ) -> RegistrationResult:
    """Point-to-point ICP with a correspondence distance gate.

    With ``params.voxel > 0`` both clouds are thinned first and the reported
    correspondence indices refer to the thinned clouds (``src_points`` /
    ``tgt_points`` of the result).

    Stops when the relative change of the RMS residual drops below ``tol``
    (relative to at least 1 mm, so exact alignments terminate too).
    An empty gated correspondence set yields ``converged=False``.
    """
    params = params or IcpParams()
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("ICP needs non-empty clouds")
    if params.voxel > 0:
        src = voxel_downsample(src, params.voxel)
        if tgt_index is None:
            tgt = voxel_downsample(tgt, params.voxel)
    T = init or RigidTransform.identity()
    index = tgt_index or SpatialIndex(tgt.points)
    P = src.points
    Q = index.points

    prev = None
    corrs: list = []
    residual = 0.0
    for it in range(1, params.max_iter + 1):
        moved = T.apply(P)
        dist, nn = index.nearest_many(moved, k=1)
        gate = dist <= params.max_distance
        if gate.sum() < 3:
            return RegistrationResult(T, [], False, it, 0.0)
        residual = float(np.sqrt(np.mean(dist[gate] ** 2)))
        if prev is not None and abs(prev - residual) <= params.tol * max(prev, 1e-3):
            corrs = [Correspondence(int(i), int(j), 1.0)
                     for i, j in zip(np.flatnonzero(gate), nn[gate])]
            return RegistrationResult(T, corrs, True, it, residual,
                                      src_points=P, tgt_points=Q)
        if residual == 0.0:
            corrs = [Correspondence(int(i), int(j), 1.0)
                     for i, j in zip(np.flatnonzero(gate), nn[gate])]
            return RegistrationResult(T, corrs, True, it, residual,
                                      src_points=P, tgt_points=Q)
        prev = residual
        try:
            step = weighted_kabsch(moved[gate], Q[nn[gate]])
        except DegenerateGeometryError:
            return RegistrationResult(T, [], False, it, residual)
        T = compose(step, T)

    moved = T.apply(P)
    dist, nn = index.nearest_many(moved, k=1)
    gate = dist <= params.max_distance
    corrs = [Correspondence(int(i), int(j), 1.0) for i, j in zip(np.flatnonzero(gate), nn[gate])]
    residual = float(np.sqrt(np.mean(dist[gate] ** 2))) if gate.any() else 0.0
    return RegistrationResult(T, corrs, False, params.max_iter, residual,
                              src_points=P, tgt_points=Q)
