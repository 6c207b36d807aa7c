"""Keypoint-based registration: surface-variation detector, FPFH-style
descriptors, mutual nearest-neighbour matching and RANSAC."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..cloud import PointCloud, RigidTransform, voxel_downsample
from .kabsch import Correspondence, DegenerateGeometryError, RegistrationResult, weighted_kabsch

log = logging.getLogger(__name__)

N_BINS = 11
DESCRIPTOR_LEN = 3 * N_BINS
MIN_NEIGHBORS = 5


@dataclass(frozen=True, eq=False)
class ScoredKeypoint:
    position: np.ndarray
    score: float
    descriptor: np.ndarray = field(default_factory=lambda: np.zeros(DESCRIPTOR_LEN))


@dataclass
class FeatureParams:
    voxel: float = 0.35
    detect_radius: float = 1.0
    nms_radius: float = 0.5
    min_score: float = 0.03
    descriptor_radius: float = 2.5
    normal_radius: float = 1.0
    normal_min_spread: float = 0.0
    max_range: float = 0.0
    min_height: float = 0.0     # above the local ground minimum; 0 disables
    ground_cell: float = 1.0
    ransac_iterations: int = 4000
    inlier_threshold: float = 0.4
    min_inliers: int = 5
    consensus: str = "weight"   # hypothesis score: "weight" (sum of inlier weights) or "count"
    seed: int = 0


def radius_pairs(tree: cKDTree, queries: np.ndarray, radius: float, self_query: bool = False):
    """All (query, point) index pairs within ``radius`` (order is deterministic)."""
    qtree = tree if self_query else cKDTree(queries)
    sp = qtree.sparse_distance_matrix(tree, radius, output_type="ndarray")
    owner = sp["i"].astype(np.int64)
    flat = sp["j"].astype(np.int64)
    return owner, flat


def _neighborhood_moments(tree: cKDTree, pts: np.ndarray, queries: np.ndarray, radius: float,
                          self_query: bool = False):
    """Count, mean and covariance of the radius neighbourhood of each query."""
    owner, flat = radius_pairs(tree, queries, radius, self_query)
    m = len(queries)
    lens = np.bincount(owner, minlength=m)
    cnt = lens.astype(np.float64)
    safe = np.maximum(cnt, 1.0)
    P = pts[flat]
    mean = np.stack([np.bincount(owner, P[:, d], m) for d in range(3)], axis=1) / safe[:, None]
    D = P - mean[owner]
    cov = np.stack([np.bincount(owner, D[:, i] * D[:, j], m)
                    for i in range(3) for j in range(3)], axis=1).reshape(m, 3, 3)
    cov /= safe[:, None, None]
    return lens, mean, cov


def _eig_features(lens, cov, points, min_spread: float = 0.0):
    """Surface variation and sensor-facing normals from neighbourhood covariances."""
    w, V = np.linalg.eigh(cov)
    w = np.maximum(w, 0.0)
    total = w.sum(axis=1)
    score = np.where(total > 0, w[:, 0] / np.where(total > 0, total, 1.0), 0.0)
    normals = orient_normals(points, V[:, :, 0])
    bad = lens < 3
    if min_spread > 0:
        bad |= w[:, 1] < min_spread * np.maximum(w[:, 2], 1e-300)
    normals[bad] = 0.0
    return score, normals


def surface_variation(cloud_pts: np.ndarray, radius: float, tree: cKDTree | None = None):
    """lambda_min / sum(lambda) of each point's neighbourhood covariance,
    plus sensor-facing unit normals and neighbour counts."""
    tree = tree or cKDTree(cloud_pts)
    lens, _, cov = _neighborhood_moments(tree, cloud_pts, cloud_pts, radius, self_query=True)
    score, normals = _eig_features(lens, cov, cloud_pts)
    return score, normals, lens


def orient_normals(points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Flip normals to face the sensor origin."""
    flip = np.einsum("ij,ij->i", normals, -points) < 0
    out = normals.copy()
    out[flip] *= -1
    return out


def estimate_normals(pts: np.ndarray, queries: np.ndarray, radius: float,
                     tree: cKDTree | None = None, min_spread: float = 0.0,
                     self_query: bool = False):
    """Sensor-facing PCA normals; zero where the neighbourhood is too small or,
    with ``min_spread``, too line-like (middle/largest eigenvalue below it)."""
    tree = tree or cKDTree(pts)
    lens, _, cov = _neighborhood_moments(tree, pts, queries, radius, self_query)
    return _eig_features(lens, cov, queries, min_spread)[1]


def pair_features(p1, n1, p2, n2):
    """Vectorised (theta, alpha, phi) Darboux-frame pair features.

    Source/target roles are chosen so the angle between the source normal and
    the connecting line is the smaller one, which makes the feature symmetric.
    """
    dp = p2 - p1
    dist = np.linalg.norm(dp, axis=1)
    ok = dist > 0
    dist = np.where(ok, dist, 1.0)
    a1 = np.einsum("ij,ij->i", n1, dp) / dist
    a2 = np.einsum("ij,ij->i", n2, dp) / dist
    swap = np.abs(a1) < np.abs(a2)
    u = np.where(swap[:, None], n2, n1)
    nt = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -dp, dp) / dist[:, None]
    phi = np.where(swap, -a2, a1)
    v = np.cross(d, u)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > 1e-12
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, nt)
    theta = np.arctan2(np.einsum("ij,ij->i", w, nt), np.einsum("ij,ij->i", u, nt))
    # +pi and -pi are the same angle; planar man-made geometry lands exactly on
    # it, so fold the seam into one bin instead of splitting on rounding noise
    theta = np.where(theta > np.pi - 1e-9, theta - 2 * np.pi, theta)
    return theta, alpha, phi, ok


def _bin(values, lo, hi):
    b = np.floor((values - lo) / (hi - lo) * N_BINS).astype(np.int64)
    return np.clip(b, 0, N_BINS - 1)


def _spfh(owner, m, p1, n1, p2, n2):
    """Simplified point feature histograms, one 33-vector per owner."""
    theta, alpha, phi, ok = pair_features(p1, n1, p2, n2)
    ok &= np.any(n1 != 0, axis=1) & np.any(n2 != 0, axis=1)
    owner = owner[ok]
    hist = np.zeros((m, DESCRIPTOR_LEN))
    for k, (vals, lo, hi) in enumerate(((theta[ok], -np.pi, np.pi),
                                        (alpha[ok], -1.0, 1.0),
                                        (phi[ok], -1.0, 1.0))):
        idx = owner * DESCRIPTOR_LEN + k * N_BINS + _bin(vals, lo, hi)
        hist += np.bincount(idx, minlength=m * DESCRIPTOR_LEN).reshape(m, DESCRIPTOR_LEN)
    cnt = np.bincount(owner, minlength=m).astype(np.float64)
    hist /= np.maximum(cnt, 1.0)[:, None]
    return hist


def compute_descriptors(cloud, centers, radius: float, normal_radius: float | None = None,
                        tree: cKDTree | None = None, normals: np.ndarray | None = None,
                        min_spread: float = 0.0) -> np.ndarray:
    """FPFH-style 33-bin descriptors at ``centers`` over ``cloud``.

    Rows are L1-normalised; centers without usable neighbours get a zero row.
    """
    if not radius > 0:
        raise ValueError("descriptor radius must be positive")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    m = len(centers)
    out = np.zeros((m, DESCRIPTOR_LEN))
    if m == 0 or len(pts) == 0:
        return out
    normal_radius = normal_radius or radius
    tree = tree or cKDTree(pts)
    if normals is None:
        normals = estimate_normals(pts, pts, normal_radius, tree, min_spread, self_query=True)

    c_normals = estimate_normals(pts, centers, normal_radius, tree, min_spread)
    c_owner, c_flat = radius_pairs(tree, centers, radius)
    d_c = np.linalg.norm(pts[c_flat] - centers[c_owner], axis=1)
    keep = d_c > 0
    c_owner, c_flat, d_c = c_owner[keep], c_flat[keep], d_c[keep]
    if len(c_flat) == 0:
        return out
    center_hist = _spfh(c_owner, m, centers[c_owner], c_normals[c_owner],
                        pts[c_flat], normals[c_flat])

    support = np.unique(c_flat)
    s_owner, s_flat = radius_pairs(tree, pts[support], radius)
    keep = s_flat != support[s_owner]
    s_owner, s_flat = s_owner[keep], s_flat[keep]
    sup_hist = _spfh(s_owner, len(support), pts[support][s_owner],
                     normals[support][s_owner], pts[s_flat], normals[s_flat])

    pos = np.searchsorted(support, c_flat)
    wts = 1.0 / d_c
    cnt = np.bincount(c_owner, minlength=m).astype(np.float64)
    acc = np.zeros((m, DESCRIPTOR_LEN))
    np.add.at(acc, c_owner, sup_hist[pos] * wts[:, None])
    fp = center_hist + acc / np.maximum(cnt, 1.0)[:, None]
    valid_c = np.any(c_normals != 0, axis=1)
    fp[~valid_c | (cnt == 0)] = 0.0
    total = fp.sum(axis=1)
    nz = total > 0
    out[nz] = fp[nz] / total[nz, None]
    return out


def local_height(cloud_pts: np.ndarray, queries: np.ndarray, cell: float) -> np.ndarray:
    """Height of each query above the lowest point in its 3x3 block of xy cells."""
    keys = np.floor(cloud_pts[:, :2] / cell).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    zmin = np.full(len(uniq), np.inf)
    np.minimum.at(zmin, inv.reshape(-1), cloud_pts[:, 2])
    table = {(int(a), int(b)): z for (a, b), z in zip(uniq, zmin)}
    qk = np.floor(queries[:, :2] / cell).astype(np.int64)
    floor = np.array([min(table.get((a + i, b + j), np.inf) for i in (-1, 0, 1) for j in (-1, 0, 1))
                      for a, b in qk])
    return queries[:, 2] - floor


def detect_keypoints(cloud: PointCloud, params: FeatureParams | None = None,
                     thinned: PointCloud | None = None) -> list:
    """Local maxima of surface variation after voxel thinning."""
    params = params or FeatureParams()
    pc = thinned if thinned is not None else (
        voxel_downsample(cloud, params.voxel) if params.voxel > 0 else cloud)
    pts = pc.points
    if len(pts) < MIN_NEIGHBORS:
        return []
    tree = cKDTree(pts)
    lens, _, cov = _neighborhood_moments(tree, pts, pts, params.detect_radius, self_query=True)
    score, normals = _eig_features(lens, cov, pts, params.normal_min_spread)
    if params.normal_radius != params.detect_radius:
        normals = estimate_normals(pts, pts, params.normal_radius, tree,
                                   params.normal_min_spread, self_query=True)
    eligible = lens >= MIN_NEIGHBORS
    cand = eligible & (score >= params.min_score)
    # non-maximum suppression: a point survives if no eligible neighbour beats it
    pairs = tree.query_pairs(params.nms_radius, output_type="ndarray")
    suppressed = np.zeros(len(pts), dtype=bool)
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        slo, shi = score[lo], score[hi]
        # ties favour the lower index
        suppressed[lo[(shi > slo) & eligible[hi]]] = True
        suppressed[hi[(slo >= shi) & eligible[lo]]] = True
    keep = np.flatnonzero(cand & ~suppressed)
    if params.max_range > 0:
        keep = keep[np.linalg.norm(pts[keep], axis=1) <= params.max_range]
    if params.min_height > 0 and len(keep):
        keep = keep[local_height(pts, pts[keep], params.ground_cell) >= params.min_height]
    if len(keep) == 0:
        return []
    desc = compute_descriptors(pts, pts[keep], params.descriptor_radius,
                               params.normal_radius, tree, normals=normals)
    kps = []
    for idx, d in zip(keep, desc):
        if d.sum() > 0:
            kps.append(ScoredKeypoint(pts[idx].copy(), float(score[idx]), d))
    return kps


def match_descriptors(kp_a, kp_b) -> list:
    """Mutual nearest neighbours in descriptor space.

    Weight is ``1 - d1/d2`` for the row keypoint's best and second-best
    distances (``d2 = inf`` with a single candidate).
    """
    A = _descriptors(kp_a)
    B = _descriptors(kp_b)
    if len(A) == 0 or len(B) == 0:
        return []
    D = np.sqrt(np.maximum(
        np.sum(A ** 2, 1)[:, None] + np.sum(B ** 2, 1)[None, :] - 2 * A @ B.T, 0.0))
    ab = np.argmin(D, axis=1)
    ba = np.argmin(D, axis=0)
    if D.shape[1] > 1:
        part = np.partition(D, 1, axis=1)
        d1, d2 = part[:, 0], part[:, 1]
    else:
        d1, d2 = D[:, 0], np.full(len(A), np.inf)
    out = []
    for i, j in enumerate(ab):
        if ba[j] != i:
            continue
        if np.isinf(d2[i]):
            w = 1.0
        elif d2[i] <= 0:
            w = 0.0
        else:
            w = float(np.clip(1.0 - d1[i] / d2[i], 0.0, 1.0))
        out.append(Correspondence(i, int(j), w))
    return out


def _descriptors(kps) -> np.ndarray:
    if isinstance(kps, np.ndarray):
        return kps.reshape(len(kps), -1)
    if len(kps) == 0:
        return np.zeros((0, DESCRIPTOR_LEN))
    return np.array([k.descriptor for k in kps])


def _positions(kps) -> np.ndarray:
    if isinstance(kps, np.ndarray):
        return kps.reshape(-1, 3)
    return np.array([k.position for k in kps]).reshape(-1, 3)


def _kabsch_batch(P, Q):
    """Unweighted Kabsch for a batch of (n, 3) point sets; returns R, t, ok."""
    mp = P.mean(axis=1, keepdims=True)
    mq = Q.mean(axis=1, keepdims=True)
    H = np.einsum("bni,bnj->bij", P - mp, Q - mq)
    U, S, Vt = np.linalg.svd(H)
    ok = S[:, 1] > 1e-6 * np.maximum(S[:, 0], 1e-300)
    d = np.sign(np.linalg.det(np.einsum("bji,bkj->bik", Vt, U)))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.einsum("bji,bjk,blk->bil", Vt, D, U)
    t = mq[:, 0] - np.einsum("bij,bj->bi", R, mp[:, 0])
    return R, t, ok


def ransac_register(corrs, kp_a, kp_b, params: FeatureParams | None = None) -> RegistrationResult:
    """RANSAC over 3-point samples, refit on inliers with correspondence weights."""
    params = params or FeatureParams()
    if len(corrs) < 3:
        raise ValueError("RANSAC needs at least 3 correspondences")
    A = _positions(kp_a)
    B = _positions(kp_b)
    si = np.array([c.src_index for c in corrs])
    ti = np.array([c.tgt_index for c in corrs])
    w = np.array([c.weight for c in corrs], dtype=np.float64)
    P, Q = A[si], B[ti]
    n = len(corrs)
    rng = np.random.default_rng(np.uint64(params.seed))
    iters = params.ransac_iterations
    # three distinct indices per sample
    samp = _sample_distinct(rng, iters, n)
    R, t, ok = _kabsch_batch(P[samp], Q[samp])
    thr2 = params.inlier_threshold ** 2
    best_score, best = -np.inf, None
    chunk = 256
    for s in range(0, iters, chunk):
        Rc, tc, okc = R[s:s + chunk], t[s:s + chunk], ok[s:s + chunk]
        moved = np.einsum("bij,nj->bni", Rc, P) + tc[:, None, :]
        inl = np.sum((moved - Q[None]) ** 2, axis=2) < thr2
        score = inl @ w if params.consensus == "weight" else inl.sum(axis=1).astype(np.float64)
        score = np.where(okc, score, -1.0)
        k = int(np.argmax(score))
        if score[k] > best_score:
            best_score, best = float(score[k]), inl[k]
    if best is None or best.sum() < max(params.min_inliers, 3):
        return RegistrationResult(RigidTransform.identity(), [], False, iters, 0.0,
                                  src_points=A, tgt_points=B)
    try:
        T = _refit(P[best], Q[best], w[best])
    except DegenerateGeometryError:
        return RegistrationResult(RigidTransform.identity(), [], False, iters, 0.0,
                                  src_points=A, tgt_points=B)
    r2 = np.sum((T.apply(P) - Q) ** 2, axis=1)
    inliers = r2 < thr2
    if inliers.sum() >= 3 and not np.array_equal(inliers, best):
        try:
            T = _refit(P[inliers], Q[inliers], w[inliers])
            r2 = np.sum((T.apply(P) - Q) ** 2, axis=1)
            inliers = r2 < thr2
        except DegenerateGeometryError:
            inliers = best
    if inliers.sum() < 3:
        inliers = best
    sel = np.flatnonzero(inliers)
    ww = w[sel]
    residual = float(np.sqrt(np.sum(ww * r2[sel]) / ww.sum())) if ww.sum() > 0 else \
        float(np.sqrt(np.mean(r2[sel])))
    kept = [corrs[i] for i in sel]
    return RegistrationResult(T, kept, len(sel) >= params.min_inliers, iters, residual,
                              src_points=A, tgt_points=B)


def _refit(P, Q, w):
    if np.count_nonzero(w > 0) < 3:
        w = np.ones(len(P))
    return weighted_kabsch(P, Q, w)


def _sample_distinct(rng, iters, n):
    s = rng.integers(0, n, size=(iters, 3))
    while True:
        bad = (s[:, 0] == s[:, 1]) | (s[:, 0] == s[:, 2]) | (s[:, 1] == s[:, 2])
        if not bad.any():
            return s
        s[bad] = rng.integers(0, n, size=(int(bad.sum()), 3))


def feature_register(src: PointCloud, tgt: PointCloud, params: FeatureParams | None = None
                     ) -> RegistrationResult:
    """Detect, describe, match and RANSAC-align ``src`` onto ``tgt``."""
    params = params or FeatureParams()
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("feature registration needs non-empty clouds")
    kp_a = detect_keypoints(src, params)
    kp_b = detect_keypoints(tgt, params)
    pos_a = _positions(kp_a) if kp_a else np.zeros((0, 3))
    scores_a = np.array([k.score for k in kp_a])
    fail = RegistrationResult(RigidTransform.identity(), [], False, 0, 0.0,
                              src_points=pos_a, tgt_points=_positions(kp_b) if kp_b else None,
                              src_scores=scores_a)
    if len(kp_a) < 3 or len(kp_b) < 3:
        log.debug("too few keypoints: %d / %d", len(kp_a), len(kp_b))
        return fail
    corrs = match_descriptors(kp_a, kp_b)
    if len(corrs) < 3:
        return fail
    res = ransac_register(corrs, kp_a, kp_b, params)
    return RegistrationResult(res.transform, res.correspondences, res.converged, res.iterations,
                              res.residual, src_points=pos_a, tgt_points=_positions(kp_b),
                              src_scores=scores_a)
