"""Normal Distributions Transform scan matching.

The pose is parameterised as ``(tx, ty, tz, roll, pitch, yaw)`` with
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``. Newton steps minimise the negated
sum of per-point Gaussian scores of the cell each transformed point falls in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cloud import PointCloud, RigidTransform, voxel_downsample
from .kabsch import Correspondence, RegistrationResult

MIN_CELL_POINTS = 5
EIG_RATIO_FLOOR = 1e-3
ABS_VAR_FLOOR = 1e-6


class EmptyGridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NdtGrid:
    cell_size: float
    keys: np.ndarray        # (C, 3) int64, lexicographically sorted
    means: np.ndarray       # (C, 3)
    covariances: np.ndarray  # (C, 3, 3)
    counts: np.ndarray      # (C,)
    inv_covariances: np.ndarray

    @property
    def cells(self) -> dict:
        return {tuple(int(v) for v in k): (m, c, int(n))
                for k, m, c, n in zip(self.keys, self.means, self.covariances, self.counts)}

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, pts: np.ndarray) -> np.ndarray:
        """Cell index per point, -1 where the containing cell is absent."""
        k = np.floor(pts / self.cell_size).astype(np.int64)
        codes = _encode(k)
        pos = np.searchsorted(self._codes, codes)
        pos = np.clip(pos, 0, len(self._codes) - 1)
        hit = self._codes[pos] == codes
        return np.where(hit, pos, -1)

    @property
    def _codes(self) -> np.ndarray:
        c = self.__dict__.get("_codes_cache")
        if c is None:
            c = _encode(self.keys)
            object.__setattr__(self, "_codes_cache", c)
        return c


def _encode(k: np.ndarray) -> np.ndarray:
    off = np.int64(1 << 20)
    k = k.astype(np.int64) + off
    return (k[:, 0] << np.int64(42)) | (k[:, 1] << np.int64(21)) | k[:, 2]


def regularize_covariance(cov: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(cov)
    floor = max(EIG_RATIO_FLOOR * max(w[-1], 0.0), ABS_VAR_FLOOR)
    w = np.maximum(w, floor)
    return (V * w) @ V.T


def ndt_build(tgt: PointCloud, cell_size: float = 2.0) -> NdtGrid:
    if not cell_size > 0:
        raise ValueError("cell size must be positive")
    pts = tgt.points
    if len(pts) == 0:
        raise EmptyGridError("no cell reaches 5 points")
    keys = np.floor(pts / cell_size).astype(np.int64)
    # sort by encoded key so lookup can binary-search
    codes = _encode(keys)
    uniq, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    keep = counts >= MIN_CELL_POINTS
    if not keep.any():
        raise EmptyGridError("no cell reaches 5 points")
    n = len(uniq)
    means = np.stack([np.bincount(inverse, pts[:, d], n) for d in range(3)], axis=1) / counts[:, None]
    diff = pts - means[inverse]
    outer = diff[:, :, None] * diff[:, None, :]
    cov = np.stack([np.bincount(inverse, outer[:, i, j], n)
                    for i in range(3) for j in range(3)], axis=1).reshape(n, 3, 3)
    cov /= np.maximum(counts - 1, 1)[:, None, None]

    cell_keys = np.empty((n, 3), dtype=np.int64)
    cell_keys[inverse] = keys
    cell_keys, means, cov, counts = cell_keys[keep], means[keep], cov[keep], counts[keep]
    w, V = np.linalg.eigh(cov)
    floor = np.maximum(EIG_RATIO_FLOOR * np.maximum(w[:, -1], 0.0), ABS_VAR_FLOOR)
    w = np.maximum(w, floor[:, None])
    cov = np.einsum("nij,nj,nkj->nik", V, w, V)
    inv = np.einsum("nij,nj,nkj->nik", V, 1.0 / w, V)
    return NdtGrid(float(cell_size), cell_keys, means, cov, counts, inv)


# --- pose parameterisation ---------------------------------------------------

def euler_to_matrix(roll, pitch, yaw) -> np.ndarray:
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def matrix_to_euler(R: np.ndarray) -> tuple:
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return float(roll), float(pitch), float(yaw)


def transform_to_params(T: RigidTransform) -> np.ndarray:
    return np.concatenate([T.translation, matrix_to_euler(T.rotation)])


def params_to_transform(x) -> RigidTransform:
    return RigidTransform(euler_to_matrix(x[3], x[4], x[5]), x[:3])


def _rotation_derivatives(roll, pitch, yaw):
    """First and second partials of Rz Ry Rx w.r.t. (roll, pitch, yaw)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    X = [np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]]),
         np.array([[0, 0, 0], [0, -sr, -cr], [0, cr, -sr]]),
         np.array([[0, 0, 0], [0, -cr, sr], [0, -sr, -cr]])]
    Y = [np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]]),
         np.array([[-sp, 0, cp], [0, 0, 0], [-cp, 0, -sp]]),
         np.array([[-cp, 0, -sp], [0, 0, 0], [sp, 0, -cp]])]
    Z = [np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]]),
         np.array([[-sy, -cy, 0], [cy, -sy, 0], [0, 0, 0]]),
         np.array([[-cy, sy, 0], [-sy, -cy, 0], [0, 0, 0]])]

    def mat(order):
        # order[k] = derivative order for (roll, pitch, yaw)
        return Z[order[2]] @ Y[order[1]] @ X[order[0]]

    first = [mat(tuple(1 if i == a else 0 for i in range(3))) for a in range(3)]
    second = np.empty((3, 3, 3, 3))
    for a in range(3):
        for b in range(3):
            order = [0, 0, 0]
            order[a] += 1
            order[b] += 1
            second[a, b] = mat(tuple(order))
    return first, second


def ndt_objective(x, src_pts: np.ndarray, grid: NdtGrid, assignment=None, hessian: bool = True):
    """Negated NDT score with gradient (and Hessian) at pose ``x``.

    ``assignment`` freezes the point->cell map; by default each point uses the
    cell containing its transformed position. Returns ``(f, g, H, assignment,
    per_point_scores)``.
    """
    x = np.asarray(x, dtype=np.float64)
    R = euler_to_matrix(x[3], x[4], x[5])
    moved = src_pts @ R.T + x[:3]
    if assignment is None:
        assignment = grid.lookup(moved)
    valid = assignment >= 0
    idx = assignment[valid]
    p = src_pts[valid]
    d = moved[valid] - grid.means[idx]
    C = grid.inv_covariances[idx]
    Cd = np.einsum("nij,nj->ni", C, d)
    s = np.exp(-0.5 * np.einsum("ni,ni->n", d, Cd))
    f = -float(s.sum())

    first, second = _rotation_derivatives(x[3], x[4], x[5])
    n = len(p)
    J = np.zeros((n, 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    for a in range(3):
        J[:, :, 3 + a] = p @ first[a].T
    q = np.einsum("ni,nia->na", Cd, J)
    g = np.einsum("n,na->a", s, q)

    scores = np.zeros(len(src_pts))
    scores[valid] = s
    if not hessian:
        return f, g, None, assignment, scores

    CJ = np.einsum("nij,njb->nib", C, J)
    JCJ = np.einsum("nia,nib->nab", J, CJ)
    H = np.einsum("n,nab->ab", s, JCJ) - np.einsum("n,na,nb->ab", s, q, q)
    for a in range(3):
        for b in range(a, 3):
            term = float(np.einsum("n,ni,ni->", s, Cd, p @ second[a, b].T))
            H[3 + a, 3 + b] += term
            if a != b:
                H[3 + b, 3 + a] += term
    return f, g, H, assignment, scores


@dataclass
class NdtParams:
    cell_size: float = 2.0
    max_iter: int = 40
    grad_tol: float = 1e-6
    step_tol: float = 1e-6
    max_halvings: int = 10
    voxel: float = 0.0   # source thinning before matching; 0 keeps every point


def ndt_register(src: PointCloud, grid: NdtGrid, init: RigidTransform | None = None,
                 params: NdtParams | None = None) -> RegistrationResult:
    params = params or NdtParams()
    if len(grid) == 0:
        raise EmptyGridError("empty NDT grid")
    if params.voxel > 0:
        src = voxel_downsample(src, params.voxel)
    pts = src.points
    x = transform_to_params(init or RigidTransform.identity())
    f, g, H, assign, scores = ndt_objective(x, pts, grid)
    converged = False
    it = 0
    n_scale = max(len(pts), 1)
    for it in range(1, params.max_iter + 1):
        if np.linalg.norm(g) / n_scale < params.grad_tol:
            converged = True
            break
        w = np.linalg.eigvalsh(H)
        if w[0] <= 1e-9 * max(abs(w[-1]), 1.0):
            # Levenberg loading: lift the most negative curvature to its own
            # magnitude so the step is a descent direction of sensible length
            H = H + (2.0 * abs(w[0]) + 1e-6 * max(abs(w[-1]), 1.0)) * np.eye(6)
        step = -np.linalg.solve(H, g)
        # the line search keeps the point->cell assignment fixed: the score is
        # smooth under it, whereas cell hand-overs make it piecewise
        alpha = 1.0
        accepted = False
        for _ in range(params.max_halvings + 1):
            x_new = x + alpha * step
            f_new = ndt_objective(x_new, pts, grid, assign, hessian=False)[0]
            if f_new < f:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no decrease along a descent direction: at a (numerical) optimum
            # only when the gradient is already tiny
            converged = bool(np.linalg.norm(g) / n_scale < 1e3 * params.grad_tol)
            break
        moved = np.linalg.norm(alpha * step)
        x = x_new
        f, g, H, assign, scores = ndt_objective(x, pts, grid)
        if moved < params.step_tol:
            converged = True
            break

    T = params_to_transform(x)
    moved_pts = T.apply(pts)
    assign = grid.lookup(moved_pts)
    valid = np.flatnonzero(assign >= 0)
    corrs = [Correspondence(int(i), int(assign[i]), float(np.clip(scores[i], 0.0, 1.0)))
             for i in valid]
    if len(valid):
        r = moved_pts[valid] - grid.means[assign[valid]]
        residual = float(np.sqrt(np.mean(np.sum(r ** 2, axis=1))))
    else:
        residual = 0.0
    return RegistrationResult(T, corrs, converged, it, residual,
                              src_points=pts, tgt_points=grid.means, src_scores=scores)
