"""Point clouds, SE(3) transforms, spatial indexing and KITTI-layout I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """One LiDAR scan in its sensor frame (sensor at the origin)."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    frame_id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise ValueError(f"non-finite coordinate at point {int(np.argmax(bad))}")
        object.__setattr__(self, "points", _frozen(pts))
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(inten) != len(pts):
                raise ValueError(
                    f"intensity has {len(inten)} values for {len(pts)} points")
            object.__setattr__(self, "intensity", _frozen(inten))

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask_or_index) -> "PointCloud":
        """Subset of the cloud, keeping intensity and frame id."""
        inten = None if self.intensity is None else self.intensity[mask_or_index]
        return PointCloud(self.points[mask_or_index], inten, self.frame_id)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): x -> rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("transform has non-finite entries")
        if orthonormality_drift(R) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_yaw(cls, yaw_rad: float, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rot_z(yaw_rad), t)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
                and np.allclose(self.translation, other.translation, atol=atol, rtol=0))

    def __repr__(self):
        return (f"RigidTransform(rotation={self.rotation.tolist()}, "
                f"translation={self.translation.tolist()})")


@dataclass(frozen=True)
class Trajectory:
    """World<-sensor poses, one per frame."""

    poses: tuple
    frame_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "frame_ids", tuple(int(f) for f in self.frame_ids))
        if len(self.poses) != len(self.frame_ids):
            raise ValueError("poses and frame_ids differ in length")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def relative(self, i: int, j: int) -> RigidTransform:
        """Transform mapping frame ``j`` coordinates into frame ``i``."""
        return compose(invert(self.poses[i]), self.poses[j])


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    return axis_angle(axis, rng.uniform(0.0, max_angle))


def orthonormality_drift(R: np.ndarray) -> float:
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


def project_to_so3(R: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (SVD polar factor)."""
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation + a.translation)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def transform_cloud(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    return PointCloud(T.apply(cloud.points), cloud.intensity, cloud.frame_id)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by voxel key."""
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(counts)
    pts = np.empty((n, 3))
    for d in range(3):
        pts[:, d] = np.bincount(inverse, weights=cloud.points[:, d], minlength=n) / counts
    inten = None
    if cloud.intensity is not None:
        inten = np.bincount(inverse, weights=cloud.intensity, minlength=n) / counts
    return PointCloud(pts, inten, cloud.frame_id)


class SpatialIndex:
    """Exact k-NN / radius queries over an immutable cloud.

    Backed by a k-d tree; k-NN ties are broken by ascending point index.
    """

    def __init__(self, points):
        if isinstance(points, PointCloud):
            points = points.points
        self.points = _frozen(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if len(self.points) == 0:
            raise ValueError("cannot index an empty cloud")
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def _dist(self, idx, q):
        return np.sqrt(np.sum((self.points[idx] - q) ** 2, axis=1))

    def nearest(self, query, k: int = 1) -> np.ndarray:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        k = min(k, len(self.points))
        d, _ = self._tree.query(q, k=k)
        kth = float(np.atleast_1d(d)[-1])
        # every point that could tie with the k-th neighbour
        cand = np.asarray(self._tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-12), dtype=np.int64)
        dist = self._dist(cand, q)
        order = np.lexsort((cand, dist))
        return cand[order[:k]]

    def radius(self, query, r: float) -> np.ndarray:
        """Indices with distance <= r, ascending."""
        if not r > 0:
            raise ValueError("radius must be positive")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-9) + 1e-12), dtype=np.int64)
        cand.sort()
        return cand[self._dist(cand, q) <= r]

    def nearest_many(self, queries, k: int = 1):
        """Vectorised k-NN (distances, indices); ties resolved by the tree."""
        return self._tree.query(np.asarray(queries, dtype=np.float64), k=k)

    def radius_many(self, queries, r: float):
        return self._tree.query_ball_point(np.asarray(queries, dtype=np.float64), r)


def nearest(index: SpatialIndex, query, k: int = 1) -> np.ndarray:
    return index.nearest(query, k)


def radius_search(index: SpatialIndex, query, r: float) -> np.ndarray:
    return index.radius(query, r)


# --- I/O -------------------------------------------------------------------

def load_kitti_bin(path, frame_id: int = 0) -> PointCloud:
    raw = open(path, "rb").read()
    if len(raw) % 16:
        raise ValueError(f"{path}: truncated file ({len(raw)} bytes is not a multiple of 16)")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(rec[:, :3]).all(axis=1)
    if bad.any():
        raise ValueError(f"{path}: non-finite coordinate at point {int(np.argmax(bad))}")
    return PointCloud(rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64), frame_id)


def save_kitti_bin(cloud: PointCloud, path) -> None:
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def parse_pose_line(line: str, lineno: int = 0) -> np.ndarray:
    tokens = line.split()
    if len(tokens) != 12:
        raise ValueError(f"line {lineno}: expected 12 values, got {len(tokens)}")
    m = np.eye(4)
    m[:3, :] = np.array([float(x) for x in tokens]).reshape(3, 4)
    return m


def _clean_rotation(m: np.ndarray, lineno: int) -> np.ndarray:
    R = m[:3, :3]
    if orthonormality_drift(R) > ORTHO_TOL:
        R = project_to_so3(R)
    if np.linalg.det(R) <= 0:
        raise ValueError(f"line {lineno}: rotation has non-positive determinant")
    out = m.copy()
    out[:3, :3] = R
    return out


def load_poses(path, calib: Optional[RigidTransform] = None) -> Trajectory:
    """KITTI pose file; with ``calib`` the poses become calib^-1 * T * calib."""
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            m = _clean_rotation(parse_pose_line(line, lineno), lineno)
            T = RigidTransform.from_matrix(m)
            if calib is not None:
                T = compose(invert(calib), compose(T, calib))
            poses.append(T)
    return Trajectory(poses, range(len(poses)))


def load_calib(path) -> RigidTransform:
    """LiDAR->camera ``Tr`` entry of a KITTI calib.txt."""
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if line.startswith("Tr:"):
                m = _clean_rotation(parse_pose_line(line[3:], lineno), lineno)
                return RigidTransform.from_matrix(m)
    raise ValueError(f"{path}: no Tr entry")


def save_poses(traj: Trajectory, path) -> None:
    with open(path, "w") as f:
        for T in traj.poses:
            f.write(" ".join(repr(float(v)) for v in T.as_matrix()[:3, :].reshape(-1)) + "\n")


def save_ply(cloud: PointCloud, path) -> None:
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in cloud.points:
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def save_csv(cloud: PointCloud, path) -> None:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    with open(path, "w") as f:
        f.write("x,y,z,intensity\n")
        for p, i in zip(cloud.points, inten):
            f.write(f"{p[0]:.6f},{p[1]:.6f},{p[2]:.6f},{i:.6f}\n")


def sequence_dir(root, seq: str) -> str:
    return os.path.join(root, "sequences", seq)


def scan_paths(root, seq: str) -> list:
    vdir = os.path.join(sequence_dir(root, seq), "velodyne")
    return sorted(os.path.join(vdir, n) for n in os.listdir(vdir) if n.endswith(".bin"))
