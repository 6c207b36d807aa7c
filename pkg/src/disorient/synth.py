"""Synthetic street scenes scanned by a simulated spinning LiDAR.

Scenes are ground plane + axis-aligned boxes ("buildings", parked cars,
kiosks) + vertical cylinders ("poles", "trees"). Scans are produced by
analytic ray casting and written in the KITTI odometry layout.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .cloud import PointCloud, RigidTransform, Trajectory, rot_z, save_kitti_bin, save_poses


@dataclass
class LidarModel:
    beams: int = 64
    elev_min_deg: float = -24.9
    elev_max_deg: float = 2.0
    azimuth_steps: int = 1000
    min_range: float = 2.5
    max_range: float = 50.0
    height: float = 1.73


@dataclass
class SceneSpec:
    seed: int = 0
    frames: int = 21
    step: float = 1.0           # metres per frame along the path
    yaw_rate_deg: float = 0.0   # heading change per frame
    noise: float = 0.02
    street_length: float = 120.0
    n_buildings: int = 14
    n_poles: int = 25
    n_cars: int = 10
    n_clutter: int = 30
    lidar: LidarModel = field(default_factory=LidarModel)
    boxes: list = field(default_factory=list)      # explicit [xmin,ymin,zmin,xmax,ymax,zmax]
    cylinders: list = field(default_factory=list)  # explicit [cx, cy, radius, height]

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        lidar = LidarModel(**d.pop("lidar", {}))
        return cls(lidar=lidar, **d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    boxes: np.ndarray      # (B, 6)
    cylinders: np.ndarray  # (C, 4)


def build_scene(spec: SceneSpec) -> Scene:
    """Random street furniture, laid out beside a path along +x."""
    rng = np.random.default_rng(spec.seed)
    boxes = [list(b) for b in spec.boxes]
    cyls = [list(c) for c in spec.cylinders]
    lo, hi = -30.0, spec.street_length
    for side in (-1, 1):
        x = lo
        for _ in range(spec.n_buildings // 2):
            length = rng.uniform(6, 18)
            depth = rng.uniform(5, 10)
            near = rng.uniform(9, 13)
            h = rng.uniform(4, 14)
            y0, y1 = sorted((side * near, side * (near + depth)))
            boxes.append([x, y0, 0.0, x + length, y1, h])
            x += length + rng.uniform(2, 8)
            if x > hi:
                break
    for _ in range(spec.n_poles):
        side = rng.choice((-1, 1))
        cyls.append([rng.uniform(lo, hi), side * rng.uniform(5, 7.5),
                     rng.uniform(0.12, 0.35), rng.uniform(3, 7)])
    for _ in range(spec.n_cars):
        side = rng.choice((-1, 1))
        cx, cy = rng.uniform(lo, hi), side * rng.uniform(3.8, 5.0)
        L, W, H = rng.uniform(3.8, 4.8), rng.uniform(1.6, 1.9), rng.uniform(1.4, 1.7)
        boxes.append([cx - L / 2, cy - W / 2, 0.0, cx + L / 2, cy + W / 2, H])
    for _ in range(spec.n_clutter):
        side = rng.choice((-1, 1))
        cx, cy = rng.uniform(lo, hi), side * rng.uniform(4.5, 8.5)
        sx, sy, h = rng.uniform(0.4, 2.5), rng.uniform(0.4, 2.5), rng.uniform(0.6, 2.8)
        boxes.append([cx - sx / 2, cy - sy / 2, 0.0, cx + sx / 2, cy + sy / 2, h])
    return Scene(np.array(boxes, dtype=np.float64).reshape(-1, 6),
                 np.array(cyls, dtype=np.float64).reshape(-1, 4))


def sensor_trajectory(spec: SceneSpec) -> Trajectory:
    poses = []
    x = y = yaw = 0.0
    dyaw = np.deg2rad(spec.yaw_rate_deg)
    for _ in range(spec.frames):
        poses.append(RigidTransform(rot_z(yaw), (x, y, spec.lidar.height)))
        yaw += dyaw
        x += spec.step * np.cos(yaw)
        y += spec.step * np.sin(yaw)
    return Trajectory(poses, range(spec.frames))


def lidar_directions(lidar: LidarModel) -> np.ndarray:
    el = np.deg2rad(np.linspace(lidar.elev_min_deg, lidar.elev_max_deg, lidar.beams))
    az = np.arange(lidar.azimuth_steps) * (2 * np.pi / lidar.azimuth_steps)
    E, A = np.meshgrid(el, az, indexing="ij")
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def raycast(scene: Scene, origin: np.ndarray, dirs: np.ndarray, max_range: float) -> np.ndarray:
    """First-hit distance per ray (inf on miss)."""
    t = np.full(len(dirs), np.inf)
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dz < -1e-9, -origin[2] / dz, np.inf)
    t = np.minimum(t, np.where(tg > 0, tg, np.inf))

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for b in scene.boxes:
        with np.errstate(invalid="ignore"):
            t1 = (b[:3] - origin) * inv
            t2 = (b[3:] - origin) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmax > 0) & (tmin > 0)
        t = np.where(hit & (tmin < t), tmin, t)

    dxy = dirs[:, :2]
    a = np.sum(dxy ** 2, axis=1)
    for cx, cy, r, h in scene.cylinders:
        o = origin[:2] - (cx, cy)
        bq = 2 * dxy @ o
        c = o @ o - r * r
        disc = bq * bq - 4 * a * c
        ok = (disc >= 0) & (a > 1e-12)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (-bq - sq) / (2 * a)
        z = origin[2] + tc * dz
        hit = ok & (tc > 0) & (z >= 0) & (z <= h)
        t = np.where(hit & (tc < t), tc, t)
    t[t > max_range] = np.inf
    return t


def scan(scene: Scene, pose: RigidTransform, lidar: LidarModel, noise: float,
         rng: np.random.Generator, frame_id: int = 0) -> PointCloud:
    dirs_s = lidar_directions(lidar)
    dirs_w = dirs_s @ pose.rotation.T
    t = raycast(scene, pose.translation, dirs_w, lidar.max_range)
    ok = np.isfinite(t) & (t >= lidar.min_range)
    r = t[ok] + (rng.normal(0.0, noise, ok.sum()) if noise > 0 else 0.0)
    pts = dirs_s[ok] * r[:, None]
    inten = np.clip(0.3 + 0.05 * rng.normal(size=len(pts)), 0.0, 1.0)
    return PointCloud(pts, inten, frame_id)


def generate(spec: SceneSpec):
    """Scene, ground-truth trajectory and scans (in memory)."""
    scene = build_scene(spec)
    traj = sensor_trajectory(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    clouds = [scan(scene, T, spec.lidar, spec.noise, rng, i) for i, T in enumerate(traj.poses)]
    return scene, traj, clouds


def gen_synthetic(spec: SceneSpec, root, seq: str = "00") -> str:
    """Write a KITTI-layout dataset; returns the dataset root."""
    _, traj, clouds = generate(spec)
    vdir = os.path.join(root, "sequences", seq, "velodyne")
    os.makedirs(vdir, exist_ok=True)
    os.makedirs(os.path.join(root, "poses"), exist_ok=True)
    for c in clouds:
        save_kitti_bin(c, os.path.join(vdir, f"{c.frame_id:06d}.bin"))
    save_poses(traj, os.path.join(root, "poses", f"{seq}.txt"))
    with open(os.path.join(root, "sequences", seq, "scene.json"), "w") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
    return str(root)
