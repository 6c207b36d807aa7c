"""Attack-candidate scoring, Top-K/Rand-K/Min-K selection, feasibility
screening and ambush-patch placement."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, RigidTransform, Trajectory

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    TOPK = "TopK"
    RANDK = "RandK"
    MINK = "MinK"


class ScoreSource(str, enum.Enum):
    CORRESPONDENCE_WEIGHT = "correspondence_weight"
    KEYPOINT_SALIENCY = "keypoint_saliency"
    NDT_CELL_SCORE = "ndt_cell_score"


@dataclass(frozen=True, eq=False)
class ScoredCandidate:
    position_ref: np.ndarray
    raw_score: float
    norm_score: float
    source_of_score: ScoreSource = ScoreSource.CORRESPONDENCE_WEIGHT
    src_index: int = -1


@dataclass(frozen=True, eq=False)
class Patch:
    center: np.ndarray
    side: float
    yaw_offset: float
    normal: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if not self.side > 0:
            raise ValueError("patch side must be positive")
        if abs(self.yaw_offset) > 90:
            raise ValueError("yaw offset must lie in [-90, 90] degrees")
        if abs(n[2]) > 1e-9 or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("patch normal must be a horizontal unit vector")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "side", float(self.side))
        object.__setattr__(self, "yaw_offset", float(self.yaw_offset))

    @property
    def facing(self) -> np.ndarray:
        """Horizontal direction from the target point towards the sensor."""
        a = np.deg2rad(-self.yaw_offset)
        c, s = np.cos(a), np.sin(a)
        n = self.normal
        return np.array([c * n[0] - s * n[1], s * n[0] + c * n[1], 0.0])

    @property
    def target(self) -> np.ndarray:
        """The hidden point the patch stands in front of."""
        return self.center - self.facing

    def transformed(self, T: RigidTransform) -> "Patch":
        """Same physical patch expressed in another frame (kept vertical)."""
        n = T.rotation @ self.normal
        n[2] = 0.0
        n /= np.linalg.norm(n)
        return Patch(T.apply(self.center), self.side, self.yaw_offset, n)

    def to_dict(self) -> dict:
        return {"center": [float(v) for v in self.center], "side": self.side,
                "yaw": self.yaw_offset, "normal": [float(v) for v in self.normal]}

    @classmethod
    def from_dict(cls, d: dict) -> "Patch":
        return cls(np.array(d["center"], dtype=float), float(d["side"]), float(d["yaw"]),
                   np.array(d["normal"], dtype=float))


@dataclass(frozen=True, eq=False)
class AttackPlan:
    strategy: Strategy
    k: int
    patches: tuple = ()
    seed: int = 0
    frame: int | None = None   # scan the patch coordinates refer to
    pair: tuple | None = None  # (reference frame, source frame)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "patches", tuple(self.patches))

    def __len__(self) -> int:
        return len(self.patches)

    def transformed(self, T: RigidTransform, frame: int | None = None) -> "AttackPlan":
        return AttackPlan(self.strategy, self.k, tuple(p.transformed(T) for p in self.patches),
                          self.seed, frame, self.pair)

    def to_json(self) -> str:
        doc = {"strategy": self.strategy.value, "k": self.k, "seed": self.seed,
               "frame": self.frame, "pair": list(self.pair) if self.pair else None,
               "patches": [p.to_dict() for p in self.patches]}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AttackPlan":
        try:
            doc = json.loads(text)
            patches = tuple(Patch.from_dict(p) for p in doc.get("patches", []))
            pair = tuple(doc["pair"]) if doc.get("pair") else None
            return cls(Strategy(doc["strategy"]), int(doc["k"]), patches,
                       int(doc.get("seed", 0)), doc.get("frame"), pair)
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"malformed attack plan: {e}") from e


def normalize_scores(raw) -> np.ndarray:
    """Min-max normalisation to [0, 1]; a constant batch maps to 0.5."""
    s = np.asarray(raw, dtype=np.float64).reshape(-1)
    if len(s) == 0:
        raise ValueError("cannot normalise an empty score list")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full(len(s), 0.5)
    return (s - lo) / (hi - lo)


def extract_candidates(result, src: PointCloud | None, tgt: PointCloud | None,
                       gt: RigidTransform, include_unmatched: bool = False,
                       source: ScoreSource | None = None) -> list:
    """Source-side positions of the result's correspondences, mapped into the
    reference frame by ``gt`` and scored by correspondence weight.

    Target-side positions are never used, so a wrong match still yields the
    physical location of the source keypoint.
    """
    corrs = result.correspondences
    if not corrs:
        raise ValueError("registration result has no correspondences")
    src_pts = result.src_points if result.src_points is not None else src.points
    if source is None:
        source = ScoreSource.CORRESPONDENCE_WEIGHT
    idx = [c.src_index for c in corrs]
    raw = [c.weight for c in corrs]
    if include_unmatched and result.src_scores is not None and len(result.src_scores):
        matched = set(idx)
        for i, s in enumerate(result.src_scores):
            if i not in matched:
                idx.append(i)
                raw.append(float(s))
    pos = gt.apply(np.asarray(src_pts)[idx])
    norm = normalize_scores(raw)
    out = []
    for n, (i, p, r, ns) in enumerate(zip(idx, pos, raw, norm)):
        kind = source if n < len(corrs) else ScoreSource.KEYPOINT_SALIENCY
        out.append(ScoredCandidate(p, float(r), float(ns), kind, int(i)))
    return out


def select(candidates, strategy, k: int, seed: int = 0) -> list:
    if k < 0:
        raise ValueError("k must be non-negative")
    strategy = Strategy(strategy)
    n = len(candidates)
    if k == 0 or n == 0:
        return []
    k = min(k, n)
    scores = np.array([c.norm_score for c in candidates])
    order = np.arange(n)
    if strategy is Strategy.TOPK:
        pick = np.lexsort((order, -scores))[:k]
    elif strategy is Strategy.MINK:
        pick = np.lexsort((order, scores))[:k]
    else:
        rng = np.random.default_rng(np.uint64(seed))
        pick = rng.choice(n, size=k, replace=False)
    return [candidates[i] for i in pick]


# --- ground model ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GroundModel:
    """Per xy-cell ground elevation; unknown cells borrow the nearest known one."""

    cell: float
    heights: dict = field(default_factory=dict)

    def __post_init__(self):
        keys = np.array(sorted(self.heights), dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "_keys", keys)
        object.__setattr__(self, "_vals", np.array([self.heights[tuple(k)] for k in
                                                     sorted(self.heights)], dtype=np.float64))
        object.__setattr__(self, "_tree", cKDTree((keys + 0.5) * self.cell) if len(keys) else None)

    def height_at(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))[:, :2]
        keys = np.floor(xy / self.cell).astype(np.int64)
        out = np.empty(len(xy))
        for n, k in enumerate(map(tuple, keys)):
            h = self.heights.get(k)
            if h is None:
                _, j = self._tree.query(xy[n])
                h = self._vals[j]
            out[n] = h
        return out


def estimate_ground(cloud: PointCloud, cell: float = 2.0) -> GroundModel:
    """Grid-minimum ground heights, median-smoothed over each 3x3 block."""
    if not cell > 0:
        raise ValueError("cell must be positive")
    if len(cloud) == 0:
        raise ValueError("cannot estimate ground of an empty cloud")
    pts = cloud.points
    keys = np.floor(pts[:, :2] / cell).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    zmin = np.full(len(uniq), np.inf)
    np.minimum.at(zmin, inv, pts[:, 2])
    raw = {(int(a), int(b)): float(z) for (a, b), z in zip(uniq, zmin)}
    smooth = {}
    for (a, b), z in raw.items():
        block = [raw[(a + i, b + j)] for i in (-1, 0, 1) for j in (-1, 0, 1)
                 if (a + i, b + j) in raw]
        # median never lifts a cell above its own minimum
        smooth[(a, b)] = min(float(np.median(block)), z)
    return GroundModel(float(cell), smooth)


# --- screening -------------------------------------------------------------

@dataclass
class ScreenParams:
    max_height: float = 3.0
    ground_clearance: float = 0.2
    corridor_halfwidth: float = 2.0
    sector_deg: float = 5.0
    origin: tuple = (0.0, 0.0, 0.0)


def _segment_distance(xy: np.ndarray, path: np.ndarray) -> np.ndarray:
    """Horizontal distance from each point to a polyline."""
    if len(path) == 0:
        return np.full(len(xy), np.inf)
    if len(path) == 1:
        return np.linalg.norm(xy - path[0], axis=1)
    a, b = path[:-1], path[1:]
    ab = b - a
    L2 = np.sum(ab ** 2, axis=1)
    ap = xy[:, None, :] - a[None]
    t = np.clip(np.einsum("nsk,sk->ns", ap, ab) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.min(np.linalg.norm(xy[:, None, :] - proj, axis=2), axis=1)


def screen(selected, ground: GroundModel, trajectory: Trajectory | None,
           params: ScreenParams | None = None) -> list:
    """Height, path-proximity and same-direction overlap filters.

    Survivors keep their input (score) order.
    """
    params = params or ScreenParams()
    if not selected:
        return []
    pos = np.array([c.position_ref for c in selected])
    h = pos[:, 2] - ground.height_at(pos[:, :2])
    keep = (h <= params.max_height) & (h > params.ground_clearance)
    if trajectory is not None and len(trajectory):
        path = trajectory.positions()[:, :2]
        keep &= _segment_distance(pos[:, :2], path) >= params.corridor_halfwidth
    origin = np.asarray(params.origin, dtype=np.float64)
    rel = pos[:, :2] - origin[:2]
    rng_ = np.linalg.norm(rel, axis=1)
    bearing = np.degrees(np.arctan2(rel[:, 1], rel[:, 0]))
    alive = np.flatnonzero(keep)
    # nearest first; ties in range fall back to input order
    kept: list = []
    for i in alive[np.lexsort((alive, rng_[alive]))]:
        clash = False
        for j in kept:
            d = abs((bearing[i] - bearing[j] + 180.0) % 360.0 - 180.0)
            if d < params.sector_deg:
                clash = True
                break
        if not clash:
            kept.append(i)
    kept_set = set(kept)
    return [c for i, c in enumerate(selected) if i in kept_set]


def place_patches(survivors, side: float, yaw_offset: float = 0.0, strategy=Strategy.TOPK,
                  k: int | None = None, seed: int = 0, origin=(0.0, 0.0, 0.0),
                  ground: GroundModel | None = None, frame: int | None = None,
                  pair: tuple | None = None) -> AttackPlan:
    """Vertical square patches 1 m sensor-ward of each survivor.

    With ``ground`` the patch is lifted so its bottom edge does not sink below
    the local ground height.
    """
    if not side > 0:
        raise ValueError("patch side must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    a = np.deg2rad(yaw_offset)
    ca, sa = np.cos(a), np.sin(a)
    patches = []
    for c in survivors:
        p = np.asarray(c.position_ref if hasattr(c, "position_ref") else c, dtype=np.float64)
        d = origin[:2] - p[:2]
        n = np.hypot(d[0], d[1])
        if n == 0:
            log.warning("candidate on the sensor's vertical axis skipped: %s", p)
            continue
        u = np.array([d[0] / n, d[1] / n, 0.0])
        center = p + u
        if ground is not None:
            g = float(ground.height_at(center[:2])[0])
            center[2] = max(center[2], g + side / 2)
        normal = np.array([ca * u[0] - sa * u[1], sa * u[0] + ca * u[1], 0.0])
        patches.append(Patch(center, side, yaw_offset, normal))
    return AttackPlan(strategy, len(survivors) if k is None else k, tuple(patches), seed,
                      frame, pair)
