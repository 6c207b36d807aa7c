"""Experiment orchestration: attack sweeps, trajectory runs, plan replay and
the void-detection evaluation over KITTI-layout datasets."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import multiprocessing as mp
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import defense as dfn
from .cloud import (PointCloud, RigidTransform, Trajectory, load_calib, load_kitti_bin,
                    load_poses, scan_paths, sequence_dir)
from .metrics import (PAIR_COLUMNS, SUMMARY_COLUMNS, EvalConfig, PairError, chain_trajectory,
                      endpoint_drift, pair_error, registration_recall, summarize, write_csv)
from .occlusion import AttackTarget, Mode, apply_plan_to_pair, crop_mask, shadow_mask
from .registration import (FeatureParams, IcpParams, NdtParams, feature_register, icp_register,
                           ndt_build, ndt_register)
from .registration.kabsch import RegistrationResult
from .saliency import (AttackPlan, ScoreSource, ScreenParams, Strategy, estimate_ground,
                       extract_candidates, place_patches, screen, select)
from .svgplot import line_chart, write_svg

log = logging.getLogger(__name__)

BACKENDS = ("feature", "icp", "ndt")
OCCLUSION_COLUMNS = ["seq", "frame_i", "frame_j", "strategy", "k", "side_m", "yaw_deg",
                     "scan", "patch_id", "removed_count"]


class DataError(Exception):
    """Unreadable or inconsistent dataset."""


@dataclass
class RunConfig:
    dataset: str = ""
    sequences: list = field(default_factory=lambda: ["00"])
    frame_stride: int = 1
    first_frame: int = 0
    max_pairs: int = 0                # 0 keeps every pair
    backend: str = "feature"
    strategies: list = field(default_factory=lambda: ["TopK", "RandK", "MinK"])
    k_values: list = field(default_factory=lambda: [5])
    side_values: list = field(default_factory=lambda: [2.1])
    yaw_values: list = field(default_factory=lambda: [0.0])
    mode: str = "shadow"
    attack_target: str = "both"
    include_unmatched: bool = False
    seed: int = 0
    workers: int = 0                  # 0 = available parallelism
    k_max: int = 10
    path_window: int = 50             # frames either side used as the navigation path
    ground_cell: float = 2.0
    save_plans: bool = True
    eval: dict = field(default_factory=dict)
    screen: dict = field(default_factory=dict)
    feature: dict = field(default_factory=dict)
    icp: dict = field(default_factory=lambda: {"voxel": 0.3})
    ndt: dict = field(default_factory=lambda: {"voxel": 0.5})
    defense: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sequences = [str(s) for s in self.sequences]
        self.strategies = [Strategy(s).value for s in self.strategies]
        self.k_values = [int(k) for k in self.k_values]
        self.side_values = [float(s) for s in self.side_values]
        self.yaw_values = [float(y) for y in self.yaw_values]

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        Mode(self.mode)
        AttackTarget(self.attack_target)
        if not self.strategies:
            raise ValueError("at least one strategy is required")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")
        for k in self.k_values:
            if not 0 <= k <= self.k_max:
                raise ValueError(f"k={k} outside [0, {self.k_max}]")
        for s in self.side_values:
            if not s > 0:
                raise ValueError(f"side {s} must be positive")
        for y in self.yaw_values:
            if abs(y) > 90:
                raise ValueError(f"yaw {y} outside [-90, 90]")
        self.eval_config()
        ScreenParams(**self.screen)
        FeatureParams(**self.feature)
        IcpParams(**self.icp)
        NdtParams(**self.ndt)
        dfn.VoidParams(**self.defense)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**self.eval)

    def cells(self) -> list:
        return list(itertools.product(self.strategies, self.k_values, self.side_values,
                                      self.yaw_values))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        """Defaults < JSON file < explicit overrides."""
        doc: dict = {}
        if path:
            with open(path) as f:
                doc = json.load(f)
        doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(doc)


# --- dataset ----------------------------------------------------------------

class Dataset:
    """One KITTI-layout sequence: scans plus LiDAR-frame ground-truth poses."""

    def __init__(self, root, seq: str):
        self.root, self.seq = str(root), str(seq)
        pose_path = os.path.join(self.root, "poses", f"{self.seq}.txt")
        calib_path = os.path.join(sequence_dir(self.root, self.seq), "calib.txt")
        try:
            calib = load_calib(calib_path) if os.path.exists(calib_path) else None
            self.traj = load_poses(pose_path, calib)
            self.paths = scan_paths(self.root, self.seq)
        except (OSError, ValueError) as e:
            raise DataError(str(e)) from e
        if len(self.paths) < len(self.traj):
            log.warning("sequence %s: %d scans for %d poses", seq, len(self.paths), len(self.traj))
        self.n = min(len(self.paths), len(self.traj))
        self._cache: dict = {}

    def __len__(self) -> int:
        return self.n

    def cloud(self, i: int) -> PointCloud:
        c = self._cache.get(i)
        if c is None:
            try:
                c = load_kitti_bin(self.paths[i], frame_id=i)
            except (OSError, ValueError) as e:
                raise DataError(str(e)) from e
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[i] = c
        return c

    def gt(self, i: int, j: int) -> RigidTransform:
        """Maps frame ``j`` (source) coordinates into frame ``i`` (reference)."""
        return self.traj.relative(i, j)

    def path(self, i: int, window: int) -> Trajectory:
        lo, hi = max(0, i - window), min(self.n, i + window + 1)
        return Trajectory([self.traj.relative(i, k) for k in range(lo, hi)], range(lo, hi))


def frame_pairs(n: int, stride: int, first: int = 0, max_pairs: int = 0) -> list:
    pairs = [(i, i + stride) for i in range(first, n - stride, stride)]
    return pairs[:max_pairs] if max_pairs > 0 else pairs


_DATASETS: dict = {}


def _dataset(root, seq) -> Dataset:
    key = (str(root), str(seq))
    if key not in _DATASETS:
        _DATASETS[key] = Dataset(root, seq)
    return _DATASETS[key]


# --- registration dispatch ----------------------------------------------------

def register(cfg: RunConfig, src: PointCloud, tgt: PointCloud) -> RegistrationResult:
    if cfg.backend == "feature":
        return feature_register(src, tgt, FeatureParams(**cfg.feature))
    if cfg.backend == "icp":
        return icp_register(src, tgt, None, IcpParams(**cfg.icp))
    params = NdtParams(**cfg.ndt)
    return ndt_register(src, ndt_build(tgt, params.cell_size), None, params)


def _safe_register(cfg, src, tgt):
    try:
        return register(cfg, src, tgt)
    except Exception as e:  # recorded per pair, never fatal
        log.warning("registration failed: %s", e)
        return None


def _estimate(res) -> RigidTransform:
    return res.transform if res is not None and res.converged else RigidTransform.identity()


def _error(pair, res, gt) -> PairError:
    if res is None:
        return pair_error(pair, None, gt, False)
    return pair_error(pair, res.transform, gt, res.converged)


def derive_seed(seed: int, seq: str, i: int, j: int, cell: int) -> int:
    ss = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), zlib.crc32(seq.encode()), i, j, cell])
    hi, lo = ss.generate_state(2, np.uint32)
    return (int(hi) << 32) | int(lo)


def plan_for_pair(cfg: RunConfig, ds: Dataset, i: int, j: int, base, cell, cell_index: int,
                  ground=None, candidates=None) -> AttackPlan:
    """Selection, screening and placement for one (pair, cell); the plan lives
    in the reference frame ``i``."""
    strategy, k, side, yaw = cell
    gt = ds.gt(i, j)
    seed = derive_seed(cfg.seed, ds.seq, i, j, cell_index)
    if candidates is None:
        candidates = _candidates(cfg, base, ds.cloud(j), ds.cloud(i), gt)
    if not candidates or k == 0:
        return AttackPlan(strategy, k, (), seed, i, (i, j))
    if ground is None:
        ground = estimate_ground(ds.cloud(i), cfg.ground_cell)
    origin = tuple(float(v) for v in gt.translation)
    chosen = select(candidates, strategy, k, seed)
    survivors = screen(chosen, ground, ds.path(i, cfg.path_window),
                       ScreenParams(origin=origin, **cfg.screen))
    return place_patches(survivors, side, yaw, strategy, k, seed, origin=origin, ground=ground,
                         frame=i, pair=(i, j))


def _candidates(cfg, base, src, tgt, gt) -> list:
    if base is None or not base.correspondences:
        return []
    source = {"feature": ScoreSource.CORRESPONDENCE_WEIGHT, "icp": ScoreSource.CORRESPONDENCE_WEIGHT,
              "ndt": ScoreSource.NDT_CELL_SCORE}[cfg.backend]
    return extract_candidates(base, src, tgt, gt, cfg.include_unmatched, source)


def _pair_task(args):
    cfg_dict, seq, i, j = args
    cfg = RunConfig.from_dict(cfg_dict)
    ds = _dataset(cfg.dataset, seq)
    src, tgt, gt = ds.cloud(j), ds.cloud(i), ds.gt(i, j)
    base = _safe_register(cfg, src, tgt)
    base_err = _error((i, j), base, gt)
    cands = _candidates(cfg, base, src, tgt, gt)
    ground = estimate_ground(tgt, cfg.ground_cell)
    out = {"seq": seq, "pair": (i, j), "baseline": base_err, "baseline_T": _estimate(base),
           "cells": []}
    for n, cell in enumerate(cfg.cells()):
        plan = plan_for_pair(cfg, ds, i, j, base, cell, n, ground, cands)
        if len(plan) == 0:
            res, reports = base, {}
        else:
            s2, t2, reports = apply_plan_to_pair(src, tgt, plan, cfg.mode, cfg.attack_target, gt)
            res = _safe_register(cfg, s2, t2)
        out["cells"].append({"cell": cell, "plan": plan, "error": _error((i, j), res, gt),
                             "T": _estimate(res),
                             "reports": {k: v.per_patch_counts for k, v in reports.items()},
                             "removed": sum(r.removed_count for r in reports.values())})
    return out


def _run_pairs(cfg: RunConfig, tasks: list) -> list:
    payload = [(cfg.to_dict(), seq, i, j) for seq, i, j in tasks]
    workers = cfg.workers or os.cpu_count() or 1
    if workers <= 1 or len(payload) <= 1:
        results = [_pair_task(p) for p in payload]
    else:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
        with ctx.Pool(min(workers, len(payload))) as pool:
            results = pool.map(_pair_task, payload, chunksize=1)
    return sorted(results, key=lambda r: (r["seq"], r["pair"]))


def _tasks(cfg: RunConfig) -> list:
    tasks = []
    for seq in cfg.sequences:
        ds = _dataset(cfg.dataset, seq)
        tasks += [(seq, i, j) for i, j in frame_pairs(len(ds), cfg.frame_stride, cfg.first_frame,
                                                      cfg.max_pairs)]
    if not tasks:
        raise DataError("no frame pairs after striding")
    return tasks


def _plan_name(seq, i, j, cell) -> str:
    strategy, k, side, yaw = cell
    return f"{seq}_{i:06d}_{j:06d}_{strategy}_k{k}_L{side:g}_yaw{yaw:g}.json"


# --- sweep ------------------------------------------------------------------

def run_sweep(cfg: RunConfig, out_dir) -> dict:
    """Baseline plus attacked registration for every (pair, cell).

    Writes ``pairs.csv``, ``baseline.csv``, ``summary.csv``, ``occlusion.csv``,
    one SVG per metric and (optionally) every plan under ``plans/``.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    results = _run_pairs(cfg, _tasks(cfg))
    ecfg = cfg.eval_config()

    rows, occ_rows, base_rows = [], [], []
    per_cell: dict = {c: [] for c in cfg.cells()}
    if cfg.save_plans:
        os.makedirs(os.path.join(out_dir, "plans"), exist_ok=True)
    for r in results:
        i, j = r["pair"]
        b = r["baseline"]
        base_rows.append({"seq": r["seq"], "frame_i": i, "frame_j": j, "converged": b.converged,
                          "rre_deg": b.rre_deg, "rte_m": b.rte_m})
        for c in r["cells"]:
            strategy, k, side, yaw = c["cell"]
            e = c["error"]
            per_cell[c["cell"]].append(e)
            rows.append({"seq": r["seq"], "frame_i": i, "frame_j": j, "strategy": strategy,
                         "k": k, "side_m": side, "yaw_deg": yaw, "mode": cfg.mode,
                         "converged": e.converged, "rre_deg": e.rre_deg, "rte_m": e.rte_m,
                         "removed_points": c["removed"]})
            for scan, counts in sorted(c["reports"].items()):
                for pid, n in enumerate(counts):
                    occ_rows.append({"seq": r["seq"], "frame_i": i, "frame_j": j,
                                     "strategy": strategy, "k": k, "side_m": side,
                                     "yaw_deg": yaw, "scan": scan, "patch_id": pid,
                                     "removed_count": n})
            if cfg.save_plans:
                with open(os.path.join(out_dir, "plans", _plan_name(r["seq"], i, j, c["cell"])),
                          "w") as f:
                    f.write(c["plan"].to_json() + "\n")

    summary = []
    for cell, errs in per_cell.items():
        m_rre, m_rte, rr = summarize(errs, ecfg)
        summary.append({"strategy": cell[0], "k": cell[1], "side_m": cell[2], "yaw_deg": cell[3],
                        "mean_rre": m_rre, "mean_rte": m_rte, "rr": rr, "n_pairs": len(errs)})
    base_errs = [r["baseline"] for r in results]
    b_rre, b_rte, b_rr = summarize(base_errs, ecfg)

    write_csv(os.path.join(out_dir, "pairs.csv"), PAIR_COLUMNS, rows)
    write_csv(os.path.join(out_dir, "baseline.csv"),
              ["seq", "frame_i", "frame_j", "converged", "rre_deg", "rte_m"], base_rows)
    write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, summary)
    write_csv(os.path.join(out_dir, "occlusion.csv"), OCCLUSION_COLUMNS, occ_rows)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    plot_summary(summary, {"mean_rre": b_rre, "mean_rte": b_rte, "rr": b_rr}, out_dir)
    return {"summary": summary, "baseline": {"mean_rre": b_rre, "mean_rte": b_rte, "rr": b_rr},
            "pairs": rows, "baseline_pairs": base_errs, "cell_errors": per_cell}


METRIC_LABELS = {"mean_rre": "mean RRE (deg)", "mean_rte": "mean RTE (m)", "rr": "registration recall"}


def _x_axis(summary) -> str:
    for key in ("k", "side_m", "yaw_deg"):
        if len({r[key] for r in summary}) > 1:
            return key
    return "k"


def plot_summary(summary: list, baseline: dict | None, out_dir) -> list:
    """One SVG per metric, one polyline per strategy against the varying axis."""
    if not summary:
        return []
    xkey = _x_axis(summary)
    others = [k for k in ("k", "side_m", "yaw_deg") if k != xkey]
    first = {k: summary[0][k] for k in others}
    rows = [r for r in summary if all(float(r[k]) == float(first[k]) for k in others)]
    xlabel = {"k": "K (patches)", "side_m": "patch side L (m)", "yaw_deg": "yaw offset (deg)"}[xkey]
    paths = []
    for metric, label in METRIC_LABELS.items():
        series: dict = {}
        for r in rows:
            series.setdefault(r["strategy"], []).append((float(r[xkey]), float(r[metric])))
        hl = {"baseline": float(baseline[metric])} if baseline else None
        path = os.path.join(out_dir, f"{metric}.svg")
        write_svg(path, line_chart(series, f"{label} vs {xlabel}", xlabel, label, hl))
        paths.append(path)
    return paths


# --- trajectory -------------------------------------------------------------

def run_trajectory(cfg: RunConfig, out_dir) -> dict:
    """Chain pre- and post-attack estimates for the first sequence and cell."""
    cfg = RunConfig.from_dict({**cfg.to_dict(), "strategies": cfg.strategies[:1],
                               "k_values": cfg.k_values[:1], "side_values": cfg.side_values[:1],
                               "yaw_values": cfg.yaw_values[:1], "sequences": cfg.sequences[:1]})
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    results = _run_pairs(cfg, _tasks(cfg))
    ds = _dataset(cfg.dataset, cfg.sequences[0])
    gt = chain_trajectory([ds.gt(*r["pair"]) for r in results])
    pre = chain_trajectory([r["baseline_T"] for r in results])
    post = chain_trajectory([r["cells"][0]["T"] for r in results])
    for name, traj in (("gt", gt), ("pre", pre), ("post", post)):
        write_positions(os.path.join(out_dir, f"traj_{name}.csv"), traj)
    drift = {"pre": endpoint_drift(pre, gt), "post": endpoint_drift(post, gt)}
    write_csv(os.path.join(out_dir, "drift.csv"), ["trajectory", "endpoint_drift_m"],
              [{"trajectory": k, "endpoint_drift_m": v} for k, v in drift.items()])
    series = {name: [(float(p[0]), float(p[1])) for p in t.positions()]
              for name, t in (("ground truth", gt), ("pre-attack", pre), ("post-attack", post))}
    write_svg(os.path.join(out_dir, "trajectory.svg"),
              line_chart(series, "Trajectory (top-down)", "x (m)", "y (m)", equal_aspect=True))
    return {"gt": gt, "pre": pre, "post": post, "drift": drift}


def write_positions(path, traj: Trajectory) -> None:
    write_csv(path, ["x", "y", "z"],
              [{"x": float(p[0]), "y": float(p[1]), "z": float(p[2])} for p in traj.positions()])


# --- replay -----------------------------------------------------------------

def replay_plan(plan: AttackPlan, cfg: RunConfig, seq: str, pair: tuple) -> PairError:
    """Apply a stored plan verbatim to ``pair`` and register with ``cfg.backend``."""
    i, j = (int(v) for v in pair)
    if plan.pair is not None and tuple(plan.pair) != (i, j):
        raise ValueError(f"frame mismatch: plan is for pair {tuple(plan.pair)}, not {(i, j)}")
    if plan.frame is not None and plan.frame != i:
        raise ValueError(f"frame mismatch: plan is expressed in frame {plan.frame}, not {i}")
    ds = _dataset(cfg.dataset, seq)
    if not (0 <= i < len(ds) and 0 <= j < len(ds)):
        raise DataError(f"pair {(i, j)} outside sequence of {len(ds)} frames")
    src, tgt, gt = ds.cloud(j), ds.cloud(i), ds.gt(i, j)
    if len(plan):
        src, tgt, _ = apply_plan_to_pair(src, tgt, plan, cfg.mode, cfg.attack_target, gt)
    return _error((i, j), _safe_register(cfg, src, tgt), gt)


def load_plan(path) -> AttackPlan:
    with open(path) as f:
        return AttackPlan.from_json(f.read())


def replay_dir(cfg: RunConfig, plan_dir, seq: str, out_dir=None) -> dict:
    """Replay every plan in a directory; report errors and the transfer rate
    (pairs registered correctly before the attack but not after)."""
    ecfg = cfg.eval_config()
    rows, n_ok, n_broken = [], 0, 0
    for name in sorted(os.listdir(plan_dir)):
        if not name.endswith(".json"):
            continue
        plan = load_plan(os.path.join(plan_dir, name))
        if plan.pair is None:
            continue
        i, j = plan.pair
        base = replay_plan(AttackPlan(plan.strategy, plan.k, (), plan.seed, i, (i, j)), cfg, seq,
                           (i, j))
        att = replay_plan(plan, cfg, seq, (i, j))
        ok_before = registration_recall([base], ecfg) == 1.0
        ok_after = registration_recall([att], ecfg) == 1.0
        n_ok += ok_before
        n_broken += ok_before and not ok_after
        rows.append({"plan": name, "frame_i": i, "frame_j": j, "base_rre": base.rre_deg,
                     "base_rte": base.rte_m, "rre_deg": att.rre_deg, "rte_m": att.rte_m,
                     "converged": att.converged})
    rate = n_broken / n_ok if n_ok else 0.0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "replay.csv"),
                  ["plan", "frame_i", "frame_j", "base_rre", "base_rte", "rre_deg", "rte_m",
                   "converged"], rows)
    return {"rows": rows, "transfer_rate": rate}


# --- defense ----------------------------------------------------------------

def run_defense(cfg: RunConfig, out_dir=None, attack: bool = True) -> dict:
    """Void detection on consecutive pairs with ground-truth odometry.

    The previous frame is clean; with ``attack`` the current frame is occluded
    by a plan built from the first sweep cell. Recall counts patches that
    removed at least ``min_expected * min_cluster`` points and are touched by
    an alert (alert voxels within one voxel of a removed point).
    """
    cfg.validate()
    params = dfn.VoidParams(**cfg.defense)
    cell = cfg.cells()[0]
    seq = cfg.sequences[0]
    ds = _dataset(cfg.dataset, seq)
    pairs = frame_pairs(len(ds), cfg.frame_stride, cfg.first_frame, cfg.max_pairs)
    if not pairs:
        raise DataError("no frame pairs after striding")
    alerts_out, per_pair = [], []
    detected = positives = clean_alerts = 0
    clean_counts = []
    for i, j in pairs:
        prev, cur, gt = ds.cloud(i), ds.cloud(j), ds.gt(i, j)
        pred = dfn.predict_scan(prev, gt)
        clean = dfn.detect_voids(pred, cur, params)
        clean_counts.append(len(clean))
        clean_alerts += len(clean)
        row = {"frame_i": i, "frame_j": j, "clean_alerts": len(clean)}
        if attack:
            base = _safe_register(cfg, cur, prev)
            plan = plan_for_pair(cfg, ds, i, j, base, cell, 0)
            src_plan = plan.transformed(gt.inverse(), frame=j)
            attacked, _, _ = apply_plan_to_pair(cur, prev, src_plan, cfg.mode, "source")
            alerts = dfn.detect_voids(pred, attacked, params)
            removed = []
            for patch in src_plan.patches:
                m = shadow_mask(cur.points, patch) if Mode(cfg.mode) is Mode.SHADOW \
                    else crop_mask(cur.points, patch)
                removed.append(cur.points[m])
            d, p = dfn.label_recall(alerts, removed, params)
            detected += d
            positives += p
            row.update({"alerts": len(alerts), "patches": len(src_plan), "positives": p,
                        "detected": d})
            alerts_out.append((j, alerts))
        per_pair.append(row)
    result = {"recall": detected / positives if positives else 1.0, "positives": positives,
              "detected": detected, "false_alerts_mean": clean_alerts / len(pairs),
              "false_alerts_max": max(clean_counts), "pairs": per_pair}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        dfn.write_alerts_csv(os.path.join(out_dir, "alerts.csv"), alerts_out)
        keys = ["frame_i", "frame_j", "clean_alerts", "alerts", "patches", "positives", "detected"]
        write_csv(os.path.join(out_dir, "defense.csv"), keys,
                  [{k: r.get(k, "") for k in keys} for r in per_pair])
    return result
