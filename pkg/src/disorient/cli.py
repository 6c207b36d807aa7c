"""Command-line entry point: ``disorient <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
``DISORIENT_LOG`` sets the log level (e.g. ``DEBUG``, ``INFO``; default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import bench
from .bench import DataError, RunConfig
from .cloud import save_kitti_bin
from .metrics import read_csv
from .occlusion import apply_plan_to_pair
from .synth import SceneSpec, gen_synthetic

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int)


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset")
    p.add_argument("--seq", action="append", dest="sequences")
    p.add_argument("--backend", choices=bench.BACKENDS)
    p.add_argument("--stride", type=int, dest="frame_stride")
    p.add_argument("--max-pairs", type=int, dest="max_pairs")
    p.add_argument("--strategies", type=lambda s: s.split(","))
    p.add_argument("--k", type=lambda s: [int(v) for v in s.split(",")], dest="k_values")
    p.add_argument("--side", type=lambda s: [float(v) for v in s.split(",")], dest="side_values")
    p.add_argument("--yaw", type=lambda s: [float(v) for v in s.split(",")], dest="yaw_values")
    p.add_argument("--mode", choices=["shadow", "crop"])
    p.add_argument("--attack-target", choices=["source", "target", "both"], dest="attack_target")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="disorient", description="Key-region hiding attack bench for LiDAR registration")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a synthetic KITTI-layout sequence")
    _common(g)
    g.add_argument("--frames", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--step", type=float)
    g.add_argument("--seq-id", default="00")

    for name, text in (("register", "baseline registration of one pair"),
                       ("attack", "plan and apply an attack on one pair"),
                       ("sweep", "attack sweep over pairs and cells"),
                       ("trajectory", "pre/post-attack trajectory chaining"),
                       ("replay", "replay stored attack plans"),
                       ("detect-voids", "void-detection defense evaluation")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _run_flags(p)
        if name in ("register", "attack", "replay"):
            p.add_argument("--pair", type=int, nargs=2, metavar=("I", "J"))
        if name == "replay":
            p.add_argument("--plan", help="plan JSON file")
            p.add_argument("--plans", help="directory of plan JSON files")
        if name == "detect-voids":
            p.add_argument("--clean", action="store_true", help="evaluate clean pairs only")

    pl = sub.add_parser("plot", help="re-render SVG plots from a summary CSV")
    pl.add_argument("summary")
    pl.add_argument("--out", default=None)
    return ap


_RUN_KEYS = ("dataset", "sequences", "backend", "frame_stride", "max_pairs", "strategies",
             "k_values", "side_values", "yaw_values", "mode", "attack_target", "seed", "workers")


def _config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in _RUN_KEYS}
    try:
        cfg = RunConfig.load(args.config, overrides)
        cfg.validate()
    except OSError as e:
        raise UsageError(f"cannot read config: {e}") from e
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from e
    if not cfg.dataset:
        raise UsageError("a dataset root is required (--dataset or config)")
    if not os.path.isdir(cfg.dataset):
        raise DataError(f"dataset not found: {cfg.dataset}")
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def cmd_gen_synth(args) -> int:
    doc = {}
    if args.config:
        with open(args.config) as f:
            doc = json.load(f)
    for key in ("seed", "frames", "noise", "step"):
        v = getattr(args, key)
        if v is not None:
            doc[key] = v
    try:
        spec = SceneSpec.from_dict(doc)
    except TypeError as e:
        raise UsageError(f"bad scene spec: {e}") from e
    root = gen_synthetic(spec, args.out or "synthetic", args.seq_id)
    _print({"dataset": root, "frames": spec.frames})
    return EXIT_OK


def _pair(args, cfg):
    if args.pair:
        return tuple(args.pair)
    return cfg.first_frame, cfg.first_frame + cfg.frame_stride


def cmd_register(args) -> int:
    cfg = _config(args)
    seq = cfg.sequences[0]
    ds = bench._dataset(cfg.dataset, seq)
    i, j = _pair(args, cfg)
    res = bench._safe_register(cfg, ds.cloud(j), ds.cloud(i))
    err = bench._error((i, j), res, ds.gt(i, j))
    T = bench._estimate(res)
    _print({"pair": [i, j], "converged": err.converged, "rre_deg": err.rre_deg,
            "rte_m": err.rte_m, "transform": T.as_matrix().tolist()})
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    seq = cfg.sequences[0]
    ds = bench._dataset(cfg.dataset, seq)
    i, j = _pair(args, cfg)
    src, tgt, gt = ds.cloud(j), ds.cloud(i), ds.gt(i, j)
    base = bench._safe_register(cfg, src, tgt)
    plan = bench.plan_for_pair(cfg, ds, i, j, base, cfg.cells()[0], 0)
    s2, t2, reports = apply_plan_to_pair(src, tgt, plan, cfg.mode, cfg.attack_target, gt)
    att = bench._safe_register(cfg, s2, t2)
    out = args.out or "attack"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "plan.json"), "w") as f:
        f.write(plan.to_json() + "\n")
    save_kitti_bin(s2, os.path.join(out, f"source_{j:06d}.bin"))
    save_kitti_bin(t2, os.path.join(out, f"target_{i:06d}.bin"))
    b, a = bench._error((i, j), base, gt), bench._error((i, j), att, gt)
    _print({"pair": [i, j], "patches": len(plan),
            "removed": {k: r.removed_count for k, r in reports.items()},
            "baseline": {"rre_deg": b.rre_deg, "rte_m": b.rte_m, "converged": b.converged},
            "attacked": {"rre_deg": a.rre_deg, "rte_m": a.rte_m, "converged": a.converged}})
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    res = bench.run_sweep(cfg, args.out or "run")
    _print({"baseline": res["baseline"], "summary": res["summary"]})
    return EXIT_OK


def cmd_trajectory(args) -> int:
    cfg = _config(args)
    res = bench.run_trajectory(cfg, args.out or "trajectory")
    _print({"endpoint_drift_m": res["drift"]})
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = _config(args)
    seq = cfg.sequences[0]
    if args.plans:
        res = bench.replay_dir(cfg, args.plans, seq, args.out)
        _print({"plans": len(res["rows"]), "transfer_rate": res["transfer_rate"]})
        return EXIT_OK
    if not args.plan:
        raise UsageError("replay needs --plan or --plans")
    try:
        plan = bench.load_plan(args.plan)
    except OSError as e:
        raise DataError(str(e)) from e
    except ValueError as e:
        raise DataError(str(e)) from e
    pair = tuple(args.pair) if args.pair else tuple(plan.pair or _pair(args, cfg))
    try:
        err = bench.replay_plan(plan, cfg, seq, pair)
    except ValueError as e:
        raise DataError(str(e)) from e
    _print({"pair": list(pair), "converged": err.converged, "rre_deg": err.rre_deg,
            "rte_m": err.rte_m})
    return EXIT_OK


def cmd_detect_voids(args) -> int:
    cfg = _config(args)
    res = bench.run_defense(cfg, args.out or "defense", attack=not args.clean)
    _print({k: v for k, v in res.items() if k != "pairs"})
    return EXIT_OK


def cmd_plot(args) -> int:
    try:
        rows = read_csv(args.summary)
    except OSError as e:
        raise DataError(str(e)) from e
    out = args.out or os.path.dirname(os.path.abspath(args.summary))
    os.makedirs(out, exist_ok=True)
    paths = bench.plot_summary(rows, None, out)
    _print({"plots": paths})
    return EXIT_OK


COMMANDS = {"gen-synth": cmd_gen_synth, "register": cmd_register, "attack": cmd_attack,
            "sweep": cmd_sweep, "trajectory": cmd_trajectory, "replay": cmd_replay,
            "detect-voids": cmd_detect_voids, "plot": cmd_plot}


def main(argv=None) -> int:
    level = os.environ.get("DISORIENT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        logging.getLogger(__name__).debug("internal error", exc_info=True)
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
