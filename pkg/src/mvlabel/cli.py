"""Command-line entry points: simulate | generate | eval | refine-poses.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("mvlabel")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise ValidationError("config file must hold a JSON object")
    return cfg


def _merge(cfg: dict, args, keys) -> dict:
    """Config-file values overridden by explicitly given flags."""
    out = dict(cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _check_keys(d: dict, allowed, where: str):
    bad = set(d) - set(allowed)
    if bad:
        raise ValidationError(f"unknown {where} config keys: {sorted(bad)}")


# ---------------------------------------------------------------------------
# simulate


SIM_KEYS = ("episodes", "conf_threshold", "n_views", "noise", "noise_model", "r_min", "r_max",
            "base_conf", "misclass_rate", "occlusion_exponent", "world_seed", "step_budget")


def cmd_simulate(args) -> int:
    from .egomotion import ActionNoiseModel
    from .explore import MockDetectorModel, PolicyConfig, default_world_config, load_world, world_from_config
    from .pipeline import simulate_corpus

    cfg = _merge(_load_config(args.config), args, SIM_KEYS)
    _check_keys(cfg, SIM_KEYS, "simulate")
    episodes = int(cfg.get("episodes", 30))
    if episodes < 1:
        raise ValidationError("--episodes must be >= 1")
    try:
        world = (load_world(args.world, cfg.get("world_seed")) if args.world
                 else world_from_config(default_world_config(), cfg.get("world_seed")))
        noise = None
        if cfg.get("noise"):
            noise = (ActionNoiseModel.load(cfg["noise_model"]) if cfg.get("noise_model")
                     else ActionNoiseModel.default())
        det = MockDetectorModel(base_conf=float(cfg.get("base_conf", 0.95)),
                                occlusion_exponent=float(cfg.get("occlusion_exponent", 2.0)),
                                misclass_rate=float(cfg.get("misclass_rate", 0.05)))
        policy = PolicyConfig(conf_threshold=float(cfg.get("conf_threshold", 0.9)),
                              n_views=int(cfg.get("n_views", 25)), noise=noise,
                              r_min=float(cfg.get("r_min", 0.5)), r_max=float(cfg.get("r_max", 3.0)),
                              step_budget=int(cfg.get("step_budget", 500)), detector=det)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    summary = simulate_corpus(world, args.out, episodes, args.seed, policy, args.jobs)
    (Path(args.out) / "world.json").write_text(json.dumps(world.to_dict(), indent=1))
    print(f"simulated {summary['n_ok']}/{episodes} episodes into {args.out}")
    return EXIT_OK if summary["n_ok"] > 0 else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# generate


GEN_FLAGS = ("views", "weak_seed", "aggregate_votes", "filter_poses", "refine_poses", "pose_method",
             "conf_threshold")
CRF_FLAGS = ("w_app", "w_smooth", "theta_alpha", "theta_beta", "theta_gamma", "iterations")


def build_generate_config(args):
    from .pipeline import GenerateConfig

    cfg = _load_config(args.config)
    for k in GEN_FLAGS:
        v = getattr(args, k, None)
        # store_true flags left unset must not override the config file
        if v is not None and v is not False:
            cfg[k] = v
    crf = {k: getattr(args, k) for k in CRF_FLAGS if getattr(args, k, None) is not None}
    if crf:
        seg = dict(cfg.get("segment", {}))
        seg["crf"] = {**seg.get("crf", {}), **crf}
        cfg["segment"] = seg
    cfg["seed"] = args.seed
    try:
        return GenerateConfig.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e)) from e


def cmd_generate(args) -> int:
    from .pipeline import find_manifests, generate_corpus

    gcfg = build_generate_config(args)
    if not find_manifests(args.data):
        raise ValidationError(f"no episode manifests under {args.data}")
    names = None
    wpath = Path(args.data) / "world.json"
    if wpath.exists():
        names = {int(c["id"]): c["name"] for c in json.loads(wpath.read_text()).get("categories", [])}
    summary = generate_corpus(args.data, args.out, gcfg, args.jobs, names)
    print(f"labelled {summary['n_ok']}/{summary['n_episodes']} episodes into {args.out}")
    return EXIT_OK if summary["n_ok"] > 0 else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from . import evalkit

    labels = Path(args.labels)
    if not (labels / "labels_2d.json").exists():
        raise ValidationError(f"{labels}/labels_2d.json not found")
    try:
        coco = json.loads((labels / "labels_2d.json").read_text())
        for i, a in enumerate(coco["annotations"]):
            for key in ("image_id", "category_id", "bbox"):
                if key not in a:
                    raise ValidationError(f"annotations[{i}].{key}: missing field")
        for i, im in enumerate(coco["images"]):
            for key in ("id", "episode_id", "view_index"):
                if key not in im:
                    raise ValidationError(f"images[{i}].{key}: missing field")
    except (KeyError, json.JSONDecodeError) as e:
        raise ValidationError(f"labels_2d.json: malformed ({e})") from e
    if not evalkit.sidecar_paths(args.gt):
        raise ValidationError(f"no ground-truth sidecars under {args.gt}")
    ious = tuple(args.iou) if args.iou else (0.5, 0.3)
    report = evalkit.evaluate_corpus(labels, args.gt, ious, args.iou3d, args.min_pixels,
                                     args.mode3d, args.detector_threshold)
    if args.sweep:
        thetas = [round(x, 2) for x in np.arange(0.5, 0.91, 0.05)]
        gt2d, _ = evalkit.load_ground_truth(args.gt, args.min_pixels)
        if args.baseline:
            preds = evalkit.detector_predictions(args.gt)
        else:
            preds, keys = evalkit.coco_predictions(coco)
            gt2d = evalkit.restrict(gt2d, keys)
        report["sweep"] = evalkit.pr_sweep(preds, gt2d, thetas, ious[0])
    print(evalkit.format_table(report))
    out = Path(args.report) if args.report else labels / "eval_report.json"
    from .labelgen import write_json_atomic
    write_json_atomic(out, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# refine-poses


def cmd_refine_poses(args) -> int:
    from . import egomotion
    from .ingest import load_episode, save_episode
    from .labelgen import write_json_atomic
    from .pipeline import find_manifests

    paths = find_manifests(args.data)
    if not paths:
        raise ValidationError(f"no episode manifests under {args.data}")
    n_ok = 0
    out_root = Path(args.out)
    for p in paths:
        try:
            ep = load_episode(p)
            kept, res = egomotion.filter_and_refine(
                ep, args.method, args.refine, threshold=args.threshold, min_views=args.min_views,
                max_views=args.max_views)
            save_episode(kept, out_root / p.parent.name)
            side = p.parent / "gt.json"
            if side.exists():
                import shutil
                shutil.copy(side, out_root / p.parent.name / "gt.json")
                for m in p.parent.glob("gt_mask_*.png"):
                    shutil.copy(m, out_root / p.parent.name / m.name)
            write_json_atomic(out_root / p.parent.name / "pose_filter.json", res.to_dict())
            n_ok += 1
        except Exception as e:  # per-episode isolation
            log.warning("episode %s failed: %s", p.parent.name, e)
    print(f"filtered {n_ok}/{len(paths)} episodes into {out_root}")
    return EXIT_OK if n_ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--config", help="JSON config file; explicit flags take precedence")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="mvlabel", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="collect synthetic episodes")
    s.add_argument("--world", help="world config JSON (default: bundled indoor world)")
    s.add_argument("--out", required=True)
    s.add_argument("--episodes", type=int, help="number of episodes (default 30)")
    s.add_argument("--n-views", dest="n_views", type=int, help="views per episode (default 25)")
    s.add_argument("--conf-threshold", dest="conf_threshold", type=float, help="seed confidence (default 0.9)")
    s.add_argument("--noise", action="store_true", default=None, help="enable actuation noise")
    s.add_argument("--noise-model", dest="noise_model", help="noise model JSON (default: bundled placeholder)")
    s.add_argument("--misclass-rate", dest="misclass_rate", type=float, help="mock detector (default 0.05)")
    s.add_argument("--base-conf", dest="base_conf", type=float, help="mock detector (default 0.95)")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("generate", parents=[common], help="generate pseudo-labels")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--views", type=int, help="subsample N views per episode without replacement")
    g.add_argument("--weak-seed", dest="weak_seed", action="store_true", help="seed from one GT view")
    g.add_argument("--aggregate-votes", dest="aggregate_votes", action="store_true")
    g.add_argument("--filter-poses", dest="filter_poses", action="store_true",
                   help="drop views whose egomotion fails verification")
    g.add_argument("--pose-method", dest="pose_method", choices=("registration", "reported"),
                   help="registration tree from depth (default) or cycle filter on reported poses")
    g.add_argument("--refine-poses", dest="refine_poses", action="store_true",
                   help="with --filter-poses, also replace passing poses by re-estimated ones")
    g.add_argument("--conf-threshold", dest="conf_threshold", type=float)
    for k in CRF_FLAGS:
        g.add_argument("--" + k.replace("_", "-"), dest=k, type=int if k == "iterations" else float)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", parents=[common], help="evaluate a label export")
    e.add_argument("--labels", required=True)
    e.add_argument("--gt", required=True, help="simulator corpus with gt.json sidecars")
    e.add_argument("--iou", type=float, action="append", help="2D IoU threshold(s) (default 0.5 and 0.3)")
    e.add_argument("--iou3d", type=float, default=0.25)
    e.add_argument("--mode3d", choices=("volume", "bev"), default="volume")
    e.add_argument("--min-pixels", dest="min_pixels", type=int, default=25)
    e.add_argument("--detector-threshold", dest="detector_threshold", type=float, default=0.5)
    e.add_argument("--sweep", action="store_true", help="confidence-threshold sweep table")
    e.add_argument("--baseline", action="store_true", help="sweep the raw detector instead of the labels")
    e.add_argument("--report", help="report JSON path (default LABELS/eval_report.json)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("refine-poses", parents=[common], help="cycle-consistency view filter")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--threshold", type=float, default=0.1)
    r.add_argument("--min-views", dest="min_views", type=int, default=10)
    r.add_argument("--max-views", dest="max_views", type=int, default=25)
    r.add_argument("--refine", action="store_true")
    r.add_argument("--method", choices=("registration", "reported"), default="registration")
    r.set_defaults(func=cmd_refine_poses)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
