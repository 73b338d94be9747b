"""Per-episode label generation and corpus-level drivers shared by the CLI and tests."""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import egomotion
from .ingest import GROUND_TRUTH_SEED, Detection, Episode, estimate_centroid, load_episode, read_mask
from .labelgen import LabelConfig, PseudoLabelSet, ViewLabel, export_labels, generate_pseudolabels, write_json_atomic
from .segment3d import CrfParams, SegmentConfig, segment_object

log = logging.getLogger(__name__)


class SeedSelectionError(RuntimeError):
    pass


@dataclass
class GenerateConfig:
    views: int | None = None
    weak_seed: bool = False
    aggregate_votes: bool = False
    filter_poses: bool = False
    refine_poses: bool = False
    pose_method: str = "registration"
    seed: int = 0
    conf_threshold: float = 0.9
    assoc_radius: float = 0.75
    cycle_threshold: float = 0.1
    min_views: int = 10
    max_views: int = 25
    segment: SegmentConfig = field(default_factory=lambda: SegmentConfig(
        erode_r=2, dilate_r=3, voxel_size=0.05, crop_radius=1.2))
    label: LabelConfig = field(default_factory=lambda: LabelConfig(close_r=2, depth_tol=0.1))

    def __post_init__(self):
        if self.views is not None and self.views < 1:
            raise ValueError("views must be >= 1")
        if self.pose_method not in egomotion.POSE_METHODS:
            raise ValueError(f"pose_method must be one of {egomotion.POSE_METHODS}")

    @classmethod
    def from_dict(cls, d: dict) -> "GenerateConfig":
        """Build from a flat or nested dict; unknown keys are rejected."""
        d = dict(d)
        seg = d.pop("segment", {}) or {}
        lab = d.pop("label", {}) or {}
        crf = dict(seg.pop("crf", {}) or {})
        names = {f.name for f in fields(cls)}
        bad = set(d) - names
        if bad:
            raise ValueError(f"unknown generate config keys: {sorted(bad)}")
        base = cls()
        sbad = set(seg) - {f.name for f in fields(SegmentConfig)}
        lbad = set(lab) - {f.name for f in fields(LabelConfig)}
        cbad = set(crf) - {f.name for f in fields(CrfParams)}
        if sbad or lbad or cbad:
            raise ValueError(f"unknown config keys: {sorted(sbad | lbad | cbad)}")
        segment = replace(base.segment, **seg, crf=replace(base.segment.crf, **crf))
        label = replace(base.label, **lab)
        return cls(**d, segment=segment, label=label)

    def to_dict(self) -> dict:
        return asdict(self)


def episode_rng(seed: int, episode_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(episode_id.encode())])


def subsample_views(episode: Episode, n: int, seed: int) -> list[int]:
    """``n`` views drawn without replacement, seeded per episode."""
    views = episode.view_indices
    if n >= len(views):
        return list(views)
    pick = episode_rng(seed, episode.episode_id).choice(len(views), size=n, replace=False)
    return sorted(views[i] for i in pick)


def select_seed(episode: Episode, conf_threshold: float, assoc_radius: float) -> Detection:
    """Highest-confidence confident detection of the target class.

    When the episode records a target centroid, candidates whose own
    centroid estimate lies farther than ``assoc_radius`` from it are ignored.
    """
    cands = [d for d in episode.detections
             if d.class_id == episode.target_class and d.confidence >= conf_threshold]
    if episode.target_centroid is not None:
        c = np.asarray(episode.target_centroid)
        near = []
        for d in cands:
            try:
                p = estimate_centroid(d, episode.frame(d.view_index))
            except ValueError:
                continue
            if np.linalg.norm(p - c) <= assoc_radius:
                near.append(d)
        cands = near
    if not cands:
        raise SeedSelectionError("no confident detection of the target")
    return max(cands, key=lambda d: (d.confidence, -d.view_index))


def weak_seed(episode: Episode, episode_dir) -> Detection:
    """Ground-truth seed on the view where the target is most visible.

    Views whose target box stays clear of the image border are preferred, as
    a truncated object leaves little or no background around the seed.
    """
    gt = json.loads((Path(episode_dir) / "gt.json").read_text())
    h, w = episode.frames[0].intr.shape
    present = set(episode.view_indices)
    views = [v for v in gt["views"] if v["view_index"] in present and v["target_visible_pixels"] > 0]
    if not views:
        raise SeedSelectionError("target not visible in any available view")

    def inside(v):
        x, y, bw, bh = v["target_bbox"]
        return x > 0 and y > 0 and x + bw < w and y + bh < h

    best = max(views, key=lambda v: (inside(v), v["target_visible_pixels"], -v["view_index"]))
    mask = read_mask(Path(episode_dir) / best["target_mask"])
    return Detection(best["view_index"], int(gt["target_class"]), 1.0, mask, source=GROUND_TRUTH_SEED)


def _empty_set(episode: Episode, class_id: int) -> PseudoLabelSet:
    h, w = episode.frames[0].intr.shape
    entries = [ViewLabel(v, class_id, np.zeros((h, w), dtype=bool), (0, 0, 0, 0), score=0.0)
               for v in episode.view_indices]
    return PseudoLabelSet(episode.episode_id, entries, None, class_id)


def process_episode(manifest_path, cfg: GenerateConfig):
    """Label one episode. Returns ``(PseudoLabelSet, status dict)``.

    On failure the label set holds empty entries for the episode's evaluated
    views so that downstream scoring counts them as misses.
    """
    manifest_path = Path(manifest_path)
    ep = load_episode(manifest_path)
    status = {"episode_id": ep.episode_id, "ok": False, "reason": "", "views": ep.view_indices}
    if cfg.views is not None:
        ep = ep.subset(subsample_views(ep, cfg.views, cfg.seed))
        status["views"] = ep.view_indices
    try:
        if cfg.weak_seed:
            seed = weak_seed(ep, manifest_path.parent)
        else:
            seed = select_seed(ep, cfg.conf_threshold, cfg.assoc_radius)
        status["seed_view"] = seed.view_index
        if cfg.filter_poses and len(ep.frames) > 1:
            ep, res = egomotion.filter_and_refine(
                ep, cfg.pose_method, cfg.refine_poses, anchor=seed.view_index, threshold=cfg.cycle_threshold,
                min_views=cfg.min_views, max_views=cfg.max_views)
            status["pose_filter"] = res.to_dict()
            status["views"] = ep.view_indices
        seg = segment_object(ep, seed, replace(cfg.segment, conf_threshold=cfg.conf_threshold))
        labels = generate_pseudolabels(ep, seg, cfg.label)
        status["ok"] = True
        status["n_object_voxels"] = int(seg.labels.sum())
        return labels, status
    except Exception as exc:  # per-episode isolation
        status["reason"] = f"{type(exc).__name__}: {exc}"
        log.warning("episode %s failed: %s", ep.episode_id, status["reason"])
        return _empty_set(ep, ep.target_class), status


def find_manifests(data_dir) -> list[Path]:
    return sorted(Path(data_dir).glob("*/manifest.json"))


def _work(args):
    path, cfg = args
    return process_episode(path, cfg)


def generate_corpus(data_dir, out_dir, cfg: GenerateConfig, jobs: int = 1, category_names=None) -> dict:
    """Label every episode under ``data_dir`` and export to ``out_dir``."""
    paths = find_manifests(data_dir)
    if not paths:
        raise FileNotFoundError(f"no episode manifests under {data_dir}")
    tasks = [(p, cfg) for p in paths]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_work, tasks))
    else:
        results = [_work(t) for t in tasks]
    sets = [r[0] for r in results]
    statuses = [r[1] for r in results]
    export_labels(sets, out_dir, category_names)
    summary = {"n_episodes": len(paths), "n_ok": sum(s["ok"] for s in statuses),
               "config": cfg.to_dict(), "episodes": statuses}
    write_json_atomic(Path(out_dir) / "summary.json", summary)
    return summary


def _simulate_one(args):
    from .explore import EpisodeAbandoned, run_episode, write_episode
    world, policy, idx, seed, out_dir = args
    ep_id = f"ep{idx:03d}"
    try:
        rec = run_episode(world, None, replace(policy, rng_seed=seed), episode_id=ep_id)
    except EpisodeAbandoned as exc:
        return {"episode_id": ep_id, "ok": False, "reason": str(exc), "seed": seed}
    write_episode(rec, Path(out_dir) / ep_id)
    return {"episode_id": ep_id, "ok": True, "seed": seed, "n_views": len(rec.episode.frames)}


def episode_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def simulate_corpus(world, out_dir, n_episodes: int, seed: int, policy, jobs: int = 1) -> dict:
    """Run ``n_episodes`` independent episodes and write them under ``out_dir``."""
    if n_episodes < 1:
        raise ValueError("episodes must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(world, policy, i, s, out) for i, s in enumerate(episode_seeds(seed, n_episodes))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_simulate_one, tasks))
    else:
        results = [_simulate_one(t) for t in tasks]
    for r in results:
        if not r["ok"]:
            log.warning("episode %s abandoned: %s", r["episode_id"], r["reason"])
    summary = {"n_requested": n_episodes, "n_ok": sum(r["ok"] for r in results), "episodes": results}
    write_json_atomic(out / "simulate_summary.json", summary)
    return summary
