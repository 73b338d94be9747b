"""Episode data model, on-disk format and the partitioned scene cloud."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import GeometryError, Intrinsics, Pose, unproject_frame, valid_depth_mask

DETECTOR = "detector"
GROUND_TRUTH_SEED = "ground_truth_seed"
DEPTH_FORMATS = ("npy_f32", "png_mm")


class EpisodeFormatError(ValueError):
    """A manifest or one of the files it references is invalid."""

    def __init__(self, where, message: str):
        self.where = str(where)
        super().__init__(f"{where}: {message}")


class PartitionError(ValueError):
    """The foreground or background seed set came out empty."""


class Label(enum.IntEnum):
    BG = 0
    FG = 1
    UNK = 2


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight ``(x, y, w, h)`` box of a boolean mask; zeros when empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    if len(rows) == 0:
        return (0, 0, 0, 0)
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


@dataclass
class Detection:
    view_index: int
    class_id: int
    confidence: float
    mask: np.ndarray
    bbox: tuple[int, int, int, int] | None = None
    source: str = DETECTOR

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        tight = mask_bbox(self.mask)
        if self.bbox is None:
            self.bbox = tight
        self.bbox = tuple(int(x) for x in self.bbox)
        if self.bbox != tight:
            raise ValueError(f"bbox {self.bbox} is not the tight box {tight} of the mask")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.source not in (DETECTOR, GROUND_TRUTH_SEED):
            raise ValueError(f"unknown detection source {self.source!r}")
        if self.source == GROUND_TRUTH_SEED and self.confidence != 1.0:
            raise ValueError("ground-truth seeds must have confidence 1.0")


@dataclass
class PosedFrame:
    rgb: np.ndarray
    depth: np.ndarray
    intr: Intrinsics
    pose: Pose
    view_index: int
    timestamp: float = 0.0

    def __post_init__(self):
        if self.depth.shape != self.intr.shape or self.rgb.shape[:2] != self.intr.shape:
            raise GeometryError(
                f"view {self.view_index}: image sizes {self.rgb.shape[:2]}/{self.depth.shape} "
                f"do not match intrinsics {self.intr.shape}"
            )


@dataclass
class Episode:
    frames: list[PosedFrame]
    detections: list[Detection]
    target_class: int
    environment_id: str = ""
    episode_id: str = ""
    reference_view: int | None = None
    target_centroid: np.ndarray | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("an episode needs at least one frame")
        views = self.view_indices
        if len(set(views)) != len(views):
            raise ValueError("duplicate view indices")
        for det in self.detections:
            if det.view_index not in self._by_view:
                raise ValueError(f"detection refers to missing view {det.view_index}")
        if self.reference_view is None:
            self.reference_view = default_reference_view(self)
        elif self.reference_view not in self._by_view:
            raise ValueError(f"reference_view {self.reference_view} is not a frame")

    @property
    def _by_view(self) -> dict[int, PosedFrame]:
        return {f.view_index: f for f in self.frames}

    @property
    def view_indices(self) -> list[int]:
        return [f.view_index for f in self.frames]

    def frame(self, view_index: int) -> PosedFrame:
        return self._by_view[view_index]

    def detections_in(self, view_index: int) -> list[Detection]:
        return [d for d in self.detections if d.view_index == view_index]

    def subset(self, views) -> "Episode":
        """Episode restricted to ``views``; the reference view is re-derived if dropped."""
        keep = set(int(v) for v in views)
        frames = [f for f in self.frames if f.view_index in keep]
        dets = [d for d in self.detections if d.view_index in keep]
        ref = self.reference_view if self.reference_view in keep else None
        return Episode(frames, dets, self.target_class, self.environment_id, self.episode_id,
                       ref, self.target_centroid)


def default_reference_view(episode: Episode) -> int:
    """View of the highest-confidence target-class detection (any class as fallback)."""
    cands = [d for d in episode.detections if d.class_id == episode.target_class] or episode.detections
    if not cands:
        return episode.frames[0].view_index
    best = max(cands, key=lambda d: (d.confidence, -d.view_index))
    return best.view_index


# ---------------------------------------------------------------------------
# on-disk format


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def _write_png(path: Path, arr: np.ndarray):
    Image.fromarray(arr).save(path)


def read_mask(path) -> np.ndarray:
    arr = _read_png(Path(path))
    if arr.ndim != 2:
        raise EpisodeFormatError(path, "mask must be single-channel")
    return arr != 0


def write_mask(path, mask: np.ndarray):
    _write_png(Path(path), np.asarray(mask, dtype=np.uint8) * 255)


def read_depth(path, fmt: str) -> np.ndarray:
    path = Path(path)
    if fmt == "npy_f32":
        d = np.load(path, allow_pickle=False)
        if d.dtype != np.float32 or d.ndim != 2:
            raise EpisodeFormatError(path, f"expected 2-D float32 depth, got {d.dtype} {d.shape}")
        return d
    if fmt == "png_mm":
        d = _read_png(path)
        if d.ndim != 2:
            raise EpisodeFormatError(path, "depth PNG must be single-channel")
        return d.astype(np.float32) / 1000.0
    raise EpisodeFormatError(path, f"unknown depth_format {fmt!r}")


def write_depth(path, depth: np.ndarray, fmt: str):
    if fmt == "npy_f32":
        np.save(path, np.asarray(depth, dtype=np.float32), allow_pickle=False)
    elif fmt == "png_mm":
        d = np.where(valid_depth_mask(depth), depth, 0.0)
        mm = np.clip(np.rint(d * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(path)
    else:
        raise ValueError(f"unknown depth_format {fmt!r}")


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise EpisodeFormatError(where, f"missing field {key!r}")
    return d[key]


def load_episode(manifest_path) -> Episode:
    """Read and fully validate an episode manifest and the files it names."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise EpisodeFormatError(manifest_path, "manifest not found")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise EpisodeFormatError(manifest_path, f"invalid JSON ({e})") from None
    root = manifest_path.parent

    def resolve(rel, where):
        p = root / rel
        if not p.is_file():
            raise EpisodeFormatError(where, f"file not found: {p}")
        return p

    frames = []
    for i, fd in enumerate(_require(doc, "frames", "manifest")):
        where = f"{manifest_path}:frames[{i}]"
        try:
            intr = Intrinsics.from_dict(_require(fd, "intrinsics", where))
        except (KeyError, TypeError, GeometryError) as e:
            raise EpisodeFormatError(where + ".intrinsics", str(e)) from None
        pose_vals = _require(fd, "pose", where)
        if not isinstance(pose_vals, list) or len(pose_vals) != 16:
            raise EpisodeFormatError(where + ".pose", "expected 16 numbers (row-major 4x4)")
        try:
            pose = Pose.from_matrix(pose_vals)
        except GeometryError as e:
            raise EpisodeFormatError(where + ".pose", str(e)) from None
        fmt = fd.get("depth_format", "npy_f32")
        if fmt not in DEPTH_FORMATS:
            raise EpisodeFormatError(where + ".depth_format", f"unknown format {fmt!r}")
        rgb_path = resolve(_require(fd, "rgb", where), where + ".rgb")
        depth_path = resolve(_require(fd, "depth", where), where + ".depth")
        rgb = _read_png(rgb_path)
        if rgb.ndim == 3 and rgb.shape[2] == 4:
            rgb = rgb[..., :3]
        depth = read_depth(depth_path, fmt)
        if rgb.shape[:2] != intr.shape:
            raise EpisodeFormatError(rgb_path, f"image size {rgb.shape[:2]} != intrinsics {intr.shape}")
        if depth.shape != intr.shape:
            raise EpisodeFormatError(depth_path, f"depth size {depth.shape} != intrinsics {intr.shape}")
        frames.append(PosedFrame(rgb, depth, intr, pose, int(_require(fd, "view_index", where)),
                                 float(fd.get("timestamp", 0.0))))

    dets = []
    for i, dd in enumerate(doc.get("detections", [])):
        where = f"{manifest_path}:detections[{i}]"
        mask = read_mask(resolve(_require(dd, "mask", where), where + ".mask"))
        try:
            det = Detection(int(_require(dd, "view_index", where)), int(_require(dd, "class_id", where)),
                            float(_require(dd, "confidence", where)), mask,
                            tuple(_require(dd, "bbox", where)), dd.get("source", DETECTOR))
        except ValueError as e:
            raise EpisodeFormatError(where, str(e)) from None
        dets.append(det)

    centroid = doc.get("target_centroid")
    try:
        ep = Episode(frames, dets, int(_require(doc, "target_class", "manifest")),
                     str(doc.get("environment_id", "")), str(doc.get("episode_id", manifest_path.stem)),
                     doc.get("reference_view"),
                     None if centroid is None else np.asarray(centroid, dtype=np.float64))
    except ValueError as e:
        raise EpisodeFormatError(manifest_path, str(e)) from None
    for det in ep.detections:
        shape = ep.frame(det.view_index).intr.shape
        if det.mask.shape != shape:
            raise EpisodeFormatError(manifest_path, f"mask size {det.mask.shape} != image {shape}")
    return ep


def save_episode(episode: Episode, out_dir, depth_format: str = "npy_f32", name: str = "manifest.json") -> Path:
    """Write ``episode`` under ``out_dir`` and return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".npy" if depth_format == "npy_f32" else ".png"
    frames = []
    for f in episode.frames:
        rgb_name = f"rgb_{f.view_index:03d}.png"
        depth_name = f"depth_{f.view_index:03d}{ext}"
        _write_png(out / rgb_name, np.asarray(f.rgb, dtype=np.uint8))
        write_depth(out / depth_name, f.depth, depth_format)
        frames.append({
            "view_index": f.view_index, "rgb": rgb_name, "depth": depth_name,
            "depth_format": depth_format, "intrinsics": f.intr.to_dict(),
            "pose": f.pose.to_list(), "timestamp": f.timestamp,
        })
    dets = []
    for i, d in enumerate(episode.detections):
        mask_name = f"det_{i:03d}_v{d.view_index:03d}.png"
        write_mask(out / mask_name, d.mask)
        dets.append({
            "view_index": d.view_index, "class_id": d.class_id, "confidence": d.confidence,
            "mask": mask_name, "bbox": list(d.bbox), "source": d.source,
        })
    doc = {
        "episode_id": episode.episode_id, "environment_id": episode.environment_id,
        "target_class": episode.target_class, "reference_view": episode.reference_view,
        "frames": frames, "detections": dets,
    }
    if episode.target_centroid is not None:
        doc["target_centroid"] = [float(x) for x in episode.target_centroid]
    path = out / name
    _atomic_write_text(path, json.dumps(doc, indent=1))
    return path


# ---------------------------------------------------------------------------
# mask morphology


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def morphology(mask, op: str, radius: int) -> np.ndarray:
    """Binary erosion or dilation with a disk of ``radius`` pixels.

    Pixels outside the image count as background for both operations.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    se = disk(radius)
    if op == "erode":
        return ndimage.binary_erosion(mask, structure=se, border_value=0)
    if op == "dilate":
        return ndimage.binary_dilation(mask, structure=se, border_value=0)
    raise ValueError(f"unknown morphology op {op!r}")


# ---------------------------------------------------------------------------
# partitioned cloud


@dataclass
class LabeledCloud:
    """Voxelised scene cloud with FG/BG/UNK seed labels.

    ``points``/``provenance``/``labels`` are per voxel. The ``source_*``
    arrays keep the full-resolution points; ``source_voxel`` maps each of them
    to its voxel row, or -1 when it was cropped away.
    """

    points: np.ndarray
    provenance: np.ndarray
    labels: np.ndarray
    voxel_size: float = 0.0
    source_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    source_provenance: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    source_voxel: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.points)

    def mask(self, label: Label) -> np.ndarray:
        return self.labels == label

    def counts(self) -> dict[str, int]:
        return {lab.name: int(np.count_nonzero(self.labels == lab)) for lab in Label}


def voxelize(points: np.ndarray, labels: np.ndarray, voxel_size: float):
    """Group points into voxels.

    Returns ``(voxel_points, rep_index, voxel_labels, inverse)`` where each
    voxel point is the mean of its members and ``rep_index`` the first member
    (input order). The label is the majority among the voxel's FG/BG points,
    FG winning ties; a voxel is UNK only when it holds no labelled point.
    """
    keys = np.floor(points[:, :3] / voxel_size).astype(np.int64)
    _, first, inverse, counts = np.unique(keys, axis=0, return_index=True,
                                          return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    nv = len(first)
    sums = np.zeros((nv, points.shape[1]))
    np.add.at(sums, inverse, points)
    vpts = sums / counts[:, None]
    fg = np.bincount(inverse, weights=labels == Label.FG, minlength=nv)
    bg = np.bincount(inverse, weights=labels == Label.BG, minlength=nv)
    vlabels = np.full(nv, Label.UNK, dtype=np.int8)
    vlabels[bg > fg] = Label.BG
    vlabels[(fg > 0) & (fg >= bg)] = Label.FG
    return vpts, first, vlabels, inverse


def seed_masks(seed: Detection, erode_r: int, dilate_r: int):
    """Foreground and background pixel masks derived from a seed detection."""
    fg = morphology(seed.mask, "erode", erode_r)
    bg = ~morphology(seed.mask, "dilate", dilate_r)
    return fg, bg


def unproject_episode(episode: Episode):
    pts, prov = [], []
    for f in episode.frames:
        p, q = unproject_frame(f.rgb, f.depth, f.intr, f.pose, view_index=f.view_index)
        pts.append(p)
        prov.append(q)
    return np.concatenate(pts), np.concatenate(prov)


def _crop_keep(points, crop_center, crop_radius):
    if crop_center is None or crop_radius is None:
        return np.ones(len(points), dtype=bool)
    c = np.asarray(crop_center, dtype=np.float64)
    return np.linalg.norm(points[:, :2] - c[:2], axis=1) <= crop_radius


def assemble_cloud(points, prov, point_labels, voxel_size, crop_center=None, crop_radius=None) -> LabeledCloud:
    keep = _crop_keep(points, crop_center, crop_radius)
    idx = np.flatnonzero(keep)
    source_voxel = np.full(len(points), -1, dtype=np.int64)
    if len(idx) == 0:
        return LabeledCloud(np.zeros((0, 6)), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int8),
                            voxel_size, points, prov, source_voxel)
    vpts, first, vlab, inverse = voxelize(points[idx], point_labels[idx], voxel_size)
    source_voxel[idx] = inverse
    return LabeledCloud(vpts, prov[idx][first], vlab, voxel_size, points, prov, source_voxel)


def build_partitioned_cloud(episode: Episode, seed_detection: Detection, erode_r: int = 5,
                            dilate_r: int = 5, voxel_size: float = 0.02,
                            crop_center=None, crop_radius: float | None = None) -> LabeledCloud:
    """Aggregate all views into one cloud and partition it into FG/BG/UNK.

    Only the seed view carries FG/BG evidence: the eroded seed mask gives FG
    and pixels farther than ``dilate_r`` from the mask give BG. Every other
    point is UNK. The optional horizontal crop keeps the quadratic CRF small.
    """
    if erode_r < 0 or dilate_r < 0:
        raise ValueError("morphology radii must be >= 0")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if seed_detection.view_index not in episode.view_indices:
        raise ValueError(f"seed view {seed_detection.view_index} is not part of the episode")
    fg_px, bg_px = seed_masks(seed_detection, erode_r, dilate_r)
    if not fg_px.any():
        raise PartitionError("foreground seed is empty after erosion")
    points, prov = unproject_episode(episode)
    labels = np.full(len(points), Label.UNK, dtype=np.int8)
    in_seed = prov[:, 0] == seed_detection.view_index
    u, v = prov[in_seed, 1], prov[in_seed, 2]
    seed_lab = np.full(len(u), Label.UNK, dtype=np.int8)
    seed_lab[bg_px[v, u]] = Label.BG
    seed_lab[fg_px[v, u]] = Label.FG
    labels[in_seed] = seed_lab
    cloud = assemble_cloud(points, prov, labels, voxel_size, crop_center, crop_radius)
    if not np.any(cloud.labels == Label.FG):
        raise PartitionError("no foreground points with valid depth")
    if not np.any(cloud.labels == Label.BG):
        raise PartitionError("background seed is empty")
    return cloud


def estimate_centroid(detection: Detection, frame: PosedFrame) -> np.ndarray:
    """Reference-frame point of the masked pixel at the median depth.

    For an even count the lower median is used; among pixels at exactly that
    depth the first in row-major order wins.
    """
    ok = detection.mask & valid_depth_mask(frame.depth)
    v, u = np.nonzero(ok)
    if len(v) == 0:
        raise ValueError("no valid depth under the detection mask")
    z = frame.depth[v, u].astype(np.float64)
    med = np.sort(z)[(len(z) - 1) // 2]
    k = np.flatnonzero(z == med)[0]  # nonzero() is row-major, so this is the lowest (v, u)
    i = frame.intr
    cam = np.array([med * (u[k] - i.cx) / i.fx, med * (v[k] - i.cy) / i.fy, med])
    return frame.pose.inverse().apply(cam)
