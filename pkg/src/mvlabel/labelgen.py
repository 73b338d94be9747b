"""Pseudo-label generation: oriented 3D boxes and reprojected 2D masks."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import project_points, valid_depth_mask
from .ingest import GROUND_TRUTH_SEED, Episode, PosedFrame, disk, mask_bbox
from .segment3d import Segmentation3D

DETECTOR_SEED = "detector_seed"
WEAK_SEED = "weak_seed"


class DegenerateFootprintError(ValueError):
    pass


@dataclass
class Box3D:
    center: np.ndarray
    dims: tuple[float, float, float]  # width, depth, height
    yaw: float
    class_id: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = tuple(float(x) for x in self.dims)
        self.yaw = float(self.yaw)
        if min(self.dims) <= 0:
            raise ValueError(f"box dims must be positive, got {self.dims}")
        if not -math.pi / 2 < self.yaw <= math.pi / 2:
            raise ValueError(f"yaw {self.yaw} outside (-pi/2, pi/2]")

    def footprint(self) -> np.ndarray:
        """Counter-clockwise ``(4, 2)`` floor-plane corners."""
        w, d, _ = self.dims
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[-w, -d], [w, -d], [w, d], [-w, d]]) / 2.0
        R = np.array([[c, -s], [s, c]])
        return local @ R.T + self.center[:2]

    @property
    def z_range(self) -> tuple[float, float]:
        h = self.dims[2] / 2
        return self.center[2] - h, self.center[2] + h

    @property
    def volume(self) -> float:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = p[:, 0] * c + p[:, 1] * s
        ly = -p[:, 0] * s + p[:, 1] * c
        w, d, h = self.dims
        return ((np.abs(lx) <= w / 2 + margin) & (np.abs(ly) <= d / 2 + margin)
                & (np.abs(p[:, 2]) <= h / 2 + margin))

    def to_dict(self) -> dict:
        return {"class_id": int(self.class_id), "center": [float(x) for x in self.center],
                "dims": list(self.dims), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(d["center"], d["dims"], d["yaw"], int(d.get("class_id", 0)))


# ---------------------------------------------------------------------------
# minimum-area rectangle


def convex_hull_2d(points) -> np.ndarray:
    """Andrew's monotone chain; CCW hull without repeated or collinear vertices."""
    pts = np.unique(np.asarray(points, dtype=np.float64)[:, :2], axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _canonical_yaw(yaw: float, square: bool) -> float:
    period = math.pi / 2 if square else math.pi
    y = math.fmod(yaw, period)
    lo = -period / 2
    if y <= lo:
        y += period
    elif y > -lo:
        y -= period
    return y


def min_area_rectangle(points):
    """Smallest enclosing rectangle of 2D points.

    Uses the calipers property that an optimal rectangle has a side collinear
    with a hull edge, checking every edge orientation. Returns
    ``(center, (width, depth), yaw, area)`` with ``width >= depth`` and yaw the
    direction of the width side.
    """
    hull = convex_hull_2d(points)
    if len(hull) < 3:
        raise DegenerateFootprintError("footprint points are collinear or coincident")
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.linalg.norm(edges, axis=1)
    u = edges / lengths[:, None]
    nrm = np.stack([-u[:, 1], u[:, 0]], axis=1)
    pu = hull @ u.T  # (h, e)
    pn = hull @ nrm.T
    lu = pu.max(axis=0) - pu.min(axis=0)
    ln = pn.max(axis=0) - pn.min(axis=0)
    areas = lu * ln
    scale = max(np.ptp(hull[:, 0]), np.ptp(hull[:, 1])) ** 2
    k = int(np.argmin(areas))
    if areas[k] <= 1e-12 * scale:
        raise DegenerateFootprintError("footprint has zero area")
    mid_u = (pu[:, k].max() + pu[:, k].min()) / 2
    mid_n = (pn[:, k].max() + pn[:, k].min()) / 2
    center = mid_u * u[k] + mid_n * nrm[k]
    yaw = math.atan2(u[k, 1], u[k, 0])
    w, d = float(lu[k]), float(ln[k])
    if d > w:
        w, d = d, w
        yaw += math.pi / 2
    square = (w - d) <= 1e-9 * w
    return center, (w, d), _canonical_yaw(yaw, square), float(areas[k])


def fit_box3d(object_points, class_id: int = 0) -> Box3D:
    """Gravity-aligned box: z extent from min/max, footprint from the min-area rectangle."""
    p = np.asarray(object_points, dtype=np.float64)[:, :3]
    if len(p) < 3:
        raise DegenerateFootprintError("need at least 3 points")
    center2, (w, d), yaw, _ = min_area_rectangle(p[:, :2])
    zmin, zmax = float(p[:, 2].min()), float(p[:, 2].max())
    if zmax <= zmin:
        raise DegenerateFootprintError("points have no vertical extent")
    return Box3D([center2[0], center2[1], (zmin + zmax) / 2], (w, d, zmax - zmin), yaw, class_id)


# ---------------------------------------------------------------------------
# 2D reprojection


def largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n <= 1:
        return lab > 0
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == int(np.argmax(sizes))


def closing(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    se = disk(radius)
    padded = np.pad(mask, radius)
    out = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se, border_value=1)
    return out[radius:-radius, radius:-radius]


def reproject_to_mask(seg, frame: PosedFrame, close_r: int = 3, depth_tol: float | None = None):
    """Rasterise object points into ``frame`` as one connected mask.

    ``seg`` is a :class:`Segmentation3D` or an ``(N, >=3)`` array of object
    points in the reference frame. Points behind the camera or outside the
    image are ignored; with ``depth_tol`` set, points lying more than
    ``depth_tol`` metres behind the frame's depth map are treated as
    occluded. Returns ``(mask, bbox)``; an empty mask means no label.
    """
    pts = seg.object_points() if isinstance(seg, Segmentation3D) else np.asarray(seg, dtype=np.float64)
    H, W = frame.intr.shape
    mask = np.zeros((H, W), dtype=bool)
    if len(pts) == 0:
        return mask, (0, 0, 0, 0)
    uv, z, ok = project_points(pts, frame.intr, frame.pose)
    u = np.minimum(np.floor(uv[ok, 0] + 0.5).astype(np.int64), W - 1)
    v = np.minimum(np.floor(uv[ok, 1] + 0.5).astype(np.int64), H - 1)
    if depth_tol is not None and len(u):
        dm = frame.depth[v, u].astype(np.float64)
        vis = ~valid_depth_mask(dm) | (z[ok] <= dm + depth_tol)
        u, v = u[vis], v[vis]
    mask[v, u] = True
    if not mask.any():
        return mask, (0, 0, 0, 0)
    mask = largest_component(closing(mask, close_r))
    return mask, mask_bbox(mask)


# ---------------------------------------------------------------------------
# label sets


@dataclass
class ViewLabel:
    view_index: int
    class_id: int
    mask: np.ndarray
    bbox: tuple[int, int, int, int]
    provenance: str = DETECTOR_SEED
    score: float = 1.0

    @property
    def empty(self) -> bool:
        return not self.mask.any()


@dataclass
class PseudoLabelSet:
    episode_id: str
    entries: list[ViewLabel] = field(default_factory=list)
    box3d: Box3D | None = None
    class_id: int = 0


@dataclass
class LabelConfig:
    close_r: int = 3
    depth_tol: float | None = 0.1


def generate_pseudolabels(episode: Episode, seg: Segmentation3D, config: LabelConfig | None = None) -> PseudoLabelSet:
    cfg = config or LabelConfig()
    seed = seg.seed
    class_id = seed.class_id if seed is not None else episode.target_class
    prov = WEAK_SEED if seed is not None and seed.source == GROUND_TRUTH_SEED else DETECTOR_SEED
    base = seed.confidence if seed is not None else 1.0
    pts = seg.object_points()
    marg = seg.point_marginals()[seg.point_labels()]
    entries = []
    for f in episode.frames:
        mask, bbox = reproject_to_mask(pts, f, cfg.close_r, cfg.depth_tol)
        score = 0.0
        if mask.any():
            uv, _, ok = project_points(pts, f.intr, f.pose)
            u = np.minimum(np.floor(uv[ok, 0] + 0.5).astype(np.int64), f.intr.width - 1)
            v = np.minimum(np.floor(uv[ok, 1] + 0.5).astype(np.int64), f.intr.height - 1)
            inside = mask[v, u]
            score = base * float(marg[ok][inside].mean()) if inside.any() else base
        entries.append(ViewLabel(f.view_index, class_id, mask, bbox, prov, score))
    obj = seg.object_points(full_resolution=False)
    try:
        box = fit_box3d(obj, class_id)
    except DegenerateFootprintError:
        box = None
    return PseudoLabelSet(episode.episode_id, entries, box, class_id)


# ---------------------------------------------------------------------------
# COCO-style export


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed COCO RLE (column-major, counts start with zeros)."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [len(flat)]])
    counts = np.diff(bounds).tolist()
    if len(flat) and flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in rle["counts"]:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape((h, w), order="F")


def write_json_atomic(path, doc):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def image_key(episode_id: str, view_index: int) -> str:
    return f"{episode_id}/{view_index}"


def labels_to_coco(sets: list[PseudoLabelSet], category_names: dict | None = None) -> dict:
    images, anns = [], []
    cats = set()
    for s in sets:
        for e in s.entries:
            img_id = len(images) + 1
            h, w = e.mask.shape
            images.append({"id": img_id, "file_name": f"{s.episode_id}/rgb_{e.view_index:03d}.png",
                           "width": int(w), "height": int(h), "episode_id": s.episode_id,
                           "view_index": int(e.view_index)})
            cats.add(int(e.class_id))
            anns.append({"id": len(anns) + 1, "image_id": img_id, "category_id": int(e.class_id),
                         "bbox": [int(x) for x in e.bbox], "area": int(e.mask.sum()),
                         "segmentation": rle_encode(e.mask), "iscrowd": 0, "score": float(e.score),
                         "provenance": e.provenance, "empty": bool(e.empty)})
    names = category_names or {}
    categories = [{"id": c, "name": names.get(c, f"class_{c}")} for c in sorted(cats)]
    return {"images": images, "annotations": anns, "categories": categories}


def export_labels(sets: list[PseudoLabelSet], out_dir, category_names: dict | None = None) -> tuple[Path, Path]:
    """Write ``labels_2d.json`` (COCO-style) and ``labels_3d.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        p2 = out / "labels_2d.json"
        p3 = out / "labels_3d.json"
        write_json_atomic(p2, labels_to_coco(sets, category_names))
        boxes = [{"episode_id": s.episode_id, **s.box3d.to_dict()} for s in sets if s.box3d is not None]
        write_json_atomic(p3, boxes)
    except OSError as e:
        raise OSError(f"failed to write labels under {out}: {e}") from e
    return p2, p3


def import_labels(out_dir) -> list[PseudoLabelSet]:
    out = Path(out_dir)
    coco = json.loads((out / "labels_2d.json").read_text())
    p3 = out / "labels_3d.json"
    boxes = json.loads(p3.read_text()) if p3.exists() else []
    by_img = {im["id"]: im for im in coco["images"]}
    sets: dict[str, PseudoLabelSet] = {}
    for a in coco["annotations"]:
        im = by_img[a["image_id"]]
        ep = im["episode_id"]
        s = sets.setdefault(ep, PseudoLabelSet(ep, class_id=int(a["category_id"])))
        s.entries.append(ViewLabel(int(im["view_index"]), int(a["category_id"]), rle_decode(a["segmentation"]),
                                   tuple(a["bbox"]), a.get("provenance", DETECTOR_SEED), float(a.get("score", 1.0))))
    for b in boxes:
        s = sets.setdefault(b["episode_id"], PseudoLabelSet(b["episode_id"], class_id=int(b["class_id"])))
        s.box3d = Box3D.from_dict(b)
    return list(sets.values())
