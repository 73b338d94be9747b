"""Primitive scenes (boxes and spheres on a ground plane) and an analytic ray caster."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Intrinsics, Pose
from ..ingest import PosedFrame
from ..labelgen import Box3D

BOX, SPHERE = "box", "sphere"
_LIGHT = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])


class WorldConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: tuple          # metres; boxes rest on the ground with center z = h / 2
    dims: tuple            # box (w, d, h); sphere (r, r, r)
    yaw: float
    color: tuple
    class_id: int
    instance_id: int

    @property
    def radius(self) -> float:
        return self.dims[0]

    def footprint_radius(self) -> float:
        if self.shape == SPHERE:
            return self.dims[0]
        return 0.5 * math.hypot(self.dims[0], self.dims[1])

    def box3d(self) -> Box3D:
        c = np.asarray(self.center, dtype=float)
        if self.shape == SPHERE:
            r = self.dims[0]
            return Box3D(c, (2 * r, 2 * r, 2 * r), 0.0, self.class_id)
        yaw = (self.yaw + math.pi / 2) % math.pi - math.pi / 2
        return Box3D(c, tuple(self.dims), yaw if yaw > -math.pi / 2 else yaw + math.pi, self.class_id)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "center": list(self.center), "dims": list(self.dims), "yaw": self.yaw,
                "color": list(self.color), "class_id": self.class_id, "instance_id": self.instance_id}


@dataclass(frozen=True)
class SynthWorld:
    primitives: tuple
    bounds: tuple                       # ((xmin, xmax), (ymin, ymax))
    categories: dict = field(default_factory=dict)   # id -> name
    ground_color: tuple = (0.55, 0.5, 0.45)
    rng_seed: int | None = None

    def __post_init__(self):
        (x0, x1), (y0, y1) = self.bounds
        if not (x0 < x1 and y0 < y1):
            raise WorldConfigError(f"empty bounds {self.bounds}")
        ids = [p.instance_id for p in self.primitives]
        if len(set(ids)) != len(ids):
            raise WorldConfigError("duplicate instance ids")
        for p in self.primitives:
            if p.shape not in (BOX, SPHERE):
                raise WorldConfigError(f"unknown shape {p.shape!r}")
            if min(p.dims) <= 0:
                raise WorldConfigError(f"instance {p.instance_id}: dims must be positive")
            r = p.footprint_radius()
            if not (x0 <= p.center[0] - r and p.center[0] + r <= x1
                    and y0 <= p.center[1] - r and p.center[1] + r <= y1):
                raise WorldConfigError(f"instance {p.instance_id} extends outside the world bounds")
            if self.categories and p.class_id not in self.categories:
                raise WorldConfigError(f"instance {p.instance_id}: class {p.class_id} not in category table")

    def primitive(self, instance_id: int) -> Primitive:
        for p in self.primitives:
            if p.instance_id == instance_id:
                return p
        raise KeyError(instance_id)

    def collides(self, xy, margin: float = 0.0) -> bool:
        """True if a disc of radius ``margin`` at ``xy`` hits an object or leaves the bounds."""
        x, y = float(xy[0]), float(xy[1])
        (x0, x1), (y0, y1) = self.bounds
        if not (x0 + margin <= x <= x1 - margin and y0 + margin <= y <= y1 - margin):
            return True
        for p in self.primitives:
            dx, dy = x - p.center[0], y - p.center[1]
            if p.shape == SPHERE:
                if math.hypot(dx, dy) < p.radius + margin:
                    return True
                continue
            c, s = math.cos(p.yaw), math.sin(p.yaw)
            lx, ly = c * dx + s * dy, -s * dx + c * dy
            qx = max(abs(lx) - p.dims[0] / 2, 0.0)
            qy = max(abs(ly) - p.dims[1] / 2, 0.0)
            if math.hypot(qx, qy) < margin or (qx == 0 and qy == 0):
                return True
        return False

    def to_dict(self) -> dict:
        return {"bounds": [list(b) for b in self.bounds],
                "categories": [{"id": k, "name": v} for k, v in sorted(self.categories.items())],
                "primitives": [p.to_dict() for p in self.primitives],
                "ground_color": list(self.ground_color)}


def _primitive_from_dict(d: dict, idx: int) -> Primitive:
    shape = d.get("shape", BOX)
    dims = tuple(float(x) for x in d["dims"])
    if shape == SPHERE and len(dims) == 1:
        dims = dims * 3
    center = [float(x) for x in d["center"]]
    if len(center) == 2:
        center.append(dims[0] if shape == SPHERE else dims[2] / 2)
    return Primitive(shape, tuple(center), dims, float(d.get("yaw", 0.0)),
                     tuple(float(c) for c in d.get("color", (0.5, 0.5, 0.5))),
                     int(d["class_id"]), int(d.get("instance_id", idx)))


def world_from_config(cfg: dict, seed: int | None = None) -> SynthWorld:
    """Build a world from ``{bounds, categories[], primitives[], random_objects}``.

    ``random_objects`` ({count, seed, min_separation, margin}) places objects
    of distinct categories at random non-overlapping positions; ``seed``
    overrides its seed.
    """
    allowed = {"bounds", "categories", "primitives", "random_objects", "ground_color"}
    extra = set(cfg) - allowed
    if extra:
        raise WorldConfigError(f"unknown world config keys {sorted(extra)}")
    try:
        bounds = tuple(tuple(float(v) for v in b) for b in cfg["bounds"])
        cats = {int(c["id"]): c for c in cfg.get("categories", [])}
        prims = [_primitive_from_dict(d, i) for i, d in enumerate(cfg.get("primitives", []))]
    except (KeyError, TypeError, ValueError) as e:
        raise WorldConfigError(f"malformed world config: {e}") from e
    ro = cfg.get("random_objects")
    if ro:
        rng = np.random.default_rng(seed if seed is not None else ro.get("seed", 0))
        prims += _random_objects(rng, cats, bounds, int(ro["count"]), float(ro.get("min_separation", 0.5)),
                                 float(ro.get("margin", 0.5)), first_id=len(prims), existing=prims)
    return SynthWorld(tuple(prims), bounds, {k: c.get("name", str(k)) for k, c in cats.items()},
                      tuple(cfg.get("ground_color", (0.55, 0.5, 0.45))), seed)


def _random_objects(rng, cats, bounds, count, min_sep, margin, first_id=0, existing=()):
    if not cats:
        raise WorldConfigError("random_objects needs a category table")
    ids = sorted(cats)
    order = list(rng.permutation(ids))
    while len(order) < count:
        order += list(rng.permutation(ids))
    placed = list(existing)
    (x0, x1), (y0, y1) = bounds
    for k in range(count):
        c = cats[int(order[k])]
        lo, hi = np.asarray(c["dims_min"], float), np.asarray(c["dims_max"], float)
        for _ in range(1000):
            dims = lo + (hi - lo) * rng.random(3)
            shape = c.get("shape", BOX)
            if shape == SPHERE:
                dims = np.full(3, dims[0])
            yaw = float(rng.uniform(-math.pi, math.pi)) if shape == BOX else 0.0
            rad = dims[0] if shape == SPHERE else 0.5 * math.hypot(dims[0], dims[1])
            x = rng.uniform(x0 + margin + rad, x1 - margin - rad)
            y = rng.uniform(y0 + margin + rad, y1 - margin - rad)
            if all(math.hypot(x - p.center[0], y - p.center[1]) >= rad + p.footprint_radius() + min_sep
                   for p in placed):
                z = dims[0] if shape == SPHERE else dims[2] / 2
                placed.append(Primitive(shape, (float(x), float(y), float(z)), tuple(float(v) for v in dims),
                                        yaw, tuple(c["color"]), int(c["id"]), first_id + k))
                break
        else:
            raise WorldConfigError("could not place all random objects; world too crowded")
    return placed[len(existing):]


def load_world(path, seed: int | None = None) -> SynthWorld:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise WorldConfigError(f"cannot read world config {path}: {e}") from e
    return world_from_config(cfg, seed)


def default_world_config() -> dict:
    from importlib.resources import files
    return json.loads(files("mvlabel.data").joinpath("world_indoor.json").read_text())


# ---------------------------------------------------------------------------
# rendering


@dataclass
class Render:
    frame: PosedFrame
    instance_ids: np.ndarray       # (H, W) int32, -1 for ground or sky
    visible_pixels: dict           # instance -> pixels visible in frame
    full_pixels: dict              # instance -> pixels the object would cover alone on an enlarged canvas

    def visible_fraction(self, instance_id: int) -> float:
        full = self.full_pixels.get(instance_id, 0)
        return self.visible_pixels.get(instance_id, 0) / full if full else 0.0

    def instance_mask(self, instance_id: int) -> np.ndarray:
        return self.instance_ids == instance_id


def _ray_box(o, d, p: Primitive):
    """Entry distance and outward normal for rays ``o + t d`` against an oriented box."""
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    Rt = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    lo = Rt @ (o - np.asarray(p.center))
    ld = d @ Rt.T
    tn = np.full(d.shape[:-1], -np.inf)
    tf = np.full(d.shape[:-1], np.inf)
    axis = np.zeros(d.shape[:-1], dtype=np.int64)
    for k in range(3):
        h = p.dims[k] / 2
        dk = ld[..., k]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - lo[k]) / dk
            t2 = (h - lo[k]) / dk
        # a ray parallel to this slab is either always or never inside it
        par = dk == 0
        inside = abs(lo[k]) <= h
        a = np.where(par, -np.inf if inside else np.inf, np.minimum(t1, t2))
        b = np.where(par, np.inf if inside else -np.inf, np.maximum(t1, t2))
        upd = a > tn
        axis[upd] = k
        tn = np.where(upd, a, tn)
        tf = np.minimum(tf, b)
    hit = (tn <= tf) & (tn > 0)
    t = np.where(hit, tn, np.inf)
    dsel = np.take_along_axis(ld, axis[..., None], axis=-1)[..., 0]
    local_n = np.zeros(d.shape)
    np.put_along_axis(local_n, axis[..., None], -np.sign(dsel)[..., None], axis=-1)
    return t, local_n @ Rt


def _ray_sphere(o, d, p: Primitive):
    oc = o - np.asarray(p.center)
    a = np.einsum("...i,...i->...", d, d)
    b = 2.0 * d @ oc
    cc = oc @ oc - p.radius ** 2
    disc = b * b - 4 * a * cc
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    t = np.where((disc >= 0) & (t > 0), t, np.inf)
    hitp = o + d * np.where(np.isfinite(t), t, 0.0)[..., None]
    return t, (hitp - np.asarray(p.center)) / p.radius


def _screen_window(p: Primitive, pose: Pose, fx, fy, cx, cy, W, H):
    """Conservative pixel window (rows, cols slices) covering a primitive's bounding sphere."""
    r = p.radius if p.shape == SPHERE else 0.5 * math.sqrt(sum(x * x for x in p.dims))
    c = pose.apply(np.asarray(p.center))
    if c[2] + r <= 0:
        return None
    if c[2] - r <= 1e-3:
        return slice(0, H), slice(0, W)
    zs = (c[2] - r, c[2] + r)
    xs = [(c[0] + sx * r) / z for sx in (-1, 1) for z in zs]
    ys = [(c[1] + sy * r) / z for sy in (-1, 1) for z in zs]
    u0 = max(int(math.floor(fx * min(xs) + cx)) - 1, 0)
    u1 = min(int(math.ceil(fx * max(xs) + cx)) + 2, W)
    v0 = max(int(math.floor(fy * min(ys) + cy)) - 1, 0)
    v1 = min(int(math.ceil(fy * max(ys) + cy)) + 2, H)
    if u0 >= u1 or v0 >= v1:
        return None
    return slice(v0, v1), slice(u0, u1)


def render_frame(world: SynthWorld, pose: Pose, intr: Intrinsics, view_index: int = 0,
                 timestamp: float = 0.0, max_depth: float = 12.0, pad: float = 0.5,
                 record_pose: Pose | None = None) -> Render:
    """Ray-cast ``world`` from the camera at ``pose`` (world-to-camera).

    Depth is the exact z-distance, zero where nothing is hit within
    ``max_depth``. ``pad`` enlarges the canvas by that fraction of the image
    size on each side to measure unoccluded, untruncated object areas.
    ``record_pose`` is the pose written into the frame (default ``pose``).
    """
    pw, ph = int(round(pad * intr.width)), int(round(pad * intr.height))
    W, H = intr.width + 2 * pw, intr.height + 2 * ph
    cxp, cyp = intr.cx + pw, intr.cy + ph
    uu, vv = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    dc = np.stack([(uu - cxp) / intr.fx, (vv - cyp) / intr.fy, np.ones_like(uu)], axis=-1)
    d = dc @ pose.rotation  # world directions with unit camera-z component
    o = pose.center

    best_t = np.full((H, W), np.inf)
    best_id = np.full((H, W), -1, dtype=np.int32)
    normal = np.zeros((H, W, 3))
    color = np.zeros((H, W, 3))
    if o[2] > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -o[2] / d[..., 2]
        best_t = np.where((d[..., 2] < 0) & (tg > 0), tg, np.inf)
        normal[...] = (0.0, 0.0, 1.0)
        color[...] = world.ground_color
    full = {}
    for p in world.primitives:
        win = _screen_window(p, pose, intr.fx, intr.fy, cxp, cyp, W, H)
        if win is None:
            full[p.instance_id] = 0
            continue
        t, n = (_ray_sphere if p.shape == SPHERE else _ray_box)(o, d[win], p)
        full[p.instance_id] = int(np.count_nonzero(np.isfinite(t)))
        bt = best_t[win]
        closer = t < bt
        bt[closer] = t[closer]
        best_id[win][closer] = p.instance_id
        normal[win][closer] = n[closer]
        color[win][closer] = p.color
    shade = 0.85 + 0.15 * np.clip(normal @ _LIGHT, 0.0, 1.0)
    rgb = np.clip(color * shade[..., None], 0, 1)

    sl = (slice(ph, ph + intr.height), slice(pw, pw + intr.width))
    depth = best_t[sl]
    hit = np.isfinite(depth) & (depth <= max_depth)
    depth = np.where(hit, depth, 0.0)
    ids = np.where(hit, best_id[sl], -1).astype(np.int32)
    rgb8 = np.where(hit[..., None], np.round(rgb[sl] * 255), 0).astype(np.uint8)
    vis_ids, counts = np.unique(ids[ids >= 0], return_counts=True)
    visible = {int(i): int(c) for i, c in zip(vis_ids, counts)}
    frame = PosedFrame(rgb8, depth, intr, record_pose if record_pose is not None else pose, view_index, timestamp)
    return Render(frame, ids, visible, full)


def camera_pose(position, heading: float, height: float, pitch: float = 0.0) -> Pose:
    """World-to-camera pose for a camera at ``(x, y, height)`` facing ``heading`` tilted by ``pitch``."""
    eye = np.array([position[0], position[1], height], dtype=float)
    fwd = np.array([math.cos(heading) * math.cos(pitch), math.sin(heading) * math.cos(pitch), math.sin(pitch)])
    return Pose.look_at(eye, eye + fwd)


DEFAULT_INTRINSICS = Intrinsics(120.0, 120.0, 79.5, 59.5, 160, 120)
