"""Actuation noise and cycle-consistency filtering of egomotion between views."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (DegenerateConfigurationError, Pose, estimate_rigid_transform, rotation_angle,
                       valid_depth_mask)

ACTIONS = ("move_forward", "turn_left", "turn_right")


class UnknownActionError(KeyError):
    pass


@dataclass(frozen=True)
class NoiseComponent:
    weight: float
    mean: tuple
    std: tuple

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"negative mixture weight {self.weight}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std must be 3-vectors (dx, dy, dtheta)")
        if min(self.std) < 0:
            raise ValueError(f"negative std {self.std}")


@dataclass(frozen=True)
class ActionNoiseModel:
    """Gaussian mixture over ``(dx, dy, dtheta)`` per action (metres, radians)."""

    actions: dict

    def __post_init__(self):
        for name, comps in self.actions.items():
            if not comps:
                raise ValueError(f"action {name!r} has no components")
            total = sum(c.weight for c in comps)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"weights for {name!r} sum to {total}, not 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ActionNoiseModel":
        """Parse ``{action: [{weight, mean[3], std[3]}]}``; angles in degrees."""
        acts = {}
        for name, comps in d.items():
            acts[name] = tuple(
                NoiseComponent(float(c["weight"]),
                               (float(c["mean"][0]), float(c["mean"][1]), math.radians(c["mean"][2])),
                               (float(c["std"][0]), float(c["std"][1]), math.radians(c["std"][2])))
                for c in comps)
        return cls(acts)

    def to_dict(self) -> dict:
        return {name: [{"weight": c.weight,
                        "mean": [c.mean[0], c.mean[1], math.degrees(c.mean[2])],
                        "std": [c.std[0], c.std[1], math.degrees(c.std[2])]} for c in comps]
                for name, comps in self.actions.items()}

    def mean(self, action: str) -> np.ndarray:
        """Expected perturbation of ``action`` (mixture mean)."""
        if action not in self.actions:
            raise UnknownActionError(f"action {action!r} not in noise model ({sorted(self.actions)})")
        comps = self.actions[action]
        w = np.array([c.weight for c in comps])
        return (w[:, None] * np.array([c.mean for c in comps])).sum(axis=0) / w.sum()

    @classmethod
    def load(cls, path) -> "ActionNoiseModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls) -> "ActionNoiseModel":
        """Synthetic placeholder parameters, one component per action."""
        from importlib.resources import files
        return cls.load(files("mvlabel.data").joinpath("noise_default.json"))


def sample_actuation_noise(model: ActionNoiseModel, action: str, rng_seed=None) -> np.ndarray:
    """Draw one ``(dx, dy, dtheta)`` perturbation for ``action``.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    try:
        comps = model.actions[action]
    except KeyError:
        raise UnknownActionError(f"action {action!r} not in noise model ({sorted(model.actions)})") from None
    rng = np.random.default_rng(rng_seed)
    w = np.array([c.weight for c in comps])
    k = rng.choice(len(comps), p=w / w.sum()) if len(comps) > 1 else 0
    c = comps[k]
    return np.asarray(c.mean) + np.asarray(c.std) * rng.standard_normal(3)


# ---------------------------------------------------------------------------
# flow and correspondences


@dataclass
class FlowField:
    flow: np.ndarray   # (H, W, 2) pixel displacement
    valid: np.ndarray  # (H, W) bool


def _camera_points(frame, mask=None):
    """Camera-frame points of the valid pixels of ``frame`` plus their pixel coordinates."""
    depth = np.asarray(frame.depth, dtype=np.float64)
    ok = valid_depth_mask(depth)
    if mask is not None:
        ok &= mask
    v, u = np.nonzero(ok)
    z = depth[v, u]
    intr = frame.intr
    pts = np.stack([z * (u - intr.cx) / intr.fx, z * (v - intr.cy) / intr.fy, z], axis=1)
    return pts, u, v


def _project_cam(pts, intr):
    z = pts[:, 2]
    front = z > 0
    uv = np.full((len(pts), 2), np.nan)
    uv[front, 0] = intr.fx * pts[front, 0] / z[front] + intr.cx
    uv[front, 1] = intr.fy * pts[front, 1] / z[front] + intr.cy
    with np.errstate(invalid="ignore"):
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < intr.width) & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)
    return uv, inside


def flow_from_depth(src, dst, ego_estimate: Pose) -> FlowField:
    """Optical flow induced by warping the src depth map with ``ego_estimate``.

    ``ego_estimate`` maps src camera coordinates to dst camera coordinates.
    """
    pts, u, v = _camera_points(src)
    uv, inside = _project_cam(ego_estimate.apply(pts), dst.intr)
    h, w = src.depth.shape
    flow = np.zeros((h, w, 2))
    valid = np.zeros((h, w), dtype=bool)
    flow[v[inside], u[inside], 0] = uv[inside, 0] - u[inside]
    flow[v[inside], u[inside], 1] = uv[inside, 1] - v[inside]
    valid[v[inside], u[inside]] = True
    return FlowField(flow, valid)


def correspondences(src, dst, ego_estimate: Pose, depth_jump: float = 0.5, sampling: str = "bilinear",
                    planar_tol: float = 1e-6):
    """3D matches between two frames via flow from ``ego_estimate``.

    With ``sampling="bilinear"`` each warped src point samples the dst inverse
    depth at its sub-pixel position, which is exact on planar surfaces; cells
    whose four corners are invalid or not coplanar in inverse depth (relative
    ``planar_tol``) are skipped. ``sampling="nearest"`` reads the rounded
    pixel instead. Matches whose dst depth differs from the warped depth by
    more than ``depth_jump`` are dropped.
    Returns ``(X_src, X_dst)`` in the respective camera frames.
    """
    pts, u, v = _camera_points(src)
    warped = ego_estimate.apply(pts)
    intr = dst.intr
    uv, inside = _project_cam(warped, intr)
    if sampling == "nearest":
        pts, warped, uv = pts[inside], warped[inside], uv[inside]
        iu = np.clip(np.floor(uv[:, 0] + 0.5).astype(np.int64), 0, intr.width - 1)
        iv = np.clip(np.floor(uv[:, 1] + 0.5).astype(np.int64), 0, intr.height - 1)
        dd = np.asarray(dst.depth, dtype=np.float64)[iv, iu]
        ok = valid_depth_mask(dd) & (np.abs(dd - warped[:, 2]) <= depth_jump)
        iu, iv, dd = iu[ok], iv[ok], dd[ok]
        y = np.stack([dd * (iu - intr.cx) / intr.fx, dd * (iv - intr.cy) / intr.fy, dd], axis=1)
        return pts[ok], y
    if sampling != "bilinear":
        raise ValueError(f"unknown sampling {sampling!r}")
    inside &= (uv[:, 0] <= intr.width - 1) & (uv[:, 1] <= intr.height - 1)
    pts, warped, uv = pts[inside], warped[inside], uv[inside]
    u0 = np.minimum(np.floor(uv[:, 0]).astype(np.int64), intr.width - 2)
    v0 = np.minimum(np.floor(uv[:, 1]).astype(np.int64), intr.height - 2)
    a, b = uv[:, 0] - u0, uv[:, 1] - v0
    depth = np.asarray(dst.depth, dtype=np.float64)
    ok = valid_depth_mask(depth)
    inv = np.where(ok, 1.0 / np.where(ok, depth, 1.0), 0.0)
    c00, c01 = inv[v0, u0], inv[v0, u0 + 1]
    c10, c11 = inv[v0 + 1, u0], inv[v0 + 1, u0 + 1]
    good = ok[v0, u0] & ok[v0, u0 + 1] & ok[v0 + 1, u0] & ok[v0 + 1, u0 + 1]
    scale = np.maximum.reduce([c00, c01, c10, c11])
    good &= np.abs(c00 + c11 - c01 - c10) <= planar_tol * scale
    inv_d = (1 - a) * (1 - b) * c00 + a * (1 - b) * c01 + (1 - a) * b * c10 + a * b * c11
    with np.errstate(divide="ignore"):
        dd = np.where(good, 1.0 / np.where(good, inv_d, 1.0), np.nan)
    good &= np.abs(dd - warped[:, 2]) <= depth_jump
    dd, uv = dd[good], uv[good]
    y = np.stack([dd * (uv[:, 0] - intr.cx) / intr.fx, dd * (uv[:, 1] - intr.cy) / intr.fy, dd], axis=1)
    return pts[good], y


# ---------------------------------------------------------------------------
# cycle consistency


@dataclass
class PairResult:
    src_view: int
    dst_view: int
    error: float
    ok: bool
    reason: str = ""
    rt_fw: Pose | None = None
    rt_bw: Pose | None = None

    def to_dict(self) -> dict:
        return {"src_view": self.src_view, "dst_view": self.dst_view,
                "error": None if math.isinf(self.error) else self.error,
                "ok": self.ok, "reason": self.reason}


@dataclass
class CycleResult:
    retained: list
    pairs: list
    view_errors: dict = field(default_factory=dict)
    poses: dict = field(default_factory=dict)   # re-estimated poses, when produced

    def to_dict(self) -> dict:
        d = {"retained": list(self.retained), "pairs": [p.to_dict() for p in self.pairs],
             "view_errors": {str(k): (None if math.isinf(e) else e) for k, e in self.view_errors.items()}}
        if self.poses:
            d["poses"] = {str(k): p.to_list() for k, p in self.poses.items()}
        return d


def egomotion_from_poses(episode):
    """Consecutive-pair egomotion ``G_{k+1} G_k^-1`` and its inverse from reported poses."""
    fw, bw = [], []
    for a, b in zip(episode.frames[:-1], episode.frames[1:]):
        e = b.pose @ a.pose.inverse()
        fw.append(e)
        bw.append(e.inverse())
    return fw, bw


def _triplet_fits(x, y, idx):
    """Batched Kabsch fits on index triplets ``idx`` (h, 3); returns (h, 3, 3) rotations and (h, 3) shifts."""
    a, b = x[idx], y[idx]
    ma, mb = a.mean(axis=1), b.mean(axis=1)
    H = np.einsum("hki,hkj->hij", a - ma[:, None], b - mb[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.transpose(Vt, (0, 2, 1)) @ np.transpose(U, (0, 2, 1))))
    D = np.zeros((len(idx), 3, 3))
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = np.where(d == 0, 1.0, d)
    R = np.transpose(Vt, (0, 2, 1)) @ D @ np.transpose(U, (0, 2, 1))
    return R, mb - np.einsum("hij,hj->hi", R, ma)


def _guided_triplets(x, y, n: int, tols, rng) -> np.ndarray:
    """``n`` index triplets whose partners keep their distance to a random anchor.

    Rigid motion preserves distances, so for an inlier anchor the partners
    drawn from its distance-consistent set are likely inliers too. The
    tightest tolerance in ``tols`` leaving two partners is used, else uniform.
    """
    idx = rng.integers(0, len(x), size=(n, 3))
    for h in range(n):
        i = idx[h, 0]
        gap = np.abs(np.linalg.norm(x - x[i], axis=1) - np.linalg.norm(y - y[i], axis=1))
        gap[i] = np.inf
        for tol in tols:
            cand = np.flatnonzero(gap <= tol)
            if len(cand) >= 2:
                idx[h, 1:] = rng.choice(cand, size=2, replace=False)
                break
    return idx


def robust_rigid_fit(x, y, inlier_tol: float = 0.05, rel_tol: float = 20.0, rounds: int = 5,
                     hypotheses: int = 200, exact_tol: float = 1e-4, min_exact: int = 30,
                     score_points: int = 600, rng_seed: int = 0) -> Pose:
    """Rigid fit ``y ≈ RT x`` that tolerates a majority of occlusion mismatches.

    Seeded three-point hypotheses (partners chosen by distance consistency) and the plain fit are scored on a subsample
    of matches. A hypothesis agreeing to ``exact_tol`` with at least
    ``min_exact`` matches beats any looser consensus, since occlusion
    mismatches can agree loosely with a wrong motion but never exactly.
    Otherwise the largest consensus within ``inlier_tol`` wins. Then, for up
    to ``rounds``, the fit is redone on its inliers and the gate tightened to
    ``min(inlier_tol, rel_tol * median inlier residual)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rt, _ = estimate_rigid_transform(x, y)
    r = np.linalg.norm(rt.apply(x) - y, axis=1)
    inl = r <= inlier_tol
    if not (r <= exact_tol).all():
        rng = np.random.default_rng(rng_seed)
        idx = _guided_triplets(x, y, hypotheses, (exact_tol, inlier_tol), rng)
        R, t = _triplet_fits(x, y, idx)
        R = np.concatenate([rt.rotation[None], R])
        t = np.concatenate([rt.translation[None], t])
        sub = rng.choice(len(x), size=min(score_points, len(x)), replace=False)
        xs, ys = x[sub], y[sub]
        res = np.linalg.norm(np.einsum("hij,nj->hni", R, xs) + t[:, None] - ys, axis=2)
        exact = np.count_nonzero(res <= exact_tol, axis=1)
        loose = np.count_nonzero(res <= inlier_tol, axis=1)
        need = min_exact * len(sub) / len(x)
        score = np.where(exact >= need, exact + len(sub) + 1, loose) if exact.max() >= need else loose
        best = int(np.argmax(score))
        inl = np.linalg.norm(x @ R[best].T + t[best] - y, axis=1) <= inlier_tol
        if exact[best] >= need:
            inl &= np.linalg.norm(x @ R[best].T + t[best] - y, axis=1) <= exact_tol
    for _ in range(rounds):
        if inl.sum() < 3:
            break
        try:
            rt, _ = estimate_rigid_transform(x[inl], y[inl])
        except DegenerateConfigurationError:
            break
        r = np.linalg.norm(rt.apply(x) - y, axis=1)
        new = r <= min(inlier_tol, rel_tol * float(np.median(r[inl])))
        if np.array_equal(new, inl):
            break
        inl = new
    return rt


def _normal_map(frame, depth_jump: float, planar_tol: float = 1e-3):
    """Camera-frame points and unit normals per pixel from central differences (nan where undefined).

    Normals are kept only where the 3x3 cross neighbourhood is planar: inverse
    depth is affine in pixel coordinates on a plane, so both of its second
    differences must vanish up to ``planar_tol`` relative.
    """
    depth = np.asarray(frame.depth, dtype=np.float64)
    intr = frame.intr
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w]
    ok = valid_depth_mask(depth)
    z = np.where(ok, depth, np.nan)
    P = np.stack([z * (u - intr.cx) / intr.fx, z * (v - intr.cy) / intr.fy, z], axis=-1)
    N = np.full_like(P, np.nan)
    du = P[1:-1, 2:] - P[1:-1, :-2]
    dv = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
        c = 1.0 / z
        cc = c[1:-1, 1:-1]
        flat = ((np.abs(c[1:-1, 2:] + c[1:-1, :-2] - 2 * cc) <= planar_tol * cc)
                & (np.abs(c[2:, 1:-1] + c[:-2, 1:-1] - 2 * cc) <= planar_tol * cc))
        smooth = flat & (np.abs(z[1:-1, 2:] - z[1:-1, :-2]) <= depth_jump) \
            & (np.abs(z[2:, 1:-1] - z[:-2, 1:-1]) <= depth_jump)
    N[1:-1, 1:-1] = np.where(smooth[..., None], n, np.nan)
    return P, N


def _rodrigues(w) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    if theta == 0:
        return np.eye(3)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * K @ K


def _registration_cloud(frame, stride: int, max_range: float):
    """Subsampled camera points with a defined normal, and those normals."""
    P, N = _normal_map(frame, 0.5)
    sub = (slice(None, None, stride), slice(None, None, stride))
    p, n = P[sub].reshape(-1, 3), N[sub].reshape(-1, 3)
    keep = np.isfinite(n[:, 0]) & (p[:, 2] <= max_range)
    return p[keep], n[keep]


@dataclass
class Registration:
    pose: Pose
    matches: int          # point-to-plane matches in the final round
    conditioning: float   # smallest eigenvalue of the mean normal scatter of those matches


def register_frames(src, dst, init: Pose, iters: int = 30, start_tol: float = 0.5, end_tol: float = 0.02,
                    stride: int = 2, max_range: float = 8.0, rank_tol: float = 1e-6,
                    normal_cos: float = 0.9) -> Registration:
    """Register ``src`` onto ``dst`` by point-to-plane projective ICP from ``init``.

    Each round warps the src cloud with the current estimate, pairs every
    point with the dst pixel it lands on, and solves the linearised
    point-to-plane least squares for a motion update. Directions whose
    eigenvalue falls below ``rank_tol`` of the largest are not updated, so
    motion the geometry cannot observe stays at ``init``. The match gate shrinks
    geometrically from ``start_tol`` to ``end_tol`` metres, and matched
    normals must agree to ``normal_cos``. Src pixels are subsampled by
    ``stride``, limited to ``max_range`` metres and restricted to planar
    neighbourhoods. Stops early,
    keeping the last estimate, when fewer than six matches remain.
    """
    est = init
    cloud, cloud_n = _registration_cloud(src, stride, max_range)
    P, N = _normal_map(dst, start_tol)
    intr = dst.intr
    shrink = (end_tol / start_tol) ** (1.0 / max(iters // 2, 1))
    gate = start_tol
    matches, cond = 0, 0.0
    for _ in range(iters):
        p = est.apply(cloud)
        uv, inside = _project_cam(p, intr)
        p, pn = p[inside], cloud_n[inside] @ est.rotation.T
        iu = np.clip(np.floor(uv[inside, 0] + 0.5).astype(np.int64), 0, intr.width - 1)
        iv = np.clip(np.floor(uv[inside, 1] + 0.5).astype(np.int64), 0, intr.height - 1)
        q, n = P[iv, iu], N[iv, iu]
        r = np.einsum("ij,ij->i", q - p, n)
        with np.errstate(invalid="ignore"):
            ok = (np.isfinite(r) & (np.linalg.norm(q - p, axis=1) <= gate)
                  & (np.abs(np.einsum("ij,ij->i", pn, n)) >= normal_cos))
        matches = int(ok.sum())
        if matches < 6:
            matches, cond = 0, 0.0
            break
        p, n, r = p[ok], n[ok], r[ok]
        cond = float(np.linalg.eigvalsh(n.T @ n / len(n))[0])
        A = np.concatenate([np.cross(p, n), n], axis=1)
        lam, V = np.linalg.eigh(A.T @ A)
        V = V[:, lam > rank_tol * lam[-1]]
        x = V @ ((V.T @ (A.T @ r)) / lam[lam > rank_tol * lam[-1]])
        est = Pose(_rodrigues(x[:3]), x[3:], check=False) @ est
        gate = max(gate * shrink, end_tol)
    return Registration(est, matches, cond)


def estimate_egomotion(src, dst, init: Pose, **kw) -> Pose:
    """Pose part of :func:`register_frames`."""
    return register_frames(src, dst, init, **kw).pose


def registration_check(src, dst, est: Pose, tol: float = 0.05, max_range: float = 8.0):
    """Free-space violations and support of a registration ``src -> dst``.

    Warped src points are compared with the dst surface at the pixel they
    land on, measured along its normal. A point more than ``tol`` metres on
    the camera side of that surface violates free space; a point within
    ``tol`` supports the registration. Returns
    ``(violation_fraction, n_supported, supported_fraction)`` over points
    landing on pixels with a defined normal.
    """
    P, N = _normal_map(dst, 0.5)
    p = _camera_points(src)[0]
    p = est.apply(p[p[:, 2] <= max_range])
    uv, inside = _project_cam(p, dst.intr)
    p = p[inside]
    iu = np.clip(np.floor(uv[inside, 0] + 0.5).astype(np.int64), 0, dst.intr.width - 1)
    iv = np.clip(np.floor(uv[inside, 1] + 0.5).astype(np.int64), 0, dst.intr.height - 1)
    q, n = P[iv, iu], N[iv, iu]
    # orient normals toward the dst camera
    n = np.where(np.einsum("ij,ij->i", n, q)[:, None] > 0, -n, n)
    s = np.einsum("ij,ij->i", p - q, n)
    ok = np.isfinite(s)
    s = s[ok]
    if len(s) == 0:
        return 1.0, 0, 0.0
    sup = int(np.count_nonzero(np.abs(s) <= tol))
    return float(np.mean(s > tol)), sup, sup / len(s)


def estimate_episode_egomotion(episode, iters: int = 30):
    """Independent forward and backward registrations of consecutive frames, seeded by the reported poses."""
    fw0, bw0 = egomotion_from_poses(episode)
    fw, bw = [], []
    for k, (a, b) in enumerate(zip(episode.frames[:-1], episode.frames[1:])):
        fw.append(estimate_egomotion(a, b, fw0[k], iters))
        bw.append(estimate_egomotion(b, a, bw0[k], iters))
    return fw, bw


def pair_cycle_error(src, dst, ego_fw: Pose, ego_bw: Pose, depth_jump: float = 0.5,
                     sampling: str = "bilinear", inlier_tol: float = 0.05) -> PairResult:
    """Cycle error of one frame pair: mean ``|RT_bw RT_fw X - X|`` over the src cloud."""
    res = PairResult(src.view_index, dst.view_index, math.inf, False)
    xs, ys = correspondences(src, dst, ego_fw, depth_jump, sampling)
    yb, xb = correspondences(dst, src, ego_bw, depth_jump, sampling)
    try:
        rt_fw = robust_rigid_fit(xs, ys, inlier_tol)
        rt_bw = robust_rigid_fit(yb, xb, inlier_tol)
    except DegenerateConfigurationError as exc:
        res.reason = f"too few correspondences: {exc}"
        return res
    cloud, _, _ = _camera_points(src)
    back = rt_bw.apply(rt_fw.apply(cloud))
    res.error = float(np.mean(np.linalg.norm(back - cloud, axis=1)))
    res.rt_fw, res.rt_bw = rt_fw, rt_bw
    return res


def filter_views_cycle_consistency(episode, ego_fw=None, ego_bw=None, threshold: float = 0.1,
                                   min_views: int = 10, max_views: int = 25,
                                   depth_jump: float = 0.5, keep=None, sampling: str = "bilinear",
                                   inlier_tol: float = 0.05) -> CycleResult:
    """Reject views whose egomotion fails the forward-backward cycle check.

    ``ego_fw[k]`` maps camera ``k`` to camera ``k+1`` (frame order of the
    episode) and ``ego_bw[k]`` the reverse; both default to values derived
    from the reported poses. A view survives if any incident pair passes;
    the survivors are then padded or trimmed to ``[min_views, max_views]`` by
    ascending view error (the smallest error of its incident pairs). ``keep``
    names a view that is always retained.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if min_views > max_views:
        raise ValueError("min_views must not exceed max_views")
    frames = episode.frames
    n = len(frames)
    if ego_fw is None or ego_bw is None:
        dfw, dbw = egomotion_from_poses(episode)
        ego_fw = dfw if ego_fw is None else ego_fw
        ego_bw = dbw if ego_bw is None else ego_bw
    if len(ego_fw) != n - 1 or len(ego_bw) != n - 1:
        raise ValueError(f"expected {n - 1} egomotion estimates per direction")
    pairs = []
    for k in range(n - 1):
        r = pair_cycle_error(frames[k], frames[k + 1], ego_fw[k], ego_bw[k], depth_jump, sampling, inlier_tol)
        r.ok = r.error <= threshold
        if not r.ok and not r.reason:
            r.reason = f"cycle error {r.error:.4f} m exceeds {threshold} m"
        pairs.append(r)

    views = [f.view_index for f in frames]
    errors = {v: math.inf for v in views}
    good = set()
    for r in pairs:
        for v in (r.src_view, r.dst_view):
            errors[v] = min(errors[v], r.error)
            if r.ok:
                good.add(v)
    if n == 1:
        good = set(views)
        errors[views[0]] = 0.0
    order = sorted(views, key=lambda v: (errors[v], views.index(v)))
    retained = [v for v in order if v in good]
    lo = min(min_views, n)
    if len(retained) < lo:
        retained += [v for v in order if v not in good][: lo - len(retained)]
    retained = retained[:max_views]
    if keep is not None and keep not in retained:
        if len(retained) >= max_views:
            retained = retained[:-1]
        retained.append(keep)
    retained = sorted(retained, key=views.index)
    return CycleResult(retained, pairs, errors)


def refine_poses(episode, result: CycleResult, anchor=None):
    """Replace relative motion of passing pairs with their re-estimated ``RT_fw``.

    Poses are chained outward from ``anchor`` (default: the episode's
    reference view), whose pose is left unchanged. Failing pairs keep the
    reported relative motion. Returns ``{view_index: Pose}``.
    """
    views = [f.view_index for f in episode.frames]
    anchor = episode.reference_view if anchor is None else anchor
    i0 = views.index(anchor)
    rel = []
    for k, r in enumerate(result.pairs):
        a, b = episode.frames[k].pose, episode.frames[k + 1].pose
        rel.append(r.rt_fw if (r.ok and r.rt_fw is not None) else b @ a.inverse())
    poses = {anchor: episode.frames[i0].pose}
    for k in range(i0, len(views) - 1):
        poses[views[k + 1]] = rel[k] @ poses[views[k]]
    for k in range(i0 - 1, -1, -1):
        poses[views[k]] = rel[k].inverse() @ poses[views[k + 1]]
    return poses


# ---------------------------------------------------------------------------
# registration tree


def _pose_distance(a: Pose, b: Pose, rot_weight: float = 1.5) -> float:
    d = a @ b.inverse()
    return float(np.linalg.norm(a.center - b.center) + rot_weight * rotation_angle(d.rotation))


def _pose_delta(a: Pose, b: Pose):
    d = a @ b.inverse()
    return float(np.linalg.norm(d.translation)), math.degrees(rotation_angle(d.rotation))


@dataclass
class TreeGates:
    cycle_tol: float = 0.015        # metres, mean |RT_bw RT_fw X - X| over the src cloud
    max_violation: float = 0.01     # fraction of warped points in front of the dst surface
    min_support: int = 500          # warped points lying on the dst surface
    min_support_fraction: float = 0.0  # share of overlapping warped points lying on it
    min_matches: int = 30           # final-round ICP matches in each direction
    min_conditioning: float = 0.0   # smallest normal-scatter eigenvalue in each direction
    max_shift: float = 0.6          # metres of correction to the odometry prior
    max_turn: float = 8.0           # degrees of correction to the odometry prior


def register_episode(episode, anchor=None, min_views: int = 10, max_views: int = 25,
                     gates: TreeGates | None = None, candidates: int = 3, iters: int = 30) -> CycleResult:
    """Re-estimate poses by growing a tree of verified frame-to-frame registrations.

    Starting from ``anchor`` (default: the reference view), the pending view
    nearest to the tree under the reported poses is registered in both
    directions against up to ``candidates`` of its nearest tree views. An
    edge is accepted when the forward-backward cycle error, free-space
    violations, surface support, ICP conditioning and the size of the
    correction to odometry all pass ``gates``; the view then joins the tree
    with the registered pose. Views without an accepted edge are dropped and
    take the reported motion from their nearest tree view. Retention is
    padded or trimmed to ``[min_views, max_views]`` by ascending cycle error
    of the best edge tried, and the anchor is always kept.
    """
    g = gates or TreeGates()
    if min_views > max_views:
        raise ValueError("min_views must not exceed max_views")
    frames = {f.view_index: f for f in episode.frames}
    views = [f.view_index for f in episode.frames]
    anchor = episode.reference_view if anchor is None else anchor
    if anchor not in frames:
        raise ValueError(f"anchor view {anchor} not in episode")
    rep = {v: frames[v].pose for v in views}
    poses = {anchor: rep[anchor]}
    errors = {v: math.inf for v in views}
    errors[anchor] = 0.0
    edges = []
    pending = [v for v in views if v != anchor]
    while pending:
        order = sorted((_pose_distance(rep[u], rep[a]), views.index(u), u, a) for u in pending for a in poses)
        u = order[0][2]
        for _, _, uu, a in [o for o in order if o[2] == u][:candidates]:
            init = rep[a] @ rep[u].inverse()
            fw = register_frames(frames[u], frames[a], init, iters)
            bw = register_frames(frames[a], frames[u], init.inverse(), iters)
            cloud = _camera_points(frames[u])[0]
            cyc = float(np.mean(np.linalg.norm(bw.pose.apply(fw.pose.apply(cloud)) - cloud, axis=1)))
            viol, support, sup_frac = registration_check(frames[u], frames[a], fw.pose)
            shift, turn = _pose_delta(fw.pose, init)
            r = PairResult(u, a, cyc, False, rt_fw=fw.pose, rt_bw=bw.pose)
            if not cyc <= g.cycle_tol:
                r.reason = f"cycle error {cyc:.4f} m exceeds {g.cycle_tol} m"
            elif viol > g.max_violation:
                r.reason = f"free-space violation {viol:.3f}"
            elif (support < g.min_support or sup_frac < g.min_support_fraction
                  or min(fw.matches, bw.matches) < g.min_matches):
                r.reason = "insufficient support"
            elif min(fw.conditioning, bw.conditioning) < g.min_conditioning > 0:
                r.reason = "ill-conditioned registration"
            elif shift > g.max_shift or turn > g.max_turn:
                r.reason = f"correction {shift:.2f} m / {turn:.1f} deg exceeds prior"
            else:
                r.ok = True
            edges.append(r)
            errors[u] = min(errors[u], cyc)
            if r.ok:
                poses[u] = fw.pose.inverse() @ poses[a]
                break
        pending.remove(u)

    tree = set(poses)
    for v in views:
        if v not in tree:
            a = min(tree, key=lambda t: (_pose_distance(rep[v], rep[t]), views.index(t)))
            poses[v] = rep[v] @ rep[a].inverse() @ poses[a]
    order = sorted(views, key=lambda v: (errors[v], views.index(v)))
    retained = [v for v in order if v in tree]
    lo = min(min_views, len(views))
    if len(retained) < lo:
        retained += [v for v in order if v not in tree][: lo - len(retained)]
    retained = retained[:max_views]
    if anchor not in retained:
        retained = retained[:max_views - 1] + [anchor]
    retained = sorted(retained, key=views.index)
    return CycleResult(retained, edges, errors, {v: poses[v] for v in views})


POSE_METHODS = ("registration", "reported")


def filter_and_refine(episode, method: str = "registration", refine: bool = False, anchor=None,
                      threshold: float = 0.1, min_views: int = 10, max_views: int = 25):
    """Select views (and optionally replace their poses) in place of the reported trajectory.

    ``method="registration"`` grows a verified registration tree from the
    depth maps (:func:`register_episode`); ``"reported"`` runs the
    consecutive-pair cycle filter on egomotion derived from the reported
    poses. Returns ``(episode subset, CycleResult)``; with ``refine`` the
    subset carries the re-estimated poses.
    """
    anchor = episode.reference_view if anchor is None else anchor
    if method == "registration":
        res = register_episode(episode, anchor, min_views, max_views)
        poses = res.poses
    elif method == "reported":
        res = filter_views_cycle_consistency(episode, threshold=threshold, min_views=min_views,
                                             max_views=max_views, keep=anchor)
        poses = refine_poses(episode, res, anchor) if refine else {}
    else:
        raise ValueError(f"unknown pose method {method!r}; expected one of {POSE_METHODS}")
    out = episode.subset(res.retained)
    if refine:
        out.frames = [replace(f, pose=poses[f.view_index]) for f in out.frames]
    return out, res
