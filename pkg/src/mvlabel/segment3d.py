"""Two-stage 3D segmentation: linear unary classifier + dense CRF."""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit, log_expit

from .geometry import unproject_frame
from .ingest import (
    GROUND_TRUTH_SEED,
    Detection,
    Episode,
    Label,
    LabeledCloud,
    PartitionError,
    assemble_cloud,
    build_partitioned_cloud,
    estimate_centroid,
    morphology,
    seed_masks,
    unproject_episode,
)

STD_FLOOR = 1e-8


class SegmentationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# unary model


@dataclass
class UnaryModel:
    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    iterations: int = 0
    grad_norm: float = 0.0

    def standardize(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64)[:, :6] - self.feature_mean) / self.feature_std

    def decision(self, points) -> np.ndarray:
        return self.standardize(points) @ self.weights + self.bias

    def log_proba(self, points) -> np.ndarray:
        """``(N, 2)`` log-probabilities, column 0 background, column 1 object."""
        s = self.decision(points)
        return np.stack([log_expit(-s), log_expit(s)], axis=1)

    def proba(self, points) -> np.ndarray:
        return expit(self.decision(points))


def _logistic_objective(theta, X, y, w, reg):
    s = X @ theta[:-1] + theta[-1]
    # mean weighted log-loss; log(1 + e^{-s}) for y=1, log(1 + e^{s}) for y=0
    loss = np.sum(w * np.logaddexp(0.0, np.where(y, -s, s))) + 0.5 * reg * theta[:-1] @ theta[:-1]
    p = expit(s)
    r = w * (p - y)
    g = np.append(X.T @ r, r.sum())
    g[:-1] += reg * theta[:-1]
    return loss, g, p


def train_unary(cloud: LabeledCloud, reg: float = 1e-3, max_iter: int = 500, tol: float = 1e-6,
                balanced: bool = False) -> UnaryModel:
    """Fit an L2-regularised logistic classifier on the FG/BG seed points.

    Features are the six point channels, standardised with statistics over
    the whole cloud (seed and unknown points alike), so that a channel which
    happens to be nearly constant on the seeds is not blown up where the
    model is applied. The objective is the (optionally class-balanced) mean
    log-loss plus ``reg/2 * |w|^2`` (bias unpenalised), minimised by damped
    Newton steps until the gradient norm drops below ``tol``.
    """
    if reg <= 0:
        raise ValueError("reg must be positive")
    fg = cloud.labels == Label.FG
    bg = cloud.labels == Label.BG
    if not fg.any() or not bg.any():
        raise SegmentationError("unary training needs both FG and BG points")
    sel = fg | bg
    raw = cloud.points[sel, :6]
    y = fg[sel].astype(np.float64)
    mean = cloud.points[:, :6].mean(axis=0)
    std = cloud.points[:, :6].std(axis=0)
    if np.any(std < STD_FLOOR):
        warnings.warn("zero-variance feature in unary training; flooring its std", RuntimeWarning,
                      stacklevel=2)
        std = np.maximum(std, STD_FLOOR)
    X = (raw - mean) / std
    n_fg, n_bg = y.sum(), len(y) - y.sum()
    if balanced:
        w = np.where(y > 0, 0.5 / n_fg, 0.5 / n_bg)
    else:
        w = np.full(len(y), 1.0 / len(y))

    theta = np.zeros(X.shape[1] + 1)
    loss, g, p = _logistic_objective(theta, X, y, w, reg)
    gnorm = float(np.linalg.norm(g))
    it = 0
    while gnorm >= tol and it < max_iter:
        it += 1
        h = w * p * (1.0 - p)
        Xa = np.hstack([X, np.ones((len(X), 1))])
        H = Xa.T @ (Xa * h[:, None])
        H[:-1, :-1] += reg * np.eye(X.shape[1])
        step = np.linalg.solve(H, g)
        t = 1.0
        while True:
            cand = theta - t * step
            c_loss, c_g, c_p = _logistic_objective(cand, X, y, w, reg)
            if c_loss <= loss - 1e-4 * t * (g @ step) or t < 1e-10:
                break
            t *= 0.5
        theta, loss, g, p = cand, c_loss, c_g, c_p
        gnorm = float(np.linalg.norm(g))
    return UnaryModel(theta[:-1].copy(), float(theta[-1]), mean, std, it, gnorm)


# ---------------------------------------------------------------------------
# dense CRF


@dataclass(frozen=True)
class CrfParams:
    w_app: float = 10.0
    w_smooth: float = 3.0
    theta_alpha: float = 0.2
    theta_beta: float = 0.1
    theta_gamma: float = 0.05
    iterations: int = 5

    def __post_init__(self):
        if self.w_app < 0 or self.w_smooth < 0:
            raise ValueError("kernel weights must be non-negative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class Segmentation3D:
    """Binary object/background labelling of a :class:`LabeledCloud`."""

    labels: np.ndarray
    marginals: np.ndarray
    cloud: LabeledCloud | None = None
    iterations: int = 0
    seed: Detection | None = None
    unary: UnaryModel | None = None
    extras: dict = field(default_factory=dict)

    def point_labels(self) -> np.ndarray:
        """Labels propagated to the cloud's full-resolution points (cropped -> background)."""
        sv = self.cloud.source_voxel
        out = np.zeros(len(sv), dtype=bool)
        ok = sv >= 0
        out[ok] = self.labels[sv[ok]]
        return out

    def point_marginals(self) -> np.ndarray:
        sv = self.cloud.source_voxel
        out = np.zeros(len(sv))
        ok = sv >= 0
        out[ok] = self.marginals[sv[ok]]
        return out

    def object_points(self, full_resolution: bool = True) -> np.ndarray:
        if full_resolution:
            return self.cloud.source_points[self.point_labels()]
        return self.cloud.points[self.labels]


def pairwise_kernel(xa, ca, xb, cb, params: CrfParams) -> np.ndarray:
    """Appearance + smoothness Gaussian kernel between two point blocks."""
    d2x = cdist(xa, xb, "sqeuclidean")
    k = np.zeros_like(d2x)
    if params.w_app:
        a = cdist(ca, cb, "sqeuclidean")
        a *= -1.0 / (2 * params.theta_beta ** 2)
        a -= d2x / (2 * params.theta_alpha ** 2)
        np.exp(a, out=a)
        k += params.w_app * a
    if params.w_smooth:
        g = d2x * (-1.0 / (2 * params.theta_gamma ** 2))
        np.exp(g, out=g)
        k += params.w_smooth * g
    return k


class _KernelOperator:
    """Row-blocked ``K @ Q`` with a zero diagonal; caches K when it fits."""

    def __init__(self, points, params: CrfParams, block: int = 512, cache_limit: int = 6000):
        self.x = np.ascontiguousarray(points[:, :3])
        self.c = np.ascontiguousarray(points[:, 3:6])
        self.params = params
        self.block = block
        self.n = len(points)
        self.K = None
        if self.n <= cache_limit:
            self.K = np.empty((self.n, self.n))
            for s in range(0, self.n, block):
                self.K[s:s + block] = self._rows(s)

    def _rows(self, s):
        e = min(s + self.block, self.n)
        k = pairwise_kernel(self.x[s:e], self.c[s:e], self.x, self.c, self.params)
        k[np.arange(e - s), np.arange(s, e)] = 0.0
        return k

    def __matmul__(self, Q):
        if self.K is not None:
            return self.K @ Q
        out = np.empty_like(Q)
        for s in range(0, self.n, self.block):
            out[s:s + self.block] = self._rows(s) @ Q
        return out


def crf_refine(cloud: LabeledCloud, unary_logprobs, params: CrfParams = CrfParams(),
               clamp_seeds: bool = True, tol: float = 1e-5) -> Segmentation3D:
    """Parallel mean-field inference for a fully connected binary Potts CRF.

    Each round updates every point from the previous round's marginals:
    ``Q_i(l) ∝ exp(log p_i(l) + sum_{j != i} k_ij Q_j(l))``, which is the
    Potts update with the constant ``sum_j k_ij`` cancelled. FG/BG seed points
    are held at their one-hot marginals but still send messages.
    """
    n = len(cloud)
    if n == 0:
        raise SegmentationError("empty cloud")
    U = np.asarray(unary_logprobs, dtype=np.float64)
    if U.shape != (n, 2):
        raise SegmentationError(f"unary shape {U.shape} != ({n}, 2)")
    if not np.all(np.isfinite(U)):
        raise SegmentationError("non-finite unary log-probabilities")

    fg = cloud.labels == Label.FG if clamp_seeds else np.zeros(n, dtype=bool)
    bg = cloud.labels == Label.BG if clamp_seeds else np.zeros(n, dtype=bool)

    def normalize(logits):
        z = logits - logits.max(axis=1, keepdims=True)
        q = np.exp(z)
        q /= q.sum(axis=1, keepdims=True)
        q[fg] = (0.0, 1.0)
        q[bg] = (1.0, 0.0)
        return q

    logits = U
    Q = normalize(logits)
    rounds = 0
    if params.w_app or params.w_smooth:
        K = _KernelOperator(cloud.points, params)
        for rounds in range(1, params.iterations + 1):
            logits = U + (K @ Q)
            Q_new = normalize(logits)
            change = np.abs(Q_new - Q).max()
            Q = Q_new
            if change < tol:
                break

    labels = np.argmax(logits, axis=1).astype(bool)
    labels[fg] = True
    labels[bg] = False
    return Segmentation3D(labels, Q[:, 1].copy(), cloud, rounds)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class SegmentConfig:
    erode_r: int = 5
    dilate_r: int = 5
    voxel_size: float = 0.02
    crop_radius: float | None = None
    reg: float = 1e-3
    balanced: bool = False
    crf: CrfParams = field(default_factory=CrfParams)
    conf_threshold: float = 0.9
    aggregate_votes: bool = False


def segment_object(episode: Episode, seed: Detection, config: SegmentConfig | None = None) -> Segmentation3D:
    """Partition -> unary classifier -> CRF, returning the voxel-level result.

    Full-resolution labels are available through
    :meth:`Segmentation3D.point_labels`.
    """
    cfg = config or SegmentConfig()
    if seed.source != GROUND_TRUTH_SEED and seed.confidence < cfg.conf_threshold:
        raise SegmentationError(f"seed confidence {seed.confidence:.3f} below threshold {cfg.conf_threshold}")
    center = None
    if cfg.crop_radius is not None:
        center = estimate_centroid(seed, episode.frame(seed.view_index))
    if cfg.aggregate_votes:
        same = [d for d in episode.detections
                if d.class_id == seed.class_id and (d.confidence >= cfg.conf_threshold or d is seed)]
        if not any(d is seed for d in same):
            same.append(seed)
        cloud = aggregate_votes(episode, same, cfg.voxel_size, target=seed, erode_r=cfg.erode_r,
                                dilate_r=cfg.dilate_r, crop_center=center, crop_radius=cfg.crop_radius)
    else:
        cloud = build_partitioned_cloud(episode, seed, cfg.erode_r, cfg.dilate_r, cfg.voxel_size,
                                        crop_center=center, crop_radius=cfg.crop_radius)
    model = train_unary(cloud, cfg.reg, balanced=cfg.balanced)
    seg = crf_refine(cloud, model.log_proba(cloud.points), cfg.crf)
    seg.seed = seed
    seg.unary = model
    return seg


# ---------------------------------------------------------------------------
# multi-view voting initialisation

_NEIGHBORS_26 = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)]


def _components(keys: set) -> list[set]:
    remaining = set(keys)
    comps = []
    for start in sorted(keys):
        if start not in remaining:
            continue
        remaining.discard(start)
        comp = {start}
        queue = deque([start])
        while queue:
            a, b, c = queue.popleft()
            for da, db, dc in _NEIGHBORS_26:
                nb = (a + da, b + db, c + dc)
                if nb in remaining:
                    remaining.discard(nb)
                    comp.add(nb)
                    queue.append(nb)
        comps.append(comp)
    return comps


def _vote_keys(episode: Episode, det: Detection, erode_r: int, voxel_size: float) -> set:
    f = episode.frame(det.view_index)
    fg = morphology(det.mask, "erode", erode_r)
    pts, _ = unproject_frame(f.rgb, f.depth, f.intr, f.pose, valid_mask=fg, view_index=f.view_index)
    keys = np.floor(pts[:, :3] / voxel_size).astype(np.int64)
    return set(map(tuple, keys.tolist()))


def aggregate_votes(episode: Episode, detections: list[Detection], voxel_size: float, target: Detection | None = None,
                    erode_r: int = 5, dilate_r: int = 5, crop_center=None, crop_radius=None) -> LabeledCloud:
    """Seed FG from the multi-view vote grid of one class.

    Every detection's eroded mask is unprojected and voxelised into a shared
    grid. FG is the largest 26-connected component of occupied voxels that
    overlaps the target detection's own voxels; BG comes from the target view
    exactly as in :func:`build_partitioned_cloud`.
    """
    if not detections:
        raise SegmentationError("no detections to aggregate")
    if len({d.class_id for d in detections}) != 1:
        raise SegmentationError("vote aggregation expects detections of a single class")
    if target is None:
        target = next(d for d in detections if d.view_index == episode.reference_view)
    grid = set()
    for d in detections:
        grid |= _vote_keys(episode, d, erode_r, voxel_size)
    if not grid:
        raise SegmentationError("empty vote grid")
    tkeys = _vote_keys(episode, target, erode_r, voxel_size)
    best = None
    for comp in _components(grid):
        if comp & tkeys and (best is None or len(comp) > len(best)):
            best = comp
    if best is None:
        raise SegmentationError("no vote component overlaps the target detection")

    points, prov = unproject_episode(episode)
    keys = np.floor(points[:, :3] / voxel_size).astype(np.int64)
    comp_arr = np.array(sorted(best), dtype=np.int64)
    in_comp = _rows_in(keys, comp_arr)
    labels = np.full(len(points), Label.UNK, dtype=np.int8)
    _, bg_px = seed_masks(target, erode_r, dilate_r)
    in_seed = np.flatnonzero(prov[:, 0] == target.view_index)
    bg_rows = in_seed[bg_px[prov[in_seed, 2], prov[in_seed, 1]]]
    labels[bg_rows] = Label.BG
    labels[in_comp] = Label.FG
    cloud = assemble_cloud(points, prov, labels, voxel_size, crop_center, crop_radius)
    if not np.any(cloud.labels == Label.FG):
        raise PartitionError("no foreground voxels after vote aggregation")
    if not np.any(cloud.labels == Label.BG):
        raise PartitionError("background seed is empty")
    return cloud


def _rows_in(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Boolean mask of rows of ``a`` that appear in ``b`` (both int (n, 3))."""
    if len(b) == 0 or len(a) == 0:
        return np.zeros(len(a), dtype=bool)
    lo = np.minimum(a.min(axis=0), b.min(axis=0))
    dims = np.maximum(a.max(axis=0), b.max(axis=0)) - lo + 1
    av = np.ravel_multi_index((a - lo).T, dims)
    bv = np.ravel_multi_index((b - lo).T, dims)
    return np.isin(av, bv)
