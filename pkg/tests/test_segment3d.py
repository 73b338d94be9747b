import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvlabel.explore.world import DEFAULT_INTRINSICS, Primitive, render_frame
from mvlabel.geometry import Intrinsics, Pose
from mvlabel.ingest import (Detection, Episode, GROUND_TRUTH_SEED, Label, LabeledCloud, PosedFrame,
                            build_partitioned_cloud)
from mvlabel.segment3d import (CrfParams, SegmentConfig, SegmentationError, aggregate_votes, crf_refine,
                               pairwise_kernel, segment_object, train_unary)
from conftest import box_mask, cube_world, ring_poses


def _cloud(points, labels):
    points = np.asarray(points, dtype=float)
    return LabeledCloud(points, np.zeros((len(points), 3), dtype=np.int64), np.asarray(labels, dtype=np.int8))


def _separable(rng, n=50):
    x = rng.normal(size=(n, 6))
    y = rng.random(n) < 0.5
    x[y, 0] -= 1.5
    x[~y, 0] += 1.5
    return x, np.where(y, Label.FG, Label.BG)


# ---------------------------------------------------------------------------
# unary


def test_unary_separable():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.0, 1.0, (200, 6))
    pts[:, 0] = np.r_[-rng.uniform(2, 3, 100), rng.uniform(2, 3, 100)]
    labels = np.array([Label.FG] * 100 + [Label.BG] * 100)
    model = train_unary(_cloud(pts, labels), reg=1e-4)
    p = model.proba(pts)
    assert np.all((p > 0.5) == (labels == Label.FG))
    assert p[:100].min() > 0.99


def test_unary_symmetric_gives_half():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 6))
    pts = np.vstack([x, x])
    model = train_unary(_cloud(pts, [Label.FG] * 40 + [Label.BG] * 40))
    np.testing.assert_allclose(model.proba(pts), 0.5, atol=1e-6)


def test_unary_log_probs_normalised(rng):
    x, lab = _separable(rng)
    lp = train_unary(_cloud(x, lab)).log_proba(rng.normal(size=(30, 6)) * 5)
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)


def _gd_oracle(X, y, reg, tol=1e-10, max_iter=2_000_000):
    """Plain full-batch gradient descent on the same mean log-loss + L2 objective."""
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    L = 0.25 * np.linalg.eigvalsh(Xa.T @ Xa / n).max() + reg
    lr = 1.0 / L
    theta = np.zeros(d + 1)
    pen = np.append(np.full(d, reg), 0.0)
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(Xa @ theta)))
        g = Xa.T @ (p - y) / n + pen * theta
        if np.linalg.norm(g) < tol:
            break
        theta -= lr * g
    return theta


def test_unary_matches_gradient_descent_oracle():
    rng = np.random.default_rng(7)
    x, lab = _separable(rng)
    reg = 0.05
    model = train_unary(_cloud(x, lab), reg=reg)
    X = (x - x.mean(axis=0)) / x.std(axis=0)
    theta = _gd_oracle(X, (lab == Label.FG).astype(float), reg)
    a = np.append(model.weights, model.bias)
    cos = a @ theta / (np.linalg.norm(a) * np.linalg.norm(theta))
    assert 1 - cos < 1e-4
    assert model.grad_norm < 1e-6


def test_unary_zero_variance_warns():
    pts = np.zeros((10, 6))
    pts[:, 0] = np.arange(10)
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        model = train_unary(_cloud(pts, [Label.FG] * 5 + [Label.BG] * 5))
    assert np.all(model.feature_std > 0)


def test_unary_single_class_raises():
    with pytest.raises(SegmentationError):
        train_unary(_cloud(np.zeros((4, 6)), [Label.FG] * 4))


# ---------------------------------------------------------------------------
# dense CRF


def _naive_mean_field(points, labels, U, params, tol=1e-5):
    """Double-loop mean field with the explicit Potts penalty sum_j k_ij Q_j(l' != l)."""
    n = len(points)
    K = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dx = np.sum((points[i, :3] - points[j, :3]) ** 2)
            dc = np.sum((points[i, 3:6] - points[j, 3:6]) ** 2)
            K[i, j] = (params.w_app * math.exp(-dx / (2 * params.theta_alpha ** 2) - dc / (2 * params.theta_beta ** 2))
                       + params.w_smooth * math.exp(-dx / (2 * params.theta_gamma ** 2)))

    def clamp(Q):
        Q[labels == Label.FG] = (0.0, 1.0)
        Q[labels == Label.BG] = (1.0, 0.0)
        return Q

    def softmax(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    Q = clamp(softmax(U))
    for _ in range(params.iterations):
        penalty = np.zeros((n, 2))
        for i in range(n):
            for lab in (0, 1):
                penalty[i, lab] = K[i] @ Q[:, 1 - lab]
        Qn = clamp(softmax(U - penalty))
        done = np.abs(Qn - Q).max() < tol
        Q = Qn
        if done:
            break
    return Q


def _random_crf_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    pts = np.hstack([rng.uniform(0, 0.5, (n, 3)), rng.random((n, 3))])
    labels = rng.choice([Label.UNK, Label.UNK, Label.FG, Label.BG], n).astype(np.int8)
    p = rng.uniform(0.05, 0.95, n)
    U = np.log(np.stack([1 - p, p], axis=1))
    params = CrfParams(rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5),
                       rng.uniform(0.02, 0.3), int(rng.integers(1, 8)))
    return pts, labels, U, params


@pytest.mark.parametrize("seed", range(50))
def test_crf_matches_naive_oracle(seed):
    pts, labels, U, params = _random_crf_instance(seed)
    seg = crf_refine(_cloud(pts, labels), U, params)
    Q = _naive_mean_field(pts, labels, U, params)
    assert np.abs(seg.marginals - Q[:, 1]).max() < 1e-6


def test_crf_zero_pairwise_is_unary_argmax(rng):
    pts = rng.random((100, 6))
    U = np.log(rng.dirichlet([1, 1], 100))
    seg = crf_refine(_cloud(pts, np.full(100, Label.UNK)), U, CrfParams(w_app=0, w_smooth=0))
    assert np.array_equal(seg.labels, U[:, 1] > U[:, 0])


def two_cluster_fixture(seed=0, n=100, flip=0.1):
    rng = np.random.default_rng(seed)
    a = rng.normal([0, 0, 0], 0.05, (n, 3))
    b = rng.normal([1, 0, 0], 0.05, (n, 3))
    pts = np.vstack([np.hstack([a, np.tile([0.8, 0.2, 0.2], (n, 1))]),
                     np.hstack([b, np.tile([0.2, 0.2, 0.8], (n, 1))])])
    truth = np.r_[np.ones(n, bool), np.zeros(n, bool)]
    noisy = truth.copy()
    k = rng.choice(2 * n, int(flip * 2 * n), replace=False)
    noisy[k] = ~noisy[k]
    p = np.where(noisy, 0.7, 0.3)
    U = np.log(np.stack([1 - p, p], axis=1))
    return _cloud(pts, np.full(2 * n, Label.UNK)), U, truth


def test_crf_denoises_two_clusters():
    cloud, U, truth = two_cluster_fixture()
    seg = crf_refine(cloud, U, CrfParams())
    assert np.mean(seg.labels == truth) >= 0.99


def test_crf_clamped_seeds(rng):
    pts, labels, U, params = _random_crf_instance(3)
    U[labels == Label.FG] = np.log([0.99, 0.01])  # unary disagrees with the seed
    seg = crf_refine(_cloud(pts, labels), U, params)
    assert seg.labels[labels == Label.FG].all()
    assert not seg.labels[labels == Label.BG].any()
    assert np.all((seg.marginals >= 0) & (seg.marginals <= 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kernel_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 6)), rng.random((7, 6))
    p = CrfParams()
    np.testing.assert_allclose(pairwise_kernel(a[:, :3], a[:, 3:], b[:, :3], b[:, 3:], p),
                               pairwise_kernel(b[:, :3], b[:, 3:], a[:, :3], a[:, 3:], p).T, rtol=0, atol=0)


def test_crf_errors():
    with pytest.raises(SegmentationError):
        crf_refine(_cloud(np.zeros((0, 6)), []), np.zeros((0, 2)))
    with pytest.raises(SegmentationError):
        crf_refine(_cloud(np.zeros((2, 6)), [0, 0]), np.array([[0.0, np.nan], [0, 0]]))
    with pytest.raises(ValueError):
        CrfParams(theta_alpha=0)
    with pytest.raises(ValueError):
        CrfParams(iterations=0)


def test_crf_blocked_operator_matches_cached(rng):
    from mvlabel.segment3d import _KernelOperator
    pts = rng.random((300, 6))
    Q = rng.random((300, 2))
    cached = _KernelOperator(pts, CrfParams(), block=64)
    streamed = _KernelOperator(pts, CrfParams(), block=64, cache_limit=0)
    np.testing.assert_allclose(cached @ Q, streamed @ Q, rtol=1e-12)


# ---------------------------------------------------------------------------
# full pipeline on rendered scenes


def _cube_episode(n_views=25, extra=()):
    world = cube_world(extra=extra)
    poses = ring_poses(n=n_views, radius=2.2)
    renders = [render_frame(world, p, DEFAULT_INTRINSICS, k) for k, p in enumerate(poses)]
    mask = renders[0].instance_mask(0)
    shrunk = mask.copy()
    shrunk[:, : np.flatnonzero(mask.any(axis=0))[0] + 3] = False  # imperfect detector mask
    ep = Episode([r.frame for r in renders], [Detection(0, 1, 0.95, shrunk)], 1)
    return world, ep, renders


def _voxel_iou(seg, world):
    box = world.primitive(0).box3d()
    inside = box.contains(seg.cloud.points[:, :3], margin=0.03)
    return np.sum(seg.labels & inside) / np.sum(seg.labels | inside)


CFG = SegmentConfig(erode_r=2, dilate_r=3, voxel_size=0.05, crop_radius=1.2)


def test_segment_cube_iou():
    world, ep, _ = _cube_episode()
    seg = segment_object(ep, ep.detections[0], CFG)
    assert _voxel_iou(seg, world) >= 0.85


def test_weak_seed_at_least_as_good():
    world, ep, renders = _cube_episode()
    det = segment_object(ep, ep.detections[0], CFG)
    best = max(range(len(renders)), key=lambda k: renders[k].visible_pixels.get(0, 0))
    gt = Detection(best, 1, 1.0, renders[best].instance_mask(0), source=GROUND_TRUTH_SEED)
    weak = segment_object(ep, gt, CFG)
    assert _voxel_iou(weak, world) >= _voxel_iou(det, world)


def test_single_view_completes():
    _, ep, _ = _cube_episode(n_views=1)
    seg = segment_object(ep, ep.detections[0], CFG)
    assert seg.labels.any()


def test_segment_rejects_unconfident_seed():
    _, ep, _ = _cube_episode(n_views=1)
    d = ep.detections[0]
    with pytest.raises(SegmentationError):
        segment_object(ep, Detection(0, 1, 0.5, d.mask), CFG)


def test_segment_deterministic():
    _, ep, _ = _cube_episode(n_views=5)
    a = segment_object(ep, ep.detections[0], CFG)
    b = segment_object(ep, ep.detections[0], CFG)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.marginals, b.marginals)


# ---------------------------------------------------------------------------
# vote aggregation


def _plane_views(squares, n_views=None):
    """Views of a floor plane with painted squares; one detection per ``squares`` entry."""
    intr = Intrinsics(50, 50, 24.5, 24.5, 50, 50)
    frames, dets = [], []
    for k, (view_shift, box) in enumerate(squares):
        pose = Pose(np.eye(3), [-view_shift, 0, 0])
        rgb = np.zeros((50, 50, 3))
        frames.append(PosedFrame(rgb, np.full((50, 50), 2.0), intr, pose, k))
        dets.append(Detection(k, 1, 0.95, box_mask((50, 50), *box)))
    return Episode(frames, dets, 1)


def _fg_keys(cloud, voxel):
    return set(map(tuple, np.floor(cloud.points[cloud.labels == Label.FG, :3] / voxel).astype(int).tolist()))


def test_votes_single_detection_matches_standard():
    ep = _plane_views([(0.0, (20, 30, 20, 30))])
    a = aggregate_votes(ep, ep.detections, 0.04, erode_r=1, dilate_r=2)
    b = build_partitioned_cloud(ep, ep.detections[0], 1, 2, 0.04)
    assert np.any(a.labels == Label.FG)
    assert np.array_equal(a.labels, b.labels)


def test_votes_union_of_overlapping_views():
    # the second camera is shifted 0.4 m; its square covers the neighbouring patch of the plane
    ep = _plane_views([(0.0, (20, 30, 20, 30)), (0.4, (20, 30, 18, 28))])
    voxel = 0.04
    cloud = aggregate_votes(ep, ep.detections, voxel, target=ep.detections[0], erode_r=0, dilate_r=1)
    from mvlabel.segment3d import _vote_keys
    union = _vote_keys(ep, ep.detections[0], 0, voxel) | _vote_keys(ep, ep.detections[1], 0, voxel)
    assert _fg_keys(cloud, voxel) == union
    assert _fg_keys(cloud, voxel) != _vote_keys(ep, ep.detections[0], 0, voxel)


def test_votes_keep_only_target_component():
    # a second detection 5 m away in a separate view
    ep = _plane_views([(0.0, (20, 30, 20, 30)), (5.0, (20, 30, 20, 30))])
    voxel = 0.04
    from mvlabel.segment3d import _vote_keys
    cloud = aggregate_votes(ep, ep.detections, voxel, target=ep.detections[0], erode_r=0, dilate_r=1)
    assert _fg_keys(cloud, voxel) == _vote_keys(ep, ep.detections[0], 0, voxel)


def test_votes_errors():
    ep = _plane_views([(0.0, (20, 30, 20, 30))])
    with pytest.raises(SegmentationError):
        aggregate_votes(ep, [], 0.02)
    other = Detection(0, 2, 0.9, ep.detections[0].mask)
    with pytest.raises(SegmentationError):
        aggregate_votes(ep, [ep.detections[0], other], 0.02)


def test_segment_with_votes_runs():
    world, ep, renders = _cube_episode(n_views=6)
    dets = [Detection(k, 1, 0.95, renders[k].instance_mask(0)) for k in range(1, 6)]
    ep = Episode(ep.frames, ep.detections + dets, 1)
    seg = segment_object(ep, ep.detections[0], SegmentConfig(erode_r=2, dilate_r=3, voxel_size=0.05,
                                                             crop_radius=1.2, aggregate_votes=True))
    assert _voxel_iou(seg, world) >= 0.85
