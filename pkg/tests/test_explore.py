import math

import numpy as np
import pytest
from scipy import stats
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

from mvlabel.egomotion import ActionNoiseModel, filter_views_cycle_consistency
from mvlabel.explore import (FREE, OCCUPIED, UNKNOWN, EpisodeAbandoned, GoalSamplingError, MockDetectorModel,
                             OccupancyGrid, PolicyConfig, Primitive, Render, SynthWorld, UnreachableError,
                             azimuth_span, build_occupancy_grid, fast_marching, mock_detect, path_length,
                             plan_path, render_frame, run_episode, sample_goal, view_azimuths)
from mvlabel.explore.episode import AgentState
from mvlabel.geometry import Intrinsics, Pose, project_points, unproject_frame
from mvlabel.ingest import PosedFrame
from conftest import cube_world, ring_poses

INTR = Intrinsics(100, 100, 50, 50, 101, 101)


def _sdf(p: Primitive, x):
    if p.shape == "sphere":
        return np.linalg.norm(x - np.asarray(p.center), axis=1) - p.radius
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    d = x - np.asarray(p.center)
    local = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
    q = np.abs(local) - np.asarray(p.dims) / 2
    return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)


# ---------------------------------------------------------------------------
# rendering


def test_looking_down_at_empty_ground():
    world = SynthWorld((), ((-5, 5), (-5, 5)))
    pose = Pose.look_at([0, 0, 2], [0, 0, 0], up=(0, 1, 0))
    r = render_frame(world, pose, INTR)
    np.testing.assert_allclose(r.frame.depth, 2.0, atol=1e-12)
    assert (r.instance_ids == -1).all()


def test_sphere_centre_depth():
    sphere = Primitive("sphere", (5.0, 0.0, 2.0), (1.0, 1.0, 1.0), 0.0, (0.2, 0.2, 0.9), 2, 0)
    world = SynthWorld((sphere,), ((-8, 8), (-8, 8)))
    r = render_frame(world, Pose.look_at([0, 0, 2], [5, 0, 2]), INTR)
    assert r.frame.depth[50, 50] == pytest.approx(4.0, abs=1e-12)
    assert r.instance_ids[50, 50] == 0


def test_unprojected_points_lie_on_surfaces():
    ball = Primitive("sphere", (1.2, 0.8, 0.4), (0.4, 0.4, 0.4), 0.0, (0.2, 0.2, 0.9), 2, 1)
    slab = Primitive("box", (-0.6, 0.9, 0.25), (0.8, 0.3, 0.5), 0.7, (0.1, 0.8, 0.1), 1, 2)
    world = cube_world(extra=(ball, slab))
    for pose in ring_poses(target=(0.3, 0.5, 0.3), radius=3.0, n=4):
        r = render_frame(world, pose, INTR)
        pts, prov = unproject_frame(r.frame.rgb, r.frame.depth, INTR, pose)
        d = np.abs(pts[:, 2])  # ground plane
        for p in world.primitives:
            d = np.minimum(d, np.abs(_sdf(p, pts[:, :3])))
        assert d.max() < 1e-6
        inst = r.instance_ids[prov[:, 2], prov[:, 1]]
        for p in world.primitives:
            sel = inst == p.instance_id
            if sel.any():
                assert np.abs(_sdf(p, pts[sel, :3])).max() < 1e-6


def test_render_deterministic():
    world = cube_world()
    pose = ring_poses(n=1)[0]
    a, b = render_frame(world, pose, INTR), render_frame(world, pose, INTR)
    assert np.array_equal(a.frame.depth, b.frame.depth) and np.array_equal(a.frame.rgb, b.frame.rgb)


# ---------------------------------------------------------------------------
# mock detector


def _fake_render(visible, full, shape=(30, 40)):
    ids = np.full(shape, -1, dtype=np.int32)
    ids[5:25, 5:35] = 0
    f = PosedFrame(np.zeros(shape + (3,), np.uint8), np.ones(shape), Intrinsics(30, 30, 19.5, 14.5, 40, 30),
                   Pose.identity(), 3)
    r = Render(f, ids, {0: visible}, {0: full})
    r.classes = {0: 1}
    return r


def test_fully_visible_detection():
    r = _fake_render(600, 600)
    dets, inst = mock_detect(r, MockDetectorModel(0.95, 2.0, 0.0, rng_seed=1), class_ids=[1, 2])
    assert len(dets) == 1 and inst == [0]
    assert dets[0].confidence == pytest.approx(0.95) and dets[0].class_id == 1 and dets[0].view_index == 3


def test_half_occluded_confidence():
    r = _fake_render(300, 600)
    dets, _ = mock_detect(r, MockDetectorModel(0.95, 2.0, 0.0, rng_seed=1), class_ids=[1, 2])
    assert dets[0].confidence == pytest.approx(0.2375)


def test_detector_mask_is_eroded_subset():
    r = _fake_render(600, 600)
    for seed in range(10):
        (d,), _ = mock_detect(r, MockDetectorModel(rng_seed=seed))
        gt = r.instance_mask(0)
        assert not (d.mask & ~gt).any() and d.mask.sum() >= (gt.sum() - 2 * 2 * (20 + 30))


def test_misclassification_rate():
    r = _fake_render(600, 600)
    rng = np.random.default_rng(0)
    flips = [mock_detect(r, MockDetectorModel(misclass_rate=0.3), class_ids=[1, 2, 3], rng=rng)[0][0].class_id != 1
             for _ in range(2000)]
    assert abs(np.mean(flips) - 0.3) < 0.04


def test_detector_on_rendered_cube():
    world = cube_world()
    r = render_frame(world, ring_poses(n=1, radius=2.5)[0], INTR)
    assert r.visible_fraction(0) == pytest.approx(1.0)
    dets, _ = mock_detect(r, MockDetectorModel(misclass_rate=0.0), world=world)
    assert len(dets) == 1 and dets[0].confidence == pytest.approx(0.95)


# ---------------------------------------------------------------------------
# occupancy grid


def _wall_world():
    wall = Primitive("box", (2.0, 0.0, 0.5), (0.1, 2.0, 1.0), 0.0, (0.6, 0.6, 0.6), 1, 0)
    return SynthWorld((wall,), ((-1, 4), (-2, 2)), {1: "wall"})


def test_wall_observation():
    world = _wall_world()
    pose = Pose.look_at([0, 0, 0.8], [2, 0, 0.3])
    r = render_frame(world, pose, INTR)
    g = build_occupancy_grid([r.frame], 0.1, bounds=world.bounds)
    occ = np.argwhere(g.cells == OCCUPIED)
    xs = g.cell_to_world(occ)[:, 0]
    # the wall's front face sits at x = 1.95
    assert len(occ) > 5 and np.all(np.abs(xs - 1.95) <= 0.1)
    # visible floor between camera and wall is free (the lowest ray lands at x = 0.92)
    for x in np.arange(1.0, 1.8, 0.1):
        assert g.cells[tuple(g.world_to_cell([x, 0.0]))] == FREE
    # behind the wall stays unknown
    assert g.cells[tuple(g.world_to_cell([3.5, 0.0]))] == UNKNOWN


def test_empty_ground_all_observed_free():
    world = SynthWorld((), ((-5, 5), (-5, 5)))
    r = render_frame(world, Pose.look_at([0, 0, 2], [0, 0, 0], up=(0, 1, 0)), INTR)
    g = build_occupancy_grid([r.frame], 0.1, bounds=world.bounds)
    assert (g.cells != OCCUPIED).all() and (g.cells == FREE).sum() > 100


def test_grid_monotone_in_frames():
    world = cube_world(extra=(Primitive("sphere", (1.5, 1.5, 0.4), (0.4,) * 3, 0.0, (0, 0, 1), 2, 1),))
    frames = [render_frame(world, p, INTR).frame for p in ring_poses(n=6, radius=3.0)]
    bounds = world.bounds
    a = build_occupancy_grid(frames[:3], 0.1, bounds=bounds)
    ab = build_occupancy_grid(frames, 0.1, bounds=bounds)
    assert np.all(ab.cells[a.cells == OCCUPIED] == OCCUPIED)
    ba = build_occupancy_grid(frames[::-1], 0.1, bounds=bounds)
    assert np.array_equal(ab.cells == OCCUPIED, ba.cells == OCCUPIED)


# ---------------------------------------------------------------------------
# goal sampling


def _grid(cells, res=0.1):
    return OccupancyGrid(res, np.zeros(2), np.asarray(cells, dtype=np.int8))


def test_goal_in_annulus_on_free_grid():
    g = _grid(np.zeros((60, 60)))
    c = np.array([3.0, 3.0])
    for seed in range(1000):
        cell = sample_goal(g, c, 0.5, 2.0, seed)
        assert 0.5 <= np.linalg.norm(g.cell_to_world(cell) - c) <= 2.0


def test_goal_occupied_annulus_raises():
    g = _grid(np.ones((60, 60)))
    with pytest.raises(GoalSamplingError):
        sample_goal(g, [3.0, 3.0], 0.5, 2.0, 0)
    with pytest.raises(ValueError):
        sample_goal(g, [3.0, 3.0], 2.0, 0.5, 0)


def test_goal_uniform_over_free_half():
    cells = np.zeros((40, 40))
    cells[:, :20] = OCCUPIED
    g = _grid(cells)
    c = np.array([2.0, 2.0])
    counts = {}
    for seed in range(10000):
        cell = sample_goal(g, c, 0.5, 1.0, seed)
        assert cell[1] >= 20
        counts[cell] = counts.get(cell, 0) + 1
    rows, cols = np.mgrid[0:40, 0:40]
    d = np.linalg.norm(g.cell_to_world(np.stack([rows, cols], -1)) - c, axis=-1)
    support = [tuple(x) for x in np.argwhere((d >= 0.5) & (d <= 1.0) & (cols >= 20))]
    assert set(counts) <= set(support)
    obs = np.array([counts.get(s, 0) for s in support])
    assert stats.chisquare(obs).pvalue > 0.01


# ---------------------------------------------------------------------------
# planning


def dijkstra_oracle(free, goal):
    """8-connected shortest paths (no corner cutting) via a sparse-graph solver."""
    H, W = free.shape
    idx = np.arange(H * W).reshape(H, W)
    rows, cols, w = [], [], []
    for di, dj in ((0, 1), (1, 0), (1, 1), (1, -1)):
        for i in range(H):
            for j in range(W):
                ni, nj = i + di, j + dj
                if not (0 <= ni < H and 0 <= nj < W) or not (free[i, j] and free[ni, nj]):
                    continue
                if di and dj and not (free[i + di, j] and free[i, j + dj]):
                    continue
                rows.append(idx[i, j])
                cols.append(idx[ni, nj])
                w.append(math.sqrt(di * di + dj * dj))
    G = coo_matrix((w, (rows, cols)), shape=(H * W, H * W)).tocsr()
    return shortest_path(G, directed=False, indices=idx[goal]).reshape(H, W)


def _check_path(free, path, start, goal):
    assert path[0] == tuple(start) and path[-1] == tuple(goal)
    for a, b in zip(path[:-1], path[1:]):
        assert free[a] and free[b]
        di, dj = b[0] - a[0], b[1] - a[1]
        assert max(abs(di), abs(dj)) == 1
        if di and dj:
            assert free[a[0] + di, a[1]] and free[a[0], a[1] + dj]


def test_straight_path_on_empty_grid():
    free = np.ones((10, 10), bool)
    path = plan_path(free, (0, 0), (0, 9))
    assert path == [(0, j) for j in range(10)]
    assert fast_marching(free, (0, 9))[0, 0] == pytest.approx(9.0, rel=0.05)


@pytest.mark.parametrize("seed", range(20))
def test_fast_marching_matches_dijkstra(seed):
    rng = np.random.default_rng(seed)
    occ = rng.random((40, 40)) < 0.08
    occ = np.logical_or.reduce([np.roll(np.roll(occ, a, 0), b, 1) for a in (0, 1) for b in (0, 1)])
    free = ~occ
    D_goal = None
    while D_goal is None:
        goal = tuple(int(x) for x in rng.integers(0, 40, 2))
        if not free[goal]:
            continue
        D = dijkstra_oracle(free, goal)
        reach = np.argwhere(np.isfinite(D) & (D > 15))
        if len(reach):
            D_goal = D
    start = tuple(int(x) for x in reach[rng.integers(len(reach))])
    path = plan_path(free, start, goal)
    _check_path(free, path, start, goal)
    assert abs(path_length(path) - D_goal[start]) <= 0.05 * D_goal[start]
    T = fast_marching(free, goal)
    assert np.isfinite(T[start]) and abs(T[start] - D_goal[start]) <= 0.08 * D_goal[start]


def test_path_through_single_gap():
    free = np.ones((21, 21), bool)
    free[:, 10] = False
    free[15, 10] = True
    path = plan_path(free, (2, 2), (2, 18))
    _check_path(free, path, (2, 2), (2, 18))
    assert (15, 10) in path
    D = dijkstra_oracle(free, (2, 18))
    assert abs(path_length(path) - D[2, 2]) <= 0.05 * D[2, 2]


def test_sealed_goal_unreachable():
    free = np.ones((15, 15), bool)
    free[5:10, 5] = free[5:10, 9] = free[5, 5:10] = free[9, 5:10] = False
    with pytest.raises(UnreachableError):
        plan_path(free, (0, 0), (7, 7))
    with pytest.raises(UnreachableError):
        plan_path(free, (0, 0), (5, 5))


def test_plan_on_occupancy_grid_treats_unknown_as_blocked():
    cells = np.zeros((10, 10))
    cells[:, 5] = UNKNOWN
    with pytest.raises(UnreachableError):
        plan_path(_grid(cells), (0, 0), (0, 9))


# ---------------------------------------------------------------------------
# episodes


@pytest.fixture(scope="module")
def cube_episode():
    world = cube_world()
    agent = AgentState(np.array([-2.5, -2.0]), 0.3)
    return world, run_episode(world, agent, PolicyConfig(rng_seed=3))


def test_episode_views_and_azimuth(cube_episode):
    world, rec = cube_episode
    ep = rec.episode
    assert len(ep.frames) == 25 and [f.view_index for f in ep.frames] == list(range(25))
    assert math.degrees(azimuth_span(view_azimuths(rec, world))) >= 90
    assert ep.detections and all(d.confidence >= 0 for d in ep.detections)
    seed = max((d for d in ep.detections if d.view_index == 0), key=lambda d: d.confidence)
    assert seed.confidence >= 0.9


def test_episode_keeps_target_in_frame(cube_episode):
    world, rec = cube_episode
    c = np.asarray(world.primitive(rec.gt["target_instance"]).center)[None]
    inside = [project_points(c, f.intr, Pose.from_matrix(T))[2][0]
              for f, T in zip(rec.episode.frames, rec.gt["true_poses"])]
    assert np.mean(inside) >= 0.95


def test_noiseless_reported_poses_match_truth(cube_episode):
    _, rec = cube_episode
    for f, T in zip(rec.episode.frames, rec.gt["true_poses"]):
        assert f.pose.allclose(Pose.from_matrix(T), atol=1e-9)


def test_episode_deterministic(cube_episode):
    world, rec = cube_episode
    again = run_episode(world, AgentState(np.array([-2.5, -2.0]), 0.3), PolicyConfig(rng_seed=3))
    assert again.gt == rec.gt
    for a, b in zip(rec.episode.frames, again.episode.frames):
        assert np.array_equal(a.depth, b.depth) and np.array_equal(a.rgb, b.rgb) and a.pose == b.pose


def test_impossible_threshold_abandons():
    with pytest.raises(EpisodeAbandoned, match="no confident detection"):
        run_episode(cube_world(), None, PolicyConfig(conf_threshold=1.01, step_budget=30, rng_seed=0))


def test_noisy_episode_filter_keeps_ten():
    world = cube_world()
    cfg = PolicyConfig(rng_seed=5, noise=ActionNoiseModel.default())
    rec = run_episode(world, AgentState(np.array([-2.5, 2.0]), -0.5), cfg)
    diffs = [not f.pose.allclose(Pose.from_matrix(T), atol=1e-6)
             for f, T in zip(rec.episode.frames, rec.gt["true_poses"])]
    assert any(diffs)
    res = filter_views_cycle_consistency(rec.episode)
    assert len(res.retained) >= 10


def test_policy_validation():
    with pytest.raises(ValueError):
        PolicyConfig(n_views=0)
    with pytest.raises(ValueError):
        PolicyConfig(r_min=3.0, r_max=1.0)
