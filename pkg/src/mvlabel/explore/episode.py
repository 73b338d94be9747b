"""The data-collection loop: localize an object, then capture views around it."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..egomotion import ActionNoiseModel, sample_actuation_noise
from ..geometry import Intrinsics, Pose
from ..ingest import Episode, estimate_centroid, mask_bbox, save_episode, write_mask
from ..labelgen import write_json_atomic
from .detector import MockDetectorModel, mock_detect
from .mapping import FREE, OCCUPIED, UNKNOWN, GoalSamplingError, OccupancyGrid, sample_goal
from .planner import UnreachableError, plan_path, simplify_path
from .world import DEFAULT_INTRINSICS, SynthWorld, camera_pose, render_frame


class EpisodeAbandoned(RuntimeError):
    pass


@dataclass
class AgentState:
    position: np.ndarray
    heading: float
    camera_height: float = 0.8

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)

    def copy(self) -> "AgentState":
        return AgentState(self.position.copy(), self.heading, self.camera_height)

    def step(self, dx: float, dy: float, dtheta: float) -> "AgentState":
        """Move by ``(dx, dy)`` in the agent's own frame, then turn by ``dtheta``."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        pos = self.position + np.array([c * dx - s * dy, s * dx + c * dy])
        return AgentState(pos, _wrap(self.heading + dtheta), self.camera_height)


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass
class PolicyConfig:
    conf_threshold: float = 0.9
    n_views: int = 25
    noise: ActionNoiseModel | None = None
    rng_seed: int = 0
    r_min: float = 0.5
    r_max: float = 3.0
    grid_resolution: float = 0.1
    agent_radius: float = 0.2
    blind_radius: float = 1.0
    step_budget: int = 500
    goal_retries: int = 20
    forward_step: float = 0.25
    turn_step: float = math.radians(10.0)
    explore_pitch: float = math.radians(-15.0)
    intr: Intrinsics = DEFAULT_INTRINSICS
    detector: MockDetectorModel = field(default_factory=MockDetectorModel)

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if not self.r_min < self.r_max:
            raise ValueError("r_min must be below r_max")


@dataclass
class EpisodeRecord:
    episode: Episode
    gt: dict
    target_masks: dict           # view -> bool mask of the target instance
    abandon_reason: str = ""


class _Agent:
    """True and believed (odometry) state, advanced together per action."""

    def __init__(self, world, state: AgentState, cfg: PolicyConfig, rng):
        self.world = world
        self.true = state.copy()
        self.odom = state.copy()
        self.cfg = cfg
        self.rng = rng

    def act(self, action: str, amount: float):
        if action == "move_forward":
            cmd = (amount, 0.0, 0.0)
        else:
            cmd = (0.0, 0.0, amount)
        noise = bias = np.zeros(3)
        if self.cfg.noise is not None:
            noise = sample_actuation_noise(self.cfg.noise, action, self.rng)
            bias = self.cfg.noise.mean(action)
        # dead reckoning adds the calibrated mean motion, so only the zero-mean part drifts
        self.odom = self.odom.step(cmd[0] + bias[0], cmd[1] + bias[1], cmd[2] + bias[2])
        self.true = self.true.step(cmd[0] + noise[0], cmd[1] + noise[1], cmd[2] + noise[2])

    def turn(self, angle: float):
        angle = _wrap(angle)
        if abs(angle) > 1e-12:
            self.act("turn_left" if angle > 0 else "turn_right", angle)

    def go_to(self, xy, tol: float, heading_tol: float = math.radians(3.0), max_steps: int = 200):
        """Step toward ``xy`` by odometry, re-aiming only when the heading error exceeds ``heading_tol``."""
        for _ in range(max_steps):
            delta = xy - self.odom.position
            dist = float(np.linalg.norm(delta))
            if dist <= tol:
                return
            err = _wrap(math.atan2(delta[1], delta[0]) - self.odom.heading)
            if abs(err) > heading_tol:
                self.turn(err)
            self.act("move_forward", min(dist, self.cfg.forward_step))

    def poses(self, pitch: float):
        h = self.true.camera_height
        return (camera_pose(self.true.position, self.true.heading, h, pitch),
                camera_pose(self.odom.position, self.odom.heading, h, pitch))


def spawn_agent(world: SynthWorld, rng, radius: float = 0.2, height: float = 0.8) -> AgentState:
    (x0, x1), (y0, y1) = world.bounds
    for _ in range(10000):
        xy = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        if not world.collides(xy, radius):
            return AgentState(xy, float(rng.uniform(-math.pi, math.pi)), height)
    raise EpisodeAbandoned("no collision-free spawn location")


def _clear_footprint(plan: OccupancyGrid, raw: OccupancyGrid, xy, radius: float):
    """Free inflated cells under the agent itself; observed obstacles stay blocked."""
    rows, cols = np.mgrid[0:plan.shape[0], 0:plan.shape[1]]
    centers = plan.origin + (np.stack([cols, rows], axis=-1) + 0.5) * plan.resolution
    near = np.linalg.norm(centers - np.asarray(xy)[:2], axis=-1) <= radius + plan.resolution
    plan.cells[near & (raw.cells != OCCUPIED)] = FREE
    start = tuple(int(x) for x in plan.world_to_cell(xy))
    plan.cells[start] = FREE


def _reachable(plan: OccupancyGrid, start) -> OccupancyGrid:
    """Copy where free cells not 4-connected to ``start`` are marked unknown."""
    lab, _ = ndimage.label(plan.cells == FREE)
    out = plan.copy()
    out.cells[(plan.cells == FREE) & (lab != lab[start])] = UNKNOWN
    return out


def _closest_free(plan: OccupancyGrid, xy) -> tuple[int, int]:
    rc = np.argwhere(plan.cells == FREE)
    d = np.linalg.norm(plan.cell_to_world(rc) - np.asarray(xy)[:2], axis=1)
    return tuple(int(x) for x in rc[int(np.argmin(d))])


def _look_pitch(eye_xy, height, target) -> float:
    dist = float(np.linalg.norm(np.asarray(target[:2]) - eye_xy))
    return math.atan2(float(target[2]) - height, max(dist, 1e-6))


def run_episode(world: SynthWorld, agent: AgentState | None, cfg: PolicyConfig,
                episode_id: str = "ep000", environment_id: str = "synth") -> EpisodeRecord:
    """Collect one episode; raises :class:`EpisodeAbandoned` with a reason on failure.

    Phase one random-walks (forward or turn, collisions vetoed) until the
    mock detector fires above ``conf_threshold``; that frame becomes view 0.
    Phase two repeatedly samples a goal in the annulus around the estimated
    centroid, plans on the inflated occupancy map, walks the path, turns to
    the centroid and captures a view. Reported poses integrate the commanded
    motion plus the noise model's mean while true poses absorb the sampled
    actuation noise; true poses go into the ground-truth sidecar only.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    if agent is None:
        agent = spawn_agent(world, rng, cfg.agent_radius)
    bot = _Agent(world, agent, cfg, rng)
    grid = OccupancyGrid.empty(world.bounds, cfg.grid_resolution)
    class_ids = sorted(world.categories) or sorted({p.class_id for p in world.primitives})
    frames, dets, det_inst, views_gt, true_poses, masks = [], [], [], [], [], {}

    def capture(pitch, view):
        true_pose, rep_pose = bot.poses(pitch)
        r = render_frame(world, true_pose, cfg.intr, view, float(view), record_pose=rep_pose)
        d, inst = mock_detect(r, cfg.detector, class_ids, world, rng)
        grid.update(r.frame)
        grid.mark_free_disc(bot.odom.position, cfg.blind_radius)
        return r, d, inst, true_pose

    seed_det = None
    for _ in range(cfg.step_budget):
        r, d, inst, tp = capture(cfg.explore_pitch, 0)
        conf = [(x.confidence, k) for k, x in enumerate(d) if x.confidence >= cfg.conf_threshold]
        if conf:
            k = max(conf)[1]
            seed_det, target = d[k], inst[k]
            break
        if rng.random() < 1 / 3:
            nxt = bot.true.step(cfg.forward_step, 0.0, 0.0)
            if not world.collides(nxt.position, cfg.agent_radius):
                bot.act("move_forward", cfg.forward_step)
                continue
        bot.turn(cfg.turn_step if rng.random() < 0.5 else -cfg.turn_step)
    if seed_det is None:
        raise EpisodeAbandoned("no confident detection within the step budget")

    def record(r, d, inst, tp):
        frames.append(r.frame)
        dets.extend(d)
        det_inst.extend(inst)
        true_poses.append(tp.to_list())
        masks[r.frame.view_index] = r.instance_mask(target)
        views_gt.append({
            "view_index": r.frame.view_index,
            "target_visible_pixels": r.visible_pixels.get(target, 0),
            "target_visible_fraction": r.visible_fraction(target),
            "target_bbox": list(mask_bbox(r.instance_mask(target))),
            "target_mask": f"gt_mask_{r.frame.view_index:03d}.png",
            "instances": [{"instance_id": i, "class_id": world.primitive(i).class_id,
                           "visible_pixels": n, "visible_fraction": r.visible_fraction(i),
                           "bbox": list(mask_bbox(r.instance_mask(i)))}
                          for i, n in sorted(r.visible_pixels.items())],
        })

    record(r, d, inst, tp)
    centroid = estimate_centroid(seed_det, r.frame)

    def look_at_centroid():
        delta = centroid[:2] - bot.odom.position
        bot.turn(math.atan2(delta[1], delta[0]) - bot.odom.heading)
        return _look_pitch(bot.odom.position, bot.odom.camera_height, centroid)

    def walk(path, plan):
        for cell in simplify_path(plan.free_mask(), path)[1:]:
            bot.go_to(grid.cell_to_world(cell), tol=0.5 * cfg.grid_resolution)

    for view in range(1, cfg.n_views):
        path = None
        for _ in range(cfg.goal_retries):
            plan = grid.inflate(cfg.agent_radius)
            start = tuple(int(x) for x in grid.world_to_cell(bot.odom.position))
            if not plan.inside(np.array(start)):
                raise EpisodeAbandoned("agent believes it left the map")
            _clear_footprint(plan, grid, bot.odom.position, cfg.agent_radius)
            plan = _reachable(plan, start)
            try:
                goal = sample_goal(plan, centroid[:2], cfg.r_min, cfg.r_max, rng)
            except GoalSamplingError:
                # nothing known to be free near the object yet: approach and look again
                goal = _closest_free(plan, centroid[:2])
                if goal != start:
                    walk(plan_path(plan, start, goal), plan)
                true_pose, rep_pose = bot.poses(look_at_centroid())
                grid.update(render_frame(world, true_pose, cfg.intr, record_pose=rep_pose).frame)
                grid.mark_free_disc(bot.odom.position, cfg.blind_radius)
                continue
            try:
                path = plan_path(plan, start, goal)
                break
            except UnreachableError:
                continue
        if path is None:
            raise EpisodeAbandoned(f"goal sampling or planning failed for view {view}")
        walk(path, plan)
        record(*capture(look_at_centroid(), view))

    episode = Episode(frames, dets, seed_det.class_id, environment_id, episode_id, 0, centroid)
    prim = world.primitive(target)
    gt = {
        "episode_id": episode_id,
        "environment_id": environment_id,
        "target_instance": int(target),
        "target_class": int(prim.class_id),
        "seed_class": int(seed_det.class_id),
        "box3d": prim.box3d().to_dict(),
        "true_poses": true_poses,
        "views": views_gt,
        "detection_instances": det_inst,
    }
    return EpisodeRecord(episode, gt, masks)


def write_episode(rec: EpisodeRecord, out_dir, depth_format: str = "npy_f32") -> Path:
    """Write the manifest plus the ``gt.json`` sidecar and target masks."""
    out = Path(out_dir)
    manifest = save_episode(rec.episode, out, depth_format)
    for v, m in rec.target_masks.items():
        write_mask(out / f"gt_mask_{v:03d}.png", m)
    write_json_atomic(out / "gt.json", rec.gt)
    return manifest


def view_azimuths(rec: EpisodeRecord, world: SynthWorld) -> np.ndarray:
    """Azimuth (radians) of each true camera centre around the target object."""
    c = np.asarray(world.primitive(rec.gt["target_instance"]).center)
    az = []
    for T in rec.gt["true_poses"]:
        p = Pose.from_matrix(T).center
        az.append(math.atan2(p[1] - c[1], p[0] - c[0]))
    return np.array(az)


def azimuth_span(az) -> float:
    """Angular extent covered: 2*pi minus the largest gap between sorted azimuths."""
    a = np.sort(np.mod(az, 2 * math.pi))
    if len(a) < 2:
        return 0.0
    gaps = np.diff(np.concatenate([a, [a[0] + 2 * math.pi]]))
    return float(2 * math.pi - gaps.max())


def load_sidecar(episode_dir) -> dict:
    return json.loads((Path(episode_dir) / "gt.json").read_text())
