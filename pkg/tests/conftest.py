import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mvlabel.geometry import Intrinsics, Pose
from mvlabel.ingest import Detection, Episode, PosedFrame


def random_pose(rng, scale=2.0) -> Pose:
    R = Rotation.random(random_state=rng.integers(2**31)).as_matrix()
    return Pose(R, rng.normal(scale=scale, size=3))


def plane_frame(depth=2.0, w=40, h=30, f=30.0, pose=None, view=0, color=(0.5, 0.5, 0.5)):
    """Fronto-parallel plane at constant depth."""
    intr = Intrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)
    rgb = np.ones((h, w, 3)) * np.asarray(color)
    d = np.full((h, w), depth, dtype=np.float64)
    return PosedFrame(rgb, d, intr, pose if pose is not None else Pose.identity(), view, float(view))


def box_mask(shape, y0, y1, x0, x1):
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_object_episode():
    """Red square on a grey plane, one view plus a detection on the square."""
    f = plane_frame(depth=2.0, w=40, h=30)
    f.rgb[10:20, 15:25] = (0.9, 0.1, 0.1)
    f.depth[10:20, 15:25] = 1.8
    det = Detection(0, 1, 0.95, box_mask((30, 40), 10, 20, 15, 25))
    return Episode([f], [det], 1, "env", "ep", 0)


def cube_world(center=(0.0, 0.0), size=0.6, color=(0.8, 0.1, 0.1), extra=()):
    from mvlabel.explore.world import Primitive, SynthWorld
    prims = [Primitive("box", (center[0], center[1], size / 2), (size, size, size), 0.0, color, 1, 0)]
    prims += list(extra)
    return SynthWorld(tuple(prims), ((-4.0, 4.0), (-4.0, 4.0)), {1: "cube", 2: "ball"})


def ring_poses(target=(0.0, 0.0, 0.3), radius=2.0, n=5, height=0.8, start=0.0, span=2 * np.pi):
    angles = start + np.arange(n) * span / n
    return [Pose.look_at([target[0] + radius * np.cos(a), target[1] + radius * np.sin(a), height], target)
            for a in angles]


# one line per acceptance criterion, filled in by test_acceptance and printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
