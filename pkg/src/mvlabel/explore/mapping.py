"""Top-down occupancy mapping and goal sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..geometry import unproject_frame
from ..ingest import disk

FREE, OCCUPIED, UNKNOWN = 0, 1, -1


class GoalSamplingError(RuntimeError):
    pass


@dataclass
class OccupancyGrid:
    """Cells indexed ``[row, col]``; row follows +y, col follows +x from ``origin``."""

    resolution: float
    origin: np.ndarray
    cells: np.ndarray

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(self.origin, dtype=float)
        self.cells = np.asarray(self.cells, dtype=np.int8)

    @classmethod
    def empty(cls, bounds, resolution: float) -> "OccupancyGrid":
        (x0, x1), (y0, y1) = bounds
        nx = int(np.ceil((x1 - x0) / resolution))
        ny = int(np.ceil((y1 - y0) / resolution))
        return cls(resolution, np.array([x0, y0]), np.full((ny, nx), UNKNOWN, dtype=np.int8))

    @property
    def shape(self):
        return self.cells.shape

    def world_to_cell(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        ij = np.floor((xy - self.origin) / self.resolution).astype(np.int64)
        return ij[..., ::-1]

    def cell_to_world(self, cell) -> np.ndarray:
        rc = np.asarray(cell, dtype=float)
        return self.origin + (rc[..., ::-1] + 0.5) * self.resolution

    def inside(self, cell) -> np.ndarray:
        rc = np.asarray(cell)
        return ((rc[..., 0] >= 0) & (rc[..., 0] < self.shape[0])
                & (rc[..., 1] >= 0) & (rc[..., 1] < self.shape[1]))

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.resolution, self.origin.copy(), self.cells.copy())

    def update(self, frame, band=(0.1, 1.6), floor_max: float = 0.05, max_range: float = 6.0):
        """Integrate one frame: band points mark occupied, floor points mark free.

        Occupied cells are never cleared.
        """
        pts, _ = unproject_frame(frame.rgb, frame.depth, frame.intr, frame.pose)
        if len(pts) == 0:
            return self
        rng = np.linalg.norm(pts[:, :2] - frame.pose.center[:2], axis=1)
        pts = pts[rng <= max_range]
        z = pts[:, 2]
        rc = self.world_to_cell(pts[:, :2])
        ok = self.inside(rc)
        floor = ok & (z <= floor_max)
        occ = ok & (z >= band[0]) & (z <= band[1])
        fr = rc[floor]
        cur = self.cells[fr[:, 0], fr[:, 1]]
        keep = cur != OCCUPIED
        self.cells[fr[keep, 0], fr[keep, 1]] = FREE
        oc = rc[occ]
        self.cells[oc[:, 0], oc[:, 1]] = OCCUPIED
        return self

    def mark_free_disc(self, xy, radius: float):
        """Mark unknown cells within ``radius`` of ``xy`` free (the floor under and around the agent)."""
        rows, cols = np.mgrid[0:self.shape[0], 0:self.shape[1]]
        centers = self.origin + (np.stack([cols, rows], axis=-1) + 0.5) * self.resolution
        near = np.linalg.norm(centers - np.asarray(xy, dtype=float)[:2], axis=-1) <= radius
        self.cells[near & (self.cells == UNKNOWN)] = FREE
        return self

    def inflate(self, radius: float) -> "OccupancyGrid":
        """Copy with occupied cells grown by ``radius`` metres."""
        r = int(np.ceil(radius / self.resolution))
        g = self.copy()
        if r > 0:
            grown = ndimage.binary_dilation(self.cells == OCCUPIED, structure=disk(r))
            g.cells[grown] = OCCUPIED
        return g

    def free_mask(self) -> np.ndarray:
        return self.cells == FREE


def build_occupancy_grid(frames, resolution: float, bounds=None, band=(0.1, 1.6),
                         floor_max: float = 0.05) -> OccupancyGrid:
    """Top-down grid from posed frames (world frame with z up)."""
    if not frames:
        raise ValueError("need at least one frame")
    if bounds is None:
        allpts = np.concatenate([unproject_frame(f.rgb, f.depth, f.intr, f.pose)[0][:, :2] for f in frames]
                                + [np.array([f.pose.center[:2] for f in frames])])
        lo = allpts.min(axis=0) - resolution
        hi = allpts.max(axis=0) + resolution
        bounds = ((lo[0], hi[0]), (lo[1], hi[1]))
    grid = OccupancyGrid.empty(bounds, resolution)
    for f in frames:
        grid.update(f, band, floor_max)
    return grid


def sample_goal(grid: OccupancyGrid, centroid, r_min: float, r_max: float, rng_seed=None,
                max_trials: int = 1000) -> tuple[int, int]:
    """Uniformly sample a free cell whose centre lies within ``[r_min, r_max]`` of ``centroid``.

    Rejection sampling over the annulus' bounding square; raises
    :class:`GoalSamplingError` after ``max_trials`` misses.
    """
    if not r_min < r_max:
        raise ValueError("r_min must be below r_max")
    rng = np.random.default_rng(rng_seed)
    c = np.asarray(centroid, dtype=float)[:2]
    lo = grid.world_to_cell(c - r_max)
    hi = grid.world_to_cell(c + r_max)
    r0, r1 = max(lo[0], 0), min(hi[0], grid.shape[0] - 1)
    c0, c1 = max(lo[1], 0), min(hi[1], grid.shape[1] - 1)
    if r0 <= r1 and c0 <= c1:
        for _ in range(max_trials):
            cell = (int(rng.integers(r0, r1 + 1)), int(rng.integers(c0, c1 + 1)))
            if grid.cells[cell] != FREE:
                continue
            d = np.linalg.norm(grid.cell_to_world(cell) - c)
            if r_min <= d <= r_max:
                return cell
    raise GoalSamplingError(f"no free cell within [{r_min}, {r_max}] m of {c.tolist()} after {max_trials} trials")
