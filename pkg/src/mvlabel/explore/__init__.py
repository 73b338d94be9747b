"""Synthetic embodied environment: rendering, mock detection, mapping, planning and episodes."""

from .detector import MockDetectorModel, mock_detect
from .episode import (AgentState, EpisodeAbandoned, EpisodeRecord, PolicyConfig, azimuth_span, load_sidecar,
                      run_episode, spawn_agent, view_azimuths, write_episode)
from .mapping import FREE, OCCUPIED, UNKNOWN, GoalSamplingError, OccupancyGrid, build_occupancy_grid, sample_goal
from .planner import UnreachableError, dijkstra, fast_marching, path_length, plan_path
from .world import (DEFAULT_INTRINSICS, Primitive, Render, SynthWorld, WorldConfigError, camera_pose,
                    default_world_config, load_world, render_frame, world_from_config)
