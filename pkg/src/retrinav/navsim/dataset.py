"""Retrieval databases and evaluation episodes for synthetic scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..embedstore import EmbeddingRecord
from .scene import CELL, Pose, Scene, SceneError, cell_center, geodesic, geodesic_path

DEFAULT_DATASET_SIZE = 1000
MIN_EPISODE_GEODESIC = 1.5
SUCCESS_RADIUS = 1.0

# category score model: peak similarity near an instance, decaying with distance
_CAT_PEAK = 0.30
_CAT_BASE = 0.18
_CAT_RANGE = 1.5
_CAT_NOISE = 0.01


@dataclass(frozen=True)
class Episode:
    start: Pose
    goal: Pose
    goal_embedding: np.ndarray
    geodesic_start: float


def _pick(cells: np.ndarray, visits: np.ndarray, rng) -> tuple[int, int]:
    w = 1.0 / (1.0 + visits[cells[:, 0], cells[:, 1]]) ** 2
    k = rng.choice(len(cells), p=w / w.sum())
    return int(cells[k, 0]), int(cells[k, 1])


def _category_scores(scene: Scene, pose: Pose, rng) -> dict[str, float] | None:
    if not scene.objects:
        return None
    out: dict[str, float] = {}
    for obj in scene.objects:
        d = math.hypot(pose[0] - obj.pose[0], pose[1] - obj.pose[1])
        s = _CAT_BASE + _CAT_PEAK * math.exp(-0.5 * (d / _CAT_RANGE) ** 2)
        out[obj.category] = max(out.get(obj.category, -math.inf), s)
    return {k: v + float(rng.normal(0.0, _CAT_NOISE)) for k, v in sorted(out.items())}


def generate_dataset(scene: Scene, target_count: int = DEFAULT_DATASET_SIZE,
                     rng: np.random.Generator | None = None, first_frame_id: int = 0,
                     min_path: float = 2.0) -> list[EmbeddingRecord]:
    """Frames recorded along shortest paths between random start/goal pairs.

    After each move of the trajectory the observation is saved, until
    ``target_count`` frames exist.  Starts and goals are drawn preferring
    cells no trajectory has visited yet, and pairs closer than ``min_path``
    metres are redrawn (the bound is relaxed on small scenes).
    """
    if target_count < 0:
        raise ValueError("target_count must be >= 0")
    rng = np.random.default_rng() if rng is None else rng
    cells = scene.free_cells
    if len(cells) < 2:
        raise SceneError("scene needs at least two navigable cells")
    visits = np.zeros(scene.occupied.shape, dtype=np.int64)
    records: list[EmbeddingRecord] = []
    fid = first_frame_id
    min_len = min_path
    misses = 0
    while len(records) < target_count:
        start = _pick(cells, visits, rng)
        goal = _pick(cells, visits, rng)
        d = scene.distance_field(goal)[start]
        if d <= 0 or d * CELL < min_len:
            misses += 1
            if misses > 200:
                if min_len <= CELL:
                    raise SceneError("no navigable start/goal pairs in scene")
                min_len /= 2
                misses = 0
            continue
        path = geodesic_path(scene, cell_center(*start), cell_center(*goal), rng)
        for pose in path[1:]:
            r, c = int(pose[1] // CELL), int(pose[0] // CELL)
            visits[r, c] += 1
            records.append(EmbeddingRecord(
                frame_id=fid,
                vector=scene.features(pose),
                scene_id=scene.scene_id,
                pose=(pose[0], pose[1]),
                category_scores=_category_scores(scene, pose, rng),
            ))
            fid += 1
            if len(records) == target_count:
                break
    return records


def sample_episodes(scene: Scene, count: int, rng: np.random.Generator,
                    min_geodesic: float = MIN_EPISODE_GEODESIC, max_tries: int = 100_000) -> list[Episode]:
    """Uniform start/goal pairs with a reachable goal at least ``min_geodesic`` away."""
    cells = scene.free_cells
    out: list[Episode] = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > max_tries:
            raise SceneError(f"could not sample {count} episodes (got {len(out)})")
        a = cells[rng.integers(len(cells))]
        b = cells[rng.integers(len(cells))]
        start, goal = cell_center(*a), cell_center(*b)
        g = geodesic(scene, start, goal)
        if not math.isfinite(g) or g < min_geodesic:
            continue
        out.append(Episode(start, goal, scene.features(goal), g))
    return out


def episode_to_json(ep: Episode) -> dict:
    return {"start": list(ep.start), "goal": list(ep.goal)}


def episode_from_json(scene: Scene, data: dict) -> Episode:
    start, goal = Pose(*data["start"]), Pose(*data["goal"])
    g = geodesic(scene, start, goal)
    if not math.isfinite(g):
        raise SceneError(f"episode goal {goal} unreachable from {start}")
    return Episode(start, goal, scene.features(goal), g)
