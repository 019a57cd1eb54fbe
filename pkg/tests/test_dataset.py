import math

import numpy as np
import pytest

from oracles import grid_bfs
from retrinav.navsim.dataset import (DEFAULT_DATASET_SIZE, MIN_EPISODE_GEODESIC, SUCCESS_RADIUS,
                                     episode_from_json, episode_to_json, generate_dataset, sample_episodes)
from retrinav.navsim.scene import CELL, Scene, SceneError, SceneSpec, cell_center, pose_cell, synth_scene


@pytest.fixture(scope="module")
def maze():
    return synth_scene(SceneSpec(20, 20, "maze", seed=3, room_cells=8, dim=64, categories=("bed", "tv")))


def test_defaults():
    assert DEFAULT_DATASET_SIZE == 1000
    assert SUCCESS_RADIUS == 1.0
    assert MIN_EPISODE_GEODESIC == 1.5


def test_exact_count_ids_and_metadata(maze):
    recs = generate_dataset(maze, 257, np.random.default_rng(0), first_frame_id=40)
    assert len(recs) == 257
    assert [r.frame_id for r in recs] == list(range(40, 297))
    for r in recs:
        assert r.scene_id == maze.scene_id
        assert maze.navigable(r.pose)
        assert np.array_equal(r.vector, maze.features(r.pose))
        assert set(r.category_scores) == {"bed", "tv"}


def test_frames_follow_trajectories(maze):
    recs = generate_dataset(maze, 200, np.random.default_rng(1))
    steps = [math.dist(a.pose, b.pose) for a, b in zip(recs, recs[1:])]
    # mostly unit moves; jumps only where a new trajectory starts
    assert np.mean(np.isclose(steps, CELL)) > 0.8


def test_single_frame_is_first_step(maze):
    recs = generate_dataset(maze, 1, np.random.default_rng(5))
    assert len(recs) == 1
    rng = np.random.default_rng(5)
    # the same stream yields the same trajectory; its first frame is one move from the start
    more = generate_dataset(maze, 30, rng)
    assert recs[0].pose == more[0].pose


def test_zero_and_negative_count(maze):
    assert generate_dataset(maze, 0, np.random.default_rng(0)) == []
    with pytest.raises(ValueError):
        generate_dataset(maze, -1, np.random.default_rng(0))


def test_determinism(maze):
    a = generate_dataset(maze, 100, np.random.default_rng(9))
    b = generate_dataset(maze, 100, np.random.default_rng(9))
    assert [r.pose for r in a] == [r.pose for r in b]
    assert all(np.array_equal(x.vector, y.vector) for x, y in zip(a, b))


def test_coverage_within_one_metre(maze):
    recs = generate_dataset(maze, 1000, np.random.default_rng(2))
    frames = np.array([r.pose for r in recs])
    free = maze.free_cells
    centres = np.stack([(free[:, 1] + 0.5) * CELL, (free[:, 0] + 0.5) * CELL], axis=1)
    d = np.linalg.norm(centres[:, None, :] - frames[None, :, :], axis=2).min(axis=1)
    assert np.mean(d <= 1.0) >= 0.8


def test_no_pairs_raises():
    occ = np.ones((5, 5), dtype=bool)
    occ[2, 2] = False
    with pytest.raises(SceneError):
        generate_dataset(Scene("one", occ, dim=8), 5, np.random.default_rng(0))


def test_episodes_nontrivial_and_reachable(maze):
    eps = sample_episodes(maze, 60, np.random.default_rng(4))
    assert len(eps) == 60
    for e in eps:
        steps = grid_bfs(maze.occupied, pose_cell(e.start), pose_cell(e.goal))
        assert steps is not None
        assert e.geodesic_start == pytest.approx(steps * CELL)
        assert e.geodesic_start >= MIN_EPISODE_GEODESIC > SUCCESS_RADIUS
        assert np.array_equal(e.goal_embedding, maze.features(e.goal))


def test_episode_json_round_trip(maze):
    e = sample_episodes(maze, 1, np.random.default_rng(0))[0]
    back = episode_from_json(maze, episode_to_json(e))
    assert back.start == e.start and back.goal == e.goal
    assert back.geodesic_start == e.geodesic_start


def test_episode_from_json_unreachable():
    occ = np.ones((6, 6), dtype=bool)
    occ[1, 1] = occ[4, 4] = False
    s = Scene("split", occ, dim=8)
    with pytest.raises(SceneError):
        episode_from_json(s, {"start": list(cell_center(1, 1)), "goal": list(cell_center(4, 4))})


def test_episode_sampler_gives_up():
    occ = np.ones((5, 5), dtype=bool)
    occ[2, 1:4] = False
    with pytest.raises(SceneError):
        sample_episodes(Scene("tiny", occ, dim=8), 1, np.random.default_rng(0), max_tries=50)
