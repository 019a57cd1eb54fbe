import json

import numpy as np
import pytest
from scipy.stats import binomtest

from retrinav.suite import (AGENTS, DEFAULT_AGENTS, SuiteConfig, SuiteError, build_bundle, load_config,
                            run_episode, run_size_sweep, run_suite, sign_test)

SMALL = SuiteConfig(name="t", scenes=2, episodes=4, width=24, height=24, room_cells=8, wall_cells=3,
                    dim=64, dataset_size=150, max_steps=150)


def test_defaults():
    c = SuiteConfig()
    assert (c.scenes, c.episodes, c.dataset_size, c.variant, c.C, c.beta) == (10, 50, 1000, "SWG", 8, 0.5)
    assert c.agents == DEFAULT_AGENTS
    assert c.agent_config.max_steps == 500


def test_config_json_round_trip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL.to_json()))
    assert load_config(path) == SMALL
    with pytest.raises(SuiteError):
        SuiteConfig.from_json({"scenes": 1, "bogus": 2})
    with pytest.raises(SuiteError):
        SuiteConfig(agents=("nobody",))
    with pytest.raises(SuiteError):
        SuiteConfig(scenes=0)


def test_scene_ids_and_seeds():
    spec = SMALL.replace(seed=3).scene_spec(4)
    assert spec.scene_id == "t-04" and spec.seed == 3004


def test_bundle_is_deterministic():
    a, b = build_bundle(SMALL, 1), build_bundle(SMALL, 1)
    assert np.array_equal(a.scene.occupied, b.scene.occupied)
    assert len(a.store) == 150
    assert [e.start for e in a.episodes] == [e.start for e in b.episodes]
    assert a.graph.num_edges == b.graph.num_edges
    assert build_bundle(SMALL, 0, with_graph=False).graph is None


def test_run_episode_labels_trace():
    bundle = build_bundle(SMALL, 0)
    for agent in AGENTS:
        t = run_episode(SMALL, bundle, agent, 2)
        assert (t.agent, t.episode, t.scene_id) == (agent, 2, "t-00")


def test_run_suite_serial_equals_parallel():
    cfg = SMALL.replace(agents=("oracle", "goal_greedy", "context_follower"))
    serial = run_suite(cfg, jobs=1)
    parallel = run_suite(cfg, jobs=2)
    for agent in cfg.agents:
        a = [json.dumps(t.to_json()) for s in serial.traces[agent] for t in s]
        b = [json.dumps(t.to_json()) for s in parallel.traces[agent] for t in s]
        assert a == b
    assert serial.metrics("oracle").SR == 100.0
    assert [m.N for m in serial.scene_metrics("goal_greedy")] == [4, 4]
    rows = serial.rows()
    assert [r[0] for r in rows] == list(cfg.agents) and rows[0][1] == "t"


def test_sign_test_matches_binomial():
    st = sign_test([5, 6, 7, 8, 3, 3], [1, 2, 3, 9, 3, 1])
    assert (st.wins, st.losses, st.ties) == (4, 1, 1)
    assert st.p_value == pytest.approx(binomtest(4, 5, 0.5, alternative="greater").pvalue)
    assert sign_test([1, 1], [1, 1]).p_value == 1.0
    assert sign_test([1] * 10, [0] * 10).p_value == pytest.approx(2.0 ** -10)
    with pytest.raises(ValueError):
        sign_test([1], [1, 2])


def test_size_sweep_rows():
    cfg = SMALL.replace(scenes=1, episodes=2, agents=("goal_greedy",))
    rows = run_size_sweep(cfg, (50, 80))
    assert [(a, s, m.N) for a, s, m in rows] == [("goal_greedy", "t/db=50", 2), ("goal_greedy", "t/db=80", 2)]
