"""Evaluation suites: seeded scenes, databases, episodes and agent roll-outs.

Every random stream is derived from ``(suite seed, scene index, purpose,
episode index)``, so results do not depend on how scenes are spread over
worker processes.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import binomtest

from .contextkit import DynamicProvider, OracleProvider, RandomProvider, StaticProvider
from .embedstore import EmbeddingStore
from .navsim.agents import AgentConfig, AgentTrace, Metrics, compute_metrics, run_agent
from .navsim.dataset import Episode, generate_dataset, sample_episodes
from .navsim.scene import Scene, SceneSpec, synth_scene
from .simgraph import SimilarityGraph, build_scene_graph

# agent label -> (run_agent kind, context strategy)
AGENTS: dict[str, tuple[str, str | None]] = {
    "oracle": ("oracle", None),
    "goal_greedy": ("goal_greedy", None),
    "context_follower": ("context_follower", "dynamic"),
    "context_follower:static": ("context_follower", "static"),
    "context_follower:random": ("context_follower", "random"),
    "context_follower:oracle_shortest_path": ("context_follower", "oracle_shortest_path"),
    "context_follower:oracle_panorama": ("context_follower", "oracle_panorama"),
}
DEFAULT_AGENTS = ("goal_greedy", "context_follower", "context_follower:oracle_shortest_path")
DEFAULT_SWEEP = (100, 1000, 10_000)

_DATASET, _EPISODES, _AGENT = 1, 2, 3


class SuiteError(ValueError):
    pass


@dataclass(frozen=True)
class SuiteConfig:
    """Default values are the calibrated aliasing-maze suite."""

    name: str = "aliasing-maze"
    scenes: int = 10
    episodes: int = 50
    kind: str = "maze"
    width: int = 44
    height: int = 44
    room_cells: int = 10
    wall_cells: int = 6
    door_cells: int = 2
    aliasing: float = 0.5
    sigma: float = 2.0
    dim: int = 256
    dataset_size: int = 1000
    variant: str = "SWG"
    threshold: float | None = None
    C: int = 8
    beta: float = 0.5
    tau: float = 1.0
    oracle_spacing: float | None = 0.5   # metres between oracle path frames
    stop_threshold: float = 0.97
    arrival_threshold: float = 0.97
    max_steps: int = 500
    seed: int = 0
    agents: tuple[str, ...] = DEFAULT_AGENTS
    categories: tuple[str, ...] = ()     # object categories placed in each scene

    def __post_init__(self):
        if self.scenes < 1 or self.episodes < 1:
            raise SuiteError("a suite needs at least one scene and one episode")
        if self.dataset_size < 1:
            raise SuiteError("dataset_size must be >= 1")
        unknown = [a for a in self.agents if a not in AGENTS]
        if unknown:
            raise SuiteError(f"unknown agents {unknown}; known: {sorted(AGENTS)}")

    @property
    def agent_config(self) -> AgentConfig:
        return AgentConfig(self.stop_threshold, self.arrival_threshold, self.max_steps)

    def scene_spec(self, index: int) -> SceneSpec:
        return SceneSpec(width=self.width, height=self.height, kind=self.kind,
                         seed=1000 * self.seed + index, room_cells=self.room_cells,
                         wall_cells=self.wall_cells, door_cells=self.door_cells,
                         sigma=self.sigma, dim=self.dim, aliasing=self.aliasing,
                         categories=self.categories, scene_id=f"{self.name}-{index:02d}")

    def replace(self, **changes) -> "SuiteConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        data = dataclasses.asdict(self)
        data["agents"] = list(self.agents)
        data["categories"] = list(self.categories)
        return data

    @classmethod
    def from_json(cls, data: Mapping) -> "SuiteConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - names
        if extra:
            raise SuiteError(f"unknown suite keys: {sorted(extra)}")
        data = dict(data)
        for key in ("agents", "categories"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class SceneBundle:
    index: int
    scene: Scene
    store: EmbeddingStore
    episodes: list[Episode]
    graph: SimilarityGraph | None = None


def stream(config: SuiteConfig, scene_index: int, purpose: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, scene_index, purpose, *extra])


def build_bundle(config: SuiteConfig, index: int, with_graph: bool = True) -> SceneBundle:
    scene = synth_scene(config.scene_spec(index))
    store = EmbeddingStore(scene.dim)
    store.add_records(generate_dataset(scene, config.dataset_size, stream(config, index, _DATASET)))
    episodes = sample_episodes(scene, config.episodes, stream(config, index, _EPISODES))
    graph = build_scene_graph(store, scene.scene_id, config.variant, config.threshold) if with_graph else None
    return SceneBundle(index, scene, store, episodes, graph)


def make_provider(config: SuiteConfig, bundle: SceneBundle, strategy: str):
    sid = bundle.scene.scene_id
    if strategy == "dynamic":
        if bundle.graph is None:
            raise SuiteError("dynamic contexts need a graph")
        return DynamicProvider(bundle.store, sid, bundle.graph, config.C, config.beta)
    if strategy == "static":
        return StaticProvider(bundle.store, sid, config.C, config.beta)
    if strategy == "random":
        return RandomProvider(bundle.store, sid, config.C)
    if strategy == "oracle_shortest_path":
        return OracleProvider(bundle.scene, "shortest_path", config.C, config.oracle_spacing)
    if strategy == "oracle_panorama":
        return OracleProvider(bundle.scene, "panorama", config.C)
    raise SuiteError(f"unknown context strategy {strategy!r}")


def run_episode(config: SuiteConfig, bundle: SceneBundle, agent: str, episode_index: int,
                on_step=None) -> AgentTrace:
    kind, strategy = AGENTS[agent]
    provider = make_provider(config, bundle, strategy) if strategy else None
    trace = run_agent(bundle.scene, bundle.episodes[episode_index], kind, provider,
                      config.agent_config, stream(config, bundle.index, _AGENT, episode_index),
                      on_step=on_step)
    trace.agent = agent
    trace.episode = episode_index
    trace.scene_id = bundle.scene.scene_id
    return trace


def run_scene(config: SuiteConfig, index: int) -> dict[str, list[AgentTrace]]:
    needs_graph = any(AGENTS[a][1] == "dynamic" for a in config.agents)
    bundle = build_bundle(config, index, with_graph=needs_graph)
    return {agent: [run_episode(config, bundle, agent, e) for e in range(config.episodes)]
            for agent in config.agents}


@dataclass
class SuiteResult:
    config: SuiteConfig
    traces: dict[str, list[list[AgentTrace]]] = field(default_factory=dict)   # agent -> scene -> episodes

    def metrics(self, agent: str) -> Metrics:
        return compute_metrics([t for scene in self.traces[agent] for t in scene])

    def scene_metrics(self, agent: str) -> list[Metrics]:
        return [compute_metrics(scene) for scene in self.traces[agent]]

    def rows(self, suite: str | None = None) -> list[tuple[str, str, Metrics]]:
        label = suite or self.config.name
        return [(agent, label, self.metrics(agent)) for agent in self.config.agents]


def run_suite(config: SuiteConfig, jobs: int = 1) -> SuiteResult:
    """Roll out every agent on every episode; scenes are the unit of parallelism."""
    indices = range(config.scenes)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_scene = list(pool.map(run_scene, [config] * config.scenes, indices))
    else:
        per_scene = [run_scene(config, i) for i in indices]
    result = SuiteResult(config)
    for agent in config.agents:
        result.traces[agent] = [scene[agent] for scene in per_scene]
    return result


@dataclass(frozen=True)
class SignTest:
    wins: int
    losses: int
    ties: int
    p_value: float


def sign_test(better: Sequence[float], worse: Sequence[float]) -> SignTest:
    """One-sided paired sign test that ``better`` exceeds ``worse``; ties dropped."""
    if len(better) != len(worse):
        raise ValueError("paired samples must have equal length")
    a, b = np.asarray(better, dtype=np.float64), np.asarray(worse, dtype=np.float64)
    wins, losses = int(np.sum(a > b)), int(np.sum(a < b))
    ties = len(a) - wins - losses
    p = 1.0 if wins + losses == 0 else binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue
    return SignTest(wins, losses, ties, float(p))


def run_size_sweep(config: SuiteConfig, sizes: Iterable[int] = DEFAULT_SWEEP,
                   jobs: int = 1) -> list[tuple[str, str, Metrics]]:
    """Metrics rows for each database size; the suite column names the size."""
    rows = []
    for size in sizes:
        result = run_suite(config.replace(dataset_size=int(size)), jobs)
        rows.extend(result.rows(f"{config.name}/db={int(size)}"))
    return rows


def load_config(path) -> SuiteConfig:
    with open(path, encoding="utf-8") as fh:
        return SuiteConfig.from_json(json.load(fh))
