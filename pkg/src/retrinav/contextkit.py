"""Per-step retrieval contexts and Gumbel soft-max slot selection.

A context is a fixed-length list of frames shown to the agent.  The
database-backed strategies (static, dynamic, random) fill it with record
indices; the oracle strategies synthesize frames from privileged simulator
poses and bypass the database entirely.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedstore import EmbeddingStore
from .retrieval import DEFAULT_BETA, DEFAULT_SHORTLIST, build_shortlist, mmr_rerank, retrieve_goal
from .simgraph import SimilarityGraph, path_to_context, shortest_path
from .navsim.scene import Pose, Scene, SceneError, geodesic_path

DEFAULT_C = 8
DEFAULT_TAU = 1.0
STRATEGIES = ("static", "dynamic", "random", "oracle_panorama", "oracle_shortest_path")


class ContextError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Context:
    """``C`` frames in slot order.

    ``slots`` are record indices for database strategies and ``None`` for
    oracle frames.  ``fresh`` is how many leading slots were written by the
    latest update, in path order; trailing slots carry over from the
    previous step.
    """

    strategy: str
    vectors: np.ndarray
    slots: tuple[int, ...] | None = None
    poses: tuple[tuple[float, float, float], ...] | None = None
    fresh: int = 0

    def __len__(self) -> int:
        return len(self.vectors)


def _from_slots(store: EmbeddingStore, strategy: str, slots: Sequence[int], fresh: int) -> Context:
    slots = tuple(int(s) for s in slots)
    return Context(strategy, store.vectors(slots), slots, None, fresh)


def build_static_context(store: EmbeddingStore, scene: str, goal_embedding, C: int = DEFAULT_C,
                         beta: float = DEFAULT_BETA, shortlist_size: int = DEFAULT_SHORTLIST) -> Context:
    """MMR-diversified neighbours of the goal; fixed for a whole episode.

    Scenes with fewer than ``C`` frames repeat the MMR order to fill ``C`` slots.
    """
    if C < 1:
        raise ContextError("C must be >= 1")
    shortlist = build_shortlist(store, scene, goal_embedding, shortlist_size)
    picked = mmr_rerank(shortlist, C, beta)
    slots = [picked[i % len(picked)] for i in range(C)]
    return _from_slots(store, "static", slots, C)


def build_dynamic_context(store: EmbeddingStore, scene: str, graph: SimilarityGraph,
                          obs_embedding, goal_embedding, C: int, previous: Context | Sequence[int],
                          rng: np.random.Generator) -> Context:
    """Waypoints on the graph path between the database matches of observation and goal."""
    prev = previous.slots if isinstance(previous, Context) else tuple(previous)
    if prev is None or len(prev) != C:
        raise ContextError(f"previous context must hold {C} database slots")
    r_obs = retrieve_goal(store, scene, obs_embedding)
    r_goal = retrieve_goal(store, scene, goal_embedding)
    path = shortest_path(graph, r_obs, r_goal)
    slots = path_to_context(path, r_obs, r_goal, C, prev, rng)
    if not path.found:
        fresh = 2
    else:
        fresh = min(C, max(2, len(path.nodes)))
    return _from_slots(store, "dynamic", slots, fresh)


def build_random_context(store: EmbeddingStore, scene: str, C: int, rng: np.random.Generator) -> Context:
    indices = store.scene_indices(scene)
    if len(indices) < C:
        raise ContextError(f"scene {scene!r} has {len(indices)} frames, fewer than C={C}")
    pick = rng.choice(len(indices), size=C, replace=False)
    return _from_slots(store, "random", indices[pick], C)


def build_oracle_context(scene: Scene, kind: str, agent_pose: Sequence[float], goal_pose: Sequence[float],
                         C: int = DEFAULT_C, max_spacing: float | None = None) -> Context:
    """Frames synthesized from privileged poses.

    ``panorama``: ``C`` views at the goal, headings ``360 / C`` degrees apart.
    ``shortest_path``: ``C`` views evenly spaced along the current geodesic
    from the agent to the goal, both ends included.  With ``max_spacing``
    (metres) the spacing is capped, so long paths only cover their first
    stretch.
    """
    if C < 1:
        raise ContextError("C must be >= 1")
    if kind == "panorama":
        poses = [(goal_pose[0], goal_pose[1], 360.0 * i / C) for i in range(C)]
        vec = scene.features(goal_pose)
        return Context("oracle_panorama", np.tile(vec, (C, 1)), None, tuple(poses), C)
    if kind != "shortest_path":
        raise ContextError(f"unknown oracle kind {kind!r}")
    try:
        path = geodesic_path(scene, agent_pose, goal_pose)
    except SceneError as exc:
        raise ContextError(str(exc)) from None
    last = len(path) - 1
    if C == 1:
        picks = [last]
    else:
        step = last / (C - 1)
        if max_spacing is not None:
            step = min(step, max_spacing / 0.25)
        picks = [min(last, int(round(i * step))) for i in range(C)]
    poses = []
    for i, p in enumerate(picks):
        nxt = path[min(p + 1, last)]
        heading = math.degrees(math.atan2(nxt[1] - path[p][1], nxt[0] - path[p][0])) % 360.0
        poses.append((path[p][0], path[p][1], heading))
    vecs = np.stack([scene.features(path[p]) for p in picks])
    return Context("oracle_shortest_path", vecs, None, tuple(poses), C)


@dataclass(frozen=True)
class SelectorLogits:
    alphas: tuple[float, ...]
    temperature: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.alphas:
            raise ContextError("need at least one logit")
        if not all(math.isfinite(a) for a in self.alphas):
            raise ContextError("logits must be finite")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ContextError("temperature must be positive")


def gumbel_select(logits: SelectorLogits, rng: np.random.Generator,
                  mode: str = "sample") -> tuple[int, list[float]]:
    """Pick a slot via the Gumbel-max trick; return it with the relaxed weights.

    In ``sample`` mode the pick is distributed as softmax(alphas) whatever the
    temperature; ``argmax`` drops the noise and returns the top logit.
    """
    a = np.asarray(logits.alphas, dtype=np.float64)
    if mode == "sample":
        g = rng.gumbel(size=a.shape)
    elif mode == "argmax":
        g = np.zeros_like(a)
    else:
        raise ContextError(f"unknown selection mode {mode!r}")
    z = (a + g) / logits.temperature
    z -= z.max()
    w = np.exp(z)
    w /= w.sum()
    # argmax of (a + g) itself; ties in the relaxed weights cannot shift it
    return int(np.argmax(a + g)), w.tolist()


# per-step providers used by the scripted agents -------------------------

class ContextProvider:
    strategy = ""

    def reset(self, goal_embedding: np.ndarray, goal_pose: Sequence[float], rng: np.random.Generator) -> None:
        raise NotImplementedError

    def step(self, pose: Sequence[float], obs: np.ndarray) -> Context:
        raise NotImplementedError


@dataclass
class StaticProvider(ContextProvider):
    store: EmbeddingStore
    scene: str
    C: int = DEFAULT_C
    beta: float = DEFAULT_BETA
    strategy = "static"
    _ctx: Context | None = field(default=None, init=False)

    def reset(self, goal_embedding, goal_pose, rng):
        self._ctx = build_static_context(self.store, self.scene, goal_embedding, self.C, self.beta)

    def step(self, pose, obs):
        return self._ctx


@dataclass
class DynamicProvider(ContextProvider):
    """Graph-path context; the first step starts from the static MMR context."""

    store: EmbeddingStore
    scene: str
    graph: SimilarityGraph
    C: int = DEFAULT_C
    beta: float = DEFAULT_BETA
    strategy = "dynamic"
    _prev: Context | None = field(default=None, init=False)
    _goal: np.ndarray | None = field(default=None, init=False)
    _rng: np.random.Generator | None = field(default=None, init=False)

    def reset(self, goal_embedding, goal_pose, rng):
        self._goal = goal_embedding
        self._rng = rng
        self._prev = build_static_context(self.store, self.scene, goal_embedding, self.C, self.beta)

    def step(self, pose, obs):
        ctx = build_dynamic_context(self.store, self.scene, self.graph, obs, self._goal,
                                    self.C, self._prev, self._rng)
        self._prev = ctx
        return ctx


@dataclass
class RandomProvider(ContextProvider):
    store: EmbeddingStore
    scene: str
    C: int = DEFAULT_C
    strategy = "random"
    _ctx: Context | None = field(default=None, init=False)

    def reset(self, goal_embedding, goal_pose, rng):
        self._ctx = build_random_context(self.store, self.scene, self.C, rng)

    def step(self, pose, obs):
        return self._ctx


@dataclass
class OracleProvider(ContextProvider):
    scene: Scene
    kind: str = "shortest_path"
    C: int = DEFAULT_C
    max_spacing: float | None = None
    _goal_pose: Sequence[float] | None = field(default=None, init=False)

    @property
    def strategy(self) -> str:
        return f"oracle_{self.kind}"

    def reset(self, goal_embedding, goal_pose, rng):
        self._goal_pose = goal_pose

    def step(self, pose, obs):
        return build_oracle_context(self.scene, self.kind, pose, self._goal_pose, self.C, self.max_spacing)


def context_dump(step: int, ctx: Context, selected: int | None, soft_weights: Sequence[float] | None) -> str:
    """One JSON line describing a step's context."""
    return json.dumps({
        "step": step,
        "strategy": ctx.strategy,
        "slots": list(ctx.slots) if ctx.slots is not None else [list(p) for p in ctx.poses],
        "selected": selected,
        "soft_weights": None if soft_weights is None else [float(w) for w in soft_weights],
    })
