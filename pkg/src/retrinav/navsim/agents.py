"""Scripted agents, per-step reward and SR/SPL metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataset import SUCCESS_RADIUS, Episode
from .scene import CELL, MOVES, Pose, Scene, SceneError, geodesic, geodesic_path, pose_cell

SUCCESS_REWARD = 10.0
SLACK = 0.01
AGENT_KINDS = ("oracle", "goal_greedy", "context_follower")
ACTIONS = ("N", "S", "E", "W", "STOP")


class AgentError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    stop_threshold: float = 0.95      # cosine to the goal embedding that triggers STOP
    arrival_threshold: float = 0.90   # cosine at which a waypoint counts as reached
    max_steps: int = 500


@dataclass
class AgentTrace:
    poses: list[Pose]
    actions: list[str]
    rewards: list[float]
    success: bool
    path_length: float
    shortest_length: float
    agent: str = ""
    episode: int = -1
    scene_id: str = ""

    @property
    def steps(self) -> int:
        return len(self.actions)

    def to_json(self) -> dict:
        return {
            "agent": self.agent,
            "scene": self.scene_id,
            "episode": self.episode,
            "success": bool(self.success),
            "path_length": float(self.path_length),
            "shortest_length": float(self.shortest_length),
            "actions": "".join(a[0] if a != "STOP" else "." for a in self.actions),
            "poses": [[float(p[0]), float(p[1])] for p in self.poses],
            "rewards": [float(r) for r in self.rewards],
        }


def step_reward(prev_geo: float, new_geo: float, success: bool) -> float:
    """Success bonus minus the increase in geodesic distance minus slack."""
    if prev_geo < 0 or new_geo < 0:
        raise ValueError("geodesic distances must be non-negative")
    return SUCCESS_REWARD * (1.0 if success else 0.0) - (new_geo - prev_geo) - SLACK


class _Episode:
    """Book-keeping shared by all agent kinds."""

    def __init__(self, scene: Scene, episode: Episode):
        self.scene = scene
        self.ep = episode
        self.goal_dist = scene.distance_field(pose_cell(episode.goal))
        self.pose = Pose(*episode.start)
        self.poses = [self.pose]
        self.actions: list[str] = []
        self.rewards: list[float] = []
        self.moves = 0
        self.done = False
        self.success = False

    def geo(self, pose) -> float:
        d = self.goal_dist[pose_cell(pose)]
        return math.inf if d < 0 else float(d * CELL)

    def neighbours(self) -> list[tuple[str, Pose]]:
        r, c = pose_cell(self.pose)
        out = []
        for name, (dr, dc) in MOVES.items():
            if self.scene.navigable_cell(r + dr, c + dc):
                out.append((name, Pose((c + dc + 0.5) * CELL, (r + dr + 0.5) * CELL)))
        return out

    def move(self, name: str, new_pose: Pose) -> None:
        prev = self.geo(self.pose)
        self.pose = new_pose
        self.poses.append(new_pose)
        self.actions.append(name)
        self.moves += 1
        self.rewards.append(step_reward(prev, self.geo(new_pose), False))

    def stop(self) -> None:
        g = self.geo(self.pose)
        self.success = bool(g <= SUCCESS_RADIUS + 1e-9)
        self.poses.append(self.pose)
        self.actions.append("STOP")
        self.rewards.append(step_reward(g, g, self.success))
        self.done = True

    def trace(self, agent: str) -> AgentTrace:
        return AgentTrace(self.poses, self.actions, self.rewards, self.success,
                          self.moves * CELL, self.ep.geodesic_start, agent)


def _climb(ep: _Episode, target: np.ndarray) -> tuple[str, Pose] | None:
    """Best neighbour by cosine to ``target`` if it beats staying put."""
    here = float(ep.scene.features(ep.pose) @ target)
    best, best_s = None, here
    for name, pose in ep.neighbours():
        s = float(ep.scene.features(pose) @ target)
        if s > best_s:
            best, best_s = (name, pose), s
    return best


def run_agent(scene: Scene, episode: Episode, kind: str, context=None,
              config: AgentConfig | None = None, rng: np.random.Generator | None = None,
              on_step: Callable | None = None) -> AgentTrace:
    """Roll out one scripted agent.

    ``oracle`` walks the geodesic and stops on the goal cell.  ``goal_greedy``
    hill-climbs feature similarity to the goal embedding.  ``context_follower``
    hill-climbs toward the earliest fresh context slot it has not reached yet,
    falling back to later slots and then the goal when no move improves.
    Both non-oracle agents stop once similarity to the goal reaches
    ``stop_threshold`` or when no move improves toward any target.
    """
    config = config or AgentConfig()
    if config.max_steps < 1:
        raise AgentError("max_steps must be >= 1")
    if kind not in AGENT_KINDS:
        raise AgentError(f"unknown agent kind {kind!r}")
    rng = np.random.default_rng() if rng is None else rng
    ep = _Episode(scene, episode)
    goal = np.asarray(episode.goal_embedding, dtype=np.float64)

    if kind == "oracle":
        if not math.isfinite(ep.geo(ep.pose)):
            raise AgentError("episode is not solvable")
        path = geodesic_path(scene, episode.start, episode.goal)
        for a, b in zip(path, path[1:]):
            if ep.moves >= config.max_steps - 1:
                break
            (r0, c0), (r1, c1) = pose_cell(a), pose_cell(b)
            name = next(n for n, d in MOVES.items() if d == (r1 - r0, c1 - c0))
            ep.move(name, b)
        ep.stop()
        return ep.trace(kind)

    if kind == "context_follower":
        if context is None:
            raise AgentError("context_follower needs a context provider")
        context.reset(goal, episode.goal, rng)

    for step in range(config.max_steps):
        obs = scene.features(ep.pose).astype(np.float64)
        if obs @ goal >= config.stop_threshold:
            ep.stop()
            break
        if kind == "goal_greedy":
            choice = _climb(ep, goal)
        else:
            ctx = context.step(ep.pose, obs)
            vecs = np.asarray(ctx.vectors, dtype=np.float64)
            sims = vecs @ obs
            fresh = ctx.fresh or len(ctx)
            pending = [i for i in range(fresh) if sims[i] < config.arrival_threshold]
            if on_step is not None:
                on_step(step, ctx, sims)
            choice = None
            for i in pending:
                choice = _climb(ep, vecs[i])
                if choice is not None:
                    break
            if choice is None:
                choice = _climb(ep, goal)
        if choice is None:
            ep.stop()
            break
        ep.move(*choice)
    # running out of steps without STOP is a failure
    return ep.trace(kind)


@dataclass(frozen=True)
class Metrics:
    SR: float
    SPL: float
    N: int


def compute_metrics(traces: Sequence[AgentTrace]) -> Metrics:
    """Success rate and success weighted by path length, both in percent."""
    if not traces:
        raise ValueError("no traces")
    n = len(traces)
    sr = 100.0 * sum(1 for t in traces if t.success) / n
    spl = 100.0 / n * math.fsum(
        t.shortest_length / max(t.path_length, t.shortest_length)
        for t in traces if t.success)
    return Metrics(sr, float(spl), n)


METRIC_COLUMNS = ("agent", "suite", "SR", "SPL", "N")


def write_metrics_csv(path, rows: Iterable[tuple[str, str, Metrics]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for agent, suite, m in rows:
            w.writerow([agent, suite, f"{m.SR:.4f}", f"{m.SPL:.4f}", m.N])


def write_traces(path, traces: Iterable[AgentTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_json()) + "\n")
