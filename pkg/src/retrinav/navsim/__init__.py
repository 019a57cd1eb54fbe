"""Synthetic navigation world: scenes, datasets, scripted agents and metrics."""

from .agents import (AgentConfig, AgentTrace, Metrics, compute_metrics, run_agent, step_reward,
                     write_metrics_csv, write_traces)
from .dataset import Episode, generate_dataset, sample_episodes
from .scene import CELL, Pose, Scene, SceneError, SceneSpec, features, geodesic, geodesic_path, synth_scene

__all__ = [
    "AgentConfig", "AgentTrace", "CELL", "Episode", "Metrics", "Pose", "Scene", "SceneError",
    "SceneSpec", "compute_metrics", "features", "generate_dataset", "geodesic", "geodesic_path",
    "run_agent", "sample_episodes", "step_reward", "synth_scene", "write_metrics_csv", "write_traces",
]
