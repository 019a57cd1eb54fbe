"""Occupancy-grid scenes, pose features and geodesic distances."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

CELL = 0.25          # metres per grid cell
DEFAULT_DIM = 256
DEFAULT_SIGMA = 2.0  # RFF bandwidth, metres
KINDS = ("open", "corridor", "maze")


class SceneError(ValueError):
    pass


class Pose(NamedTuple):
    x: float
    y: float


def cell_center(row: int, col: int) -> Pose:
    return Pose(float((col + 0.5) * CELL), float((row + 0.5) * CELL))


def pose_cell(pose: Sequence[float]) -> tuple[int, int]:
    return int(math.floor(pose[1] / CELL)), int(math.floor(pose[0] / CELL))


@dataclass(frozen=True)
class SceneObject:
    category: str
    pose: Pose


@dataclass(eq=False)
class Scene:
    """Grid world; ``occupied[r, c]`` is True for walls.

    Features are random Fourier features of the metric pose.  With
    ``aliasing > 0`` that fraction of the basis is evaluated on a folded pose
    (mirror-folded about room centres with period ``alias_period``), so
    distant rooms share part of their appearance.
    """

    scene_id: str
    occupied: np.ndarray
    rff_seed: int = 0
    sigma: float = DEFAULT_SIGMA
    dim: int = DEFAULT_DIM
    aliasing: float = 0.0
    alias_period: float = 0.0
    alias_offset: tuple[float, float] = (0.0, 0.0)
    objects: tuple[SceneObject, ...] = ()
    _dist_cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.occupied = np.asarray(self.occupied, dtype=bool)
        if self.occupied.ndim != 2:
            raise SceneError("occupancy grid must be 2-d")
        if not (~self.occupied).any():
            raise SceneError("scene has no navigable cell")
        if not 0.0 <= self.aliasing < 1.0:
            raise SceneError("aliasing fraction must lie in [0, 1)")
        if self.aliasing > 0 and self.alias_period <= 0:
            raise SceneError("aliasing needs a positive alias_period")

    @property
    def height(self) -> int:
        return self.occupied.shape[0]

    @property
    def width(self) -> int:
        return self.occupied.shape[1]

    # basis ---------------------------------------------------------------

    @cached_property
    def rff_basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(frequencies [D, 2] rad/m, phases [D], folded mask [D]).

        Frequencies come in quadrature pairs: each draw is used twice with
        phases b and b - pi/2, so the feature inner product depends on the
        pose offset only and the vector norm is constant.  Draws are
        quasi-random (stratified radii, golden-angle directions) so the
        implied kernel stays close to the Gaussian even at D = 256.
        """
        rng = np.random.default_rng(self.rff_seed)
        half = (self.dim + 1) // 2
        n_fold = int(round(self.aliasing * half))
        omega = np.concatenate([_gaussian_frequencies(half - n_fold, self.sigma, rng),
                                _gaussian_frequencies(n_fold, self.sigma, rng)])
        folded = np.arange(half) >= half - n_fold
        order = rng.permutation(half)
        omega, folded = omega[order], folded[order]
        phase = rng.uniform(0.0, 2 * np.pi, size=half)
        omega = np.repeat(omega, 2, axis=0)[: self.dim]
        phase = np.stack([phase, phase - np.pi / 2], axis=1).ravel()[: self.dim]
        folded = np.repeat(folded, 2)[: self.dim]
        return omega, phase, folded

    def fold(self, xy: np.ndarray) -> np.ndarray:
        """Mirror-fold coordinates: period 2P, mirror lines at offset + kP."""
        p = self.alias_period
        off = np.asarray(self.alias_offset)
        u = np.mod(np.asarray(xy, dtype=np.float64) - off, 2 * p)
        return np.where(u > p, 2 * p - u, u)

    def _raw_features(self, xy: np.ndarray) -> np.ndarray:
        omega, phase, folded = self.rff_basis
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        arg = xy @ omega.T + phase
        if folded.any():
            arg[:, folded] = self.fold(xy) @ omega[folded].T + phase[folded]
        v = np.cos(arg)
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    @cached_property
    def feature_table(self) -> np.ndarray:
        """Unit feature vector of every cell centre, float32 [H, W, D]."""
        rows, cols = np.nonzero(~self.occupied)
        xy = np.stack([(cols + 0.5) * CELL, (rows + 0.5) * CELL], axis=1)
        table = np.zeros((self.height, self.width, self.dim), dtype=np.float32)
        table[rows, cols] = self._raw_features(xy).astype(np.float32)
        return table

    def features(self, pose: Sequence[float]) -> np.ndarray:
        """Unit feature vector observed at ``pose`` (must be navigable)."""
        r, c = pose_cell(pose)
        if not self.navigable_cell(r, c):
            raise SceneError(f"pose {tuple(pose)} is not navigable")
        cx, cy = cell_center(r, c)
        if abs(pose[0] - cx) < 1e-12 and abs(pose[1] - cy) < 1e-12:
            return self.feature_table[r, c]
        return self._raw_features(np.array([pose[0], pose[1]]))[0].astype(np.float32)

    # grid ------------------------------------------------------------------

    def navigable_cell(self, r: int, c: int) -> bool:
        return 0 <= r < self.height and 0 <= c < self.width and not self.occupied[r, c]

    def navigable(self, pose: Sequence[float]) -> bool:
        return self.navigable_cell(*pose_cell(pose))

    @cached_property
    def free_cells(self) -> np.ndarray:
        return np.argwhere(~self.occupied)

    def distance_field(self, cell: tuple[int, int]) -> np.ndarray:
        """4-connected BFS step counts from ``cell``; -1 where unreachable."""
        cell = (int(cell[0]), int(cell[1]))
        hit = self._dist_cache.get(cell)
        if hit is not None:
            return hit
        if not self.navigable_cell(*cell):
            raise SceneError(f"cell {cell} is not navigable")
        h, w = self.occupied.shape
        dist = np.full((h, w), -1, dtype=np.int64)
        dist[cell] = 0
        queue = deque([cell])
        occ = self.occupied
        while queue:
            r, c = queue.popleft()
            d = dist[r, c] + 1
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= rr < h and 0 <= cc < w and not occ[rr, cc] and dist[rr, cc] < 0:
                    dist[rr, cc] = d
                    queue.append((rr, cc))
        if len(self._dist_cache) > 4096:
            self._dist_cache.clear()
        self._dist_cache[cell] = dist
        return dist

    # io --------------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "width": self.width,
            "height": self.height,
            "cells": self.occupied.astype(np.uint8).ravel().tolist(),
            "rff_seed": self.rff_seed,
            "sigma": self.sigma,
            "dim": self.dim,
            "aliasing": self.aliasing,
            "alias_period": self.alias_period,
            "alias_offset": list(self.alias_offset),
            "objects": [{"category": o.category, "pose": list(o.pose)} for o in self.objects],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Scene":
        w, h = int(data["width"]), int(data["height"])
        cells = np.asarray(data["cells"], dtype=np.uint8)
        if cells.size != w * h:
            raise SceneError(f"cells has {cells.size} entries, expected {w * h}")
        return cls(
            scene_id=str(data["scene_id"]),
            occupied=cells.reshape(h, w).astype(bool),
            rff_seed=int(data.get("rff_seed", 0)),
            sigma=float(data.get("sigma", DEFAULT_SIGMA)),
            dim=int(data.get("dim", DEFAULT_DIM)),
            aliasing=float(data.get("aliasing", 0.0)),
            alias_period=float(data.get("alias_period", 0.0)),
            alias_offset=tuple(data.get("alias_offset", (0.0, 0.0))),
            objects=tuple(SceneObject(o["category"], Pose(*o["pose"])) for o in data.get("objects", [])),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _gaussian_frequencies(n: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` 2-d frequencies for an isotropic Gaussian kernel of bandwidth ``sigma``.

    Radii are stratified quantiles of the Rayleigh law and directions follow
    a randomly rotated golden-angle sequence.
    """
    if n == 0:
        return np.zeros((0, 2))
    u = (np.arange(n) + rng.random(n)) / n
    radius = np.sqrt(-2.0 * np.log1p(-u)) / sigma
    angle = (np.arange(n) * np.pi * (3.0 - np.sqrt(5.0)) + rng.uniform(0.0, 2 * np.pi)) % (2 * np.pi)
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)


def features(scene: Scene, pose: Sequence[float]) -> np.ndarray:
    return scene.features(pose)


def geodesic(scene: Scene, a: Sequence[float], b: Sequence[float]) -> float:
    """Shortest 4-connected grid path length in metres; ``inf`` if unreachable."""
    ca, cb = pose_cell(a), pose_cell(b)
    for cell, pose in ((ca, a), (cb, b)):
        if not scene.navigable_cell(*cell):
            raise SceneError(f"pose {tuple(pose)} is not navigable")
    d = scene.distance_field(cb)[ca]
    return math.inf if d < 0 else float(d * CELL)


def geodesic_path(scene: Scene, a: Sequence[float], b: Sequence[float],
                  rng: np.random.Generator | None = None) -> list[Pose]:
    """Cell-centre poses of one shortest path from ``a`` to ``b`` (inclusive).

    Without ``rng`` the first distance-decreasing move in N, S, W, E order is
    taken; with it, a uniformly random one.
    """
    ca, cb = pose_cell(a), pose_cell(b)
    dist = scene.distance_field(cb)
    if dist[ca] < 0:
        raise SceneError("goal unreachable")
    r, c = ca
    out = [cell_center(r, c)]
    while (r, c) != cb:
        steps = [(r + dr, c + dc) for dr, dc in MOVES.values()
                 if scene.navigable_cell(r + dr, c + dc) and dist[r + dr, c + dc] == dist[r, c] - 1]
        r, c = steps[0] if rng is None or len(steps) == 1 else steps[int(rng.integers(len(steps)))]
        out.append(cell_center(r, c))
    return out


# row/col deltas; north is decreasing row
MOVES = {"N": (-1, 0), "S": (1, 0), "W": (0, -1), "E": (0, 1)}


# generation ---------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    kind: str = "maze"
    seed: int = 0
    room_cells: int = 10       # target room side for maze/corridor kinds
    wall_cells: int = 1        # interior wall thickness
    door_cells: int = 2
    extra_door_prob: float = 0.25
    sigma: float = DEFAULT_SIGMA
    dim: int = DEFAULT_DIM
    aliasing: float = 0.0
    categories: tuple[str, ...] = ()
    scene_id: str | None = None

    @classmethod
    def from_json(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        if "categories" in data:
            data["categories"] = tuple(data["categories"])
        return cls(**data)


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _room_layout(length: int, room: int, wall: int) -> tuple[list[tuple[int, int]], int]:
    """Room spans [start, stop) along one axis inside a 1-cell border."""
    inner = length - 2
    count = max(1, (inner + wall) // (room + wall))
    while count > 1 and (inner - (count - 1) * wall) < 2 * count:
        count -= 1
    sizes = _split(inner - (count - 1) * wall, count)
    spans, pos = [], 1
    for s in sizes:
        spans.append((pos, pos + s))
        pos += s + wall
    return spans, wall


def synth_scene(spec: SceneSpec) -> Scene:
    """Deterministic scene from a spec: open room, corridor chain or maze."""
    if spec.width < 8 or spec.height < 8:
        raise SceneError("scenes must be at least 8x8 cells")
    if spec.kind not in KINDS:
        raise SceneError(f"unknown scene kind {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    occ = np.ones((h, w), dtype=bool)
    alias_period, alias_offset = 0.0, (0.0, 0.0)
    if spec.kind == "open":
        occ[1:-1, 1:-1] = False
        rooms = [((1, h - 1), (1, w - 1))]
    else:
        wall = max(1, spec.wall_cells)
        # fit the wall to small grids: two rooms of >= 2 cells must remain
        while wall > 1 and (max(w, h) - 2 - wall) < 4:
            wall -= 1
        cols, _ = _room_layout(w, spec.room_cells, wall)
        rows, _ = _room_layout(h, spec.room_cells, wall)
        if spec.kind == "corridor":
            # a single chain of rooms along the longer axis
            if w >= h:
                rows = [(1, h - 1)]
            else:
                cols = [(1, w - 1)]
        if len(rows) * len(cols) < 2:
            # force a split along the longer axis
            if w >= h:
                cols = _force_two(w, wall)
            else:
                rows = _force_two(h, wall)
        grid = {}
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                occ[r0:r1, c0:c1] = False
                grid[i, j] = ((r0, r1), (c0, c1))
        rooms = list(grid.values())
        links = _door_links(len(rows), len(cols), spec.kind, spec.extra_door_prob, rng)
        for (a, b) in links:
            _carve_door(occ, grid[a], grid[b], spec.door_cells, rng)
        pitch_x = (cols[1][0] - cols[0][0]) if len(cols) > 1 else (cols[0][1] - cols[0][0])
        pitch_y = (rows[1][0] - rows[0][0]) if len(rows) > 1 else (rows[0][1] - rows[0][0])
        alias_period = min(pitch_x, pitch_y) * CELL
        alias_offset = (0.5 * (cols[0][0] + cols[0][1]) * CELL, 0.5 * (rows[0][0] + rows[0][1]) * CELL)
    if spec.kind == "open":
        alias_period = 0.5 * (w - 2) * CELL
        alias_offset = (0.5 * w * CELL, 0.5 * h * CELL)
    objects = _place_objects(occ, rooms, spec.categories, rng)
    return Scene(
        scene_id=spec.scene_id or f"{spec.kind}-{spec.seed}",
        occupied=occ,
        rff_seed=int(rng.integers(2**31)),
        sigma=spec.sigma,
        dim=spec.dim,
        aliasing=spec.aliasing,
        alias_period=alias_period if spec.aliasing > 0 else 0.0,
        alias_offset=alias_offset if spec.aliasing > 0 else (0.0, 0.0),
        objects=objects,
    )


def _force_two(length: int, wall: int) -> list[tuple[int, int]]:
    inner = length - 2 - wall
    a = inner // 2
    return [(1, 1 + a), (1 + a + wall, length - 1)]


def _door_links(n_rows: int, n_cols: int, kind: str, extra_prob: float, rng) -> list:
    """Random spanning tree over the room grid, plus a few extra doors."""
    if kind == "corridor":
        return [((0, j), (0, j + 1)) for j in range(n_cols - 1)] + \
               [((i, 0), (i + 1, 0)) for i in range(n_rows - 1)]
    cells = [(i, j) for i in range(n_rows) for j in range(n_cols)]
    adj = []
    for i, j in cells:
        if i + 1 < n_rows:
            adj.append(((i, j), (i + 1, j)))
        if j + 1 < n_cols:
            adj.append(((i, j), (i, j + 1)))
    order = rng.permutation(len(adj))
    parent = {c: c for c in cells}

    def find(c):
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    links = []
    for k in order:
        a, b = adj[k]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            links.append((a, b))
        elif rng.random() < extra_prob:
            links.append((a, b))
    return links


def _carve_door(occ, room_a, room_b, door: int, rng) -> None:
    (ar0, ar1), (ac0, ac1) = room_a
    (br0, br1), (bc0, bc1) = room_b
    side_by_side = ar0 == br0
    lo, hi = (ar0, ar1) if side_by_side else (ac0, ac1)
    span = hi - lo
    d = min(door, max(1, span - 2))
    # keep the doorway off the room corners when there is room to
    first, last = (lo + 1, hi - 1 - d) if span - d >= 2 else (lo, hi - d)
    start = int(rng.integers(first, last + 1))
    if side_by_side:
        occ[start:start + d, ac1:bc0] = False
    else:
        occ[ar1:br0, start:start + d] = False


def _place_objects(occ, rooms, categories, rng) -> tuple[SceneObject, ...]:
    objects = []
    for cat in categories:
        (r0, r1), (c0, c1) = rooms[int(rng.integers(len(rooms)))]
        r = int(rng.integers(r0, r1))
        c = int(rng.integers(c0, c1))
        objects.append(SceneObject(cat, cell_center(r, c)))
    return tuple(objects)
