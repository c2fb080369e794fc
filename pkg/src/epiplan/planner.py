"""Context-matched retrieval over the latent grid and action selection."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .encoder import quantize_batch
from .memory import LatentGrid, TrajectoryPoint, ngrid_max
from .sim import Action

BRANCHES = ("copy-best", "least-explored", "random", "global-fallback")


@dataclass(frozen=True)
class PlannerParams:
    p: int = 3
    n: int = 1
    q: int = 10
    k: int = 10
    val_thresh: float = 0.0
    threshold_mode: str = "constant"
    mode: str = "train"
    steering_set: tuple = (-1.0, 0.0, 1.0)
    acceleration: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.p < 1 or self.n < 0 or self.q < 1 or self.k < 0:
            raise ValueError("need p >= 1, n >= 0, q >= 1, k >= 0")
        if self.threshold_mode not in ("constant", "percentile10"):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.steering_set:
            raise ValueError("steering_set is empty")


class History:
    """The last ``p`` encodings, oldest first."""

    def __init__(self, p: int, first=None):
        self.p = p
        self._frames: deque = deque(maxlen=p)
        if first is not None:
            self.reset(first)

    def reset(self, first) -> None:
        self._frames.clear()
        for _ in range(self.p):
            self._frames.append(np.asarray(first, dtype=float))

    def push(self, e) -> None:
        if not self._frames:
            self.reset(e)
        else:
            self._frames.append(np.asarray(e, dtype=float))

    @property
    def latest(self) -> np.ndarray:
        return self._frames[-1]

    def __len__(self) -> int:
        return len(self._frames)

    def array(self) -> np.ndarray:
        return np.array(self._frames, dtype=float)


def _as_frames(h) -> np.ndarray:
    arr = h.array() if isinstance(h, History) else np.asarray(h, dtype=float)
    if arr.ndim == 1:
        arr = arr[None]
    return arr


def _pad_oldest(arr: np.ndarray, length: int) -> np.ndarray:
    if len(arr) >= length:
        return arr[len(arr) - length:]
    return np.concatenate([np.repeat(arr[:1], length - len(arr), axis=0), arr])


def batch_context_distance(hists: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Context distance from each of ``hists`` (N, p, m) to ``query`` (p, m).

    Terms are added in a fixed order, oldest frame first and latent dimensions
    in index order, so that exact ties stay ties whatever the batch layout.
    """
    diff = np.asarray(hists, dtype=float) - np.asarray(query, dtype=float)
    total = np.zeros(diff.shape[0])
    for f in range(diff.shape[1]):
        frame = np.zeros(diff.shape[0])
        for j in range(diff.shape[2]):
            frame = frame + diff[:, f, j] * diff[:, f, j]
        total = total + frame
    return total


def context_distance(h1, h2) -> float:
    """Sum over aligned frames of the squared L2 distance between encodings."""
    a, b = _as_frames(h1), _as_frames(h2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("histories must be non-empty")
    length = max(len(a), len(b))
    a, b = _pad_oldest(a, length), _pad_oldest(b, length)
    return float(batch_context_distance(a[None], b)[0])


def _ranked(grid: LatentGrid, h, n, p: int):
    """Candidate indices ordered by (context distance, trajectory_id, step_index)."""
    if not grid.tps:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    query = _pad_oldest(_as_frames(h), p)
    coord = quantize_batch(query[-1], grid.range, grid.g)[0]
    idx = grid.indices_near(coord, n)
    if len(idx) == 0:
        return idx, np.zeros(0)
    arr = grid.arrays(p)
    dist = batch_context_distance(arr["hist"][idx], query)
    order = np.lexsort((arr["step"][idx], arr["traj"][idx], dist))
    return idx[order], dist[order]


def neighbors(grid: LatentGrid, h, n=1, q: int = 10, p: int | None = None) -> list:
    """Up to ``q`` points within Chebyshev radius ``n`` (``math.inf`` for the whole
    grid) of the query cell, closest in context first."""
    p = len(_as_frames(h)) if p is None else p
    idx, _ = _ranked(grid, h, n, p)
    return [grid.tps[i] for i in idx[:q]]


def snap_steering(value: float, steering_set) -> float:
    return min(steering_set, key=lambda s: (abs(s - value), s))


def least_explored(cands, steering_set, rng: np.random.Generator, acceleration: float = 0.0) -> Action:
    """The steering value seen least often among the candidates; ties broken at random."""
    steering_set = tuple(steering_set)
    counts = {s: 0 for s in steering_set}
    for tp in cands:
        counts[snap_steering(tp.action.steering, steering_set)] += 1
    low = min(counts.values())
    ties = [s for s in steering_set if counts[s] == low]
    choice = ties[0] if len(ties) == 1 else ties[int(rng.integers(len(ties)))]
    return Action(choice, acceleration)


@dataclass
class Decision:
    action: Action
    branch: str
    threshold: float
    candidates: list = field(default_factory=list)

    def to_json(self, **extra) -> str:
        row = {
            **extra,
            "branch": self.branch,
            "steering": self.action.steering,
            "acceleration": self.action.acceleration,
            "threshold": self.threshold,
            "candidates": [
                {"trajectory_id": t, "step_index": s, "distance": d, "ngrid_max": v}
                for t, s, d, v in self.candidates
            ],
        }
        return json.dumps(row, sort_keys=True)


def _sorted_by_value(grid, idx, dist, k):
    scored = [(ngrid_max(grid.tps[i], k), d, grid.tps[i]) for i, d in zip(idx, dist)]
    scored.sort(key=lambda x: (-x[0], x[1], x[2].trajectory_id, x[2].step_index))
    return scored


def threshold_for(grid: LatentGrid, params: PlannerParams) -> float:
    if params.threshold_mode == "percentile10":
        return grid.value_percentile(10)
    return params.val_thresh


def select_action(grid: LatentGrid, h, params: PlannerParams,
                  rng: np.random.Generator | None = None) -> tuple[Action, Decision]:
    rng = np.random.default_rng(params.rng_seed) if rng is None else rng
    idx, dist = _ranked(grid, h, params.n, params.p)
    idx, dist = idx[:params.q], dist[:params.q]
    best = _sorted_by_value(grid, idx, dist, params.k)
    thresh = threshold_for(grid, params)

    def trace(rows):
        return [(tp.trajectory_id, tp.step_index, float(d), float(v)) for v, d, tp in rows]

    if best and best[0][0] >= thresh:
        tp = best[0][2]
        return tp.action, Decision(tp.action, "copy-best", thresh, trace(best))

    if params.mode == "train":
        if not best:
            action = Action(params.steering_set[int(rng.integers(len(params.steering_set)))],
                            params.acceleration)
            return action, Decision(action, "random", thresh, [])
        action = least_explored([tp for _, _, tp in best], params.steering_set, rng, params.acceleration)
        return action, Decision(action, "least-explored", thresh, trace(best))

    idx, dist = _ranked(grid, h, math.inf, params.p)
    if len(idx) == 0:
        raise RuntimeError("global fallback found no stored trajectory points")
    best = _sorted_by_value(grid, idx[:params.q], dist[:params.q], params.k)
    tp = best[0][2]
    return tp.action, Decision(tp.action, "global-fallback", thresh, trace(best))


class Planner:
    """Stateful wrapper owning the seeded generator used for exploration."""

    def __init__(self, params: PlannerParams):
        self.params = params
        self.rng = np.random.default_rng(params.rng_seed)

    def select(self, grid: LatentGrid, h) -> tuple[Action, Decision]:
        return select_action(grid, h, self.params, self.rng)
