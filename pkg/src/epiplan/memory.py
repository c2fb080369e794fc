"""Episodic memory: trajectory database, return augmentation and the latent grid."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import EncoderParams, RangeParams, encode, encode_batch, fit_range, quantize_batch
from .sim import Action, Observation


@dataclass(eq=False)
class StepRecord:
    """One environment step: the observation the action was taken from, the
    action, and the reward it earned."""

    observation: Observation
    action: Action
    reward: float
    episode_id: int
    step_index: int
    done: bool
    value: float = 0.0
    unsafe: bool = False
    encoding: np.ndarray | None = None


@dataclass
class Episode:
    episode_id: int
    phase: str
    records: list


class TrajectoryDB:
    """Append-only store of augmented episodes across all phases."""

    def __init__(self, gamma: float = 0.95):
        self.gamma = gamma
        self.episodes: list[Episode] = []

    def __len__(self) -> int:
        return sum(len(ep.records) for ep in self.episodes)

    def next_episode_id(self) -> int:
        return len(self.episodes)

    def append(self, records, phase: str = "") -> int:
        if not records:
            raise ValueError("cannot append an empty episode")
        eid = self.next_episode_id()
        steps = [r.step_index for r in records]
        if any(r.episode_id != eid for r in records):
            raise ValueError(f"records must carry episode_id {eid}")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("step_index must increase within an episode")
        self.episodes.append(Episode(eid, phase, list(records)))
        return eid

    def records(self):
        return itertools.chain.from_iterable(ep.records for ep in self.episodes)

    def episode(self, episode_id: int) -> Episode:
        return self.episodes[episode_id]

    def observation_arrays(self):
        recs = list(self.records())
        if not recs:
            return np.zeros((0, 0, 0), dtype=np.uint8), np.zeros(0)
        return (np.stack([r.observation.mask for r in recs]),
                np.array([r.observation.speed for r in recs], dtype=float))


def augment(episode, gamma: float, unsafe_offset: int = 0, failed: bool = False) -> list:
    """Fill discounted returns by backward recursion and label unsafe frames.

    The last ``unsafe_offset`` records are flagged only when the episode ended
    in failure.
    """
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    if unsafe_offset < 0:
        raise ValueError("unsafe_offset must be >= 0")
    if not episode:
        raise ValueError("episode is empty")
    n = len(episode)
    values = [0.0] * n
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = episode[t].reward + gamma * acc
        values[t] = acc
    cut = n - unsafe_offset if failed else n
    return [replace(rec, value=values[t], unsafe=t >= cut) for t, rec in enumerate(episode)]


@dataclass(eq=False)
class TrajectoryPoint:
    encoding: np.ndarray
    action: Action
    reward: float
    value: float
    grid: tuple
    step_index: int
    trajectory_id: int
    unsafe: bool = False
    index: int = -1
    next: TrajectoryPoint | None = field(default=None, repr=False)
    prev: TrajectoryPoint | None = field(default=None, repr=False)
    kstep: TrajectoryPoint | None = field(default=None, repr=False)


class GridCell:
    __slots__ = ("tps", "_sum")

    def __init__(self):
        self.tps: list[TrajectoryPoint] = []
        self._sum = 0.0

    def add(self, tp: TrajectoryPoint) -> None:
        self.tps.append(tp)
        self._sum += tp.value

    @property
    def cell_value(self) -> float:
        return self._sum / len(self.tps) if self.tps else 0.0


class LatentGrid:
    """Sparse g^m lattice of cells holding trajectory points."""

    def __init__(self, g: int = 100, m: int = 2, range_: RangeParams | None = None,
                 k: int = 10, encoder_version: int = 0):
        self.g = g
        self.m = m
        self.range = range_
        self.k = k
        self.encoder_version = encoder_version
        self.cells: dict[tuple, GridCell] = {}
        self.tps: list[TrajectoryPoint] = []
        self._lookup: dict[tuple, TrajectoryPoint] = {}
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self.tps)

    def find(self, trajectory_id: int, step_index: int) -> TrajectoryPoint:
        return self._lookup[(trajectory_id, step_index)]

    def cell(self, coord) -> GridCell | None:
        return self.cells.get(tuple(coord))

    def add_point(self, tp: TrajectoryPoint) -> None:
        if len(tp.grid) != self.m or any(not 0 <= c < self.g for c in tp.grid):
            raise ValueError(f"grid coordinate {tp.grid} outside the {self.g}^{self.m} lattice")
        tp.index = len(self.tps)
        self.tps.append(tp)
        self._lookup[(tp.trajectory_id, tp.step_index)] = tp
        self.cells.setdefault(tp.grid, GridCell()).add(tp)
        self._cache.clear()

    def population(self) -> np.ndarray:
        out = np.zeros((self.g,) * self.m, dtype=np.int64)
        for coord, cell in self.cells.items():
            out[coord] = len(cell.tps)
        return out

    def values(self) -> np.ndarray:
        """Cell values; NaN where a cell holds no points."""
        out = np.full((self.g,) * self.m, np.nan)
        for coord, cell in self.cells.items():
            out[coord] = cell.cell_value
        return out

    def value_percentile(self, pct: float) -> float:
        key = ("pct", pct)
        if key not in self._cache:
            vals = [tp.value for tp in self.tps]
            self._cache[key] = float(np.percentile(vals, pct)) if vals else 0.0
        return self._cache[key]

    def arrays(self, p: int) -> dict:
        """Column views used by the vectorized planner: encodings, coordinates,
        p-frame histories (oldest first), ids and values."""
        key = ("arrays", p)
        if key not in self._cache:
            n = len(self.tps)
            enc = np.array([tp.encoding for tp in self.tps], dtype=float).reshape(n, self.m)
            # trajectories are inserted contiguously, so prev-walking is index arithmetic
            pos = np.empty(n, dtype=np.int64)
            for i, tp in enumerate(self.tps):
                pos[i] = pos[i - 1] + 1 if tp.prev is not None else 0
            idx = np.arange(n)
            back = np.arange(p - 1, -1, -1)
            hist_idx = idx[:, None] - np.minimum(back[None, :], pos[:, None])
            self._cache[key] = {
                "enc": enc,
                "coord": np.array([tp.grid for tp in self.tps], dtype=np.int64).reshape(n, self.m),
                "hist": enc[hist_idx],
                "traj": np.array([tp.trajectory_id for tp in self.tps], dtype=np.int64),
                "step": np.array([tp.step_index for tp in self.tps], dtype=np.int64),
                "value": np.array([tp.value for tp in self.tps], dtype=float),
            }
        return self._cache[key]

    def indices_near(self, coord, n) -> np.ndarray:
        """Indices of points within Chebyshev distance ``n`` of ``coord``."""
        if n is None or n == float("inf") or n >= self.g:
            return np.arange(len(self.tps))
        n = int(n)
        coord = tuple(int(c) for c in coord)
        out = []
        if (2 * n + 1) ** self.m <= len(self.cells):
            ranges = [range(max(c - n, 0), min(c + n, self.g - 1) + 1) for c in coord]
            for cc in itertools.product(*ranges):
                cell = self.cells.get(cc)
                if cell is not None:
                    out.extend(tp.index for tp in cell.tps)
        else:
            for cc, cell in self.cells.items():
                if max(abs(a - b) for a, b in zip(cc, coord)) <= n:
                    out.extend(tp.index for tp in cell.tps)
        return np.array(sorted(out), dtype=np.int64)


def tp_history(tp: TrajectoryPoint, p: int) -> np.ndarray:
    """The point's own last ``p`` encodings via backward links, padded with the
    trajectory's first frame."""
    frames = [tp.encoding]
    cur = tp
    while len(frames) < p:
        if cur.prev is not None:
            cur = cur.prev
        frames.append(cur.encoding)
    return np.array(frames[::-1], dtype=float)


def insert_trajectory(grid: LatentGrid, episode, encoder: EncoderParams | None = None,
                      encodings=None) -> LatentGrid:
    """Add one augmented episode as linked trajectory points.

    Encodings are computed with ``encoder`` unless given. An empty grid without
    a range adopts the range of this episode.
    """
    if not episode:
        return grid
    if encodings is None:
        if encoder is None:
            raise ValueError("need an encoder or precomputed encodings")
        masks = np.stack([r.observation.mask for r in episode])
        speeds = [r.observation.speed for r in episode]
        encodings = encode_batch(masks, speeds, encoder)
    encodings = np.asarray(encodings, dtype=float)
    if encodings.ndim != 2 or encodings.shape[1] != grid.m:
        raise ValueError(f"encodings must be {grid.m}-dimensional")
    if grid.range is None:
        grid.range = fit_range(encodings)
    coords = quantize_batch(encodings, grid.range, grid.g)
    tps = []
    for rec, e, c in zip(episode, encodings, coords):
        tps.append(TrajectoryPoint(e.copy(), rec.action, rec.reward, rec.value,
                                   tuple(int(v) for v in c), rec.step_index, rec.episode_id, rec.unsafe))
    for a, b in zip(tps, tps[1:]):
        a.next, b.prev = b, a
    last = len(tps) - 1
    for t, tp in enumerate(tps):
        tp.kstep = tps[min(t + grid.k, last)]
        grid.add_point(tp)
    return grid


def ngrid_max(tp: TrajectoryPoint, k: int) -> float:
    """Best value among ``tp`` and its next ``k`` successors (truncated at the end)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    best = tp.value
    cur = tp
    for _ in range(k):
        cur = cur.next
        if cur is None:
            break
        if cur.value > best:
            best = cur.value
    return best


def rebuild(db: TrajectoryDB, encoder: EncoderParams, g: int = 100, k: int = 10,
            version: int = 0) -> LatentGrid:
    """Re-encode every stored record, refit the range and repopulate a fresh grid."""
    if len(db) == 0:
        raise ValueError("cannot rebuild from an empty database")
    masks, speeds = db.observation_arrays()
    enc = encode_batch(masks, speeds, encoder)
    grid = LatentGrid(g, enc.shape[1], fit_range(enc), k, version)
    start = 0
    for ep in db.episodes:
        n = len(ep.records)
        insert_trajectory(grid, ep.records, encodings=enc[start:start + n])
        start += n
    return grid


def is_unsafe(obs: Observation, grid: LatentGrid, encoder: EncoderParams, n: int = 1) -> bool:
    """Flag of the nearest stored point in the query's n-cell neighbourhood."""
    if not grid.tps or grid.range is None:
        return False
    e = encode(obs, encoder)
    coord = quantize_batch(e, grid.range, grid.g)[0]
    idx = grid.indices_near(coord, n)
    if len(idx) == 0:
        return False
    arr = grid.arrays(1)
    d = ((arr["enc"][idx] - e) ** 2).sum(axis=1)
    order = np.lexsort((arr["step"][idx], arr["traj"][idx], d))
    return bool(grid.tps[idx[order[0]]].unsafe)
