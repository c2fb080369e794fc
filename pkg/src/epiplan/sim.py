"""Procedural closed-loop racetrack and a kinematic-bicycle racing environment.

The environment mimics a top-down racing interface: continuous steering and
acceleration in [-1, 1], a binary road mask in the car frame as observation,
reward proportional to the percentage of the lap completed, and termination
with a penalty when at least two body corners leave the road.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

TRACK_HEADER = "# epiplan-track v1"


class Track:
    """Closed centerline polyline with a constant road width.

    ``centerline`` is an (N + 1, 2) array whose last row repeats the first.
    """

    def __init__(self, centerline, width: float, seed: int = 0):
        pts = np.array(centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
            raise ValueError("centerline must be an (N, 2) array with N >= 4")
        if np.max(np.abs(pts[0] - pts[-1])) > 1e-9:
            pts = np.vstack([pts, pts[:1]])
        pts[-1] = pts[0]
        if width <= 0:
            raise ValueError("width must be positive")
        self.centerline = pts
        self.width = float(width)
        self.seed = int(seed)

        self._a = pts[:-1]
        self._d = pts[1:] - pts[:-1]
        self._seglen = np.hypot(self._d[:, 0], self._d[:, 1])
        if np.any(self._seglen <= 0):
            raise ValueError("centerline has repeated consecutive points")
        self._inv_len2 = 1.0 / self._seglen ** 2
        self._max_seglen = float(self._seglen.max())
        self._cum = np.concatenate([[0.0], np.cumsum(self._seglen)])
        self.total_length = float(self._cum[-1])
        self._tree = cKDTree(self._a)

    @property
    def n_segments(self) -> int:
        return len(self._a)

    def _project(self, points: np.ndarray, k: int = 3):
        """Foot of perpendicular onto the nearest of the candidate segments.

        Candidates are the segments adjacent to the ``k`` nearest vertices.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        k = min(k, self.n_segments)
        _, idx = self._tree.query(pts, k=k)
        idx = np.asarray(idx).reshape(len(pts), k)
        cand = np.concatenate([idx, (idx - 1) % self.n_segments], axis=1)
        ax, ay = self._a[cand, 0], self._a[cand, 1]
        dx, dy = self._d[cand, 0], self._d[cand, 1]
        rx, ry = pts[:, :1] - ax, pts[:, 1:] - ay
        t = np.clip((rx * dx + ry * dy) * self._inv_len2[cand], 0.0, 1.0)
        ox, oy = rx - t * dx, ry - t * dy
        dist2 = ox * ox + oy * oy
        best = np.argmin(dist2, axis=1)
        rows = np.arange(len(pts))
        seg = cand[rows, best]
        tb = t[rows, best]
        cross = dx[rows, best] * ry[rows, best] - dy[rows, best] * rx[rows, best]
        dist = np.sqrt(dist2[rows, best])
        return dist, self._cum[seg] + tb * self._seglen[seg], seg, np.sign(cross)

    def distance(self, points) -> np.ndarray:
        """Unsigned distance from each point to the centerline."""
        return self._project(points)[0]

    def on_road(self, points) -> np.ndarray:
        """Exact for tracks whose curvature radius exceeds the width: the foot of
        any on-road point lies on a segment adjacent to its nearest vertex."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        bound = self.width / 2 + self._max_seglen
        near, _ = self._tree.query(pts, k=1, distance_upper_bound=bound)
        out = np.zeros(len(pts), dtype=bool)
        close = np.isfinite(near)
        if close.any():
            out[close] = self._project(pts[close], k=2)[0] <= self.width / 2
        return out

    def project(self, points):
        """Return (arclength, signed lateral offset, left positive) per point."""
        dist, s, _, sign = self._project(points)
        return s % self.total_length, dist * np.where(sign == 0, 1.0, sign)

    def pose_at(self, s: float) -> tuple[np.ndarray, float]:
        """Point and tangent heading at arclength ``s`` (wrapped)."""
        s = float(s) % self.total_length
        seg = int(np.searchsorted(self._cum, s, side="right") - 1)
        seg = min(max(seg, 0), self.n_segments - 1)
        t = (s - self._cum[seg]) / self._seglen[seg]
        d = self._d[seg]
        return self._a[seg] + t * d, math.atan2(d[1], d[0])

    def heading_at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float) % self.total_length
        seg = np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, self.n_segments - 1)
        d = self._d[seg]
        return np.arctan2(d[..., 1], d[..., 0])

    def save(self, path) -> None:
        lines = [
            TRACK_HEADER,
            f"seed {self.seed}",
            f"width {self.width!r}",
            f"length {self.total_length!r}",
        ]
        lines += [f"{x!r} {y!r}" for x, y in self.centerline.tolist()]
        _atomic_write(Path(path), "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> Track:
        text = Path(path).read_text().splitlines()
        if not text or text[0].strip() != TRACK_HEADER:
            raise ValueError(f"{path}:1: expected header {TRACK_HEADER!r}")
        meta = {}
        for lineno, line in enumerate(text[1:4], start=2):
            key, _, value = line.partition(" ")
            if key not in ("seed", "width", "length"):
                raise ValueError(f"{path}:{lineno}: unexpected key {key!r}")
            meta[key] = value
        pts = []
        for lineno, line in enumerate(text[4:], start=5):
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'x y'")
            pts.append((float(parts[0]), float(parts[1])))
        track = cls(pts, float(meta["width"]), int(meta["seed"]))
        if abs(track.total_length - float(meta["length"])) > 1e-6 * track.total_length:
            raise ValueError(f"{path}: stored length does not match centerline")
        return track


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _polar_loop(radii: np.ndarray, spacing: float, dense: int = 20000) -> np.ndarray:
    n = len(radii)
    knots = np.linspace(0.0, 2 * np.pi, n + 1)
    spline = CubicSpline(knots, np.append(radii, radii[0]), bc_type="periodic")
    theta = np.linspace(0.0, 2 * np.pi, dense + 1)
    r = spline(theta)
    xy = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    xy[-1] = xy[0]
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
    n_out = int(math.ceil(cum[-1] / spacing))
    s = np.linspace(0.0, cum[-1], n_out + 1)
    out = np.column_stack([np.interp(s, cum, xy[:, 0]), np.interp(s, cum, xy[:, 1])])
    out[-1] = out[0]
    return out


def _road_is_simple(centerline: np.ndarray, width: float) -> bool:
    """Reject roads whose boundaries would fold or touch another part of the loop."""
    d = np.diff(centerline, axis=0)
    seglen = np.hypot(d[:, 0], d[:, 1])
    ang = np.arctan2(d[:, 1], d[:, 0])
    turn = np.abs((np.roll(ang, -1) - ang + np.pi) % (2 * np.pi) - np.pi)
    mean_len = 0.5 * (seglen + np.roll(seglen, -1))
    if np.any(turn / mean_len > 1.0 / width):
        return False
    pts = centerline[:-1]
    cum = np.concatenate([[0.0], np.cumsum(seglen)])[:-1]
    total = seglen.sum()
    pairs = cKDTree(pts).query_pairs(1.5 * width, output_type="ndarray")
    if len(pairs):
        sep = np.abs(cum[pairs[:, 0]] - cum[pairs[:, 1]])
        sep = np.minimum(sep, total - sep)
        if np.any(sep > 4 * width):
            return False
    return True


def generate_track(
    seed: int,
    n_waypoints: int = 12,
    width: float = 8.0,
    *,
    radius: float = 50.0,
    perturbation: float = 0.3,
    spacing: float = 0.5,
    max_attempts: int = 100,
) -> Track:
    """Seeded smooth loop: waypoint radii perturbed around a circle, joined by a
    periodic cubic spline in polar form and resampled at uniform arclength.

    A road that folds onto itself is regenerated with the perturbation scale
    shrunk by 20%; ``ValueError`` after ``max_attempts`` failures.
    """
    if n_waypoints < 8:
        raise ValueError("n_waypoints must be >= 8")
    if width <= 0:
        raise ValueError("width must be positive")
    spacing = min(spacing, 1.0, width)
    jitter = np.random.default_rng(seed).uniform(-1.0, 1.0, n_waypoints)
    scale = perturbation
    for _ in range(max_attempts):
        centerline = _polar_loop(radius * (1.0 + scale * jitter), spacing)
        if _road_is_simple(centerline, width):
            return Track(centerline, width, seed)
        scale *= 0.8
    raise ValueError(f"could not generate a simple road for seed {seed}")


@dataclass(frozen=True)
class Action:
    steering: float = 0.0
    acceleration: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steering", min(max(float(self.steering), -1.0), 1.0))
        object.__setattr__(self, "acceleration", min(max(float(self.acceleration), -1.0), 1.0))


@dataclass(eq=False)
class Observation:
    mask: np.ndarray
    speed: float


@dataclass
class CarState:
    position: np.ndarray
    heading: float
    speed: float
    progress: float = 0.0


@dataclass
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EnvParams:
    dt: float = 0.1
    a_max: float = 4.0
    v_max: float = 20.0
    wheelbase: float = 2.5
    max_steer: float = 0.5
    car_length: float = 4.0
    car_width: float = 2.0
    penalty: float = -10.0
    max_steps: int = 1500
    laps: int = 1
    mask_shape: tuple = (32, 32)
    cell_size: float = 0.5


def mask_cell_centers(car: CarState, shape=(32, 32), cell_size: float = 0.5) -> np.ndarray:
    """World coordinates of every mask cell center, shape (H, W, 2).

    Row 0 is farthest ahead; column index grows to the car's right; the car
    sits at the middle of the bottom edge.
    """
    h, w = shape
    fwd = (h - np.arange(h) - 0.5) * cell_size
    lat = (np.arange(w) + 0.5 - w / 2) * cell_size
    c, s = math.cos(car.heading), math.sin(car.heading)
    f = np.array([c, s])
    r = np.array([s, -c])
    pos = np.asarray(car.position, dtype=float)
    return pos + fwd[:, None, None] * f + lat[None, :, None] * r


def render_mask(car: CarState, track: Track, shape=(32, 32), cell_size: float = 0.5) -> np.ndarray:
    centers = mask_cell_centers(car, shape, cell_size)
    on = track.on_road(centers.reshape(-1, 2))
    return on.reshape(shape).astype(np.uint8)


def car_corners(car: CarState, length: float = 4.0, width: float = 2.0) -> np.ndarray:
    c, s = math.cos(car.heading), math.sin(car.heading)
    f = np.array([c, s]) * length / 2
    r = np.array([s, -c]) * width / 2
    p = np.asarray(car.position, dtype=float)
    return np.array([p + f + r, p + f - r, p - f + r, p - f - r])


class RaceEnv:
    """Single-car environment on one ``Track``. Not thread-safe; use one per worker."""

    def __init__(self, track: Track, params: EnvParams | None = None):
        self.track = track
        self.params = params or EnvParams()
        self.state: CarState | None = None
        self.done = True
        self.steps = 0
        self._s_mod = 0.0
        self._unwrapped = 0.0

    def reset(self, start_s: float = 0.0) -> Observation:
        pos, heading = self.track.pose_at(start_s)
        self.place(pos, heading, 0.0)
        return self.observe()

    def place(self, position, heading: float, speed: float = 0.0) -> None:
        """Put the car at an arbitrary pose and start a fresh episode there."""
        self.state = CarState(np.array(position, dtype=float), float(heading),
                              min(max(float(speed), 0.0), self.params.v_max), 0.0)
        self._s_mod = float(self.track.project(self.state.position)[0][0])
        self._unwrapped = 0.0
        self.steps = 0
        self.done = False

    def observe(self) -> Observation:
        mask = render_mask(self.state, self.track, self.params.mask_shape, self.params.cell_size)
        return Observation(mask, self.state.speed)

    def corners_off_road(self) -> int:
        corners = car_corners(self.state, self.params.car_length, self.params.car_width)
        return int(np.count_nonzero(~self.track.on_road(corners)))

    def step(self, action: Action) -> StepOutcome:
        if self.done or self.state is None:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if not isinstance(action, Action):
            action = Action(*action)
        prm, car = self.params, self.state
        car.speed = min(max(car.speed + action.acceleration * prm.a_max * prm.dt, 0.0), prm.v_max)
        car.heading += car.speed / prm.wheelbase * math.tan(action.steering * prm.max_steer) * prm.dt
        car.position = car.position + car.speed * prm.dt * np.array(
            [math.cos(car.heading), math.sin(car.heading)])
        self.steps += 1

        length = self.track.total_length
        s_mod = float(self.track.project(car.position)[0][0])
        delta = (s_mod - self._s_mod + length / 2) % length - length / 2
        self._s_mod = s_mod
        self._unwrapped += delta
        previous = car.progress
        target = prm.laps * length
        car.progress = min(max(car.progress, self._unwrapped), target)
        reward = 100.0 * (car.progress - previous) / length

        off_track = self.corners_off_road() >= 2
        success = not off_track and car.progress >= target
        if off_track:
            reward += prm.penalty
        self.done = off_track or success or self.steps >= prm.max_steps
        info = {
            "lap": int(car.progress // length),
            "progress_fraction": car.progress / length,
            "off_track": off_track,
            "success": success,
            "steps": self.steps,
        }
        return StepOutcome(self.observe(), reward, self.done, info)
