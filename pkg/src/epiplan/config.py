"""Flat ``key=value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

CONFIG_HEADER = "# epiplan-config v1"


def _doc(default, help_: str):
    return field(default=default, metadata={"help": help_})


@dataclass(frozen=True)
class RunConfig:
    # track
    track_waypoints: int = _doc(12, "waypoints on the perturbed circle")
    track_width: float = _doc(8.0, "road width in meters")
    track_radius: float = _doc(50.0, "base circle radius in meters")
    track_perturbation: float = _doc(0.3, "relative radius jitter of the waypoints")
    track_spacing: float = _doc(0.5, "centerline resampling step in meters")
    train_seeds: tuple = _doc((1, 2, 3, 4, 5), "track seeds used for collection and training")
    eval_seed: int = _doc(99, "held-out track seed used for evaluation")
    # environment
    dt: float = _doc(0.1, "integration step in seconds")
    a_max: float = _doc(4.0, "acceleration at full throttle, m/s^2")
    v_max: float = _doc(20.0, "top speed, m/s")
    wheelbase: float = _doc(2.5, "bicycle-model wheelbase, m")
    max_steer: float = _doc(0.5, "steering angle at full lock, rad")
    car_length: float = _doc(4.0, "body length, m")
    car_width: float = _doc(2.0, "body width, m")
    penalty: float = _doc(-10.0, "reward added on the off-track terminating step")
    max_steps: int = _doc(1500, "step budget of a collection/training episode")
    eval_max_steps: int = _doc(4000, "step budget of an evaluation episode")
    train_laps: int = _doc(1, "laps that end a collection/training episode successfully")
    eval_laps: int = _doc(3, "laps driven during evaluation")
    mask_h: int = _doc(32, "mask rows")
    mask_w: int = _doc(32, "mask columns")
    cell_size: float = _doc(0.5, "mask cell size, m")
    # encoder and grid
    encoder_kind: str = _doc("moment", "moment or affine")
    m: int = _doc(2, "latent dimensionality")
    g: int = _doc(100, "cells per latent dimension")
    # planner
    p: int = _doc(3, "history length matched by the context distance")
    n: int = _doc(1, "neighbourhood radius in cells")
    q: int = _doc(10, "candidates kept after context ranking")
    k: int = _doc(10, "value lookahead in steps")
    val_thresh: float = _doc(0.0, "constant value threshold")
    threshold_mode: str = _doc("constant", "constant or percentile10")
    train_threshold_mode: str = _doc("constant", "threshold mode used while training")
    planner_seed: int = _doc(0, "seed of the planner's exploration generator")
    # pipeline
    gamma: float = _doc(0.95, "discount factor")
    unsafe_offset: int = _doc(15, "frames before a crash labelled unsafe")
    e: int = _doc(20, "episodes per collection phase")
    n_train_ep: int = _doc(50, "training episodes")
    refit_every: int = _doc(1, "training episodes between encoder refit and grid rebuild")
    cruise_speed: float = _doc(6.0, "speed held by the behavioural prior and the planner, m/s")
    phase2_seed: int = _doc(1, "seed of the unsafe-state exploration generator")
    baseline_seed: int = _doc(0, "seed of the random baseline")
    baseline_speed: float = _doc(8.0, "speed of the centerline baseline, m/s")
    db_file: str = _doc("db.txt", "trajectory database file name inside the output directory")
    encoder_file: str = _doc("encoder.txt", "encoder parameter file name inside the output directory")

    def __post_init__(self):
        for name in ("e", "n_train_ep", "refit_every", "g", "p", "q", "max_steps", "eval_max_steps",
                     "train_laps", "eval_laps", "mask_h", "mask_w", "track_waypoints"):
            if getattr(self, name) <= 0 and not (name == "n_train_ep" and self.n_train_ep == 0):
                raise ValueError(f"{name} must be positive")
        if self.m != 2:
            raise ValueError("only m = 2 latents are supported")
        if self.encoder_kind not in ("moment", "affine"):
            raise ValueError(f"unknown encoder_kind {self.encoder_kind!r}")
        for name in ("threshold_mode", "train_threshold_mode"):
            if getattr(self, name) not in ("constant", "percentile10"):
                raise ValueError(f"unknown {name} {getattr(self, name)!r}")
        if not self.train_seeds:
            raise ValueError("train_seeds is empty")

    def with_overrides(self, pairs) -> RunConfig:
        """Apply ``key=value`` strings."""
        updates = {}
        for pair in pairs:
            key, sep, value = pair.partition("=")
            if not sep:
                raise ValueError(f"expected key=value, got {pair!r}")
            updates[key.strip()] = _parse(key.strip(), value.strip())
        return replace(self, **updates)

    def dumps(self) -> str:
        lines = [CONFIG_HEADER]
        for f in fields(self):
            lines.append(f"# {f.metadata['help']}")
            lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.dumps())
        tmp.replace(path)

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> RunConfig:
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{source}:{lineno}: expected key=value")
            key = key.strip()
            try:
                values[key] = _parse(key, value.strip())
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.loads(Path(path).read_text(), str(path))


_DEFAULTS = {f.name: f.default for f in fields(RunConfig)}


def _parse(key: str, value: str):
    if key not in _DEFAULTS:
        raise ValueError(f"unknown config key {key!r}")
    default = _DEFAULTS[key]
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.split(",") if v.strip())
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
