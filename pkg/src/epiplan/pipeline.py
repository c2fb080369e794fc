"""Three-phase training (straight drives, unsafe-state exploration, planner
training) plus the evaluation protocol and two reference baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .encoder import EncoderParams, encode, refit_encoder
from .memory import LatentGrid, StepRecord, TrajectoryDB, augment, insert_trajectory, is_unsafe, rebuild
from .planner import History, Planner, PlannerParams
from .sim import Action, EnvParams, RaceEnv, Track, generate_track

GOLDEN = (math.sqrt(5) - 1) / 2


@dataclass
class Metrics:
    success_rate: float
    avg_speed: float
    episodes: int = 1
    interactions: int = 0
    reward_sums: list = field(default_factory=list)
    distance: float = 0.0
    duration: float = 0.0
    training_interactions: int = 0

    def row(self, label: str = "") -> str:
        return (f"label={label} success_rate={self.success_rate!r} avg_speed_kmh={self.avg_speed!r} "
                f"episodes={self.episodes} interactions={self.interactions} "
                f"training_interactions={self.training_interactions} "
                f"distance_m={self.distance!r} duration_s={self.duration!r} "
                f"reward_sums={','.join(repr(r) for r in self.reward_sums)}")


def make_track(cfg: RunConfig, seed: int) -> Track:
    return generate_track(seed, cfg.track_waypoints, cfg.track_width, radius=cfg.track_radius,
                          perturbation=cfg.track_perturbation, spacing=cfg.track_spacing)


def env_params(cfg: RunConfig, evaluation: bool = False) -> EnvParams:
    return EnvParams(dt=cfg.dt, a_max=cfg.a_max, v_max=cfg.v_max, wheelbase=cfg.wheelbase,
                     max_steer=cfg.max_steer, car_length=cfg.car_length, car_width=cfg.car_width,
                     penalty=cfg.penalty,
                     max_steps=cfg.eval_max_steps if evaluation else cfg.max_steps,
                     laps=cfg.eval_laps if evaluation else cfg.train_laps,
                     mask_shape=(cfg.mask_h, cfg.mask_w), cell_size=cfg.cell_size)


def make_train_envs(cfg: RunConfig) -> list[RaceEnv]:
    return [RaceEnv(make_track(cfg, s), env_params(cfg)) for s in cfg.train_seeds]


def make_eval_env(cfg: RunConfig) -> RaceEnv:
    return RaceEnv(make_track(cfg, cfg.eval_seed), env_params(cfg, evaluation=True))


def planner_params(cfg: RunConfig, mode: str) -> PlannerParams:
    return PlannerParams(p=cfg.p, n=cfg.n, q=cfg.q, k=cfg.k, val_thresh=cfg.val_thresh,
                         threshold_mode=cfg.train_threshold_mode if mode == "train" else cfg.threshold_mode,
                         mode=mode, rng_seed=cfg.planner_seed)


def initial_encoder(cfg: RunConfig) -> EncoderParams:
    return EncoderParams(cfg.encoder_kind, (cfg.mask_h, cfg.mask_w), cfg.m)


def cruise_accel(speed: float, cruise: float, cfg: RunConfig) -> float:
    """Throttle command that brings the car to ``cruise`` as fast as allowed."""
    return float(np.clip((cruise - speed) / (cfg.a_max * cfg.dt), -1.0, 1.0))


def episode_start(env_index: int, episode_index: int, n_envs: int, env: RaceEnv) -> float:
    """Spread start points of successive episodes on one track (golden-ratio sequence)."""
    visit = episode_index // n_envs
    return ((visit * GOLDEN) % 1.0) * env.track.total_length


def _rollout(env: RaceEnv, start_s: float, episode_id: int, choose, encoder: EncoderParams):
    """Run one episode; ``choose(obs, encoding, step)`` returns the Action to execute.

    Returns (records, failed, outcome of the last step).
    """
    obs = env.reset(start_s)
    records = []
    step = 0
    while True:
        e = encode(obs, encoder)
        action = choose(obs, e, step)
        out = env.step(action)
        records.append(StepRecord(obs, action, out.reward, episode_id, step, out.done, encoding=e))
        obs = out.observation
        step += 1
        if out.done:
            return records, bool(out.info["off_track"]), out


def _schedule(envs, cfg: RunConfig, first_episode: int, count: int):
    for i in range(count):
        j = first_episode + i
        env = envs[j % len(envs)]
        yield env, episode_start(j % len(envs), j, len(envs), env)


def phase1_collect(envs, cfg: RunConfig, db: TrajectoryDB | None = None,
                   encoder: EncoderParams | None = None) -> TrajectoryDB:
    """Straight drives at cruise speed until each episode ends."""
    db = TrajectoryDB(cfg.gamma) if db is None else db
    encoder = encoder or initial_encoder(cfg)

    def straight(obs, e, step):
        return Action(0.0, cruise_accel(obs.speed, cfg.cruise_speed, cfg))

    for env, start in _schedule(envs, cfg, 0, cfg.e):
        records, failed, _ = _rollout(env, start, db.next_episode_id(), straight, encoder)
        db.append(augment(records, cfg.gamma, cfg.unsafe_offset, failed), phase="phase1")
    return db


def build_grid(db: TrajectoryDB, encoder: EncoderParams, cfg: RunConfig,
               previous: LatentGrid | None = None) -> tuple[EncoderParams, LatentGrid]:
    """Refit the encoder on ``db`` and rebuild the grid from scratch."""
    encoder, _ = refit_encoder(db, encoder)
    version = previous.encoder_version + 1 if previous is not None else 0
    return encoder, rebuild(db, encoder, cfg.g, cfg.k, version)


def phase2_explore(envs, grid: LatentGrid, encoder: EncoderParams, cfg: RunConfig,
                   db: TrajectoryDB) -> TrajectoryDB:
    """Straight drives that switch to a random steering value in unsafe states."""
    rng = np.random.default_rng(cfg.phase2_seed)
    steering = (-1.0, 0.0, 1.0)

    def prior(obs, e, step):
        accel = cruise_accel(obs.speed, cfg.cruise_speed, cfg)
        if is_unsafe(obs, grid, encoder, cfg.n):
            return Action(steering[int(rng.integers(len(steering)))], accel)
        return Action(0.0, accel)

    for env, start in _schedule(envs, cfg, cfg.e, cfg.e):
        records, failed, _ = _rollout(env, start, db.next_episode_id(), prior, encoder)
        db.append(augment(records, cfg.gamma, cfg.unsafe_offset, failed), phase="phase2")
    return db


def planner_policy(grid_ref, planner: Planner, history: History, cfg: RunConfig, decisions=None):
    """Closure driving the planner; ``grid_ref`` is a one-element list so callers
    can swap grids between episodes."""

    def choose(obs, e, step):
        if step == 0:
            history.reset(e)
        else:
            history.push(e)
        action, decision = planner.select(grid_ref[0], history)
        if decisions is not None:
            decisions.append(decision)
        return Action(action.steering, cruise_accel(obs.speed, cfg.cruise_speed, cfg))

    return choose


@dataclass
class TrainResult:
    grid: LatentGrid
    encoder: EncoderParams
    curve: list  # (episode index, success percent)


def phase3_train(envs, db: TrajectoryDB, encoder: EncoderParams, grid: LatentGrid,
                 cfg: RunConfig, params: PlannerParams | None = None) -> TrainResult:
    """Planner-driven episodes; the encoder is refit and the grid rebuilt every
    ``refit_every`` episodes, otherwise new episodes are inserted in place."""
    params = params or planner_params(cfg, "train")
    planner = Planner(params)
    history = History(params.p)
    ref = [grid]
    choose = planner_policy(ref, planner, history, cfg)
    curve = []
    first = 2 * cfg.e
    for i, (env, start) in enumerate(_schedule(envs, cfg, first, cfg.n_train_ep)):
        records, failed, out = _rollout(env, start, db.next_episode_id(), choose, encoder)
        records = augment(records, cfg.gamma, cfg.unsafe_offset, failed)
        db.append(records, phase="phase3")
        curve.append((i, 100.0 * min(out.info["progress_fraction"] / env.params.laps, 1.0)))
        if (i + 1) % cfg.refit_every == 0:
            encoder, ref[0] = build_grid(db, encoder, cfg, ref[0])
        else:
            insert_trajectory(ref[0], records, encoder)
    return TrainResult(ref[0], encoder, curve)


def _drive_metrics(env: RaceEnv, choose, laps: int) -> tuple[Metrics, list]:
    obs = env.reset(0.0)
    speeds, total, step = [], 0.0, 0
    while True:
        action = choose(obs, step)
        out = env.step(action)
        speeds.append(env.state.speed)
        total += out.reward
        obs = out.observation
        step += 1
        if out.done:
            break
    dt = env.params.dt
    distance = float(np.sum(speeds)) * dt
    duration = len(speeds) * dt
    success = min(out.info["progress_fraction"] / laps, 1.0)
    metrics = Metrics(success, 3.6 * distance / duration, 1, len(speeds), [total], distance, duration)
    return metrics, speeds


def evaluate(env: RaceEnv, grid: LatentGrid, encoder: EncoderParams, cfg: RunConfig,
             params: PlannerParams | None = None, decisions: list | None = None) -> Metrics:
    """Greedy planner rollout from the start line for ``env.params.laps`` laps."""
    if not grid.tps:
        raise ValueError("cannot evaluate with an empty grid")
    params = params or planner_params(cfg, "eval")
    planner = Planner(params)
    history = History(params.p)
    choose = planner_policy([grid], planner, history, cfg, decisions)
    metrics, _ = _drive_metrics(env, lambda obs, step: choose(obs, encode(obs, encoder), step),
                                env.params.laps)
    return metrics


def baseline_random(env: RaceEnv, seed: int = 0) -> Metrics:
    rng = np.random.default_rng(seed)
    metrics, _ = _drive_metrics(env, lambda obs, step: Action(*rng.uniform(-1.0, 1.0, 2)),
                                env.params.laps)
    return metrics


def baseline_centerline(env: RaceEnv, speed: float = 8.0, lateral_gain: float = 0.15,
                        heading_gain: float = 1.0, lookahead: float = 4.0) -> Metrics:
    """Proportional steering on lateral offset and heading error at a fixed speed.

    Uses the privileged car pose and track geometry, like a centerline-tracking
    controller would.
    """
    prm = env.params

    def choose(obs, step):
        car = env.state
        s, offset = env.track.project(car.position)
        target = env.track.heading_at(s[0] + lookahead)
        err = (target - car.heading + np.pi) % (2 * np.pi) - np.pi
        steer_angle = heading_gain * err - lateral_gain * offset[0]
        accel = np.clip((speed - car.speed) / (prm.a_max * prm.dt), -1.0, 1.0)
        return Action(steer_angle / prm.max_steer, accel)

    metrics, _ = _drive_metrics(env, choose, env.params.laps)
    return metrics


@dataclass
class RunResult:
    db: TrajectoryDB
    encoder: EncoderParams
    grid: LatentGrid
    grid_before: LatentGrid
    curve: list
    metrics: Metrics
    interactions: int


def run_all(cfg: RunConfig, decisions: list | None = None) -> RunResult:
    """phase1 -> phase2 -> train -> eval with one configuration."""
    envs = make_train_envs(cfg)
    encoder = initial_encoder(cfg)
    db = phase1_collect(envs, cfg, encoder=encoder)
    encoder, grid = build_grid(db, encoder, cfg)
    phase2_explore(envs, grid, encoder, cfg, db)
    encoder, grid = build_grid(db, encoder, cfg, grid)
    before = grid
    result = phase3_train(envs, db, encoder, grid, cfg)
    metrics = evaluate(make_eval_env(cfg), result.grid, result.encoder, cfg, decisions=decisions)
    metrics.training_interactions = len(db)
    return RunResult(db, result.encoder, result.grid, before, result.curve, metrics, len(db))
