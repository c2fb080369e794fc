import math

import numpy as np
import pytest

from epiplan.sim import (Action, CarState, EnvParams, RaceEnv, Track, car_corners, generate_track,
                         mask_cell_centers, render_mask)


def brute_distance(track, points):
    """Distance to every centerline segment, minimum taken over all of them."""
    a = track.centerline[:-1]
    d = track.centerline[1:] - a
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    out = np.empty(len(pts))
    for i, p in enumerate(pts):
        rel = p - a
        t = np.clip((rel * d).sum(axis=1) / (d * d).sum(axis=1), 0.0, 1.0)
        out[i] = np.sqrt(((rel - t[:, None] * d) ** 2).sum(axis=1)).min()
    return out


def stadium(straight=200.0, radius=40.0, spacing=0.5):
    """Two straights joined by half circles; the start point is mid-straight."""
    pts = []
    n_s = int(straight / spacing)
    for i in range(n_s):
        pts.append((-straight / 2 + i * spacing, -radius))
    n_c = int(math.pi * radius / spacing)
    for i in range(n_c):
        a = -math.pi / 2 + math.pi * i / n_c
        pts.append((straight / 2 + radius * math.cos(a), radius * math.sin(a)))
    for i in range(n_s):
        pts.append((straight / 2 - i * spacing, radius))
    for i in range(n_c):
        a = math.pi / 2 + math.pi * i / n_c
        pts.append((-straight / 2 + radius * math.cos(a), radius * math.sin(a)))
    return Track(pts, 8.0)


@pytest.fixture(scope="module")
def track():
    return generate_track(1, 12, 8.0)


def test_generate_track_is_deterministic(track):
    again = generate_track(1, 12, 8.0)
    assert again.centerline.tobytes() == track.centerline.tobytes()
    assert again.total_length == track.total_length


def test_seed_changes_track(track):
    other = generate_track(2, 12, 8.0)
    assert other.centerline.shape != track.centerline.shape or not np.allclose(
        other.centerline, track.centerline)


def test_zero_perturbation_is_circle():
    t = generate_track(5, 12, 8.0, radius=50.0, perturbation=0.0)
    assert t.total_length == pytest.approx(2 * math.pi * 50.0, rel=1e-3)
    assert np.allclose(np.hypot(*t.centerline.T), 50.0, atol=1e-9)


def test_track_invariants(track):
    c = track.centerline
    assert np.max(np.abs(c[0] - c[-1])) <= 1e-9
    seg = np.hypot(*np.diff(c, axis=0).T)
    assert np.all(seg > 0) and np.all(seg <= track.width)
    assert track.total_length == pytest.approx(seg.sum(), rel=1e-6)


@pytest.mark.parametrize("kwargs", [{"n_waypoints": 7}, {"width": 0.0}])
def test_generate_track_rejects_bad_input(kwargs):
    args = {"seed": 1, "n_waypoints": 12, "width": 8.0, **kwargs}
    with pytest.raises(ValueError):
        generate_track(**args)


def test_generate_track_shrinks_perturbation_until_simple():
    # huge jitter folds the road; the generator must still return a valid loop
    t = generate_track(3, 12, 8.0, perturbation=0.95)
    d = np.diff(t.centerline, axis=0)
    ang = np.arctan2(d[:, 1], d[:, 0])
    turn = np.abs((np.roll(ang, -1) - ang + np.pi) % (2 * np.pi) - np.pi)
    assert np.all(turn / 0.5 <= 1 / 8.0 + 1e-9)


def test_generate_track_gives_up():
    with pytest.raises(ValueError):
        generate_track(3, 12, 8.0, radius=6.0, max_attempts=3)


def test_track_file_round_trip(tmp_path, track):
    path = tmp_path / "t.txt"
    track.save(path)
    back = Track.load(path)
    assert back.centerline.tobytes() == track.centerline.tobytes()
    assert back.seed == track.seed and back.width == track.width
    text = path.read_text().splitlines()
    assert text[0] == "# epiplan-track v1" and text[1] == "seed 1"


def test_track_load_rejects_bad_header(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("# something else\n")
    with pytest.raises(ValueError):
        Track.load(path)


def test_action_clamps():
    a = Action(3.0, -7.0)
    assert (a.steering, a.acceleration) == (1.0, -1.0)


def test_reset_is_deterministic(track):
    env = RaceEnv(track)
    o1 = env.reset()
    o2 = env.reset()
    assert np.array_equal(o1.mask, o2.mask)
    assert o1.speed == o2.speed == 0.0
    assert env.state.progress == 0.0


def test_reset_mask_symmetric_on_straight():
    t = stadium()
    env = RaceEnv(t)
    obs = env.reset(50.0)
    assert np.array_equal(obs.mask, obs.mask[:, ::-1])
    assert obs.mask.sum() > 0


def test_noop_from_rest(track):
    env = RaceEnv(track)
    env.reset()
    pos = env.state.position.copy()
    out = env.step(Action(0.0, 0.0))
    assert env.state.speed == 0.0
    assert np.array_equal(env.state.position, pos)
    assert out.reward == 0.0 and not out.done


def test_full_throttle_from_rest(track):
    env = RaceEnv(track)
    env.reset()
    pos, heading = env.state.position.copy(), env.state.heading
    env.step(Action(0.0, 1.0))
    assert env.state.speed == pytest.approx(0.4, abs=1e-12)
    disp = env.state.position - pos
    assert np.hypot(*disp) == pytest.approx(0.04, abs=1e-12)
    assert math.atan2(disp[1], disp[0]) == pytest.approx(heading, abs=1e-9)


def test_bicycle_heading_update():
    t = stadium()
    env = RaceEnv(t)
    env.reset(50.0)
    env.state.speed = 10.0
    env.step(Action(0.5, 0.0))
    assert env.state.heading == pytest.approx(10.0 / 2.5 * math.tan(0.25) * 0.1, abs=1e-12)


def test_off_road_terminates_with_penalty():
    t = stadium()
    env = RaceEnv(t)
    env.reset(50.0)
    # centerline y = -40; park 6 m to the side so two corners are off-road
    env.place((env.state.position[0], -40.0 - 4.5), 0.0, 0.0)
    assert env.corners_off_road() >= 2
    out = env.step(Action(0.0, 0.0))
    assert out.done and out.info["off_track"]
    assert out.reward == pytest.approx(-10.0)
    with pytest.raises(RuntimeError):
        env.step(Action())


def test_single_corner_off_road_does_not_terminate():
    t = stadium()
    env = RaceEnv(t)
    env.reset(50.0)
    x = env.state.position[0]
    # rotate slightly so only the front-right corner crosses the edge (y = -44)
    env.place((x, -42.6), -0.3, 0.0)
    assert env.corners_off_road() == 1
    out = env.step(Action(0.0, 0.0))
    assert not out.done


def test_reward_telescopes_over_a_lap():
    t = generate_track(4, 12, 8.0, perturbation=0.0)
    env = RaceEnv(t, EnvParams(laps=1, max_steps=5000))
    env.reset()
    total, out = 0.0, None
    while True:
        car = env.state
        s, off = t.project(car.position)
        target = t.heading_at(s[0] + 4.0)
        err = (target - car.heading + np.pi) % (2 * np.pi) - np.pi
        steer = (err - 0.15 * off[0]) / 0.5
        out = env.step(Action(steer, float(np.clip((8.0 - car.speed) / 0.4, -1, 1))))
        total += out.reward
        if out.done:
            break
    assert out.info["success"] and not out.info["off_track"]
    assert total == pytest.approx(100.0, rel=1e-6)


def test_speed_stays_clamped(track):
    env = RaceEnv(track, EnvParams(max_steps=200))
    env.reset()
    rng = np.random.default_rng(0)
    while not env.done:
        env.step(Action(0.0, rng.uniform(-5, 5)))
        assert 0.0 <= env.state.speed <= env.params.v_max


def test_max_steps_ends_episode(track):
    env = RaceEnv(track, EnvParams(max_steps=3))
    env.reset()
    outs = [env.step(Action()) for _ in range(3)]
    assert [o.done for o in outs] == [False, False, True]
    assert not outs[-1].info["off_track"]


def test_determinism_of_rollouts(track):
    rng = np.random.default_rng(3)
    actions = [Action(*rng.uniform(-1, 1, 2)) for _ in range(60)]

    def roll():
        env = RaceEnv(track)
        env.reset()
        outs = []
        for a in actions:
            if env.done:
                break
            o = env.step(a)
            outs.append((o.observation.mask.tobytes(), o.observation.speed, o.reward, o.done))
        return outs

    assert roll() == roll()


def test_mask_matches_brute_force(track):
    rng = np.random.default_rng(7)
    for _ in range(5):
        s = rng.uniform(0, track.total_length)
        pos, heading = track.pose_at(s)
        car = CarState(pos + rng.normal(0, 2, 2), heading + rng.normal(0, 0.4), 0.0)
        mask = render_mask(car, track)
        centers = mask_cell_centers(car).reshape(-1, 2)
        oracle = (brute_distance(track, centers) <= track.width / 2).reshape(mask.shape)
        assert np.array_equal(mask.astype(bool), oracle)


def test_mask_empty_far_away(track):
    car = CarState(np.array([1000.0, 1000.0]), 0.0, 0.0)
    assert render_mask(car, track).sum() == 0


def test_mask_mirrors_with_track(track):
    s = 37.0
    pos, heading = track.pose_at(s)
    car = CarState(pos + np.array([0.7, -0.4]), heading + 0.2, 0.0)
    f = np.array([math.cos(car.heading), math.sin(car.heading)])
    rel = track.centerline - car.position
    along = rel @ f
    reflected = car.position + 2 * along[:, None] * f - rel
    mirror = Track(reflected, track.width)
    assert np.array_equal(render_mask(car, mirror), render_mask(car, track)[:, ::-1])


def test_car_corners_geometry():
    car = CarState(np.array([0.0, 0.0]), 0.0, 0.0)
    c = car_corners(car)
    assert sorted(map(tuple, np.round(c, 12))) == [(-2.0, -1.0), (-2.0, 1.0), (2.0, -1.0), (2.0, 1.0)]
