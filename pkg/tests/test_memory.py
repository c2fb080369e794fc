import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epiplan.encoder import EncoderParams, RangeParams, quantize_batch
from epiplan.memory import (LatentGrid, StepRecord, TrajectoryDB, augment, insert_trajectory,
                            is_unsafe, ngrid_max, rebuild, tp_history)
from epiplan.sim import Action, Observation

ENC = EncoderParams()


def band_mask(offset, curve=0):
    """32x32 road band of width 16 shifted by ``offset`` columns, bent by ``curve`` in the top half."""
    m = np.zeros((32, 32), dtype=np.uint8)
    for i in range(32):
        shift = offset + (curve if i < 16 else 0)
        lo = min(max(8 + shift, 0), 32)
        m[i, lo:min(lo + 16, 32)] = 1
    return m


def make_episode(eid, rewards, offsets=None, steering=None):
    n = len(rewards)
    offsets = offsets if offsets is not None else [0] * n
    steering = steering if steering is not None else [0.0] * n
    return [StepRecord(Observation(band_mask(o), 5.0), Action(s, 0.0), float(r), eid, t, t == n - 1)
            for t, (r, o, s) in enumerate(zip(rewards, offsets, steering))]


def forward_values(rewards, gamma):
    return [sum(gamma ** (j - t) * rewards[j] for j in range(t, len(rewards))) for t in range(len(rewards))]


def test_augment_example():
    out = augment(make_episode(0, [1, 1, 1]), 0.5)
    assert [r.value for r in out] == [1.75, 1.5, 1.0]


def test_augment_single_step():
    assert augment(make_episode(0, [-3.0]), 0.9)[0].value == -3.0


def test_augment_unsafe_labels_only_failures():
    ep = make_episode(0, [1, 1, 1, 1, -10])
    assert [r.unsafe for r in augment(ep, 0.9, 2, failed=True)] == [False, False, False, True, True]
    assert not any(r.unsafe for r in augment(ep, 0.9, 2, failed=False))
    assert all(r.unsafe for r in augment(ep, 0.9, 9, failed=True))


def test_augment_does_not_mutate_input():
    ep = make_episode(0, [1, 2])
    augment(ep, 0.5, 1, failed=True)
    assert ep[0].value == 0.0 and not ep[1].unsafe


@pytest.mark.parametrize("gamma", [0.0, -0.5, 1.5])
def test_augment_rejects_gamma(gamma):
    with pytest.raises(ValueError):
        augment(make_episode(0, [1]), gamma)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=80), st.sampled_from([0.5, 0.9, 0.95, 1.0]))
def test_backward_recursion_matches_forward_sum(rewards, gamma):
    vals = [r.value for r in augment(make_episode(0, rewards), gamma)]
    assert np.allclose(vals, forward_values(rewards, gamma), atol=1e-9, rtol=0)


def test_db_append_and_ids():
    db = TrajectoryDB()
    assert db.append(make_episode(0, [1, 2])) == 0
    assert db.append(make_episode(1, [3])) == 1
    assert len(db) == 3
    with pytest.raises(ValueError):
        db.append(make_episode(5, [1]))
    with pytest.raises(ValueError):
        db.append([])


def fresh_grid(g=100, k=10):
    return LatentGrid(g, 2, RangeParams((-1.0, -1.0), (1.0, 1.0)), k)


def test_insert_singleton():
    grid = fresh_grid()
    insert_trajectory(grid, augment(make_episode(0, [2.0]), 0.9), ENC)
    assert len(grid.cells) == 1
    (cell,) = grid.cells.values()
    assert cell.cell_value == 2.0
    assert grid.tps[0].next is None and grid.tps[0].kstep is grid.tps[0]


def test_cell_mean_of_two():
    grid = fresh_grid()
    insert_trajectory(grid, augment(make_episode(0, [2.0]), 0.9), ENC)
    insert_trajectory(grid, augment(make_episode(1, [4.0]), 0.9), ENC)
    assert len(grid.cells) == 1
    assert next(iter(grid.cells.values())).cell_value == 3.0


def test_next_links_follow_step_order():
    grid = fresh_grid(k=3)
    ep = augment(make_episode(0, [1, 2, 3, 4, 5], offsets=[0, 1, 2, 3, 4]), 0.9)
    insert_trajectory(grid, ep, ENC)
    tp, seen = grid.tps[0], []
    while tp is not None:
        seen.append(tp.step_index)
        tp = tp.next
    assert seen == [0, 1, 2, 3, 4]
    assert [tp.kstep.step_index for tp in grid.tps] == [3, 4, 4, 4, 4]
    for tp in grid.tps:
        if tp.next is not None:
            assert tp.value == pytest.approx(tp.reward + 0.9 * tp.next.value)


def test_insert_dimension_mismatch():
    grid = LatentGrid(10, 3, RangeParams((0, 0, 0), (1, 1, 1)))
    with pytest.raises(ValueError):
        insert_trajectory(grid, make_episode(0, [1]), ENC)


def test_ngrid_max_examples():
    grid = fresh_grid()
    ep = make_episode(0, [0, 0, 0, 0])
    for r, v in zip(ep, [0, 5, 2, 9]):
        r.value = v
    insert_trajectory(grid, ep, ENC)
    assert ngrid_max(grid.tps[0], 2) == 5
    assert ngrid_max(grid.tps[0], 0) == 0
    assert ngrid_max(grid.tps[3], 7) == 9
    assert ngrid_max(grid.tps[0], 3) == max([0, 5, 2, 9])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.integers(0, 12))
def test_ngrid_max_properties(values, k):
    grid = fresh_grid()
    ep = make_episode(0, [0.0] * len(values))
    for r, v in zip(ep, values):
        r.value = v
    insert_trajectory(grid, ep, ENC)
    for t, tp in enumerate(grid.tps):
        assert ngrid_max(tp, k) == max(values[t:t + k + 1])
        assert ngrid_max(tp, k) >= tp.value
        assert ngrid_max(tp, k + 1) >= ngrid_max(tp, k)


def test_cell_invariant_under_random_insertions():
    rng = np.random.default_rng(0)
    grid = LatentGrid(10, 2, RangeParams((-1.0, -1.0), (1.0, 1.0)))
    for eid in range(200):
        n = int(rng.integers(1, 8))
        ep = make_episode(eid, rng.normal(size=n).tolist(), offsets=rng.integers(-8, 9, n).tolist())
        insert_trajectory(grid, augment(ep, 0.9), ENC)
    for cell in grid.cells.values():
        assert cell.cell_value == pytest.approx(np.mean([tp.value for tp in cell.tps]), abs=1e-9)


def build_db(n_eps=6, seed=0):
    rng = np.random.default_rng(seed)
    db = TrajectoryDB(0.9)
    for eid in range(n_eps):
        n = int(rng.integers(3, 12))
        ep = make_episode(eid, rng.normal(size=n).tolist(), offsets=rng.integers(-6, 7, n).tolist(),
                          steering=rng.choice([-1.0, 0.0, 1.0], n).tolist())
        db.append(augment(ep, 0.9, 2, failed=bool(eid % 2)))
    return db


def test_next_chains_partition_points():
    db = build_db()
    grid = rebuild(db, ENC, 50, 4)
    heads = [tp for tp in grid.tps if tp.prev is None]
    seen = []
    for h in heads:
        tp, chain = h, []
        while tp is not None:
            chain.append(tp)
            tp = tp.next
        assert len({t.trajectory_id for t in chain}) == 1
        assert len(chain) == len(db.episode(h.trajectory_id).records)
        seen += chain
    assert len(seen) == len(grid.tps) == len({id(t) for t in seen})


def test_rebuild_idempotent_and_conserving():
    db = build_db()
    a = rebuild(db, ENC, 50)
    b = rebuild(db, ENC, 50, version=a.encoder_version + 1)
    assert b.encoder_version == a.encoder_version + 1
    assert [(t.trajectory_id, t.step_index, t.grid, t.value) for t in a.tps] == \
           [(t.trajectory_id, t.step_index, t.grid, t.value) for t in b.tps]
    assert len(a) == len(db)


def test_rebuild_with_changed_encoder_moves_points_but_keeps_values():
    db = build_db(10)
    a = rebuild(db, ENC, 50)
    coef = np.zeros((2, 32 * 32 + 1))
    coef[0, :1024] = np.random.default_rng(1).normal(size=1024)
    coef[1, 1024] = 1.0
    b = rebuild(db, EncoderParams("affine", (32, 32), 2, coef), 50)
    assert [t.value for t in a.tps] == [t.value for t in b.tps]
    assert not np.array_equal(a.population(), b.population())


def test_rebuild_empty():
    with pytest.raises(ValueError):
        rebuild(TrajectoryDB(), ENC)


def test_tp_history_pads_with_first_frame():
    grid = fresh_grid()
    insert_trajectory(grid, augment(make_episode(0, [1, 1, 1], offsets=[0, 2, 4]), 0.9), ENC)
    h0 = tp_history(grid.tps[0], 3)
    assert np.array_equal(h0, np.repeat(grid.tps[0].encoding[None], 3, axis=0))
    h2 = tp_history(grid.tps[2], 3)
    assert np.array_equal(h2, np.array([t.encoding for t in grid.tps]))
    h1 = tp_history(grid.tps[1], 3)
    assert np.array_equal(h1, np.array([grid.tps[0].encoding, grid.tps[0].encoding, grid.tps[1].encoding]))
    assert np.array_equal(grid.arrays(3)["hist"][1], h1)


def test_is_unsafe_replays_failure():
    db = TrajectoryDB(0.9)
    offsets = [0, 0, 0, 0, 0, 3, 5, 7, 9, 11]
    ep = make_episode(0, [1] * 9 + [-10], offsets=offsets)
    db.append(augment(ep, 0.9, 3, failed=True))
    grid = rebuild(db, ENC, 100)
    last = db.episode(0).records[-1].observation
    first = db.episode(0).records[0].observation
    assert is_unsafe(last, grid, ENC, 1)
    assert not is_unsafe(first, grid, ENC, 1)


def test_is_unsafe_empty_grid():
    assert not is_unsafe(Observation(band_mask(0), 0.0), LatentGrid(), ENC)


def test_is_unsafe_empty_neighbourhood():
    db = TrajectoryDB(0.9)
    db.append(augment(make_episode(0, [1, -10], offsets=[-8, 8]), 0.9, 2, failed=True))
    grid = rebuild(db, ENC, 100)
    # the centred road encodes to the middle of the grid, far from both stored points
    assert not is_unsafe(Observation(band_mask(0), 0.0), grid, ENC, 1)


def test_indices_near_matches_scan():
    db = build_db(20, seed=3)
    grid = rebuild(db, ENC, 20)
    coords = np.array([t.grid for t in grid.tps])
    for c in [(10, 10), (0, 0), (19, 5)]:
        for n in (0, 1, 3):
            expect = np.flatnonzero(np.abs(coords - c).max(axis=1) <= n)
            assert np.array_equal(grid.indices_near(c, n), expect)


def test_population_counts_match_db():
    db = build_db(8)
    grid = rebuild(db, ENC, 30)
    assert grid.population().sum() == len(db)
    vals = grid.values()
    for coord, cell in grid.cells.items():
        assert vals[coord] == cell.cell_value
    enc = np.array([t.encoding for t in grid.tps])
    assert np.array_equal(quantize_batch(enc, grid.range, 30), np.array([t.grid for t in grid.tps]))
