"""
Discounted values and the latent grid
=====================================

Rewards become discounted returns, failures get their last frames flagged,
and encoded states are bucketed into grid cells whose value is the mean of
their members.
"""

import numpy as np

from epiplan.encoder import EncoderParams
from epiplan.io import heatmap_csv
from epiplan.memory import StepRecord, TrajectoryDB, augment, rebuild
from epiplan.sim import Action, Observation

rng = np.random.default_rng(0)


def band(offset):
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[:, 8 + offset:24 + offset] = 1
    return mask


db = TrajectoryDB(gamma=0.9)
for eid in range(6):
    drift = np.cumsum(rng.integers(-1, 2, 12)).clip(-8, 8)
    rewards = [1.0] * 11 + [-10.0 if eid % 2 else 1.0]
    records = [StepRecord(Observation(band(int(d)), 5.0), Action(0.0, 0.0), r, eid, t, t == 11)
               for t, (d, r) in enumerate(zip(drift, rewards))]
    db.append(augment(records, db.gamma, unsafe_offset=3, failed=bool(eid % 2)))

ep = db.episode(1).records
print("values  ", np.round([r.value for r in ep], 2))
print("unsafe  ", [int(r.unsafe) for r in ep])

grid = rebuild(db, EncoderParams(), g=10)
print(f"{len(grid)} points in {len(grid.cells)} cells")
print(heatmap_csv(grid.population()))
