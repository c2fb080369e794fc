"""
Context retrieval and action selection
======================================

Neighbours are found by comparing short histories of encodings; the planner
copies the action of the neighbour with the best value a few steps ahead and
falls back to exploration when nothing looks good enough.
"""

import numpy as np

from epiplan.encoder import RangeParams
from epiplan.memory import LatentGrid, StepRecord, augment, insert_trajectory
from epiplan.planner import PlannerParams, context_distance, neighbors, select_action
from epiplan.sim import Action, Observation

blank = Observation(np.zeros((32, 32), dtype=np.uint8), 0.0)
grid = LatentGrid(g=20, m=2, range_=RangeParams((-1.0, -1.0), (1.0, 1.0)), k=3)

# Two ways through the same corner: steering left survives, going straight crashes.
path = np.array([[0.0, 0.0], [0.1, 0.2], [0.2, 0.4], [0.2, 0.5]])
good = [StepRecord(blank, Action(-1.0, 0.0), 1.0, 0, t, t == 3) for t in range(4)]
bad = [StepRecord(blank, Action(0.0, 0.0), r, 1, t, t == 3) for t, r in enumerate([1.0, 1.0, 1.0, -10.0])]
insert_trajectory(grid, augment(good, 0.9), encodings=path)
insert_trajectory(grid, augment(bad, 0.9, 2, failed=True), encodings=path + 0.01)

history = [[0.0, 0.0], [0.1, 0.2], [0.2, 0.4]]
print("distance to itself", context_distance(history, history))
for tp in neighbors(grid, history, n=1, q=4):
    print(f"  traj {tp.trajectory_id} step {tp.step_index} value {tp.value:.2f}")

action, decision = select_action(grid, history, PlannerParams(p=3, n=1, k=3))
print(decision.branch, "->", action)

# Far from anything stored: training explores, evaluation searches the whole grid.
far = [[0.9, -0.9]] * 3
print(select_action(grid, far, PlannerParams(mode="train"))[1].branch)
print(select_action(grid, far, PlannerParams(mode="eval"))[1].branch)
