"""
Tracks, the car and what it sees
=================================

A seeded loop track, one simulator step and the road mask the agent observes.
"""

import numpy as np

from epiplan.sim import Action, RaceEnv, generate_track

# The same seed always gives the same closed centerline.
track = generate_track(seed=1, n_waypoints=12, width=8.0)
print(f"track length {track.total_length:.1f} m, {len(track.centerline)} vertices")

env = RaceEnv(track)
obs = env.reset()

# Row 0 is the far edge of the view, the car sits at the bottom centre.
for row in obs.mask[::2]:
    print("".join("#" if v else "." for v in row[::1]))

# Full throttle for one second, then coast.
for _ in range(10):
    out = env.step(Action(steering=0.0, acceleration=1.0))
print(f"speed after 1 s: {env.state.speed:.2f} m/s, {out.info['progress_fraction'] * 100:.2f}% of a lap covered")

# A car parked across the edge of the road terminates the episode.
env.place(env.state.position + 5.5 * np.array([-np.sin(env.state.heading), np.cos(env.state.heading)]),
          env.state.heading, 0.0)
out = env.step(Action())
print("off track:", out.info["off_track"], "reward", out.reward)
