"""
Looking inside the memory
=========================

After a short training run, a stored state is compared with the states at
context-distance ranks 1, 10 and 100, side by side with their actions and
values. The population heatmap before and after an encoder refit shows points
moving between cells while the count stays fixed.
"""

import tempfile
from pathlib import Path

from epiplan import io, pipeline
from epiplan.config import RunConfig
from epiplan.encoder import EncoderParams, refit_encoder
from epiplan.memory import rebuild

cfg = RunConfig(n_train_ep=10)
result = pipeline.run_all(cfg)

head, entries = io.inspect_state(result.db, result.grid, episode_id=5, step_index=20, ranks=[1, 10, 100])
print(io.format_inspection(head, entries))

affine, _ = refit_encoder(result.db, EncoderParams("affine"))
moved = rebuild(result.db, affine, cfg.g, cfg.k)
out = Path(tempfile.mkdtemp())
io.export_heatmap(result.grid, out, stem="population_moment")
io.export_heatmap(moved, out, stem="population_affine")
print(f"{len(result.grid)} points before, {len(moved)} after; heatmaps in {out}")
