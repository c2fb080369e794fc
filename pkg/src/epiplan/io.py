"""On-disk formats: trajectory database, heatmaps, curves, metrics, traces and
the state-inspection report."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .memory import Episode, LatentGrid, StepRecord, TrajectoryDB, tp_history
from .planner import batch_context_distance
from .sim import Action, Observation

DB_HEADER = "# epiplan-db v1"
COLUMNS = "episode_id step_index phase steering acceleration speed reward value done unsafe encoding..."


class FormatError(ValueError):
    pass


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def mask_archive_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".masks.npy")


def save_db(db: TrajectoryDB, path) -> None:
    """Write one text line per record plus a ``.masks.npy`` archive holding the
    masks keyed by (episode_id, step_index)."""
    path = Path(path)
    recs = list(db.records())
    m = 0 if not recs or recs[0].encoding is None else len(recs[0].encoding)
    lines = [DB_HEADER, f"# gamma={db.gamma!r} records={len(recs)} episodes={len(db.episodes)} m={m}",
             f"# {COLUMNS}"]
    for ep in db.episodes:
        for r in ep.records:
            enc = "-" if r.encoding is None else " ".join(repr(float(v)) for v in r.encoding)
            lines.append(
                f"{r.episode_id} {r.step_index} {ep.phase or '-'} {r.action.steering!r} "
                f"{r.action.acceleration!r} {float(r.observation.speed)!r} {float(r.reward)!r} "
                f"{float(r.value)!r} {int(r.done)} {int(r.unsafe)} {enc}")
    if recs:
        h, w = recs[0].observation.mask.shape
        dtype = np.dtype([("episode_id", "<i8"), ("step_index", "<i8"), ("mask", "u1", (h, w))])
        arc = np.zeros(len(recs), dtype=dtype)
        arc["episode_id"] = [r.episode_id for r in recs]
        arc["step_index"] = [r.step_index for r in recs]
        arc["mask"] = np.stack([r.observation.mask for r in recs])
        apath = mask_archive_path(path)
        apath.parent.mkdir(parents=True, exist_ok=True)
        tmp = apath.with_name(apath.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.save(fh, arc)
        tmp.replace(apath)
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_db(path) -> TrajectoryDB:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != DB_HEADER:
        raise FormatError(f"{path}:1: expected version header {DB_HEADER!r}")
    try:
        meta = dict(kv.split("=", 1) for kv in lines[1].lstrip("# ").split())
        gamma, n_records, m = float(meta["gamma"]), int(meta["records"]), int(meta["m"])
    except (IndexError, KeyError, ValueError):
        raise FormatError(f"{path}:2: malformed metadata line") from None

    masks = {}
    if n_records:
        apath = mask_archive_path(path)
        if not apath.exists():
            raise FormatError(f"{path}: missing mask archive {apath.name}")
        arc = np.load(apath)
        masks = {(int(a), int(b)): mk for a, b, mk in zip(arc["episode_id"], arc["step_index"], arc["mask"])}

    db = TrajectoryDB(gamma)
    current, phase, records = None, "", []
    count = 0
    n_fields = 10 + m
    for lineno, line in enumerate(lines[3:], start=4):
        parts = line.split()
        enc_missing = len(parts) == 11 and parts[10] == "-"
        if len(parts) != n_fields and not enc_missing:
            raise FormatError(f"{path}:{lineno}: expected {n_fields} fields, got {len(parts)}")
        try:
            eid, step = int(parts[0]), int(parts[1])
            steer, accel, speed, reward, value = (float(v) for v in parts[3:8])
            done, unsafe = parts[8] == "1", parts[9] == "1"
            enc = None if enc_missing else np.array([float(v) for v in parts[10:]])
            mask = masks[(eid, step)]
        except (ValueError, KeyError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc!r}") from None
        if eid != current:
            if records:
                db.episodes.append(Episode(current, phase, records))
            current, phase, records = eid, "" if parts[2] == "-" else parts[2], []
        records.append(StepRecord(Observation(mask, speed), Action(steer, accel), reward, eid, step,
                                  done, value, unsafe, enc))
        count += 1
    if records:
        db.episodes.append(Episode(current, phase, records))
    if count != n_records:
        raise FormatError(f"{path}:{len(lines)}: truncated, expected {n_records} records, found {count}")
    for i, ep in enumerate(db.episodes):
        if ep.episode_id != i:
            raise FormatError(f"{path}: episode ids are not contiguous at episode {ep.episode_id}")
    return db


def heatmap(grid: LatentGrid, kind: str = "population") -> np.ndarray:
    if kind == "population":
        return grid.population()
    if kind == "value":
        return grid.values()
    raise ValueError(f"unknown heatmap kind {kind!r}")


def heatmap_csv(matrix: np.ndarray) -> str:
    rows = []
    for row in matrix:
        rows.append(",".join(str(int(v)) if matrix.dtype.kind in "iu" else repr(float(v)) for v in row))
    return "\n".join(rows) + "\n"


def heatmap_pgm(matrix: np.ndarray) -> str:
    """P2 image, min-max scaled to 0..255; empty (NaN) cells are 0."""
    vals = np.asarray(matrix, dtype=float)
    finite = np.isfinite(vals)
    scaled = np.zeros(vals.shape, dtype=np.int64)
    if finite.any():
        lo, hi = vals[finite].min(), vals[finite].max()
        if hi > lo:
            scaled[finite] = np.round(255 * (vals[finite] - lo) / (hi - lo)).astype(np.int64)
    h, w = scaled.shape
    body = "\n".join(" ".join(str(v) for v in row) for row in scaled)
    return f"P2\n{w} {h}\n255\n{body}\n"


def export_heatmap(grid: LatentGrid, out_dir, kind: str = "population", stem: str | None = None):
    out_dir = Path(out_dir)
    matrix = heatmap(grid, kind)
    stem = stem or f"heatmap_{kind}"
    csv_path, pgm_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.pgm"
    _atomic_write_text(csv_path, heatmap_csv(matrix))
    _atomic_write_text(pgm_path, heatmap_pgm(matrix))
    return csv_path, pgm_path


def write_curve(curve, path) -> None:
    lines = ["episode,success_percent"] + [f"{i},{v!r}" for i, v in curve]
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def write_metrics(rows, path) -> None:
    """``rows`` are (label, Metrics) pairs."""
    lines = ["# epiplan-metrics v1"] + [m.row(label) for label, m in rows]
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def write_decisions(decisions, path) -> None:
    body = "\n".join(d.to_json(step=i) for i, d in enumerate(decisions))
    _atomic_write_text(Path(path), body + ("\n" if body else ""))


@dataclass
class InspectEntry:
    rank: int
    trajectory_id: int
    step_index: int
    distance: float
    steering: float
    acceleration: float
    value: float
    grid: tuple
    mask: np.ndarray


def inspect_state(db: TrajectoryDB, grid: LatentGrid, episode_id: int, step_index: int,
                  ranks, p: int = 3) -> tuple[InspectEntry, list]:
    """Rank every stored point by context distance to a stored query state.

    Returns the query itself (rank 0) and the entries at the requested 1-based
    ranks. Ties are broken by (trajectory_id, step_index).
    """
    try:
        query_tp = grid.find(episode_id, step_index)
    except KeyError:
        raise ValueError(f"no stored state for episode {episode_id} step {step_index}") from None
    records = {(r.episode_id, r.step_index): r for r in db.episode(episode_id).records}
    arr = grid.arrays(p)
    query = tp_history(query_tp, p)
    dist = batch_context_distance(arr["hist"], query)
    order = np.lexsort((arr["step"], arr["traj"], dist))
    ranks = list(ranks)
    if any(r < 1 or r > len(order) for r in ranks):
        raise ValueError(f"ranks must lie in 1..{len(order)}")

    masks = {}
    for ep in db.episodes:
        for r in ep.records:
            masks[(r.episode_id, r.step_index)] = r.observation.mask

    def entry(rank, tp, d):
        return InspectEntry(rank, tp.trajectory_id, tp.step_index, float(d), tp.action.steering,
                            tp.action.acceleration, tp.value, tp.grid,
                            masks[(tp.trajectory_id, tp.step_index)])

    head = entry(0, query_tp, 0.0)
    head.mask = records[(episode_id, step_index)].observation.mask
    picked = []
    for r in ranks:
        i = order[r - 1]
        picked.append(entry(r, grid.tps[i], dist[i]))
    return head, picked


def mask_ascii(mask: np.ndarray) -> list[str]:
    return ["".join("#" if v else "." for v in row) for row in mask]


def format_inspection(head: InspectEntry, entries) -> str:
    blocks = []
    for e in [head, *entries]:
        title = "query" if e.rank == 0 else f"rank {e.rank}"
        blocks.append([
            f"{title}: episode={e.trajectory_id} step={e.step_index}",
            f"distance={e.distance!r}",
            f"A=({e.steering!r}, {e.acceleration!r}) V={e.value!r}",
            f"grid={','.join(str(c) for c in e.grid)}",
            *mask_ascii(e.mask),
        ])
    width = max(len(line) for b in blocks for line in b)
    height = max(len(b) for b in blocks)
    out = []
    for i in range(height):
        out.append("  ".join((b[i] if i < len(b) else "").ljust(width) for b in blocks).rstrip())
    return "\n".join(out) + "\n"
