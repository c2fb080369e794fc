"""Observation encoders and latent-grid quantization."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

ENCODER_HEADER = "# epiplan-encoder v1"
EPS = 1e-12


@dataclass(frozen=True)
class RangeParams:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("lo/hi dimension mismatch")
        if any(h < l for l, h in zip(self.lo, self.hi)):
            raise ValueError("max must be >= min in every dimension")


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """``kind`` is ``"moment"`` (no parameters) or ``"affine"``.

    For the affine kind ``coef`` is m x (H*W + 1); the last column multiplies
    the speed scalar.
    """

    kind: str = "moment"
    mask_shape: tuple = (32, 32)
    m: int = 2
    coef: np.ndarray | None = None
    fit_samples: int = 0
    version: int = 0

    def __post_init__(self):
        if self.kind not in ("moment", "affine"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "moment" and self.m != 2:
            raise ValueError("the moment encoder is 2-dimensional")
        if self.kind == "affine":
            h, w = self.mask_shape
            coef = np.zeros((self.m, h * w + 1)) if self.coef is None else np.asarray(self.coef, float)
            if coef.shape != (self.m, h * w + 1) or not np.all(np.isfinite(coef)):
                raise ValueError("affine coefficients must be finite with shape m x (H*W+1)")
            object.__setattr__(self, "coef", coef)

    def __eq__(self, other):
        if not isinstance(other, EncoderParams):
            return NotImplemented
        same_coef = (self.coef is None and other.coef is None) or (
            self.coef is not None and other.coef is not None and np.array_equal(self.coef, other.coef))
        return (self.kind, tuple(self.mask_shape), self.m, self.fit_samples, self.version) == (
            other.kind, tuple(other.mask_shape), other.m, other.fit_samples, other.version) and same_coef

    def save(self, path) -> None:
        h, w = self.mask_shape
        lines = [ENCODER_HEADER, f"kind {self.kind}", f"shape {h} {w}", f"m {self.m}",
                 f"fit_samples {self.fit_samples}", f"version {self.version}"]
        if self.kind == "affine":
            lines.append("coef")
            lines += [" ".join(repr(float(v)) for v in row) for row in self.coef]
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> EncoderParams:
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0].strip() != ENCODER_HEADER:
            raise ValueError(f"{path}:1: expected header {ENCODER_HEADER!r}")
        try:
            kind = lines[1].split()[1]
            h, w = (int(v) for v in lines[2].split()[1:3])
            m = int(lines[3].split()[1])
            fit_samples = int(lines[4].split()[1])
            version = int(lines[5].split()[1])
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path}: malformed encoder header") from exc
        coef = None
        if kind == "affine":
            rows = lines[7:7 + m]
            if len(rows) != m:
                raise ValueError(f"{path}:{len(lines)}: expected {m} coefficient rows")
            coef = np.array([[float(v) for v in row.split()] for row in rows])
        return cls(kind, (h, w), m, coef, fit_samples, version)


def _moment_batch(masks: np.ndarray) -> np.ndarray:
    masks = np.asarray(masks, dtype=float)
    n, h, w = masks.shape
    cols = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    count = masks.sum(axis=2)
    has = count > 0
    centroid = np.where(has, (masks * cols).sum(axis=2) / np.maximum(count, 1), 0.0)

    def _mean(rows: np.ndarray):
        sel = has & rows
        num = sel.sum(axis=1)
        return np.where(num > 0, (centroid * sel).sum(axis=1) / np.maximum(num, 1), 0.0), num > 0

    e1, _ = _mean(np.ones(h, dtype=bool))
    half = h // 2
    top_rows = np.arange(h) < half
    bottom_rows = np.arange(h) >= h - half
    top, has_top = _mean(top_rows)
    bottom, has_bottom = _mean(bottom_rows)
    e2 = np.where(has_top & has_bottom, top - bottom, 0.0)
    return np.column_stack([e1, e2])


def encode_batch(masks, speeds, params: EncoderParams) -> np.ndarray:
    """Encode N observations given as stacked masks (N, H, W) and speeds (N,)."""
    masks = np.asarray(masks)
    if masks.ndim != 3 or tuple(masks.shape[1:]) != tuple(params.mask_shape):
        raise ValueError(f"mask shape {masks.shape[1:]} does not match encoder {params.mask_shape}")
    if params.kind == "moment":
        return _moment_batch(masks)
    feats = np.concatenate([masks.reshape(len(masks), -1).astype(float),
                            np.asarray(speeds, dtype=float).reshape(-1, 1)], axis=1)
    return feats @ params.coef.T


def encode(obs, params: EncoderParams) -> np.ndarray:
    return encode_batch(np.asarray(obs.mask)[None], [obs.speed], params)[0]


def fit_range(encodings) -> RangeParams:
    enc = np.asarray(encodings, dtype=float)
    if enc.size == 0:
        raise ValueError("fit_range needs at least one encoding")
    enc = enc.reshape(len(enc), -1)
    return RangeParams(tuple(enc.min(axis=0).tolist()), tuple(enc.max(axis=0).tolist()))


def quantize_batch(encodings, r: RangeParams, g: int) -> np.ndarray:
    """floor(g * E / (max - min + eps) + g / 2), clamped to [0, g - 1].

    A zero-width dimension maps to g // 2.
    """
    if g < 2:
        raise ValueError("g must be >= 2")
    enc = np.atleast_2d(np.asarray(encodings, dtype=float))
    lo, hi = np.asarray(r.lo, dtype=float), np.asarray(r.hi, dtype=float)
    if enc.shape[1] != len(lo):
        raise ValueError("encoding dimension does not match range")
    span = hi - lo
    raw = np.floor(g * enc / (span + EPS) + g / 2)
    raw = np.where(span > 0, raw, g // 2)
    return np.clip(raw, 0, g - 1).astype(np.int64)


def quantize(e, r: RangeParams, g: int) -> tuple:
    return tuple(int(v) for v in quantize_batch(e, r, g)[0])


def refit_encoder(db, params: EncoderParams) -> tuple[EncoderParams, RangeParams]:
    """Re-fit the encoder on every observation in ``db``.

    Moment encoders have nothing to fit and are returned as-is. Affine
    encoders are re-solved by least squares against the moment encoding of the
    stored masks. The returned range covers the new encodings; any grid built
    with the old parameters has to be rebuilt.
    """
    masks, speeds = db.observation_arrays()
    if len(masks) == 0:
        raise ValueError("cannot refit on an empty database")
    if params.kind == "affine":
        targets = _moment_batch(masks)
        feats = np.concatenate([masks.reshape(len(masks), -1).astype(float),
                                np.asarray(speeds, dtype=float).reshape(-1, 1)], axis=1)
        coef, *_ = np.linalg.lstsq(feats, targets, rcond=None)
        params = replace(params, coef=coef.T, fit_samples=len(masks), version=params.version + 1)
    return params, fit_range(encode_batch(masks, speeds, params))
