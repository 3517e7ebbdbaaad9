"""Encode OD flow matrices as fixed-size normalized images and back.

Counts are compressed with the natural log transform ln(1 + x), divided
by a global scale frozen on the training corpus, and placed in the
top-left block of a 64x64 zero-padded frame. Decoding inverts the
transform and rounds back to integer trip counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NegativeCount, ScaleTooSmall, ShapeMismatch

IMG_SIZE = 64


@dataclass(frozen=True)
class FlowMatrix:
    """Integer OD trip counts for the n active cells of one map."""

    counts: np.ndarray  # (n, n) nonnegative ints, zero diagonal

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ShapeMismatch(f"flow matrix must be square, got {c.shape}")
        if c.shape[0] > IMG_SIZE:
            raise ShapeMismatch(f"active size {c.shape[0]} exceeds {IMG_SIZE}")
        if np.any(c < 0):
            raise NegativeCount("flow counts must be nonnegative")
        if np.any(np.diagonal(c) != 0):
            raise ShapeMismatch("flow matrix diagonal must be zero")
        object.__setattr__(self, "counts", c.astype(np.int64, copy=False))

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class FlowImage:
    """64x64 pixel frame in [0, 1]; only the top-left n x n block is active."""

    pixels: np.ndarray
    n: int
    scale: float

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.shape != (IMG_SIZE, IMG_SIZE):
            raise ShapeMismatch(f"flow image must be {IMG_SIZE}x{IMG_SIZE}, got {p.shape}")
        object.__setattr__(self, "pixels", p)


def normalize(x):
    """ln(1 + x) for scalar or array counts; rejects negatives."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0):
        raise NegativeCount("cannot normalize negative counts")
    out = np.log1p(arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def encode(flow: FlowMatrix, scale: float, saturate: bool = False) -> FlowImage:
    """Normalized image of `flow` under a frozen global `scale`.

    `scale` must dominate every normalized count; with ``saturate=True``
    values above the scale clip to pixel 1.0 instead of raising (used
    when scoring corpora that were not part of the scale's training
    split).
    """
    if scale <= 0:
        raise ScaleTooSmall(f"scale must be positive, got {scale}")
    norm = normalize(flow.counts)
    top = float(norm.max()) if norm.size else 0.0
    if top > scale:
        if not saturate:
            raise ScaleTooSmall(
                f"normalized value {top:.6g} exceeds scale {scale:.6g}"
            )
        norm = np.minimum(norm, scale)
    pixels = np.zeros((IMG_SIZE, IMG_SIZE), dtype=np.float64)
    pixels[: flow.n, : flow.n] = norm / scale
    return FlowImage(pixels=pixels, n=flow.n, scale=float(scale))


def decode(img: FlowImage) -> FlowMatrix:
    """Integer flow matrix recovered from a (possibly raw GAN) image.

    Pixels are clamped to [0, 1] first, so slightly out-of-range model
    outputs still decode to finite counts. Rounds to nearest integer,
    clamps at zero, forces the diagonal to zero, ignores padding.
    """
    block = np.clip(img.pixels[: img.n, : img.n], 0.0, 1.0)
    counts = np.rint(np.expm1(block * img.scale))
    counts = np.maximum(counts, 0.0).astype(np.int64)
    np.fill_diagonal(counts, 0)
    return FlowMatrix(counts=counts)


def corpus_scale(matrices) -> float:
    """Smallest scale covering every normalized count in `matrices`.

    All-zero corpora get scale 1.0 (any positive scale encodes them to
    all-zero images).
    """
    top = 0.0
    for m in matrices:
        if m.counts.size:
            top = max(top, float(normalize(int(m.counts.max()))))
    return top if top > 0 else 1.0


# Binary grayscale export: 8-bit binary PGM (P5), one byte per pixel in
# row-major order, top row first. Header is exactly "P5\n64 64\n255\n"
# (13 bytes) so the file is always 13 + 4096 = 4109 bytes.
PGM_HEADER = b"P5\n64 64\n255\n"
PGM_SIZE = len(PGM_HEADER) + IMG_SIZE * IMG_SIZE


def to_pgm(img: FlowImage) -> bytes:
    """Quantize to 8 bits (round half up) and emit a binary PGM raster."""
    q = np.floor(np.clip(img.pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return PGM_HEADER + q.tobytes()
