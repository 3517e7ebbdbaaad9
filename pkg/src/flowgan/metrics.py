"""Evaluation battery for generated OD flows.

Checksum (corpus MAX/AVG) screens magnitudes, PSNR and SSIM score the
normalized flow images pixel- and structure-wise, and CPC (common part
of commuters) scores integer trip counts:

    CPC = 2 * sum(min(G, R)) / (sum(G) + sum(R))

PSNR/SSIM run on the full 64x64 frame of the normalized images (padding
is identical on both sides); CPC runs on decoded integer counts. Exact
agreement yields PSNR +inf, SSIM 1.0 and CPC 1.0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .codec import FlowImage, FlowMatrix, encode
from .errors import CorpusMisaligned, EmptyCorpus, ImageTooSmall, ShapeMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 1.0


def checksum(matrices) -> tuple[float, float]:
    """(MAX, AVG) over a corpus: the largest entry and the mean over all
    active n x n entries of every matrix (padding excluded)."""
    top = 0.0
    total = 0.0
    cells = 0
    count = 0
    for m in matrices:
        c = m.counts if isinstance(m, FlowMatrix) else np.asarray(m)
        if c.size:
            top = max(top, float(c.max()))
        total += float(c.sum())
        cells += c.size
        count += 1
    if count == 0:
        raise EmptyCorpus("checksum needs at least one matrix")
    return top, total / cells if cells else 0.0


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, FlowImage) else np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images return math.inf as an explicit sentinel, keeping
    exact matches distinguishable from merely close ones.
    """
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ShapeMismatch(f"psnr shapes differ: {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g1, g1)
    return k / k.sum()


_SSIM_KERNEL = _gaussian_kernel()


def ssim(a, b) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Only fully valid window positions contribute; no border padding.
    """
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise ShapeMismatch(f"ssim shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ImageTooSmall(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    k = _SSIM_KERNEL
    win = (SSIM_WINDOW, SSIM_WINDOW)
    wx = sliding_window_view(x, win)
    wy = sliding_window_view(y, win)
    ux = np.tensordot(wx, k, axes=((2, 3), (0, 1)))
    uy = np.tensordot(wy, k, axes=((2, 3), (0, 1)))
    exx = np.tensordot(wx * wx, k, axes=((2, 3), (0, 1)))
    eyy = np.tensordot(wy * wy, k, axes=((2, 3), (0, 1)))
    exy = np.tensordot(wx * wy, k, axes=((2, 3), (0, 1)))
    vx = exx - ux * ux
    vy = eyy - uy * uy
    cov = exy - ux * uy
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    s_map = ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / \
        ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s_map.mean())


def cpc(gen, real) -> float:
    """Common part of commuters between two trip-count matrices.

    Two all-zero matrices count as a perfect (vacuous) match: 1.0.
    """
    g = gen.counts if isinstance(gen, FlowMatrix) else np.asarray(gen, dtype=np.float64)
    r = real.counts if isinstance(real, FlowMatrix) else np.asarray(real, dtype=np.float64)
    if g.shape != r.shape:
        raise ShapeMismatch(f"cpc shapes differ: {g.shape} vs {r.shape}")
    denom = float(g.sum() + r.sum())
    if denom == 0.0:
        return 1.0
    return 2.0 * float(np.minimum(g, r).sum()) / denom


# --- corpus evaluation ------------------------------------------------------

@dataclass(frozen=True)
class EvalSample:
    map_name: str
    condition: str
    sample_id: str
    matrix: FlowMatrix


@dataclass(frozen=True)
class MapSummary:
    map_name: str
    mean_cpc: float
    mean_ssim: float
    median_psnr: float


@dataclass(frozen=True)
class MetricReport:
    rows: tuple  # (map, condition, sample_id, psnr, ssim, cpc)
    summaries: tuple[MapSummary, ...]
    average: MapSummary
    checksum_generated: tuple[float, float]
    checksum_ground: tuple[float, float]


def _grouped(samples) -> dict:
    groups: dict[tuple[str, str], list[EvalSample]] = {}
    for s in samples:
        groups.setdefault((s.map_name, s.condition), []).append(s)
    for g in groups.values():
        g.sort(key=lambda s: s.sample_id)
    return groups


def evaluate_run(generated, ground, scale: float) -> MetricReport:
    """Score a generated corpus against ground truth, per dynamic map.

    Corpora pair up positionally within each (map, condition) group
    after sorting by sample id; group keys and counts must match.
    PSNR/SSIM are computed on images encoded at the shared `scale`
    (saturating above it), CPC on raw counts.
    """
    gen_groups = _grouped(generated)
    gnd_groups = _grouped(ground)
    if set(gen_groups) != set(gnd_groups):
        raise CorpusMisaligned(
            f"group keys differ: {sorted(set(gen_groups) ^ set(gnd_groups))}"
        )
    if not gen_groups:
        raise EmptyCorpus("nothing to evaluate")
    rows = []
    per_map: dict[str, list[tuple[float, float, float]]] = {}
    for key in sorted(gen_groups):
        gens, gnds = gen_groups[key], gnd_groups[key]
        if len(gens) != len(gnds):
            raise CorpusMisaligned(
                f"group {key}: {len(gens)} generated vs {len(gnds)} ground samples"
            )
        for gs, rs in zip(gens, gnds):
            gi = encode(gs.matrix, scale, saturate=True)
            ri = encode(rs.matrix, scale, saturate=True)
            row = (gs.map_name, gs.condition, gs.sample_id,
                   psnr(gi, ri), ssim(gi, ri), cpc(gs.matrix, rs.matrix))
            rows.append(row)
            per_map.setdefault(gs.map_name, []).append(row[3:])
    summaries = []
    for name in sorted(per_map):
        vals = np.array(per_map[name], dtype=np.float64)
        summaries.append(MapSummary(name,
                                    mean_cpc=float(vals[:, 2].mean()),
                                    mean_ssim=float(vals[:, 1].mean()),
                                    median_psnr=float(np.median(vals[:, 0]))))
    average = MapSummary("average",
                         mean_cpc=float(np.mean([s.mean_cpc for s in summaries])),
                         mean_ssim=float(np.mean([s.mean_ssim for s in summaries])),
                         median_psnr=float(np.mean([s.median_psnr for s in summaries])))
    return MetricReport(rows=tuple(rows), summaries=tuple(summaries), average=average,
                        checksum_generated=checksum([s.matrix for s in generated]),
                        checksum_ground=checksum([s.matrix for s in ground]))


DETAIL_HEADER = ["map", "condition", "sample_id", "psnr_db", "ssim", "cpc"]
SUMMARY_HEADER = ["map", "mean_cpc", "mean_ssim", "median_psnr"]
CHECKSUM_HEADER = ["source", "max", "avg"]


def write_report(report: MetricReport, detail_path, summary_path, checksum_path) -> None:
    with open(detail_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETAIL_HEADER)
        for m, c, sid, p, s, cp in report.rows:
            w.writerow([m, c, sid, repr(p), repr(s), repr(cp)])
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for s in report.summaries + (report.average,):
            w.writerow([s.map_name, repr(s.mean_cpc), repr(s.mean_ssim),
                        repr(s.median_psnr)])
    with open(checksum_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CHECKSUM_HEADER)
        w.writerow(["generated", repr(report.checksum_generated[0]),
                    repr(report.checksum_generated[1])])
        w.writerow(["ground", repr(report.checksum_ground[0]),
                    repr(report.checksum_ground[1])])
