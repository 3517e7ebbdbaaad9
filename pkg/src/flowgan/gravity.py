"""Gravity-model baseline: power-law flow calibration and prediction.

Flows are modeled as T_ij = G * m_i**alpha * m_j**beta / d_ij**gamma
with centroid distances d in meters. Calibration is an exact
normal-equation least-squares fit of the log-linear form over OD pairs
with at least one observed trip; masses default to the in+out trip
totals of the training split.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import FlowMatrix
from .dynmap import DynamicMap, cell_centers
from .errors import DegenerateDesign, EmptyDataset
from .mobility import ODDataset


@dataclass(frozen=True)
class GravityParams:
    g: float
    alpha: float
    beta: float
    gamma: float


def derive_masses(dataset: ODDataset) -> np.ndarray:
    """Per-cell mass proxy: total outflow plus inflow over the dataset."""
    if not dataset.entries:
        raise EmptyDataset("cannot derive masses from an empty dataset")
    total = np.zeros((dataset.n, dataset.n), dtype=np.float64)
    for e in dataset.entries:
        total += e.flow.counts
    return total.sum(axis=1) + total.sum(axis=0)


def total_flows(dataset: ODDataset) -> np.ndarray:
    """Sum of all entry matrices (the calibration target)."""
    if not dataset.entries:
        raise EmptyDataset("dataset has no entries")
    total = np.zeros((dataset.n, dataset.n), dtype=np.float64)
    for e in dataset.entries:
        total += e.flow.counts
    return total


def distance_matrix(dmap: DynamicMap) -> np.ndarray:
    centers = cell_centers(dmap)
    diff = centers[:, None, :] - centers[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


def fit(flows, dmap: DynamicMap, masses) -> GravityParams:
    """Least-squares calibration of ln T = ln G + a ln m_i + b ln m_j - c ln d.

    `flows` is an ODDataset (entries are summed) or a raw (n, n) array;
    only pairs with flow >= 1, positive masses on both ends, and
    positive distance enter the fit. Raises DegenerateDesign when the
    normal equations are rank deficient (fewer than four usable pairs,
    all distances equal, constant masses, ...).
    """
    t = total_flows(flows) if isinstance(flows, ODDataset) else np.asarray(flows, dtype=np.float64)
    masses = np.asarray(masses, dtype=np.float64)
    if t.shape != (dmap.n, dmap.n) or masses.shape != (dmap.n,):
        raise DegenerateDesign(
            f"shape mismatch: flows {t.shape}, masses {masses.shape}, map n={dmap.n}"
        )
    d = distance_matrix(dmap)
    i, j = np.nonzero((t >= 1.0) & (d > 0)
                      & (masses[:, None] > 0) & (masses[None, :] > 0))
    if i.size < 4:
        raise DegenerateDesign(f"only {i.size} usable OD pairs, need at least 4")
    y = np.log(t[i, j])
    x = np.column_stack([np.ones(i.size), np.log(masses[i]), np.log(masses[j]),
                         np.log(d[i, j])])
    xtx = x.T @ x
    if np.linalg.matrix_rank(xtx) < 4:
        raise DegenerateDesign("normal equations are rank deficient")
    coef = np.linalg.solve(xtx, x.T @ y)
    return GravityParams(g=float(np.exp(coef[0])), alpha=float(coef[1]),
                         beta=float(coef[2]), gamma=float(-coef[3]))


def predict(params: GravityParams, masses, dmap: DynamicMap) -> np.ndarray:
    """Real-valued flow matrix under the fitted law; zero-mass cells and
    the diagonal yield zero flow."""
    masses = np.asarray(masses, dtype=np.float64)
    d = distance_matrix(dmap)
    mi = np.where(masses > 0, masses, 1.0)
    t = params.g * (mi[:, None] ** params.alpha) * (mi[None, :] ** params.beta)
    with np.errstate(divide="ignore"):
        t = t * np.where(d > 0, d, np.inf) ** (-params.gamma)
    t = np.where((masses[:, None] > 0) & (masses[None, :] > 0), t, 0.0)
    np.fill_diagonal(t, 0.0)
    return t


def predict_matrix(params: GravityParams, masses, dmap: DynamicMap) -> FlowMatrix:
    """Integer-rounded prediction for metric comparison."""
    return FlowMatrix(np.rint(predict(params, masses, dmap)).astype(np.int64))


def write_params(params: GravityParams, path, split_id: str = "") -> None:
    """Plain text export: one `G,alpha,beta,gamma` line plus the split id."""
    lines = ["G,alpha,beta,gamma",
             f"{params.g!r},{params.alpha!r},{params.beta!r},{params.gamma!r}"]
    if split_id:
        lines.append(f"# split: {split_id}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_params(path) -> GravityParams:
    lines = [ln for ln in Path(path).read_text().splitlines()
             if ln and not ln.startswith("#")]
    if not lines or lines[0] != "G,alpha,beta,gamma":
        raise DegenerateDesign(f"unrecognized gravity parameter file {path}")
    g, a, b, c = (float(v) for v in lines[1].split(","))
    return GravityParams(g=g, alpha=a, beta=b, gamma=c)
