"""Trajectory ingestion, trip extraction, and OD flow aggregation.

Trips are defined as transitions between consecutive distinct cells of a
dynamic map after collapsing same-cell stays; each trip departs at the
last record of its origin stay. Flows are bucketed by local calendar day
and six daily time groups, then accumulated into per-(day, group) OD
matrices. A synthetic trajectory generator with a planted gravity law
stands in for real GPS corpora.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .codec import FlowMatrix
from .dynmap import DynamicMap, cell_centers, locate
from .errors import (
    DatasetMismatch,
    EmptyDataset,
    EmptySplit,
    InvalidConfig,
    NotInExtent,
)

log = logging.getLogger("flowgan.mobility")


class TrajectoryRecord(NamedTuple):
    user_id: str
    ts: int  # epoch seconds, UTC
    x: float
    y: float


class Trip(NamedTuple):
    user_id: str
    origin_cell: int
    dest_cell: int
    depart_ts: int


@dataclass(frozen=True)
class TimeGroup:
    id: int
    label: str
    start_hour: int
    end_hour: int


# Six groups partition the 24h day; the night group wraps midnight.
TIME_GROUPS = (
    TimeGroup(1, "morning_travel", 5, 8),
    TimeGroup(2, "work_morning", 8, 11),
    TimeGroup(3, "lunch_travel", 11, 14),
    TimeGroup(4, "work_afternoon", 14, 17),
    TimeGroup(5, "dinner_travel", 17, 20),
    TimeGroup(6, "night", 20, 5),
)


def time_group_of(ts: int, tz_offset: int = 0) -> int:
    """Time-group id (1..6) of an epoch timestamp at a fixed UTC offset."""
    hour = (ts + tz_offset) % 86400 // 3600
    for g in TIME_GROUPS[:5]:
        if g.start_hour <= hour < g.end_hour:
            return g.id
    return 6


def local_date(ts: int, tz_offset: int = 0) -> dt.date:
    """Local calendar date; night trips after midnight keep their own date."""
    return dt.datetime.fromtimestamp(ts + tz_offset, dt.timezone.utc).date()


@dataclass(frozen=True)
class ODEntry:
    day: dt.date
    group: int
    flow: FlowMatrix


@dataclass(frozen=True)
class ODDataset:
    map_name: str
    n: int
    entries: tuple[ODEntry, ...]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            key = (e.day, e.group)
            if key in seen:
                raise DatasetMismatch(f"duplicate entry for {key}")
            seen.add(key)
            if e.flow.n != self.n:
                raise DatasetMismatch(
                    f"entry {key} has {e.flow.n} cells, dataset expects {self.n}"
                )

    def total_trips(self) -> int:
        return sum(e.flow.total() for e in self.entries)


def extract_trips(records: Iterable[TrajectoryRecord], dmap: DynamicMap,
                  stats: dict | None = None) -> Iterator[Trip]:
    """Turn per-user location streams into cell-transition trips.

    Records must arrive grouped by user and time-sorted within each
    user. Consecutive records in the same cell collapse into one stay;
    each transition between distinct cells emits a trip departing at the
    last record of the origin stay. Records outside the map extent are
    skipped (counted in ``stats['skipped_outside']``).
    """
    skipped = 0
    cur_user = None
    cur_cell = -1
    cur_ts = 0
    for rec in records:
        try:
            cell = locate(dmap, rec.x, rec.y)
        except NotInExtent:
            skipped += 1
            continue
        if rec.user_id != cur_user:
            cur_user = rec.user_id
            cur_cell = cell
            cur_ts = rec.ts
            continue
        if cell == cur_cell:
            cur_ts = rec.ts
            continue
        yield Trip(cur_user, cur_cell, cell, cur_ts)
        cur_cell = cell
        cur_ts = rec.ts
    if stats is not None:
        stats["skipped_outside"] = skipped


def aggregate(trips: Iterable[Trip], dmap: DynamicMap, local_tz_offset: int = 0,
              days: Iterable[dt.date] | None = None) -> ODDataset:
    """Accumulate trips into per-(day, time group) OD matrices.

    Passing `days` pre-creates all six groups for each listed day, so
    slots without trips still appear as all-zero matrices (one complete
    day contributes exactly six entries).
    """
    n = dmap.n
    slots: dict[tuple[dt.date, int], np.ndarray] = {}
    if days is not None:
        for day in days:
            for g in TIME_GROUPS:
                slots[(day, g.id)] = np.zeros((n, n), dtype=np.int64)
    for t in trips:
        key = (local_date(t.depart_ts, local_tz_offset),
               time_group_of(t.depart_ts, local_tz_offset))
        mat = slots.get(key)
        if mat is None:
            mat = slots[key] = np.zeros((n, n), dtype=np.int64)
        mat[t.origin_cell, t.dest_cell] += 1
    entries = tuple(
        ODEntry(day, group, FlowMatrix(slots[(day, group)]))
        for day, group in sorted(slots.keys(), key=lambda k: (k[0].toordinal(), k[1]))
    )
    return ODDataset(map_name=dmap.name, n=n, entries=entries)


def split_dataset(dataset: ODDataset, train_fraction: float,
                  seed: int) -> tuple[ODDataset, ODDataset]:
    """Deterministic disjoint, exhaustive split of the dataset entries."""
    if not 0.0 < train_fraction < 1.0:
        raise InvalidConfig(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset.entries)
    n_train = int(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise EmptySplit(f"{n} entries at fraction {train_fraction} leave one side empty")
    order = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(order[:n_train].tolist())
    hold_idx = sorted(order[n_train:].tolist())
    train = replace(dataset, entries=tuple(dataset.entries[i] for i in train_idx))
    hold = replace(dataset, entries=tuple(dataset.entries[i] for i in hold_idx))
    return train, hold


# --- synthetic city -------------------------------------------------------

TRAVEL_SECONDS = 60
MIN_TRIP_SPACING = 180  # per-user floor between departures in one window


@dataclass(frozen=True)
class SynthConfig:
    """Planted-gravity-law trajectory corpus parameters.

    `masses` are per-cell weights of the synthesis map (homes and
    destinations are drawn proportional to them); `intensities` are mean
    trips per user for each of the six time groups; destination choice
    decays with centroid distance to the power `gamma`. With
    `accessibility_rate` on (default) a user's trip rate scales with the
    accessibility of their home cell so that corpus-level expected flows
    follow mass_i * mass_j / d_ij**gamma exactly.
    """

    masses: tuple[float, ...]
    intensities: tuple[float, float, float, float, float, float]
    gamma: float
    n_users: int
    n_days: int
    start_day: dt.date = dt.date(2019, 9, 1)
    tz_offset: int = 0
    accessibility_rate: bool = True


def _validate_synth(dmap: DynamicMap, config: SynthConfig) -> np.ndarray:
    masses = np.asarray(config.masses, dtype=np.float64)
    if masses.shape != (dmap.n,):
        raise InvalidConfig(f"expected {dmap.n} masses, got {masses.shape}")
    if np.any(masses < 0) or not np.any(masses > 0):
        raise InvalidConfig("masses must be nonnegative with at least one positive")
    if len(config.intensities) != 6 or any(v < 0 for v in config.intensities):
        raise InvalidConfig("intensities must be six nonnegative values")
    if config.n_users < 0 or config.n_days < 1:
        raise InvalidConfig("need n_users >= 0 and n_days >= 1")
    return masses


def _window_len(group: TimeGroup) -> int:
    # virtual window seconds; the night group's 9h window maps 0..5h to
    # the small hours and 5..9h to the evening of the same date
    if group.id == 6:
        return 9 * 3600
    return (group.end_hour - group.start_hour) * 3600


def _window_ts(day_start: int, group: TimeGroup, offset: np.ndarray) -> np.ndarray:
    if group.id != 6:
        return day_start + group.start_hour * 3600 + offset
    early = offset < 5 * 3600
    return np.where(early, day_start + offset, day_start + 20 * 3600 + (offset - 5 * 3600))


def synth_city(dmap: DynamicMap, config: SynthConfig, seed: int) -> list[TrajectoryRecord]:
    """Synthesize a trajectory corpus with a planted gravity law.

    Users live in home cells drawn proportional to mass; every (day,
    time group) they make a Poisson number of trips to destinations
    drawn with probability proportional to mass_j / d_ij**gamma. Each
    trip emits one record at a uniform point inside the origin cell and
    one inside the destination cell, 60 s later. Departures within a
    window keep at least 180 s spacing so extracted transitions
    reproduce the planted trips. Deterministic given the seed.
    """
    masses = _validate_synth(dmap, config)
    rng = np.random.default_rng(seed)
    n = dmap.n
    centers = cell_centers(dmap)

    home_p = masses / masses.sum()
    homes = rng.choice(n, size=config.n_users, p=home_p) if config.n_users else np.array([], dtype=int)

    # destination kernels per origin cell: w[i, j] = m_j / d_ij^gamma, j != i
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    with np.errstate(divide="ignore"):
        w = masses[None, :] * np.where(dist > 0, dist, np.inf) ** (-config.gamma)
    np.fill_diagonal(w, 0.0)
    z = w.sum(axis=1)
    dest_p = np.divide(w, z[:, None], out=np.zeros_like(w), where=z[:, None] > 0)

    if config.accessibility_rate:
        z_mean = float((home_p * z).sum())
        rate_mult = z / z_mean if z_mean > 0 else np.zeros(n)
    else:
        rate_mult = np.ones(n)

    # users sorted by home cell so destination draws batch per cell
    by_home: dict[int, np.ndarray] = {}
    if config.n_users:
        order = np.argsort(homes, kind="stable")
        sorted_homes = homes[order]
        bounds = np.searchsorted(sorted_homes, np.arange(n + 1))
        by_home = {i: order[bounds[i]:bounds[i + 1]]
                   for i in range(n) if bounds[i] < bounds[i + 1]}

    user_ids = np.array([f"u{idx:06d}" for idx in range(config.n_users)])
    day0 = dt.datetime.combine(config.start_day, dt.time(), dt.timezone.utc)
    day0_ts = int(day0.timestamp()) - config.tz_offset

    recs_user: list[np.ndarray] = []
    recs_ts: list[np.ndarray] = []
    recs_cell: list[np.ndarray] = []
    for day in range(config.n_days):
        day_start = day0_ts + day * 86400
        for g in TIME_GROUPS:
            lam0 = config.intensities[g.id - 1]
            if lam0 == 0:
                continue
            win_len = _window_len(g)
            kmax = win_len // MIN_TRIP_SPACING
            for home, users in by_home.items():
                if z[home] <= 0:
                    continue
                lam = lam0 * rate_mult[home]
                counts = np.minimum(rng.poisson(lam, size=users.size), kmax)
                total = int(counts.sum())
                if total == 0:
                    continue
                dests = rng.choice(n, size=total, p=dest_p[home])
                trip_user = np.repeat(users, counts)
                # per-user slot grid: trip k of K sits in slot [kW/K, (k+1)W/K)
                starts = np.cumsum(counts) - counts
                ks = np.arange(total) - np.repeat(starts, counts)
                kn = np.repeat(counts, counts)
                slot_start = (ks * win_len) // kn
                slot_len = ((ks + 1) * win_len) // kn - slot_start
                jitter = rng.integers(0, np.maximum(slot_len - (MIN_TRIP_SPACING - TRAVEL_SECONDS), 1))
                depart = _window_ts(day_start, g, slot_start + jitter)
                recs_user.append(trip_user)
                recs_ts.append(depart)
                recs_cell.append(np.full(total, home, dtype=np.int64))
                recs_user.append(trip_user)
                recs_ts.append(depart + TRAVEL_SECONDS)
                recs_cell.append(dests)

    if not recs_user:
        return []
    users_a = np.concatenate(recs_user)
    ts_a = np.concatenate(recs_ts)
    cells_a = np.concatenate(recs_cell)
    # uniform point inside each record's cell
    mins = np.array([(c.min_x, c.min_y) for c in dmap.cells], dtype=np.float64)
    sides = np.array([c.side for c in dmap.cells], dtype=np.float64)
    u = rng.random((cells_a.size, 2))
    xy = mins[cells_a] + u * sides[cells_a, None]

    order = np.lexsort((ts_a, users_a))
    uid = user_ids[users_a[order]] if config.n_users else users_a[order]
    return [TrajectoryRecord(str(u_), int(t_), float(x_), float(y_))
            for u_, t_, (x_, y_) in zip(uid, ts_a[order], xy[order])]


# --- file formats ---------------------------------------------------------

TRAJECTORY_HEADER = ["user_id", "timestamp", "x", "y"]
DATASET_HEADER = ["day", "group", "origin", "dest", "count"]


def write_trajectories(records: Iterable[TrajectoryRecord], path) -> int:
    """Write the trajectory CSV; returns the number of records written."""
    count = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_HEADER)
        for rec in records:
            writer.writerow([rec.user_id, rec.ts, f"{rec.x:.3f}", f"{rec.y:.3f}"])
            count += 1
    return count


def read_trajectories(path, stats: dict | None = None) -> Iterator[TrajectoryRecord]:
    """Stream trajectory records; malformed lines are counted, not fatal."""
    malformed = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRAJECTORY_HEADER:
            raise DatasetMismatch(f"unexpected trajectory header {header!r}")
        for row in reader:
            try:
                yield TrajectoryRecord(row[0], int(row[1]), float(row[2]), float(row[3]))
            except (ValueError, IndexError):
                malformed += 1
    if malformed:
        log.warning("skipped %d malformed trajectory lines in %s", malformed, path)
    if stats is not None:
        stats["malformed"] = malformed


def write_dataset(dataset: ODDataset, csv_path, map_doc_name: str | None = None) -> None:
    """Write the OD dataset CSV plus its JSON sidecar (map reference + entry index)."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATASET_HEADER)
        for e in dataset.entries:
            ii, jj = np.nonzero(e.flow.counts)
            for i, j in zip(ii.tolist(), jj.tolist()):
                writer.writerow([e.day.isoformat(), e.group, i, j,
                                 int(e.flow.counts[i, j])])
    meta = {
        "format": "flowgan-dataset/1",
        "map_name": dataset.map_name,
        "n": dataset.n,
        "entries": [[e.day.isoformat(), e.group] for e in dataset.entries],
    }
    if map_doc_name:
        meta["map_doc"] = map_doc_name
    sidecar(csv_path).write_text(json.dumps(meta, indent=1) + "\n")


def sidecar(csv_path) -> Path:
    return Path(csv_path).with_suffix(".meta.json")


def read_dataset(csv_path, dmap: DynamicMap) -> ODDataset:
    """Load an OD dataset and validate it against the named map."""
    csv_path = Path(csv_path)
    meta = json.loads(sidecar(csv_path).read_text())
    if meta.get("format") != "flowgan-dataset/1":
        raise DatasetMismatch(f"unexpected sidecar format {meta.get('format')!r}")
    if meta["map_name"] != dmap.name:
        raise DatasetMismatch(f"dataset is for map {meta['map_name']!r}, got {dmap.name!r}")
    if meta["n"] != dmap.n:
        raise DatasetMismatch(f"dataset has {meta['n']} cells, map has {dmap.n}")
    mats = {(dt.date.fromisoformat(d), g): np.zeros((dmap.n, dmap.n), dtype=np.int64)
            for d, g in meta["entries"]}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DATASET_HEADER:
            raise DatasetMismatch(f"unexpected dataset header {header!r}")
        for row in reader:
            day = dt.date.fromisoformat(row[0])
            key = (day, int(row[1]))
            if key not in mats:
                raise DatasetMismatch(f"row for {key} missing from sidecar entry index")
            i, j, c = int(row[2]), int(row[3]), int(row[4])
            if not (0 <= i < dmap.n and 0 <= j < dmap.n):
                raise DatasetMismatch(f"cell index out of range in row {row}")
            mats[key][i, j] = c
    entries = tuple(ODEntry(day, group, FlowMatrix(mats[(day, group)]))
                    for day, group in sorted(mats, key=lambda k: (k[0].toordinal(), k[1])))
    return ODDataset(map_name=dmap.name, n=dmap.n, entries=entries)


def dataset_days(dataset: ODDataset) -> list[dt.date]:
    return sorted({e.day for e in dataset.entries})
