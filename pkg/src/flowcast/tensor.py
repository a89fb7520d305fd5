"""Hourly flow tensors built from trip records.

A trip increments cell (i, j) of the flow matrix for the one-hour fragment
containing its pickup time, where i and j are the regions of its pickup and
dropoff points. Trips with an unassignable endpoint or a pickup outside the
requested window are dropped and tallied in a discard report.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import container
from .errors import DataError
from .geo import GeoPoint, RegionMap, assign_regions

FRAGMENT_SECONDS = 3600  # one-hour fragments throughout
WORKDAY = "workday"
HOLIDAY = "holiday"
DAY_TYPES = (WORKDAY, HOLIDAY)


def parse_rfc3339(text: str) -> datetime:
    """Parse an RFC 3339 timestamp to an aware UTC datetime."""
    try:
        dt = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataError(f"bad timestamp {text!r}: {exc}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_rfc3339(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def default_day_type(d: date) -> str:
    return HOLIDAY if d.weekday() >= 5 else WORKDAY


@dataclass(frozen=True)
class TripRecord:
    bike_id: str
    pickup: GeoPoint
    pickup_time: datetime
    dropoff: GeoPoint
    dropoff_time: datetime

    def __post_init__(self):
        if self.dropoff_time < self.pickup_time:
            raise DataError(f"trip {self.bike_id}: dropoff before pickup")


@dataclass(frozen=True)
class FragmentIndex:
    """One time fragment: 0-based position, start instant, and day type."""

    n: int
    start: datetime
    duration: int = FRAGMENT_SECONDS
    day_type: str = WORKDAY

    @property
    def hour(self) -> int:
        return self.start.hour

    @property
    def weekday(self) -> int:
        return self.start.weekday()


@dataclass
class FragmentSpec:
    """Aligned hourly windows over [start, end) plus a day-type calendar."""

    start: datetime
    end: datetime
    calendar: dict[date, str] = field(default_factory=dict)

    def __post_init__(self):
        self.start = floor_hour(self.start)
        self.end = floor_hour(self.end + timedelta(seconds=FRAGMENT_SECONDS - 1))
        if self.end <= self.start:
            raise DataError("fragment window is empty")

    def day_type_of(self, d: date) -> str:
        return self.calendar.get(d, default_day_type(d))

    def fragments(self) -> list[FragmentIndex]:
        out = []
        t = self.start
        n = 0
        while t < self.end:
            out.append(FragmentIndex(n=n, start=t, day_type=self.day_type_of(t.date())))
            t += timedelta(seconds=FRAGMENT_SECONDS)
            n += 1
        return out


def floor_hour(dt: datetime) -> datetime:
    return dt.replace(minute=0, second=0, microsecond=0)


@dataclass
class FlowTensor:
    fragments: list[FragmentIndex]
    matrices: np.ndarray  # (N, M, M) nonnegative
    m: int

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=float)
        if self.matrices.ndim != 3 or self.matrices.shape[1:] != (self.m, self.m):
            raise DataError(f"flow matrices must be (N, {self.m}, {self.m}), got {self.matrices.shape}")
        if len(self.fragments) != len(self.matrices):
            raise DataError("fragment count does not match matrix count")
        if np.any(self.matrices < 0):
            raise DataError("flow matrices must be nonnegative")
        starts = [f.start for f in self.fragments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise DataError("fragment starts must be strictly increasing")

    @property
    def n(self) -> int:
        return len(self.fragments)

    def subset(self, idx: Sequence[int]) -> "FlowTensor":
        idx = sorted(idx)
        frags = [FragmentIndex(n=k, start=self.fragments[i].start,
                               duration=self.fragments[i].duration,
                               day_type=self.fragments[i].day_type)
                 for k, i in enumerate(idx)]
        return FlowTensor(fragments=frags, matrices=self.matrices[idx], m=self.m)


@dataclass
class DiscardReport:
    total: int = 0
    kept: int = 0
    unassigned_pickup: int = 0
    unassigned_dropoff: int = 0
    out_of_window: int = 0

    def as_dict(self) -> dict:
        return dict(total=self.total, kept=self.kept,
                    unassigned_pickup=self.unassigned_pickup,
                    unassigned_dropoff=self.unassigned_dropoff,
                    out_of_window=self.out_of_window)


def read_trips_csv(path: str | Path) -> list[TripRecord]:
    """Read trips from CSV with header
    bike_id,pickup_lon,pickup_lat,pickup_time,dropoff_lon,dropoff_lat,dropoff_time."""
    trips = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"bike_id", "pickup_lon", "pickup_lat", "pickup_time",
                    "dropoff_lon", "dropoff_lat", "dropoff_time"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: trip CSV must have columns {sorted(required)}")
        for row in reader:
            trips.append(TripRecord(
                bike_id=row["bike_id"],
                pickup=GeoPoint(float(row["pickup_lon"]), float(row["pickup_lat"])),
                pickup_time=parse_rfc3339(row["pickup_time"]),
                dropoff=GeoPoint(float(row["dropoff_lon"]), float(row["dropoff_lat"])),
                dropoff_time=parse_rfc3339(row["dropoff_time"]),
            ))
    return trips


def read_calendar_csv(path: str | Path) -> dict[date, str]:
    """Read a date,day_type calendar; day_type is 'workday' or 'holiday'."""
    calendar = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"date", "day_type"}.issubset(reader.fieldnames):
            raise DataError(f"{path}: calendar CSV must have columns ['date', 'day_type']")
        for row in reader:
            day_type = row["day_type"].strip()
            if day_type not in DAY_TYPES:
                raise DataError(f"{path}: unknown day_type {day_type!r}")
            calendar[date.fromisoformat(row["date"].strip())] = day_type
    return calendar


def _count_chunk(pick_ids, drop_ids, frag_ids, m: int, n: int) -> np.ndarray:
    flat = (frag_ids * m + pick_ids) * m + drop_ids
    counts = np.bincount(flat, minlength=n * m * m)
    return counts.reshape(n, m, m).astype(float)


def build_tensor(trips: Iterable[TripRecord], region_map: RegionMap,
                 spec: FragmentSpec, threads: int = 1) -> tuple[FlowTensor, DiscardReport]:
    """Bin trips into the flow tensor over ``spec``'s hourly fragments.

    Counting is a fold over trip chunks merged by entry-wise sum, so the
    result does not depend on trip order or on the number of workers.
    """
    if region_map.m == 0:
        raise DataError("empty region map")
    trips = list(trips)
    fragments = spec.fragments()
    n, m = len(fragments), region_map.m
    report = DiscardReport(total=len(trips))

    if not trips:
        return FlowTensor(fragments=fragments, matrices=np.zeros((n, m, m)), m=m), report

    pickups = np.array([[t.pickup.lon, t.pickup.lat] for t in trips])
    dropoffs = np.array([[t.dropoff.lon, t.dropoff.lat] for t in trips])
    start = spec.start
    offsets = np.array([(t.pickup_time - start).total_seconds() for t in trips])
    frag_ids = np.floor_divide(offsets, FRAGMENT_SECONDS).astype(int)

    in_window = (offsets >= 0) & (frag_ids < n)
    pick_ids = assign_regions(pickups, region_map)
    drop_ids = assign_regions(dropoffs, region_map)

    report.out_of_window = int(np.sum(~in_window))
    report.unassigned_pickup = int(np.sum(in_window & (pick_ids < 0)))
    report.unassigned_dropoff = int(np.sum(in_window & (pick_ids >= 0) & (drop_ids < 0)))
    keep = in_window & (pick_ids >= 0) & (drop_ids >= 0)
    report.kept = int(np.sum(keep))

    pick_ids, drop_ids, frag_ids = pick_ids[keep], drop_ids[keep], frag_ids[keep]
    workers = max(1, int(threads))
    if workers == 1 or len(pick_ids) < 10000:
        matrices = _count_chunk(pick_ids, drop_ids, frag_ids, m, n)
    else:
        chunks = np.array_split(np.arange(len(pick_ids)), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda c: _count_chunk(pick_ids[c], drop_ids[c], frag_ids[c], m, n), chunks))
        matrices = np.sum(parts, axis=0)

    return FlowTensor(fragments=fragments, matrices=matrices, m=m), report


def in_out_flow(matrix: np.ndarray, region: int) -> tuple[float, float]:
    """(outflow, inflow) of a region: row sum = departures, column sum = arrivals."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DataError(f"flow matrix must be square, got {matrix.shape}")
    if not (0 <= region < matrix.shape[0]):
        raise IndexError(f"region {region} out of range for M={matrix.shape[0]}")
    return float(matrix[region, :].sum()), float(matrix[:, region].sum())


def periodicity_weights(fragments: Sequence[FragmentIndex]) -> np.ndarray:
    """Binary weights linking distinct fragments that share hour-of-day,
    weekday, and day type; symmetric with zero diagonal."""
    n = len(fragments)
    keys = [(f.hour, f.weekday, f.day_type) for f in fragments]
    w = np.zeros((n, n))
    groups: dict[tuple, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    for idx in groups.values():
        if len(idx) > 1:
            ii = np.array(idx)
            w[np.ix_(ii, ii)] = 1.0
    np.fill_diagonal(w, 0.0)
    return w


def laplacian(weights: np.ndarray) -> np.ndarray:
    """Combinatorial graph Laplacian D - W."""
    w = np.asarray(weights, dtype=float)
    return np.diag(w.sum(axis=1)) - w


def save_tensor(tensor: FlowTensor, path: str | Path,
                discard: Optional[DiscardReport] = None) -> None:
    container.write_matrices(path, tensor.matrices)
    meta = {
        "kind": "flow_tensor",
        "m": tensor.m,
        "fragments": [
            {"n": f.n, "start": format_rfc3339(f.start), "duration": f.duration,
             "day_type": f.day_type}
            for f in tensor.fragments
        ],
    }
    if discard is not None:
        meta["discard"] = discard.as_dict()
    container.write_meta(path, meta)


def load_tensor(path: str | Path) -> FlowTensor:
    matrices = container.read_matrices(path)
    meta = container.read_meta(path)
    fragments = [
        FragmentIndex(n=f["n"], start=parse_rfc3339(f["start"]),
                      duration=int(f.get("duration", FRAGMENT_SECONDS)),
                      day_type=f["day_type"])
        for f in meta["fragments"]
    ]
    return FlowTensor(fragments=fragments, matrices=matrices, m=int(meta["m"]))
