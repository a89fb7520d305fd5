"""Deterministic synthetic trip datasets with known ground truth.

Regions sit on a jittered grid, base matrices have disjoint supports plus a
ring pattern that touches every region, and coefficient trajectories repeat
daily per day type. Trip counts per (fragment, origin, destination) are
Poisson draws from the coefficient-weighted base combination; endpoints
scatter normally around region centroids. Everything derives from one seeded
generator, so identical seeds give byte-identical output files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .geo import EARTH_RADIUS_M
from .tensor import (FRAGMENT_SECONDS, FragmentIndex, FragmentSpec, WORKDAY,
                     default_day_type, format_rfc3339, parse_rfc3339)


@dataclass
class SynthParams:
    m_regions: int = 20
    n_bases: int = 3
    days: int = 14
    start: str = "2024-01-03T00:00:00Z"
    spacing_m: float = 800.0
    scatter_m: float = 12.0
    rate_scale: float = 1.0
    base_lon: float = 10.0
    base_lat: float = 45.0
    links_per_base: int = 40
    fleet: int = 500
    weekend_holidays: bool = True


@dataclass
class SynthData:
    centroids: np.ndarray          # (M, 2) lon/lat
    bases: np.ndarray              # (C, M, M)
    s_star: np.ndarray             # (N, C)
    labels: np.ndarray             # dominant base per fragment
    fragments: list[FragmentIndex]
    means: np.ndarray              # (N, M, M) Poisson means
    counts: np.ndarray             # (N, M, M) sampled trip counts
    trips: list[tuple]             # rows ready for the trips CSV
    calendar: dict[date, str]


def _metres_to_lonlat(dx: np.ndarray, dy: np.ndarray, base_lon: float,
                      base_lat: float) -> tuple[np.ndarray, np.ndarray]:
    lon = base_lon + np.degrees(dx / (EARTH_RADIUS_M * math.cos(math.radians(base_lat))))
    lat = base_lat + np.degrees(dy / EARTH_RADIUS_M)
    return lon, lat


def _profiles(hours: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    """(24, C) workday activation curves: one Gaussian bump per base."""
    peaks = 24.0 * (np.arange(c) + 0.5) / c + rng.uniform(-1.0, 1.0, c)
    widths = rng.uniform(1.5, 2.5, c)
    amps = rng.uniform(1.5, 2.5, c)
    gap = np.minimum(np.abs(hours[:, None] - peaks[None, :]),
                     24.0 - np.abs(hours[:, None] - peaks[None, :]))
    return 0.1 + amps[None, :] * np.exp(-0.5 * (gap / widths[None, :]) ** 2)


def generate(params: SynthParams, seed: int) -> SynthData:
    rng = np.random.default_rng(seed)
    m, c = params.m_regions, params.n_bases

    side = math.ceil(math.sqrt(m))
    grid = np.array([(i % side, i // side) for i in range(m)], dtype=float)
    xy = grid * params.spacing_m + rng.uniform(-0.1, 0.1, (m, 2)) * params.spacing_m
    lon, lat = _metres_to_lonlat(xy[:, 0], xy[:, 1], params.base_lon, params.base_lat)
    centroids = np.stack([lon, lat], axis=1)

    # disjoint random supports per base, plus a ring so every region sees flow
    cells = rng.permutation(m * m)
    chunks = np.array_split(cells, c)
    bases = np.zeros((c, m, m))
    for k in range(c):
        chosen = chunks[k][:min(params.links_per_base, len(chunks[k]))]
        bases[k, chosen // m, chosen % m] = rng.uniform(0.5, 2.0, len(chosen))
    ring = (np.arange(m), (np.arange(m) + 1) % m)
    bases[0][ring] = np.maximum(bases[0][ring], rng.uniform(0.5, 2.0, m))

    start = parse_rfc3339(params.start)
    end = start + timedelta(days=params.days)
    calendar = {}
    d = start.date()
    while d < end.date() + timedelta(days=1):
        calendar[d] = default_day_type(d) if params.weekend_holidays else WORKDAY
        d += timedelta(days=1)
    spec = FragmentSpec(start=start, end=end, calendar=calendar)
    fragments = spec.fragments()
    n = len(fragments)

    hours = np.arange(24, dtype=float)
    work_prof = _profiles(hours, c, rng)
    holiday_prof = 0.6 * np.roll(work_prof, 2, axis=0) + 0.05

    s_star = np.empty((n, c))
    for i, f in enumerate(fragments):
        prof = work_prof if f.day_type == WORKDAY else holiday_prof
        s_star[i] = prof[f.hour]

    means = params.rate_scale * np.tensordot(s_star, bases, axes=(1, 0))
    counts = rng.poisson(means)

    total = int(counts.sum())
    frag_idx, origin, dest = np.nonzero(counts)
    reps = counts[frag_idx, origin, dest]
    frag_idx = np.repeat(frag_idx, reps)
    origin = np.repeat(origin, reps)
    dest = np.repeat(dest, reps)

    scatter = rng.normal(0.0, params.scatter_m, (total, 4))
    t_off = rng.uniform(0.0, FRAGMENT_SECONDS, total)
    durations = rng.uniform(120.0, 1800.0, total)

    cos0 = math.cos(math.radians(params.base_lat))
    deg_per_m_lon = math.degrees(1.0 / (EARTH_RADIUS_M * cos0))
    deg_per_m_lat = math.degrees(1.0 / EARTH_RADIUS_M)

    trips = []
    for k in range(total):
        i, j = origin[k], dest[k]
        p_lon = centroids[i, 0] + scatter[k, 0] * deg_per_m_lon
        p_lat = centroids[i, 1] + scatter[k, 1] * deg_per_m_lat
        d_lon = centroids[j, 0] + scatter[k, 2] * deg_per_m_lon
        d_lat = centroids[j, 1] + scatter[k, 3] * deg_per_m_lat
        t_pick = fragments[frag_idx[k]].start + timedelta(seconds=float(t_off[k]))
        t_drop = t_pick + timedelta(seconds=float(durations[k]))
        trips.append((f"b{k % params.fleet:05d}",
                      repr(p_lon), repr(p_lat), format_rfc3339(t_pick),
                      repr(d_lon), repr(d_lat), format_rfc3339(t_drop)))

    labels = np.argmax(s_star, axis=1)
    return SynthData(centroids=centroids, bases=bases, s_star=s_star, labels=labels,
                     fragments=fragments, means=means, counts=counts.astype(float),
                     trips=trips, calendar=calendar)


def write_dataset(data: SynthData, outdir: str | Path, params: SynthParams,
                  seed: int) -> dict[str, Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)

    trips_path = out / "trips.csv"
    with open(trips_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bike_id", "pickup_lon", "pickup_lat", "pickup_time",
                         "dropoff_lon", "dropoff_lat", "dropoff_time"])
        writer.writerows(data.trips)

    calendar_path = out / "calendar.csv"
    with open(calendar_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "day_type"])
        for d in sorted(data.calendar):
            writer.writerow([d.isoformat(), data.calendar[d]])

    truth_path = out / "truth.json"
    truth = {
        "seed": seed,
        "m_regions": params.m_regions,
        "n_bases": params.n_bases,
        "rate_scale": params.rate_scale,
        "centroids": data.centroids.tolist(),
        "bases": data.bases.tolist(),
        "s_star": data.s_star.tolist(),
        "labels": data.labels.tolist(),
        "fragments": [{"start": format_rfc3339(f.start), "day_type": f.day_type}
                      for f in data.fragments],
    }
    truth_path.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    return {"trips": trips_path, "calendar": calendar_path, "truth": truth_path}
