"""Density-based partition of trip endpoints into regions.

Points are clustered with DBSCAN on an equirectangular projection of
(lon, lat) to metres around the dataset's mean latitude. Noise points are
dropped; every surviving point belongs to exactly one region. Membership is
independent of input order: border points reachable from several clusters go
to the cluster whose nearest core point is closest, ties to the smaller
cluster id.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

EARTH_RADIUS_M = 6371000.0


class GeoPoint(NamedTuple):
    lon: float
    lat: float


@dataclass(frozen=True)
class PartitionParams:
    """DBSCAN parameters: neighborhood radius in metres and the minimum
    neighbor count (inclusive of the point itself) for a core point."""

    epsilon: float = 70.0
    min_pts: int = 30

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise DataError(f"epsilon must be a positive finite number of metres, got {self.epsilon}")
        if self.min_pts < 1:
            raise DataError(f"min_pts must be >= 1, got {self.min_pts}")


@dataclass
class Region:
    id: int
    centroid: GeoPoint
    members: np.ndarray            # (k, 2) lon/lat; may be empty on a loaded map
    member_idx: np.ndarray         # (k,) indices into the clustered input
    member_count: int = 0

    def __post_init__(self):
        if self.member_count == 0:
            self.member_count = len(self.member_idx)

    @property
    def size(self) -> int:
        return self.member_count


@dataclass
class RegionMap:
    """Regions plus everything needed to map an arbitrary point to one.

    ``ref_lat`` pins the projection used for distances so that assignment is
    reproducible after a save/load round trip.
    """

    regions: list[Region]
    assign_radius: float
    ref_lat: float
    _centroids_xy: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return len(self.regions)

    def centroids(self) -> np.ndarray:
        return np.array([[r.centroid.lon, r.centroid.lat] for r in self.regions], dtype=float)

    def centroids_xy(self) -> np.ndarray:
        if self._centroids_xy is None:
            self._centroids_xy = project_equirectangular(self.centroids(), self.ref_lat)
        return self._centroids_xy


def as_lonlat_array(points: Sequence) -> np.ndarray:
    """Coerce a sequence of GeoPoint / (lon, lat) pairs to an (n, 2) array."""
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"expected (n, 2) lon/lat array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite coordinates in input points")
    if np.any(np.abs(arr[:, 0]) > 180.0) or np.any(np.abs(arr[:, 1]) > 90.0):
        raise DataError("coordinates out of range: lon in [-180, 180], lat in [-90, 90]")
    return arr


def project_equirectangular(lonlat: np.ndarray, ref_lat: float) -> np.ndarray:
    """Project lon/lat degrees to planar metres at latitude ``ref_lat``.

    Adequate at city scale; distances are plain Euclidean in the plane.
    """
    lonlat = np.asarray(lonlat, dtype=float)
    x = np.radians(lonlat[..., 0]) * EARTH_RADIUS_M * math.cos(math.radians(ref_lat))
    y = np.radians(lonlat[..., 1]) * EARTH_RADIUS_M
    return np.stack([x, y], axis=-1)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, a: int) -> int:
        p = self.parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def dbscan(points: Sequence, params: PartitionParams) -> list[Region]:
    """Cluster points into regions; returns them ordered by descending size.

    Core point: >= min_pts neighbors within epsilon, counting itself.
    Clusters are the connected components of core points under the
    within-epsilon relation; border points attach to the cluster of their
    closest core neighbor (ties to the smaller cluster id). Noise points
    are discarded. Region ids are 0..M-1 by descending member count, ties
    broken by the smallest member index.
    """
    pts = as_lonlat_array(points)
    n = len(pts)
    if n == 0:
        return []

    ref_lat = float(np.mean(pts[:, 1]))
    xy = project_equirectangular(pts, ref_lat)
    tree = cKDTree(xy)
    neighborhoods = tree.query_ball_point(xy, r=params.epsilon)

    core = np.array([len(nb) >= params.min_pts for nb in neighborhoods])
    core_ids = np.flatnonzero(core)
    if core_ids.size == 0:
        return []

    uf = _UnionFind(n)
    for i in core_ids:
        for j in neighborhoods[i]:
            if core[j]:
                uf.union(int(i), int(j))

    comp_of_core = {int(i): uf.find(int(i)) for i in core_ids}
    roots = sorted(set(comp_of_core.values()))

    # Provisional cluster order: larger core population first, then the
    # smallest core index, so that border tie-breaking by "smaller id" does
    # not depend on traversal order.
    core_count = {r: 0 for r in roots}
    first_core = {r: n for r in roots}
    for i, r in comp_of_core.items():
        core_count[r] += 1
        first_core[r] = min(first_core[r], i)
    prov_order = sorted(roots, key=lambda r: (-core_count[r], first_core[r]))
    prov_id = {r: k for k, r in enumerate(prov_order)}

    members: dict[int, list[int]] = {r: [] for r in roots}
    for i in range(n):
        if core[i]:
            members[comp_of_core[i]].append(i)
            continue
        core_nb = [j for j in neighborhoods[i] if core[j]]
        if not core_nb:
            continue  # noise
        d = np.linalg.norm(xy[core_nb] - xy[i], axis=1)
        dmin = d.min()
        candidates = {comp_of_core[int(core_nb[k])] for k in np.flatnonzero(d <= dmin)}
        members[min(candidates, key=lambda r: prov_id[r])].append(i)

    ordered = sorted(roots, key=lambda r: (-len(members[r]), min(members[r])))
    regions = []
    for rid, root in enumerate(ordered):
        idx = np.array(sorted(members[root]), dtype=int)
        coords = pts[idx]
        centroid = GeoPoint(float(coords[:, 0].mean()), float(coords[:, 1].mean()))
        regions.append(Region(id=rid, centroid=centroid, members=coords, member_idx=idx))
    return regions


def build_region_map(points: Sequence, params: PartitionParams,
                     assign_radius: Optional[float] = None) -> RegionMap:
    """Run dbscan and wrap the result for point-to-region assignment.

    assign_radius defaults to epsilon.
    """
    pts = as_lonlat_array(points)
    regions = dbscan(pts, params)
    radius = params.epsilon if assign_radius is None else float(assign_radius)
    if radius <= 0:
        raise DataError(f"assign_radius must be > 0, got {radius}")
    ref_lat = float(np.mean(pts[:, 1])) if len(pts) else 0.0
    return RegionMap(regions=regions, assign_radius=radius, ref_lat=ref_lat)


def assign_region(p, region_map: RegionMap) -> Optional[int]:
    """Id of the nearest region centroid within assign_radius, else None."""
    if region_map.m == 0:
        raise DataError("empty region map")
    ids = assign_regions(np.asarray([tuple(p)], dtype=float), region_map)
    return None if ids[0] < 0 else int(ids[0])


def assign_regions(points: np.ndarray, region_map: RegionMap) -> np.ndarray:
    """Vectorized assign_region; unassigned entries are -1."""
    if region_map.m == 0:
        raise DataError("empty region map")
    pts = as_lonlat_array(points)
    if len(pts) == 0:
        return np.empty(0, dtype=int)
    xy = project_equirectangular(pts, region_map.ref_lat)
    cxy = region_map.centroids_xy()
    d = np.linalg.norm(xy[:, None, :] - cxy[None, :, :], axis=2)
    nearest = np.argmin(d, axis=1)
    ids = np.where(d[np.arange(len(pts)), nearest] <= region_map.assign_radius, nearest, -1)
    return ids.astype(int)


def save_region_map(region_map: RegionMap, path: str | Path, include_members: bool = False) -> None:
    doc = {
        "assign_radius": region_map.assign_radius,
        "ref_lat": region_map.ref_lat,
        "regions": [
            {
                "id": r.id,
                "centroid": [r.centroid.lon, r.centroid.lat],
                "member_count": int(r.size),
                **({"members": r.members.tolist()} if include_members else {}),
            }
            for r in region_map.regions
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_region_map(path: str | Path) -> RegionMap:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    regions = []
    for entry in doc["regions"]:
        centroid = GeoPoint(float(entry["centroid"][0]), float(entry["centroid"][1]))
        members = np.asarray(entry.get("members", []), dtype=float).reshape(-1, 2)
        regions.append(Region(id=int(entry["id"]), centroid=centroid, members=members,
                              member_idx=np.arange(len(members)),
                              member_count=int(entry["member_count"])))
    return RegionMap(regions=regions, assign_radius=float(doc["assign_radius"]),
                     ref_lat=float(doc["ref_lat"]))
