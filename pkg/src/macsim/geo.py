"""Geospatial primitives: haversine distance, k-means regions, candidate sets.

Regions are k-means clusters of POI coordinates and act as the unit of
geographic scoping everywhere else (neighbor matching, embedding storage,
reference data, evaluation candidates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0

KMEANS_MAX_ITER = 100


def haversine_km(a, b) -> float:
    """Great-circle distance in km between two (lon, lat) points in degrees."""
    lon1, lat1, lon2, lat2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    dlon = lon2 - lon1
    dlat = lat2 - lat1
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def haversine_km_many(anchor, lonlat: np.ndarray) -> np.ndarray:
    """Distances from one (lon, lat) anchor to an (n, 2) array of (lon, lat)."""
    lon0, lat0 = math.radians(anchor[0]), math.radians(anchor[1])
    lon = np.radians(lonlat[:, 0])
    lat = np.radians(lonlat[:, 1])
    h = np.sin((lat - lat0) / 2) ** 2 + math.cos(lat0) * np.cos(lat) * np.sin((lon - lon0) / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


@dataclass
class Region:
    id: int
    centroid: tuple[float, float]  # (lon, lat), mean of member coordinates
    poi_ids: list[int]  # ascending


@dataclass
class RegionMap:
    regions: list[Region]
    poi_to_region: dict[int, int]

    def support(self, region_id: int) -> list[int]:
        """Canonical per-region POI support: member ids ascending."""
        return self.regions[region_id].poi_ids


def _plus_plus_init(coords: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = coords.shape[0]
    centers = np.empty((k, 2))
    centers[0] = coords[rng.integers(n)]
    d2 = np.sum((coords - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen center
            centers[j] = coords[rng.integers(n)]
            continue
        idx = rng.choice(n, p=d2 / total)
        centers[j] = coords[idx]
        d2 = np.minimum(d2, np.sum((coords - centers[j]) ** 2, axis=1))
    return centers


def _lloyd(coords: np.ndarray, k: int, rng: np.random.Generator):
    """Lloyd iterations with k-means++ seeding.

    Returns (labels, centers, objective_history). Empty clusters are re-seeded
    at the point farthest from its nearest centroid. Converges when no
    assignment changes or after KMEANS_MAX_ITER rounds.
    """
    centers = _plus_plus_init(coords, k, rng)
    labels = np.full(coords.shape[0], -1)
    history = []
    for _ in range(KMEANS_MAX_ITER):
        d2 = np.sum((coords[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)  # ties -> lowest region id
        history.append(float(d2[np.arange(coords.shape[0]), new_labels].sum()))
        for j in range(k):
            if not np.any(new_labels == j):
                nearest = d2.min(axis=1)
                far = int(np.argmax(nearest))
                centers[j] = coords[far]
                new_labels[far] = j
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = coords[labels == j]
            if members.size:
                centers[j] = members.mean(axis=0)
    return labels, centers, history


def cluster_regions(coords, k: int, seed: int) -> RegionMap:
    """Cluster POI coordinates into k regions.

    `coords` is indexed by POI id: coords[p] = (lon, lat). Works on raw
    degrees, which is adequate at city scale.
    """
    coords = np.asarray(coords, dtype=float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if coords.shape[0] < k:
        raise ValueError(f"need at least k={k} POIs, got {coords.shape[0]}")
    rng = np.random.default_rng(seed)
    labels, _, _ = _lloyd(coords, k, rng)
    regions = []
    poi_to_region: dict[int, int] = {}
    for j in range(k):
        member_ids = [int(p) for p in np.flatnonzero(labels == j)]
        centroid = coords[labels == j].mean(axis=0)
        regions.append(Region(id=j, centroid=(float(centroid[0]), float(centroid[1])), poi_ids=member_ids))
        for p in member_ids:
            poi_to_region[p] = j
    return RegionMap(regions=regions, poi_to_region=poi_to_region)


def candidate_set(
    target: int,
    user_history: set[int],
    anchor,
    coords,
    region_map: RegionMap,
    n: int,
) -> list[int]:
    """Ranking candidates for one prediction: the target plus up to n unvisited
    POIs of the target's region nearest to `anchor` (lon, lat of the user's
    most recent check-in). Sorted by (distance, poi id); the target appears
    exactly once.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    region_id = region_map.poi_to_region[target]
    members = region_map.regions[region_id].poi_ids
    others = [p for p in members if p != target and p not in user_history]
    coords = np.asarray(coords, dtype=float)
    dist_t = haversine_km(anchor, coords[target])
    if others:
        d = haversine_km_many(anchor, coords[np.asarray(others)])
        ranked = sorted(zip(d.tolist(), others))
        chosen = ranked[:n]
    else:
        chosen = []
    merged = sorted(chosen + [(dist_t, target)])
    return [p for _, p in merged]
