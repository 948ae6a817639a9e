"""Synthetic check-in cities with a planted transition structure.

Each region is a small ring of POIs laid out on a ~1 km circle; regular users
walk the ring from a random offset with occasional derailments, so all users
of a region share one next-POI transition structure while no single user
observes all of it. Optional noise users take uniform random walks instead.
Categories cycle along the ring, giving the category sequences the same kind
of planted structure.

Used by the experiment scripts and the acceptance tests; writes the same CSV
schema the ingestion stage parses.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BASE_LON = -73.98
BASE_LAT = 40.75
DEG_PER_KM_LAT = 1.0 / 110.574


@dataclass
class CityConfig:
    n_users: int = 100
    n_regions: int = 2
    pois_per_region: int = 60
    n_categories: int = 8
    seq_len: int = 20
    derail_prob: float = 0.05
    noise_frac: float = 0.0
    friends_per_user: int = 4
    region_spacing_deg: float = 1.0
    ring_radius_km: float = 1.0
    seed: int = 0


def _poi_coords(cfg: CityConfig, region: int, j: int) -> tuple[float, float]:
    center_lon = BASE_LON + region * cfg.region_spacing_deg
    center_lat = BASE_LAT
    angle = 2.0 * math.pi * j / cfg.pois_per_region
    r_deg_lat = cfg.ring_radius_km * DEG_PER_KM_LAT
    r_deg_lon = r_deg_lat / math.cos(math.radians(center_lat))
    return (center_lon + r_deg_lon * math.cos(angle),
            center_lat + r_deg_lat * math.sin(angle))


def synthetic_city(cfg: CityConfig):
    """Build (checkin_rows, friend_rows) as lists of CSV-ready dicts."""
    rng = np.random.default_rng(cfg.seed)
    n_noise = round(cfg.n_users * cfg.noise_frac)
    noise_users = set(rng.choice(cfg.n_users, size=n_noise, replace=False).tolist())

    checkins = []
    region_of_user = {}
    for k in range(cfg.n_users):
        region = k % cfg.n_regions
        region_of_user[k] = region
        pos = int(rng.integers(cfg.pois_per_region))
        for t in range(cfg.seq_len):
            if t > 0:
                if k in noise_users or rng.random() < cfg.derail_prob:
                    pos = int(rng.integers(cfg.pois_per_region))
                else:
                    pos = (pos + 1) % cfg.pois_per_region
            lon, lat = _poi_coords(cfg, region, pos)
            checkins.append({
                "user_id": f"u{k}",
                "poi_id": f"r{region}p{pos}",
                "category": f"c{pos % cfg.n_categories}",
                "lat": f"{lat:.6f}",
                "lon": f"{lon:.6f}",
                "timestamp": str(t),
            })

    edges = set()
    for k in range(cfg.n_users):
        mates = [u for u in range(cfg.n_users)
                 if u != k and region_of_user[u] == region_of_user[k]]
        picks = rng.choice(len(mates), size=min(cfg.friends_per_user, len(mates)),
                           replace=False)
        for i in picks:
            edges.add((min(k, mates[int(i)]), max(k, mates[int(i)])))
    friends = [{"user_a": f"u{a}", "user_b": f"u{b}"} for a, b in sorted(edges)]
    return checkins, friends


def write_city(out_dir, cfg: CityConfig) -> tuple[Path, Path]:
    """Write checkins.csv and friends.csv under out_dir; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkins, friends = synthetic_city(cfg)
    checkins_path = out_dir / "checkins.csv"
    friends_path = out_dir / "friends.csv"
    with open(checkins_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["user_id", "poi_id", "category",
                                                "lat", "lon", "timestamp"])
        writer.writeheader()
        writer.writerows(checkins)
    with open(friends_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["user_a", "user_b"])
        writer.writeheader()
        writer.writerows(friends)
    return checkins_path, friends_path
