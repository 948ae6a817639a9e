"""Shared test helpers: toy models, region stubs and the central
finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np
import pytest

from macsim.geo import Region, RegionMap
from macsim.recommender import DeviceModel


def toy_region_map(region_ids: dict[int, list[int]]) -> RegionMap:
    regions = []
    poi_to_region = {}
    for r in sorted(region_ids):
        ids = sorted(region_ids[r])
        regions.append(Region(id=r, centroid=(0.0, 0.0), poi_ids=ids))
        for p in ids:
            poi_to_region[p] = r
    return RegionMap(regions=regions, poi_to_region=poi_to_region)


def toy_model(seed: int = 0, d: int = 4, n_pois: int = 6, n_regions: int = 2,
              n_cats: int = 3, dropout: float = 0.0, user_id: int = 7) -> DeviceModel:
    per = n_pois // n_regions
    region_ids = {r: list(range(r * per, (r + 1) * per)) for r in range(n_regions)}
    leftover = n_pois - per * n_regions
    if leftover:
        region_ids[n_regions - 1].extend(range(per * n_regions, n_pois))
    return DeviceModel(user_id=user_id, dim=d, region_ids=region_ids,
                       n_categories=n_cats, seed=seed, dropout=dropout)


def numeric_grads(model: DeviceModel, f, eps: float = 1e-4) -> dict[str, np.ndarray]:
    """Central finite differences of the scalar f() over every trainable
    tensor of the model. f must be deterministic (eval-mode forwards)."""
    out = {}
    for name in ("poi_emb", "cat_emb", "mi_matrix"):
        arr = getattr(model, name)
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = f()
            arr[idx] = orig - eps
            fm = f()
            arr[idx] = orig
            g[idx] = (fp - fm) / (2.0 * eps)
        out[name] = g
    return out


def assert_grads_close(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
                       rtol: float = 1e-4, atol: float = 1e-7) -> None:
    for name in ("poi_emb", "cat_emb", "mi_matrix"):
        np.testing.assert_allclose(analytic[name], numeric[name], rtol=rtol, atol=atol,
                                   err_msg=f"gradient mismatch in {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
