"""Per-device next-POI recommender with hand-derived backpropagation.

The model is an attention-scored embedding predictor. For a visit prefix
p_1..p_T with embeddings x_1..x_T (query q = x_T):

    attention   a_t  = softmax_t(q . x_t / sqrt(d))
    context     h    = sum_t a_t x_t
    state       s    = (h + q) / 2        (inverted dropout in train mode)
    scores      z_p  = s . e_p            for each POI p in the support
    prediction  probs = softmax(z)

The category predictor reuses the identical architecture over the category
embedding table with the full category vocabulary as support. Gradients for
all trainable tensors (POI embeddings on the computation path, category
embeddings, the bilinear matrix) are derived by hand and verified against
central finite differences in the test suite.

Devices never share these parameters; only probability vectors computed from
them travel between devices. A device-ownership context is enforced at every
forward/update so that any cross-device parameter access fails loudly.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FLOAT_BYTES = 4  # deployed footprint accounting: 32-bit floats

CHECKPOINT_MAGIC = b"MACM"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Model-level contract violation (missing embedding, bad support)."""


class NumericalError(ArithmeticError):
    """A gradient or parameter turned NaN/Inf; message names the tensor."""


class PrivacyError(RuntimeError):
    """A device touched another device's parameters."""


_ACTIVE_OWNER: list[int] = []


@contextmanager
def device_context(user_id: int):
    """Mark the simulated device whose code is currently executing.

    Inside the context, any forward pass or update against a model owned by a
    different user raises PrivacyError.
    """
    _ACTIVE_OWNER.append(user_id)
    try:
        yield
    finally:
        _ACTIVE_OWNER.pop()


def _check_owner(model: "DeviceModel") -> None:
    if _ACTIVE_OWNER and model.user_id != _ACTIVE_OWNER[-1]:
        raise PrivacyError(
            f"device {_ACTIVE_OWNER[-1]} accessed parameters of device {model.user_id}")


@dataclass
class SoftDecision:
    """A probability vector over an ordered item support."""

    support: list[int]
    probs: np.ndarray

    def validate(self) -> None:
        if len(self.support) != self.probs.shape[0]:
            raise ModelError("support/probs length mismatch")
        if np.any(self.probs < 0) or abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ModelError("probs is not a probability vector")


class DeviceModel:
    """Trainable state of one simulated device.

    Stores embeddings only for POIs belonging to the user's regions, the full
    category table, and the bilinear matrix tying POI and category views.
    """

    def __init__(self, user_id: int, dim: int, region_ids: dict[int, list[int]],
                 n_categories: int, seed: int, dropout: float = 0.2):
        self.user_id = user_id
        self.dim = dim
        self.dropout = dropout
        self.region_ids = {r: sorted(ids) for r, ids in region_ids.items()}
        self.stored_ids: list[int] = [p for r in sorted(self.region_ids)
                                      for p in self.region_ids[r]]
        self.id_to_row = {p: i for i, p in enumerate(self.stored_ids)}
        self.region_rows = {
            r: np.array([self.id_to_row[p] for p in ids], dtype=np.int64)
            for r, ids in self.region_ids.items()
        }
        self.rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)
        self.poi_emb = self.rng.uniform(-scale, scale, size=(len(self.stored_ids), dim))
        self.cat_emb = self.rng.uniform(-scale, scale, size=(n_categories, dim))
        self.mi_matrix = self.rng.uniform(-scale, scale, size=(dim, dim))

    @property
    def n_categories(self) -> int:
        return self.cat_emb.shape[0]

    def rows_for(self, poi_ids) -> np.ndarray:
        try:
            return np.array([self.id_to_row[p] for p in poi_ids], dtype=np.int64)
        except KeyError as exc:
            raise ModelError(f"device {self.user_id} has no embedding for POI {exc.args[0]}") from None

    def region_support(self, region_id: int) -> list[int]:
        if region_id not in self.region_ids:
            raise ModelError(f"device {self.user_id} stores no embeddings for region {region_id}")
        return self.region_ids[region_id]


@dataclass
class StepTrace:
    """Cached intermediates of one forward pass, consumed by backprop."""

    kind: str  # "poi" | "cat"
    prefix_rows: np.ndarray
    support_rows: np.ndarray
    X: np.ndarray
    a: np.ndarray
    s: np.ndarray
    mask: np.ndarray | None
    s_out: np.ndarray
    E: np.ndarray
    probs: np.ndarray


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _forward(model: DeviceModel, prefix_rows: np.ndarray, support_rows: np.ndarray,
             kind: str, train_mode: bool) -> StepTrace:
    _check_owner(model)
    table = model.poi_emb if kind == "poi" else model.cat_emb
    X = table[prefix_rows]
    q = X[-1]
    scale = 1.0 / np.sqrt(model.dim)
    a = _softmax(X @ q * scale)
    h = a @ X
    s = 0.5 * (h + q)
    if train_mode and model.dropout > 0.0:
        keep = 1.0 - model.dropout
        mask = (model.rng.random(model.dim) < keep).astype(float) / keep
        s_out = s * mask
    else:
        mask = None
        s_out = s
    E = table[support_rows]
    probs = _softmax(E @ s_out)
    return StepTrace(kind=kind, prefix_rows=prefix_rows, support_rows=support_rows,
                     X=X, a=a, s=s, mask=mask, s_out=s_out, E=E, probs=probs)


def forward_poi(model: DeviceModel, prefix: list[int], support: list[int],
                train_mode: bool = False, return_trace: bool = False):
    """Next-POI soft decision over `support` given a visit prefix."""
    if not prefix:
        raise ModelError("empty prefix")
    trace = _forward(model, model.rows_for(prefix), model.rows_for(support),
                     "poi", train_mode)
    decision = SoftDecision(support=list(support), probs=trace.probs)
    return (decision, trace) if return_trace else decision


def forward_cat(model: DeviceModel, cat_prefix: list[int],
                train_mode: bool = False, return_trace: bool = False):
    """Next-category soft decision over the full category vocabulary."""
    if not cat_prefix:
        raise ModelError("empty prefix")
    n = model.n_categories
    trace = _forward(model, np.asarray(cat_prefix, dtype=np.int64),
                     np.arange(n, dtype=np.int64), "cat", train_mode)
    decision = SoftDecision(support=list(range(n)), probs=trace.probs)
    return (decision, trace) if return_trace else decision


class GradientSet:
    """Gradients shaped like the trainable fields; sparse over touched POIs."""

    def __init__(self, model: DeviceModel):
        self._model = model
        self._poi = np.zeros_like(model.poi_emb)
        self._poi_touched = np.zeros(model.poi_emb.shape[0], dtype=bool)
        self.cat = np.zeros_like(model.cat_emb)
        self.w = np.zeros_like(model.mi_matrix)

    def add_poi_rows(self, rows: np.ndarray, values: np.ndarray) -> None:
        np.add.at(self._poi, rows, values)
        self._poi_touched[rows] = True

    @property
    def poi(self) -> dict[int, np.ndarray]:
        return {self._model.stored_ids[i]: self._poi[i]
                for i in np.flatnonzero(self._poi_touched)}

    def poi_array(self) -> tuple[np.ndarray, np.ndarray]:
        return self._poi, self._poi_touched

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self._poi[self._poi_touched])):
            raise NumericalError("non-finite gradient in POI embeddings")
        if not np.all(np.isfinite(self.cat)):
            raise NumericalError("non-finite gradient in category embeddings")
        if not np.all(np.isfinite(self.w)):
            raise NumericalError("non-finite gradient in bilinear matrix")


def dscores_from_dprobs(trace: StepTrace, dprobs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the output probabilities back through softmax."""
    p = trace.probs
    return p * (dprobs - p @ dprobs)


def ce_dscores(trace: StepTrace, target_index: int, weight: float = 1.0) -> np.ndarray:
    """Gradient at the scores for weight * (-log probs[target_index])."""
    dz = trace.probs.copy()
    dz[target_index] -= 1.0
    return dz * weight


def _backward_step(trace: StepTrace, dz: np.ndarray, grads: GradientSet) -> None:
    X, a, E = trace.X, trace.a, trace.E
    # scores z = E @ s_out
    dE = dz[:, None] * trace.s_out[None, :]
    ds_out = E.T @ dz
    ds = ds_out * trace.mask if trace.mask is not None else ds_out
    # s = (h + q) / 2
    dh = 0.5 * ds
    dq = 0.5 * ds.copy()
    # h = a @ X
    da = X @ dh
    dX = a[:, None] * dh[None, :]
    # a = softmax(X @ q / sqrt(d))
    du = a * (da - a @ da)
    scale = 1.0 / np.sqrt(X.shape[1])
    dq += scale * (X.T @ du)
    dX += scale * du[:, None] * X[-1][None, :]
    # q is the last prefix row
    dX[-1] += dq
    if trace.kind == "poi":
        grads.add_poi_rows(trace.support_rows, dE)
        grads.add_poi_rows(trace.prefix_rows, dX)
    else:
        np.add.at(grads.cat, trace.support_rows, dE)
        np.add.at(grads.cat, trace.prefix_rows, dX)


def backprop(model: DeviceModel, terms) -> GradientSet:
    """Accumulate exact gradients for a list of (StepTrace, dscores) terms.

    The dscores of each term must already carry its weight in the total loss.
    Raises NumericalError if any accumulated gradient is non-finite.
    """
    grads = GradientSet(model)
    for trace, dz in terms:
        _backward_step(trace, dz, grads)
    grads.check_finite()
    return grads


def local_loss(model: DeviceModel, seq_pois: list[int], region_map,
               train_mode: bool = False, positions=None, collect=None) -> float:
    """Mean cross-entropy of successive next-POI predictions.

    Each step t predicts p_{t+1} from the prefix p_1..p_t over the support of
    all stored POIs in p_{t+1}'s region. `positions` restricts the evaluated
    steps (prefix lengths, 1-based); `collect`, when given, receives
    (trace, target_index) pairs for backprop.
    """
    if len(seq_pois) < 2:
        raise ModelError("sequence too short for next-step loss")
    if positions is None:
        positions = range(1, len(seq_pois))
    total = 0.0
    count = 0
    for t in positions:
        target = seq_pois[t]
        region = region_map.poi_to_region[target]
        support = model.region_support(region)
        trace = _forward(model, model.rows_for(seq_pois[:t]),
                         model.region_rows[region], "poi", train_mode)
        try:
            ti = support.index(target)
        except ValueError:
            raise ModelError(
                f"target POI {target} missing from region {region} support") from None
        total += -float(np.log(trace.probs[ti]))
        count += 1
        if collect is not None:
            collect.append((trace, ti))
    return total / count


def sgd_step(model: DeviceModel, grads: GradientSet, lr: float) -> None:
    """Plain SGD update: params <- params - lr * grads."""
    _check_owner(model)
    acc, touched = grads.poi_array()
    rows = np.flatnonzero(touched)
    model.poi_emb[rows] -= lr * acc[rows]
    model.cat_emb -= lr * grads.cat
    model.mi_matrix -= lr * grads.w


def model_size_bytes(model: DeviceModel) -> int:
    """Deployed parameter footprint at 32-bit floats."""
    d = model.dim
    return FLOAT_BYTES * (len(model.stored_ids) * d + model.n_categories * d + d * d)


def save_checkpoint(model: DeviceModel, path) -> int:
    """Write the documented binary checkpoint; returns bytes written.

    Layout (little-endian):
      magic "MACM" | u32 version | u64 user_id | u32 dim | u32 n_poi | u32 n_cat
      i64[n_poi]  stored POI ids (storage order)
      i32[n_poi]  region id of each stored POI
      f32 tensors: poi_emb (n_poi x d), cat_emb (n_cat x d), mi_matrix (d x d)

    The float section is exactly model_size_bytes(model) long.
    """
    path = Path(path)
    region_of = np.empty(len(model.stored_ids), dtype="<i4")
    for r, ids in model.region_ids.items():
        for p in ids:
            region_of[model.id_to_row[p]] = r
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQIII", CHECKPOINT_VERSION, model.user_id,
                             model.dim, len(model.stored_ids), model.n_categories))
        fh.write(np.asarray(model.stored_ids, dtype="<i8").tobytes())
        fh.write(region_of.tobytes())
        fh.write(model.poi_emb.astype("<f4").tobytes())
        fh.write(model.cat_emb.astype("<f4").tobytes())
        fh.write(model.mi_matrix.astype("<f4").tobytes())
    return path.stat().st_size


def load_checkpoint(path, dropout: float = 0.2, seed: int = 0) -> DeviceModel:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not a model checkpoint")
        version, user_id, dim, n_poi, n_cat = struct.unpack("<IQIII", fh.read(24))
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        ids = np.frombuffer(fh.read(8 * n_poi), dtype="<i8")
        region_of = np.frombuffer(fh.read(4 * n_poi), dtype="<i4")
        region_ids: dict[int, list[int]] = {}
        for p, r in zip(ids.tolist(), region_of.tolist()):
            region_ids.setdefault(r, []).append(p)
        model = DeviceModel(user_id=user_id, dim=dim, region_ids=region_ids,
                            n_categories=n_cat, seed=seed, dropout=dropout)
        d = dim
        model.poi_emb = np.frombuffer(fh.read(4 * n_poi * d), dtype="<f4").astype(float).reshape(n_poi, d)
        model.cat_emb = np.frombuffer(fh.read(4 * n_cat * d), dtype="<f4").astype(float).reshape(n_cat, d)
        model.mi_matrix = np.frombuffer(fh.read(4 * d * d), dtype="<f4").astype(float).reshape(d, d)
    return model
