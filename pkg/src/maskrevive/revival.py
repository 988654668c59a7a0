"""Revive pruned weights: mask extraction, Top-K sign retention, magnitudes.

The attack pipeline treats exactly-zero weights as a side channel: their
locations form the observation mask for matrix completion, the completed
estimate supplies candidate signs, and magnitudes are pooled from the
surviving weights. Unpruned entries are never touched.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .completion import CompletionConfig, MaskedMatrix, complete
from .tensor_io import LayerSet, WeightMatrix

MAGNITUDE_STRATEGIES = ("neuron_max", "neuron_average", "neuron_sample", "layer_sample")
POOL_AXES = ("row", "column")
_SUSPICIOUS_FRACTION = 0.95


class LayerAttackError(RuntimeError):
    """A per-layer failure inside a whole-model attack, tagged with the layer."""

    def __init__(self, layer: str, cause: Exception):
        super().__init__(f"layer {layer!r}: {cause}")
        self.layer = layer


@dataclass(frozen=True)
class PruneMask:
    """Boolean map of pruned (missing) entries plus provenance."""

    pruned: np.ndarray
    source: str
    pruned_fraction: float
    suspicious: bool = False

    def __post_init__(self):
        arr = np.asarray(self.pruned)
        if arr.dtype != np.bool_ or arr.ndim != 2:
            raise ValueError("pruned must be a 2-D boolean matrix")
        if self.source not in ("exact_zero", "supplied"):
            raise ValueError(f"unknown mask source {self.source!r}")
        frac = float(np.count_nonzero(arr)) / arr.size
        if not math.isclose(frac, self.pruned_fraction, abs_tol=1e-12):
            raise ValueError("pruned_fraction does not match the mask")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "pruned", arr)
        object.__setattr__(self, "pruned_fraction", frac)

    @property
    def n_pruned(self) -> int:
        return int(np.count_nonzero(self.pruned))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pruned.shape


@dataclass(frozen=True)
class RevivalPlan:
    """How retained signs get magnitudes.

    pool_axis picks the group of surviving weights an entry draws from:
    "column" pools over the entry's column (fan-in), "row" over its row.
    """

    k_fraction: float = 0.6
    magnitude_strategy: str = "neuron_max"
    pool_axis: str = "column"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.k_fraction <= 1:
            raise ValueError(f"k_fraction must be in (0, 1], got {self.k_fraction}")
        if self.magnitude_strategy not in MAGNITUDE_STRATEGIES:
            raise ValueError(f"unknown magnitude strategy {self.magnitude_strategy!r}")
        if self.pool_axis not in POOL_AXES:
            raise ValueError(f"pool_axis must be 'row' or 'column', got {self.pool_axis!r}")


@dataclass(frozen=True)
class SignPlan:
    """Per-entry decision: +1 / -1 to revive with that sign, 0 to leave at zero."""

    signs: np.ndarray
    retained: int
    dropped: int

    def __post_init__(self):
        arr = np.asarray(self.signs)
        if arr.dtype != np.int8 or arr.ndim != 2:
            raise ValueError("signs must be a 2-D int8 matrix")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "signs", arr)


@dataclass(frozen=True)
class LayerReport:
    name: str
    rows: int
    cols: int
    pruned_fraction: float
    retained: int
    zeroed: int
    unidentifiable_rows: int
    unidentifiable_cols: int
    pool_fallbacks: int
    wall_time: float


@dataclass(frozen=True)
class AttackReport:
    layers: tuple[LayerReport, ...]
    total_pruned: int
    total_retained: int
    total_wall_time: float


def extract_mask(m: WeightMatrix, policy: str = "exact_zero", supplied=None) -> PruneMask:
    """Locate pruned entries.

    policy "exact_zero" marks entries whose stored value is exactly 0.0;
    a fraction above 0.95 is flagged suspicious (probably not a pruning
    footprint). policy "supplied" validates and wraps a caller-provided mask.
    """
    if policy == "exact_zero":
        pruned = m.data == 0.0
        frac = float(np.count_nonzero(pruned)) / pruned.size
        return PruneMask(pruned, "exact_zero", frac, suspicious=frac > _SUSPICIOUS_FRACTION)
    if policy == "supplied":
        arr = np.asarray(supplied)
        if arr.shape != m.shape:
            raise ValueError(f"supplied mask shape {arr.shape} != matrix shape {m.shape}")
        arr = arr.astype(bool)
        frac = float(np.count_nonzero(arr)) / arr.size
        return PruneMask(arr, "supplied", frac)
    raise ValueError(f"unknown mask policy {policy!r}")


def retention_count(k_fraction: float, n_pruned: int) -> int:
    """ceil(k * n) computed exactly, immune to binary-float boundary drift.

    The float is read back through its shortest round-trip decimal, so
    k=0.6 means the rational 3/5 (ceil(0.6 * 10) = 6), not the slightly
    different binary double.
    """
    return int(math.ceil(Fraction(repr(float(k_fraction))) * n_pruned))


def ranked_pruned_indices(recovered: np.ndarray, mask: PruneMask) -> np.ndarray:
    """Flat indices of pruned entries, by |recovered| descending, ties row-major."""
    flat = np.flatnonzero(mask.pruned.ravel())
    order = np.argsort(-np.abs(recovered.ravel()[flat]), kind="stable")
    return flat[order]


def topk_sign_retention(
    recovered: WeightMatrix, mask: PruneMask, k_fraction: float
) -> SignPlan:
    """Keep the signs of the k-fraction largest-|recovered| pruned entries.

    The top ceil(k * pruned count) entries by |recovered value| (ties broken
    by row-major position) get sign(recovered); the rest — and any entry whose
    recovered value is exactly zero, whose sign is undefined — are dropped.
    """
    if recovered.shape != mask.shape:
        raise ValueError(f"recovered shape {recovered.shape} != mask shape {mask.shape}")
    if not 0 < k_fraction <= 1:
        raise ValueError(f"k_fraction must be in (0, 1], got {k_fraction}")
    n_pruned = mask.n_pruned
    signs = np.zeros(mask.shape, dtype=np.int8)
    if n_pruned == 0:
        return SignPlan(signs, 0, 0)
    ranked = ranked_pruned_indices(recovered.data, mask)
    top = ranked[: retention_count(k_fraction, n_pruned)]
    vals = recovered.data.ravel()[top]
    top = top[vals != 0.0]
    signs.flat[top] = np.sign(vals[vals != 0.0]).astype(np.int8)
    retained = int(top.size)
    return SignPlan(signs, retained, n_pruned - retained)


def _pool_values(data: np.ndarray, mask: PruneMask, axis: str):
    """Unpruned |values| grouped by row or column; None marks an empty pool."""
    unpruned = ~mask.pruned
    groups = []
    n_groups = data.shape[0] if axis == "row" else data.shape[1]
    for g in range(n_groups):
        sel = unpruned[g, :] if axis == "row" else unpruned[:, g]
        vals = data[g, sel] if axis == "row" else data[sel, g]
        groups.append(np.abs(vals) if vals.size else None)
    return groups


def assign_magnitudes(
    pruned_matrix: WeightMatrix,
    mask: PruneMask,
    plan: RevivalPlan,
    signs: SignPlan,
) -> WeightMatrix:
    """Give every retained entry a magnitude pooled from surviving weights.

    Strategies: neuron_max takes the pool's largest |value|, neuron_average its
    mean |value|, neuron_sample a seeded uniform draw from the pool, and
    layer_sample a seeded draw from all surviving entries of the layer. An
    entry whose row/column pool is empty falls back to the layer pool.
    Dropped entries stay 0; unpruned entries pass through bit-identically.
    """
    data = pruned_matrix.data
    if mask.shape != data.shape or signs.signs.shape != data.shape:
        raise ValueError("matrix, mask, and sign plan shapes disagree")
    unpruned_vals = data[~mask.pruned]
    if unpruned_vals.size == 0:
        raise ValueError("entire layer is pruned: no magnitude pool exists")
    layer_pool = np.abs(unpruned_vals)

    out = data.copy()
    ret_i, ret_j = np.nonzero(signs.signs)
    if ret_i.size == 0:
        return pruned_matrix.with_data(out)
    sgn = signs.signs[ret_i, ret_j].astype(np.float64)
    group_idx = ret_i if plan.pool_axis == "row" else ret_j
    pools = _pool_values(data, mask, plan.pool_axis)
    sizes = np.array([0 if p is None else p.size for p in pools])
    entry_sizes = sizes[group_idx]
    fallback = entry_sizes == 0

    mag = np.empty(ret_i.shape[0])
    if plan.magnitude_strategy == "neuron_max":
        stat = np.array([0.0 if p is None else p.max() for p in pools])
        mag[:] = stat[group_idx]
    elif plan.magnitude_strategy == "neuron_average":
        stat = np.array([0.0 if p is None else p.mean() for p in pools])
        mag[:] = stat[group_idx]
    elif plan.magnitude_strategy == "neuron_sample":
        rng = np.random.default_rng(plan.seed)
        ok = ~fallback
        if ok.any():
            draws = rng.integers(0, entry_sizes[ok])
            mag[ok] = np.array(
                [pools[g][d] for g, d in zip(group_idx[ok], draws)]
            )
    else:  # layer_sample
        rng = np.random.default_rng(plan.seed)
        draws = rng.integers(0, layer_pool.size, size=ret_i.shape[0])
        mag[:] = layer_pool[draws]

    if plan.magnitude_strategy != "layer_sample" and fallback.any():
        if plan.magnitude_strategy == "neuron_max":
            mag[fallback] = layer_pool.max()
        elif plan.magnitude_strategy == "neuron_average":
            mag[fallback] = layer_pool.mean()
        else:
            rng_fb = np.random.default_rng(plan.seed + 1)
            draws = rng_fb.integers(0, layer_pool.size, size=int(fallback.sum()))
            mag[fallback] = layer_pool[draws]

    out[ret_i, ret_j] = sgn * mag
    return pruned_matrix.with_data(out)


def count_pool_fallbacks(mask: PruneMask, signs: SignPlan, pool_axis: str) -> int:
    """Retained entries whose row/column pool is empty (they use the layer pool)."""
    unpruned = ~mask.pruned
    axis = 1 if pool_axis == "row" else 0
    has_pool = unpruned.any(axis=axis)
    ret_i, ret_j = np.nonzero(signs.signs)
    group_idx = ret_i if pool_axis == "row" else ret_j
    return int(np.count_nonzero(~has_pool[group_idx]))


def attack_layer(
    pruned: WeightMatrix, cfg: CompletionConfig, plan: RevivalPlan
) -> tuple[WeightMatrix, LayerReport]:
    """Run the full pipeline on one layer: mask, complete, retain signs, scale.

    A layer with no exactly-zero entries passes through unchanged. The
    returned report carries the mask statistics, retention counts,
    unidentifiable rows/columns, pool fallbacks, and wall time.
    """
    t0 = time.perf_counter()
    mask = extract_mask(pruned, "exact_zero")
    if mask.n_pruned == 0:
        report = LayerReport(
            name=pruned.name,
            rows=pruned.rows,
            cols=pruned.cols,
            pruned_fraction=0.0,
            retained=0,
            zeroed=0,
            unidentifiable_rows=0,
            unidentifiable_cols=0,
            pool_fallbacks=0,
            wall_time=time.perf_counter() - t0,
        )
        return pruned, report
    revived, signs, completion = _attack_with_mask(pruned, mask, cfg, plan)
    report = LayerReport(
        name=pruned.name,
        rows=pruned.rows,
        cols=pruned.cols,
        pruned_fraction=mask.pruned_fraction,
        retained=signs.retained,
        zeroed=signs.dropped,
        unidentifiable_rows=len(completion.unidentifiable_rows),
        unidentifiable_cols=len(completion.unidentifiable_cols),
        pool_fallbacks=count_pool_fallbacks(mask, signs, plan.pool_axis),
        wall_time=time.perf_counter() - t0,
    )
    return revived, report


def _attack_with_mask(pruned, mask, cfg, plan):
    """Pipeline body shared with the benchmark, which also wants the raw pieces."""
    x = MaskedMatrix(pruned, ~mask.pruned)
    completion = complete(x, cfg)
    signs = topk_sign_retention(completion.estimate, mask, plan.k_fraction)
    revived = assign_magnitudes(pruned, mask, plan, signs)
    return revived, signs, completion


def attack_model(
    layers: LayerSet, cfg: CompletionConfig, plan: RevivalPlan
) -> tuple[LayerSet, AttackReport]:
    """attack_layer over every layer of a set, aggregated in name order."""
    if len(layers) == 0:
        raise ValueError("layer set is empty")
    revived = []
    reports = []
    for layer in layers:
        try:
            out, report = attack_layer(layer, cfg, plan)
        except Exception as exc:
            raise LayerAttackError(layer.name, exc) from exc
        revived.append(out)
        reports.append(report)
    report = AttackReport(
        layers=tuple(reports),
        total_pruned=sum(r.retained + r.zeroed for r in reports),
        total_retained=sum(r.retained for r in reports),
        total_wall_time=sum(r.wall_time for r in reports),
    )
    return LayerSet(tuple(revived)), report
