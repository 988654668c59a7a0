"""Synthetic ground-truth benchmarks for the revival attack and its defense.

Matrices are built low-rank-plus-noise with a known entry std, masks are
planted, and every metric is computed against the generating truth: sign
accuracy (over all pruned entries or retained ones only), Top-K accuracy
curves, quintile alignment between recovered and true magnitudes, ideal-case
revivals that isolate the value of signs vs magnitudes, and defended sweeps
scored by the excess-mass detector. All randomness derives from one master
seed, so reports are byte-identical across runs (wall times aside).
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .completion import CompletionConfig
from .defense import default_window, estimate_sigma_u, excess_mass_detector, gaussian_obfuscate
from .revival import (
    PruneMask,
    RevivalPlan,
    SignPlan,
    _attack_with_mask,
    assign_magnitudes,
    extract_mask,
    ranked_pruned_indices,
    retention_count,
)
from .tensor_io import WeightMatrix

MASK_MODES = ("uniform", "rows_partial", "block")
IDEAL_VARIANTS = ("true_mag_random_sign", "true_sign_sampled_mag", "true_sign_nms")
SIGN_SCOPES = ("all_pruned", "retained_only")
_N_QUANTILE_GROUPS = 5


def default_noise_std(rank: int) -> float:
    """Additive-noise std of one tenth the low-rank component's entry std.

    Standard-normal factors give the rank-r product an entry std of sqrt(r),
    so the matched noise level is 0.1 * sqrt(r): approximately, not exactly,
    low-rank — like trained layers.
    """
    return 0.1 * math.sqrt(rank)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic weight matrix."""

    rows: int
    cols: int
    rank: int
    noise_std: float = 0.0
    target_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        if not 1 <= self.rank <= min(self.rows, self.cols):
            raise ValueError(f"rank must be in [1, {min(self.rows, self.cols)}]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.target_sigma > 0:
            raise ValueError("target_sigma must be > 0")


def gen_lowrank_matrix(spec: SynthSpec) -> WeightMatrix:
    """W = A @ B.T + noise, rescaled so the empirical entry std is exact."""
    rng = np.random.default_rng(spec.seed)
    a = rng.standard_normal((spec.rows, spec.rank))
    b = rng.standard_normal((spec.cols, spec.rank))
    w = a @ b.T
    if spec.noise_std > 0:
        w = w + rng.normal(0.0, spec.noise_std, size=w.shape)
    w *= spec.target_sigma / np.std(w)
    return WeightMatrix(w, name=f"synth_{spec.rows}x{spec.cols}_r{spec.rank}")


def _pick(rng, n: int, count: int) -> np.ndarray:
    return rng.permutation(n)[:count]


def gen_mask(
    m: WeightMatrix,
    mode: str,
    *,
    frac: float | None = None,
    row_frac: float | None = None,
    within_row_frac: float | None = None,
    col_frac: float | None = None,
    seed: int = 0,
) -> PruneMask:
    """Plant a pruning mask: i.i.d. uniform entries, partial rows, or a block.

    uniform prunes each entry with probability `frac`; rows_partial picks
    ceil(row_frac * rows) rows and prunes ceil(within_row_frac * cols) random
    entries in each (1.0 prunes whole rows); block prunes the intersection of
    ceil(row_frac * rows) rows and ceil(col_frac * cols) columns. A mask that
    comes out empty or total is rejected.
    """
    rows, cols = m.shape
    rng = np.random.default_rng(seed)
    pruned = np.zeros((rows, cols), dtype=bool)
    if mode == "uniform":
        if frac is None or not 0 < frac < 1:
            raise ValueError("uniform mode needs frac in (0, 1)")
        pruned = rng.random((rows, cols)) < frac
    elif mode == "rows_partial":
        if row_frac is None or not 0 < row_frac < 1:
            raise ValueError("rows_partial mode needs row_frac in (0, 1)")
        if within_row_frac is None or not 0 < within_row_frac <= 1:
            raise ValueError("rows_partial mode needs within_row_frac in (0, 1]")
        chosen = _pick(rng, rows, retention_count(row_frac, rows))
        per_row = retention_count(within_row_frac, cols)
        for r in chosen:
            pruned[r, _pick(rng, cols, per_row)] = True
    elif mode == "block":
        if row_frac is None or not 0 < row_frac < 1:
            raise ValueError("block mode needs row_frac in (0, 1)")
        if col_frac is None or not 0 < col_frac < 1:
            raise ValueError("block mode needs col_frac in (0, 1)")
        rsel = _pick(rng, rows, retention_count(row_frac, rows))
        csel = _pick(rng, cols, retention_count(col_frac, cols))
        pruned[np.ix_(rsel, csel)] = True
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    n = int(np.count_nonzero(pruned))
    if n == 0 or n == pruned.size:
        raise ValueError(f"generated mask is {'empty' if n == 0 else 'total'}")
    return PruneMask(pruned, "supplied", n / pruned.size)


def apply_mask(truth: WeightMatrix, mask: PruneMask) -> WeightMatrix:
    """The pruned matrix an attacker would see: truth with zeros planted."""
    out = truth.data.copy()
    out[mask.pruned] = 0.0
    return truth.with_data(out)


def sign_accuracy(
    truth: WeightMatrix, revived: WeightMatrix, mask: PruneMask, scope: str = "all_pruned"
) -> float:
    """Fraction of pruned positions whose revived sign matches the truth.

    all_pruned grades every pruned position (a dropped entry counts as wrong
    unless the truth there is 0); retained_only grades only positions where
    both truth and revived are nonzero.
    """
    if truth.shape != revived.shape or truth.shape != mask.shape:
        raise ValueError("shapes disagree")
    if scope not in SIGN_SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    t = truth.data[mask.pruned]
    r = revived.data[mask.pruned]
    if scope == "retained_only":
        sel = (t != 0) & (r != 0)
        t, r = t[sel], r[sel]
    if t.size == 0:
        raise ValueError(f"no entries in scope {scope!r}")
    return float(np.mean(np.sign(r) == np.sign(t)))


@dataclass(frozen=True)
class CurvePoint:
    k: float
    topk_accuracy: float
    rest_accuracy: float | None


def topk_sign_accuracy_curve(
    truth: WeightMatrix, recovered: WeightMatrix, mask: PruneMask, ks
) -> tuple[CurvePoint, ...]:
    """Sign accuracy of the Top-K |recovered| pruned entries vs the rest.

    At k = 1.0 the rest is empty and reported as absent (None).
    """
    ks = tuple(float(k) for k in ks)
    if not ks or any(not 0 < k <= 1 for k in ks):
        raise ValueError("ks must be non-empty with every k in (0, 1]")
    ranked = ranked_pruned_indices(recovered.data, mask)
    if ranked.size == 0:
        raise ValueError("mask has no pruned entries")
    eq = np.sign(recovered.data.ravel()[ranked]) == np.sign(truth.data.ravel()[ranked])
    points = []
    for k in ks:
        cnt = retention_count(k, ranked.size)
        top = float(np.mean(eq[:cnt]))
        rest = float(np.mean(eq[cnt:])) if cnt < ranked.size else None
        points.append(CurvePoint(k, top, rest))
    return tuple(points)


@dataclass(frozen=True)
class AlignmentMatrix:
    """Overlap of recovered-magnitude quintiles with true-magnitude quintiles.

    Entry (i, j) is the fraction of the i-th recovered group (largest |value|
    first) that lands in the j-th true group, so each row sums to 1.
    """

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.shape != (_N_QUANTILE_GROUPS, _N_QUANTILE_GROUPS):
            raise ValueError(f"alignment matrix must be 5x5, got {mat.shape}")
        if np.any(mat < 0) or np.any(mat > 1):
            raise ValueError("alignment entries must lie in [0, 1]")
        if np.any(np.abs(mat.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("alignment rows must sum to 1")
        mat = mat.copy()
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)

    @property
    def diagonal_is_row_max(self) -> bool:
        return bool(np.all(self.matrix.argmax(axis=1) == np.arange(_N_QUANTILE_GROUPS)))


def alignment_matrix(
    truth: WeightMatrix, recovered: WeightMatrix, mask: PruneMask
) -> AlignmentMatrix:
    """Quintile-partition pruned entries by |recovered| and by |truth|, overlap them."""
    if mask.n_pruned < _N_QUANTILE_GROUPS:
        raise ValueError("need at least 5 pruned positions")
    r_groups = np.array_split(ranked_pruned_indices(recovered.data, mask), _N_QUANTILE_GROUPS)
    p_groups = np.array_split(ranked_pruned_indices(truth.data, mask), _N_QUANTILE_GROUPS)
    group_of = {}
    for j, grp in enumerate(p_groups):
        for idx in grp:
            group_of[int(idx)] = j
    mat = np.zeros((_N_QUANTILE_GROUPS, _N_QUANTILE_GROUPS))
    for i, grp in enumerate(r_groups):
        for idx in grp:
            mat[i, group_of[int(idx)]] += 1.0
        mat[i] /= grp.size
    return AlignmentMatrix(mat)


@dataclass(frozen=True)
class IdealRecord:
    variant: str
    sign_accuracy: float
    n_pruned: int
    seed: int


def ideal_case_study(
    truth: WeightMatrix,
    mask: PruneMask,
    variant: str,
    plan: RevivalPlan,
    seed: int = 0,
) -> tuple[WeightMatrix, IdealRecord]:
    """Idealized revivals that separate what signs and magnitudes contribute.

    true_mag_random_sign keeps every pruned entry's exact |truth| but flips a
    fair coin for its sign; true_sign_sampled_mag keeps the true sign and
    draws the magnitude from the surviving pool; true_sign_nms keeps the true
    sign and takes the pool maximum. Sign accuracy is graded over all pruned
    entries.
    """
    if variant not in IDEAL_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    pruned_m = apply_mask(truth, mask)
    if variant == "true_mag_random_sign":
        rng = np.random.default_rng(seed)
        out = pruned_m.data.copy()
        mags = np.abs(truth.data[mask.pruned])
        flips = rng.integers(0, 2, size=mags.size) * 2 - 1
        out[mask.pruned] = flips * mags
        revived = pruned_m.with_data(out)
    else:
        strategy = "neuron_sample" if variant == "true_sign_sampled_mag" else "neuron_max"
        sign_grid = np.where(mask.pruned, np.sign(truth.data), 0.0).astype(np.int8)
        retained = int(np.count_nonzero(sign_grid))
        signs = SignPlan(sign_grid, retained, mask.n_pruned - retained)
        ideal_plan = replace(plan, magnitude_strategy=strategy, seed=seed)
        revived = assign_magnitudes(pruned_m, mask, ideal_plan, signs)
    acc = sign_accuracy(truth, revived, mask, "all_pruned")
    return revived, IdealRecord(variant, acc, mask.n_pruned, seed)


@dataclass(frozen=True)
class BenchConfig:
    """One benchmark campaign: a matrix recipe, a mask, an attack plan, seeds.

    noise_std=None resolves to default_noise_std(rank). Defense sigmas, when
    given, add an obfuscation sweep per seed, scored by the excess-mass
    detector (window sigma_u/10) and by how much of the true mask exact-zero
    extraction still finds.
    """

    rows: int = 200
    cols: int = 100
    rank: int = 5
    noise_std: float | None = None
    target_sigma: float = 0.02
    mask_mode: str = "uniform"
    mask_frac: float = 0.2
    row_frac: float | None = None
    within_row_frac: float | None = None
    col_frac: float | None = None
    k_fraction: float = 0.6
    magnitude_strategy: str = "neuron_max"
    pool_axis: str = "column"
    ks: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 0.9)
    n_seeds: int = 10
    master_seed: int = 0
    defense_sigmas: tuple[float, ...] = ()
    completion: CompletionConfig = field(default_factory=CompletionConfig)

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be positive")
        if any(s <= 0 for s in self.defense_sigmas):
            raise ValueError("defense sigmas must be positive")
        # these raise early if out of range, before any cells run
        SynthSpec(self.rows, self.cols, self.rank,
                  self.resolved_noise_std(), self.target_sigma)
        RevivalPlan(self.k_fraction, self.magnitude_strategy, self.pool_axis)

    def resolved_noise_std(self) -> float:
        return default_noise_std(self.rank) if self.noise_std is None else self.noise_std


@dataclass(frozen=True)
class DefenseCell:
    sigma_m: float
    detector_score: float
    mask_recovery_fraction: float


@dataclass(frozen=True)
class BenchCell:
    index: int
    matrix_seed: int
    mask_seed: int
    plan_seed: int
    pruned_fraction: float | None = None
    retained: int | None = None
    sign_accuracy_all: float | None = None
    sign_accuracy_retained: float | None = None
    rel_error_missing: float | None = None
    topk_curve: tuple[CurvePoint, ...] = ()
    alignment: AlignmentMatrix | None = None
    defense: tuple[DefenseCell, ...] = ()
    wall_time: float = 0.0
    error: str | None = None


@dataclass(frozen=True)
class BenchReport:
    config: BenchConfig
    cells: tuple[BenchCell, ...]
    total_wall_time: float


def _mask_kwargs(config: BenchConfig, seed: int) -> dict:
    if config.mask_mode == "uniform":
        return {"frac": config.mask_frac, "seed": seed}
    if config.mask_mode == "rows_partial":
        return {
            "row_frac": config.row_frac,
            "within_row_frac": config.within_row_frac,
            "seed": seed,
        }
    return {"row_frac": config.row_frac, "col_frac": config.col_frac, "seed": seed}


def run_bench_cell(config: BenchConfig, index: int) -> BenchCell:
    """Generate, prune, optionally defend, attack, and grade one cell."""
    base = np.random.SeedSequence((config.master_seed, index))
    m_seed, mask_seed, plan_seed, sketch_seed, defense_seed = (
        int(s) for s in base.generate_state(5, dtype=np.uint64)
    )
    t0 = time.perf_counter()
    try:
        spec = SynthSpec(
            config.rows,
            config.cols,
            config.rank,
            config.resolved_noise_std(),
            config.target_sigma,
            seed=m_seed,
        )
        truth = gen_lowrank_matrix(spec)
        mask = gen_mask(truth, config.mask_mode, **_mask_kwargs(config, mask_seed))
        pruned = apply_mask(truth, mask)
        plan = RevivalPlan(
            config.k_fraction, config.magnitude_strategy, config.pool_axis, seed=plan_seed
        )
        cfg = replace(config.completion, seed=sketch_seed)
        revived, signs, completion = _attack_with_mask(pruned, mask, cfg, plan)
        est = completion.estimate
        holes = mask.pruned
        rel_err = float(
            np.linalg.norm((est.data - truth.data)[holes])
            / np.linalg.norm(truth.data[holes])
        )
        defense_cells = []
        if config.defense_sigmas:
            sigma_u = estimate_sigma_u(pruned, mask)
            w = default_window(sigma_u)
            for sigma_m in config.defense_sigmas:
                defended = gaussian_obfuscate(pruned, mask, sigma_m, seed=defense_seed)
                found = extract_mask(defended).pruned & mask.pruned
                defense_cells.append(
                    DefenseCell(
                        sigma_m=float(sigma_m),
                        detector_score=excess_mass_detector(defended, w),
                        mask_recovery_fraction=float(
                            np.count_nonzero(found) / mask.n_pruned
                        ),
                    )
                )
        return BenchCell(
            index=index,
            matrix_seed=m_seed,
            mask_seed=mask_seed,
            plan_seed=plan_seed,
            pruned_fraction=mask.pruned_fraction,
            retained=signs.retained,
            sign_accuracy_all=sign_accuracy(truth, revived, mask, "all_pruned"),
            sign_accuracy_retained=sign_accuracy(truth, revived, mask, "retained_only"),
            rel_error_missing=rel_err,
            topk_curve=topk_sign_accuracy_curve(truth, est, mask, config.ks),
            alignment=(
                alignment_matrix(truth, est, mask)
                if mask.n_pruned >= _N_QUANTILE_GROUPS
                else None
            ),
            defense=tuple(defense_cells),
            wall_time=time.perf_counter() - t0,
        )
    except Exception as exc:
        return BenchCell(
            index=index,
            matrix_seed=m_seed,
            mask_seed=mask_seed,
            plan_seed=plan_seed,
            wall_time=time.perf_counter() - t0,
            error=f"{type(exc).__name__}: {exc}",
        )


def run_bench(config: BenchConfig) -> BenchReport:
    """All cells of the campaign; cell failures are recorded, not raised."""
    t0 = time.perf_counter()
    cells = tuple(run_bench_cell(config, i) for i in range(config.n_seeds))
    return BenchReport(config, cells, time.perf_counter() - t0)


def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def report_to_dict(report: BenchReport) -> dict:
    """Plain nested dict/list/scalar form of a report, ready for json.dump."""
    return _plain(report)


def _cell_field(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metric_tables(report: BenchReport) -> dict[str, str]:
    """One CSV text per metric, keyed by table name; failed cells are skipped.

    Floats are written as shortest round-trip decimals, so parsing a field
    back with float() returns the exact value.
    """
    sign = ["cell,pruned_fraction,retained,sign_accuracy_all,sign_accuracy_retained,rel_error_missing"]
    curve = ["cell,k,topk_accuracy,rest_accuracy"]
    align = ["cell,row,col,value"]
    defense = ["cell,sigma_m,detector_score,mask_recovery_fraction"]
    errors = ["cell,error"]
    for cell in report.cells:
        if cell.error is not None:
            errors.append(f"{cell.index},{cell.error!r}")
            continue
        sign.append(
            ",".join(
                _cell_field(v)
                for v in (
                    cell.index,
                    cell.pruned_fraction,
                    cell.retained,
                    cell.sign_accuracy_all,
                    cell.sign_accuracy_retained,
                    cell.rel_error_missing,
                )
            )
        )
        for pt in cell.topk_curve:
            curve.append(
                f"{cell.index},{_cell_field(pt.k)},{_cell_field(pt.topk_accuracy)},"
                f"{_cell_field(pt.rest_accuracy)}"
            )
        if cell.alignment is not None:
            for i in range(_N_QUANTILE_GROUPS):
                for j in range(_N_QUANTILE_GROUPS):
                    align.append(f"{cell.index},{i},{j},{cell.alignment.matrix[i, j]!r}")
        for d in cell.defense:
            defense.append(
                f"{cell.index},{_cell_field(d.sigma_m)},{_cell_field(d.detector_score)},"
                f"{_cell_field(d.mask_recovery_fraction)}"
            )
    tables = {"sign_accuracy": sign, "topk_curve": curve}
    if len(align) > 1:
        tables["alignment"] = align
    if len(defense) > 1:
        tables["defense"] = defense
    if len(errors) > 1:
        tables["errors"] = errors
    return {name: "\n".join(rows) + "\n" for name, rows in tables.items()}
