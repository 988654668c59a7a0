"""Low-rank matrix completion by iterative soft-thresholded SVDs.

Both solvers minimize the same convex objective over the observed entries,

    f(M) = 0.5 * ||P_obs(X - M)||_F**2 + lam * ||M||_nuclear,

following a warm-started, strictly decreasing lambda path:

* ``ist_svd`` forms the working matrix Z = M + P_obs(X - M) densely each
  iteration and sketches it directly.
* ``softimpute`` keeps Z in sparse-plus-low-rank form — a sparse matrix of
  observed residuals plus the current low-rank factors — and never
  materializes it densely.

Truncated SVDs use a seeded Gaussian sketch with subspace (power) iterations;
the sketch is exact (up to roundoff) once its width reaches min(m, n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .tensor_io import WeightMatrix

_DEFAULT_PATH_STEPS = 20
_DEFAULT_PATH_FLOOR = 1e-3
_GATHER_CHUNK = 65536


@dataclass(frozen=True)
class MaskedMatrix:
    """A partially observed matrix: values with a boolean observation mask.

    `values` holds the observed entries; unobserved slots must be exactly 0,
    so `values.data` is already the zero-filled projection onto the observed
    set.
    """

    values: WeightMatrix
    observed: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed)
        if obs.dtype != np.bool_:
            raise ValueError("observed mask must be boolean")
        if obs.shape != self.values.shape:
            raise ValueError(
                f"mask shape {obs.shape} != values shape {self.values.shape}"
            )
        if not obs.any():
            raise ValueError("need at least one observed entry")
        if np.any(self.values.data[~obs] != 0.0):
            raise ValueError("unobserved value slots must be exactly 0")
        obs = obs.copy()
        obs.flags.writeable = False
        object.__setattr__(self, "observed", obs)

    @classmethod
    def from_values(cls, values, observed, name: str = "") -> "MaskedMatrix":
        """Build a MaskedMatrix, zero-filling the unobserved slots."""
        if isinstance(values, WeightMatrix):
            name = name or values.name
            values = values.data
        filled = np.where(np.asarray(observed), values, 0.0)
        return cls(WeightMatrix(filled, name), np.asarray(observed))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(np.count_nonzero(self.observed))


@dataclass(frozen=True)
class SVDResult:
    """Thin SVD factors: U (m x r), S (r, non-increasing, >= 0), V (n x r)."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        u, s, v = (np.asarray(a, dtype=np.float64) for a in (self.U, self.S, self.V))
        if u.ndim != 2 or v.ndim != 2 or s.ndim != 1:
            raise ValueError("U and V must be 2-D, S 1-D")
        r = s.shape[0]
        if u.shape[1] != r or v.shape[1] != r:
            raise ValueError("U, S, V rank dimensions disagree")
        if r:
            if np.any(s < 0) or np.any(np.diff(s) > 0):
                raise ValueError("S must be non-negative and non-increasing")
            for mat, label in ((u, "U"), (v, "V")):
                gram = mat.T @ mat
                if np.max(np.abs(gram - np.eye(r))) > 1e-8:
                    raise ValueError(f"{label} columns are not orthonormal")
        object.__setattr__(self, "U", u)
        object.__setattr__(self, "S", s)
        object.__setattr__(self, "V", v)

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    def compose(self) -> np.ndarray:
        """Dense U @ diag(S) @ V.T (zeros for a rank-0 result)."""
        if self.rank == 0:
            return np.zeros((self.U.shape[0], self.V.shape[0]))
        return (self.U * self.S) @ self.V.T


@dataclass(frozen=True)
class CompletionConfig:
    """Solver settings.

    lambda_path=None selects the default path: 20 geometric steps from
    sigma_1 of the zero-filled observed matrix down to sigma_1 * 1e-3.
    rank_cap is clamped to min(rows, cols) of the matrix being solved.
    """

    algorithm: str = "ist_svd"
    lambda_path: tuple[float, ...] | None = None
    rank_cap: int = 256
    max_iters_per_lambda: int = 100
    rel_tol: float = 1e-4
    svd_oversample: int = 10
    svd_power_iters: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("ist_svd", "softimpute"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.lambda_path is not None:
            path = tuple(float(v) for v in self.lambda_path)
            if not path or any(v <= 0 for v in path):
                raise ValueError("lambda_path must be non-empty and positive")
            if any(b >= a for a, b in zip(path, path[1:])):
                raise ValueError("lambda_path must be strictly decreasing")
            object.__setattr__(self, "lambda_path", path)
        if self.rank_cap < 1:
            raise ValueError("rank_cap must be positive")
        if self.max_iters_per_lambda < 1:
            raise ValueError("max_iters_per_lambda must be positive")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.svd_oversample < 0 or self.svd_power_iters < 0:
            raise ValueError("svd_oversample and svd_power_iters must be >= 0")


@dataclass(frozen=True)
class LambdaStats:
    """Per-lambda diagnostics; objective_trace[t] is f(M_t) under this lambda."""

    lam: float
    iterations: int
    objective: float
    rel_change: float
    objective_trace: tuple[float, ...] = field(repr=False, default=())


@dataclass(frozen=True)
class CompletionResult:
    estimate: WeightMatrix
    per_lambda: tuple[LambdaStats, ...]
    effective_rank: int
    unidentifiable_rows: tuple[int, ...] = ()
    unidentifiable_cols: tuple[int, ...] = ()


class _DenseZ:
    """Sketch target held as one dense array."""

    __slots__ = ("z",)

    def __init__(self, z: np.ndarray):
        self.z = z

    @property
    def shape(self):
        return self.z.shape

    def matmat(self, g: np.ndarray) -> np.ndarray:
        return self.z @ g

    def rmatmat(self, q: np.ndarray) -> np.ndarray:
        return self.z.T @ q


class _SparsePlusLowRank:
    """Sketch target Z = resid + U diag(d) Vt, applied without forming Z."""

    __slots__ = ("resid", "u", "d", "vt")

    def __init__(self, resid: sp.csr_matrix, u, d, vt):
        self.resid = resid
        self.u = u if d is not None and len(d) else None
        self.d = d
        self.vt = vt

    @property
    def shape(self):
        return self.resid.shape

    def matmat(self, g: np.ndarray) -> np.ndarray:
        out = np.asarray(self.resid @ g)
        if self.u is not None:
            out = out + self.u @ (self.d[:, None] * (self.vt @ g))
        return out

    def rmatmat(self, q: np.ndarray) -> np.ndarray:
        out = np.asarray(self.resid.T @ q)
        if self.u is not None:
            out = out + self.vt.T @ (self.d[:, None] * (self.u.T @ q))
        return out


def _randomized_svd(op, rank: int, oversample: int, power_iters: int, rng):
    """Top-`rank` SVD of the linear operator via a Gaussian range sketch."""
    m, n = op.shape
    width = min(rank + oversample, min(m, n))
    sketch = rng.standard_normal((n, width))
    q = np.linalg.qr(op.matmat(sketch))[0]
    for _ in range(power_iters):
        q = np.linalg.qr(op.rmatmat(q))[0]
        q = np.linalg.qr(op.matmat(q))[0]
    b = op.rmatmat(q).T  # width x n
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    return (q @ ub)[:, :rank], s[:rank], vt[:rank]


def _shrink(op, lam: float, cap: int, oversample: int, power_iters: int, rng, hint: int):
    """Factors (u, d, vt) of the soft-thresholded operator, d = (sigma - lam)_+ > 0.

    When the full spectrum is affordable (min(m, n) within cap + oversample)
    the sketch spans it, making the threshold exact up to roundoff. Otherwise
    the requested rank grows from `hint` until the smallest computed singular
    value falls at or below lam (so nothing above the threshold is missed) or
    the cap is reached, and the result is truncated at the cap.
    """
    full = min(op.shape)
    if full <= cap + oversample:
        u, s, vt = _randomized_svd(op, full, oversample, power_iters, rng)
        kept = min(int(np.count_nonzero(s > lam)), cap)
    else:
        r = min(max(hint, 1), cap)
        while True:
            u, s, vt = _randomized_svd(op, r, oversample, power_iters, rng)
            kept = int(np.count_nonzero(s > lam))
            if kept < r or r == cap:
                break
            r = min(2 * r, cap)
    return u[:, :kept], s[:kept] - lam, vt[:kept]


def _orthonormalize(y: np.ndarray) -> np.ndarray:
    """Orthonormal basis for range(y) via Cholesky of the Gram matrix.

    Twice as fast as Householder QR for tall blocks because both halves are
    level-3 BLAS. Loses orthonormality like cond(y)^2 * eps, which is far
    below the sketch noise it feeds; a rank-deficient Gram falls back to QR.
    """
    gram = y.T @ y
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        return np.linalg.qr(y)[0]
    return sla.solve_triangular(chol, y.T, lower=True, check_finite=False).T


def _shrink_warm(op, lam: float, cap: int, oversample: int, rng, v_prev: np.ndarray):
    """One-pass soft-thresholded SVD seeded with the previous iterate's basis.

    Inside the solver loop consecutive iterates share almost the same row
    space, so the previous right factor (padded with a few fresh Gaussian
    columns to let new directions enter) is a far better sketch than a cold
    random one — and needs no power iterations. Returns None when every
    computed singular value clears lam while the basis is narrower than the
    cap, i.e. the rank outgrew the basis and a cold, growing sketch is needed.
    """
    m, n = op.shape
    width = min(v_prev.shape[1] + max(oversample, 1), m, n)
    pad = width - v_prev.shape[1]
    if pad > 0:
        basis = np.hstack([v_prev, rng.standard_normal((n, pad))])
    else:
        basis = v_prev[:, :width]
    q = _orthonormalize(op.matmat(basis))
    b = op.rmatmat(q).T
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    kept = int(np.count_nonzero(s > lam))
    if kept >= width and width < min(cap, m, n):
        return None
    kept = min(kept, cap)
    return (q @ ub)[:, :kept], s[:kept] - lam, vt[:kept]


def _as_array(y) -> np.ndarray:
    return y.data if isinstance(y, WeightMatrix) else np.asarray(y, dtype=np.float64)


def truncated_svd(
    y, rank: int, oversample: int = 10, power_iters: int = 2, seed: int = 0
) -> SVDResult:
    """Rank-`rank` randomized SVD of a dense matrix, deterministic per seed.

    Parameters
    ----------
    y : WeightMatrix or array
        Matrix to factor.
    rank : int
        Number of singular triplets to return; 1 <= rank <= min(m, n).
    oversample, power_iters : int
        Sketch width beyond `rank`, and number of subspace iterations
        (each re-orthonormalized by QR).
    seed : int
        Seeds the Gaussian sketch.
    """
    data = _as_array(y)
    if not 1 <= rank <= min(data.shape):
        raise ValueError(f"rank must be in [1, {min(data.shape)}], got {rank}")
    rng = np.random.default_rng(seed)
    u, s, vt = _randomized_svd(_DenseZ(data), rank, oversample, power_iters, rng)
    return SVDResult(u, s, vt.T)


def soft_threshold_svd(
    y,
    lam: float,
    rank_cap: int = 256,
    oversample: int = 10,
    power_iters: int = 2,
    seed: int = 0,
) -> SVDResult:
    """Factors of the singular-value soft-thresholding of `y`.

    Singular values are shrunk by `lam` and clipped at zero; components that
    shrink to zero are dropped. If every singular value within `rank_cap` is
    <= lam the result has rank 0 (an explicit zero matrix).
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    data = _as_array(y)
    if rank_cap < 1:
        raise ValueError("rank_cap must be positive")
    cap = min(rank_cap, min(data.shape))
    rng = np.random.default_rng(seed)
    u, d, vt = _shrink(
        _DenseZ(data), lam, cap, oversample, power_iters, rng, hint=min(cap, 16)
    )
    return SVDResult(u, d, vt.T)


def objective_value(x: MaskedMatrix, m, lam: float) -> float:
    """0.5 * ||P_obs(X - M)||_F**2 + lam * ||M||_nuclear (full-SVD nuclear norm)."""
    data = _as_array(m)
    if data.shape != x.shape:
        raise ValueError(f"estimate shape {data.shape} != input shape {x.shape}")
    resid = x.values.data[x.observed] - data[x.observed]
    nuc = float(np.linalg.svd(data, compute_uv=False).sum())
    return 0.5 * float(resid @ resid) + lam * nuc


def default_lambda_path(x: MaskedMatrix) -> tuple[float, ...]:
    """Geometric path: 20 steps from sigma_1 of the zero-filled input down x1e-3."""
    sigma1 = float(np.linalg.svd(x.values.data, compute_uv=False)[0])
    if sigma1 <= 0:
        sigma1 = 1.0  # all-zero observations; any path yields the zero estimate
    factors = np.geomspace(1.0, _DEFAULT_PATH_FLOOR, _DEFAULT_PATH_STEPS)
    return tuple(sigma1 * f for f in factors)


def _factored_entries(u, d, vt, i_idx, j_idx) -> np.ndarray:
    """Entries of U diag(d) Vt at the given index pairs, without densifying."""
    out = np.zeros(i_idx.shape[0])
    if len(d) == 0:
        return out
    ud = u * d
    for lo in range(0, i_idx.shape[0], _GATHER_CHUNK):
        sl = slice(lo, lo + _GATHER_CHUNK)
        out[sl] = np.einsum("tr,rt->t", ud[i_idx[sl]], vt[:, j_idx[sl]])
    return out


def _rel_change(u1, d1, vt1, u2, d2, vt2) -> float:
    """||M2 - M1||_F / max(||M1||_F, 1e-12) from the factors alone."""
    n1 = float(d1 @ d1)
    n2 = float(d2 @ d2)
    if n1 == 0.0 and n2 == 0.0:
        return 0.0
    inner = 0.0
    if len(d1) and len(d2):
        inner = float(np.sum((u2.T @ u1) * (vt2 @ vt1.T) * np.outer(d2, d1)))
    diff = math.sqrt(max(n1 + n2 - 2.0 * inner, 0.0))
    return diff / max(math.sqrt(n1), 1e-12)


def complete(x: MaskedMatrix, cfg: CompletionConfig) -> CompletionResult:
    """Solve the completion problem over the lambda path, warm-starting each step.

    For each lambda the iteration alternates filling the unobserved slots from
    the current estimate with soft-thresholding the result, until the relative
    Frobenius change of the estimate drops below cfg.rel_tol or the per-lambda
    iteration budget is spent (non-convergence is reported, not raised). The
    returned estimate is the solution at the final, smallest lambda; rows and
    columns with no observed entries stay exactly zero and are reported as
    unidentifiable.
    """
    vals = x.values.data
    m, n = vals.shape
    cap = min(cfg.rank_cap, m, n)
    # below this size the shrink sketches the full spectrum (exact); above it,
    # iterations after the first reuse the previous basis instead of a cold sketch
    sketched_regime = min(m, n) > cap + cfg.svd_oversample
    rng = np.random.default_rng(cfg.seed)
    path = cfg.lambda_path if cfg.lambda_path is not None else default_lambda_path(x)

    i_idx, j_idx = np.nonzero(x.observed)
    x_obs = vals[i_idx, j_idx]
    dense_route = cfg.algorithm == "ist_svd"
    if not dense_route:
        # CSR over the observed set; np.nonzero order is already CSR canonical
        # order, so each iteration only rewrites .data in place.
        resid = sp.csr_matrix(
            (np.zeros_like(x_obs), (i_idx, j_idx)), shape=(m, n)
        )

    u = np.zeros((m, 0))
    d = np.zeros(0)
    vt = np.zeros((0, n))
    nuc = 0.0
    stats = []
    for lam in path:
        trace = []
        iters = 0
        rel = 0.0
        for _ in range(cfg.max_iters_per_lambda):
            if dense_route:
                z = (u * d) @ vt if len(d) else np.zeros((m, n))
                resid_vals = x_obs - z[i_idx, j_idx]
                trace.append(0.5 * float(resid_vals @ resid_vals) + lam * nuc)
                z[i_idx, j_idx] = x_obs
                op = _DenseZ(z)
            else:
                resid_vals = x_obs - _factored_entries(u, d, vt, i_idx, j_idx)
                trace.append(0.5 * float(resid_vals @ resid_vals) + lam * nuc)
                resid.data[:] = resid_vals
                op = _SparsePlusLowRank(resid, u, d, vt)
            shrunk = None
            if sketched_regime and len(d):
                shrunk = _shrink_warm(op, lam, cap, cfg.svd_oversample, rng, vt.T)
            if shrunk is None:
                shrunk = _shrink(
                    op,
                    lam,
                    cap,
                    cfg.svd_oversample,
                    cfg.svd_power_iters,
                    rng,
                    hint=len(d) + 5,
                )
            u2, d2, vt2 = shrunk
            rel = _rel_change(u, d, vt, u2, d2, vt2)
            u, d, vt = u2, d2, vt2
            nuc = float(d.sum())
            iters += 1
            if rel < cfg.rel_tol:
                break
        resid_vals = x_obs - _factored_entries(u, d, vt, i_idx, j_idx)
        final_obj = 0.5 * float(resid_vals @ resid_vals) + lam * nuc
        trace.append(final_obj)
        stats.append(LambdaStats(float(lam), iters, final_obj, float(rel), tuple(trace)))

    estimate = (u * d) @ vt if len(d) else np.zeros((m, n))
    row_obs = x.observed.any(axis=1)
    col_obs = x.observed.any(axis=0)
    return CompletionResult(
        estimate=WeightMatrix(estimate, x.values.name),
        per_lambda=tuple(stats),
        effective_rank=len(d),
        unidentifiable_rows=tuple(int(i) for i in np.flatnonzero(~row_obs)),
        unidentifiable_cols=tuple(int(j) for j in np.flatnonzero(~col_obs)),
    )
