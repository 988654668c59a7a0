"""Gaussian obfuscation of pruned weights and its detectability analysis.

Replacing exact zeros with draws from N(0, sigma_M^2) hides the pruning
footprint from exact-zero mask extraction. How well it hides from
distributional tests is quantified two ways:

* analytically, as the conditional probability p(w) that a weight observed
  in the near-zero window [-w, w] was a modified one, under centered-normal
  models for modified (std sigma_M) and unmodified (std sigma_U) weights;
* empirically, by an excess-mass detector that compares the observed window
  mass against the mass a single fitted Gaussian would put there.

The error function used throughout is implemented in-package to <= 1e-12
absolute error: a positive-term Maclaurin-type series below |x| = 2 and a
continued fraction for the complement above.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .revival import PruneMask
from .tensor_io import WeightMatrix

_SQRT_PI = math.sqrt(math.pi)
_SQRT_2 = math.sqrt(2.0)
_CF_TERMS = 64
_SERIES_CUTOFF = 2.0


def erf(x: float) -> float:
    """Error function, accurate to better than 1e-12 absolutely.

    |x| <= 2 uses the all-positive-term expansion
        erf(x) = (2x/sqrt(pi)) * exp(-x^2) * sum_n (2x^2)^n / (2n+1)!!,
    which has no cancellation; beyond that the complement's continued
    fraction (evaluated by backward recurrence) takes over, where the series
    would need many terms.
    """
    x = float(x)
    if math.isnan(x):
        return x
    ax = abs(x)
    if ax <= _SERIES_CUTOFF:
        t = 1.0
        total = 1.0
        twoxx = 2.0 * ax * ax
        n = 1
        while True:
            t *= twoxx / (2 * n + 1)
            total += t
            if t < 1e-17 * total:
                break
            n += 1
        val = (2.0 * ax / _SQRT_PI) * math.exp(-ax * ax) * total
    else:
        val = 1.0 - erfc_cf(ax)
    return val if x >= 0 else -val


def erfc_cf(x: float) -> float:
    """Complementary error function for x > 1 via its continued fraction:

        erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(...))))
    """
    if x <= 1.0:
        return 1.0 - erf(x)
    f = x
    for n in range(_CF_TERMS, 0, -1):
        f = x + (n / 2.0) / f
    return math.exp(-x * x) / (_SQRT_PI * f)


def _gauss_window_mass(w: float, sigma: float) -> float:
    """P(|X| <= w) for X ~ N(0, sigma^2)."""
    return erf(w / (_SQRT_2 * sigma))


@dataclass(frozen=True)
class DefenseParams:
    """Mixture model inputs: modified std, unmodified std, modified fraction,
    and the detection window half-width."""

    sigma_m: float
    sigma_u: float
    alpha: float
    w: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_m > 0:
            raise ValueError(f"sigma_m must be > 0, got {self.sigma_m}")
        if not self.sigma_u > 0:
            raise ValueError(f"sigma_u must be > 0, got {self.sigma_u}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if not self.w > 0:
            raise ValueError(f"w must be > 0, got {self.w}")


@dataclass(frozen=True)
class DetectabilityGrid:
    """p(w) evaluated over an alpha x sigma_m grid at fixed sigma_u and w."""

    alpha_values: tuple[float, ...]
    sigma_m_values: tuple[float, ...]
    sigma_u: float
    w: float
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        expect = (len(self.alpha_values), len(self.sigma_m_values))
        if p.shape != expect:
            raise ValueError(f"p shape {p.shape} != grid shape {expect}")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("p values must lie in [0, 1]")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "alpha_values", tuple(float(a) for a in self.alpha_values))
        object.__setattr__(self, "sigma_m_values", tuple(float(s) for s in self.sigma_m_values))


def estimate_sigma_u(m: WeightMatrix, mask: PruneMask) -> float:
    """Std of the unpruned entries about zero: sqrt(mean of squares)."""
    vals = m.data[~mask.pruned]
    if vals.size < 2:
        raise ValueError("need at least 2 unpruned entries to estimate a scale")
    if np.all(vals == 0.0):
        warnings.warn("all unpruned entries are zero: scale is degenerate")
        return 0.0
    return float(np.sqrt(np.mean(vals**2)))


def gaussian_obfuscate(
    pruned: WeightMatrix, mask: PruneMask, sigma_m: float, seed: int = 0
) -> WeightMatrix:
    """Replace pruned entries with i.i.d. N(0, sigma_m^2) draws, seeded.

    sigma_m = 0 reproduces plain pruning (the input comes back unchanged);
    unpruned entries are bit-identical in all cases.
    """
    if sigma_m < 0:
        raise ValueError(f"sigma_m must be >= 0, got {sigma_m}")
    if mask.shape != pruned.shape:
        raise ValueError(f"mask shape {mask.shape} != matrix shape {pruned.shape}")
    if sigma_m == 0.0 or mask.n_pruned == 0:
        return pruned
    rng = np.random.default_rng(seed)
    out = pruned.data.copy()
    out[mask.pruned] = rng.normal(0.0, sigma_m, size=mask.n_pruned)
    return pruned.with_data(out)


def detect_probability(params: DefenseParams) -> float:
    """Probability that a value landing in [-w, w] was a modified weight.

    With window masses q_M = P(|N(0, sigma_M^2)| <= w) and q_U likewise,
        p = alpha * q_M / (alpha * q_M + (1 - alpha) * q_U).
    Equal stds cancel, giving p = alpha for every window.
    """
    q_m = _gauss_window_mass(params.w, params.sigma_m)
    q_u = _gauss_window_mass(params.w, params.sigma_u)
    num = params.alpha * q_m
    den = num + (1.0 - params.alpha) * q_u
    if not math.isfinite(den) or den <= 0.0:
        raise ArithmeticError(
            f"degenerate mixture mass (q_m={q_m}, q_u={q_u}, alpha={params.alpha})"
        )
    return num / den


def detectability_surface(alpha_grid, sigma_m_grid, sigma_u: float, w: float) -> DetectabilityGrid:
    """detect_probability on every (alpha, sigma_m) grid cell."""
    alphas = tuple(float(a) for a in alpha_grid)
    sigmas = tuple(float(s) for s in sigma_m_grid)
    if not alphas or not sigmas:
        raise ValueError("grids must be non-empty")
    if any(b <= a for a, b in zip(alphas, alphas[1:])) or any(
        b <= a for a, b in zip(sigmas, sigmas[1:])
    ):
        raise ValueError("grids must be strictly increasing")
    p = np.empty((len(alphas), len(sigmas)))
    for i, a in enumerate(alphas):
        for j, s in enumerate(sigmas):
            p[i, j] = detect_probability(DefenseParams(s, sigma_u, a, w))
    return DetectabilityGrid(alphas, sigmas, float(sigma_u), float(w), p)


def surface_to_csv(grid: DetectabilityGrid, path) -> None:
    """Write the grid as CSV rows `alpha,sigma_m,p` with round-trip floats."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("alpha,sigma_m,p\n")
        for i, a in enumerate(grid.alpha_values):
            for j, s in enumerate(grid.sigma_m_values):
                fh.write(f"{a:.17g},{s:.17g},{grid.p[i, j]:.17g}\n")


def excess_mass_detector(m: WeightMatrix, w: float) -> float:
    """Ratio of observed near-zero mass to what one fitted Gaussian predicts.

    A score near 1 means the weights look like a single centered Gaussian
    (concealed); a score much greater than 1 exposes a spike of extra mass in
    [-w, w] — the signature of pruning or weak obfuscation.
    """
    if not w > 0:
        raise ValueError(f"w must be > 0, got {w}")
    data = m.data
    sigma_hat = float(np.sqrt(np.mean(data**2)))
    if sigma_hat == 0.0:
        raise ValueError("matrix is identically zero: no scale to test against")
    observed = float(np.mean(np.abs(data) <= w))
    predicted = _gauss_window_mass(w, sigma_hat)
    if predicted <= 0.0:
        raise ValueError("window is too narrow for the fitted scale")
    return observed / predicted


def default_window(sigma_u: float) -> float:
    """Default detection window half-width: a tenth of the unmodified std."""
    return sigma_u / 10.0
