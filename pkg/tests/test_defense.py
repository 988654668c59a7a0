import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from maskrevive.defense import (
    DefenseParams,
    DetectabilityGrid,
    default_window,
    detect_probability,
    detectability_surface,
    erf,
    estimate_sigma_u,
    excess_mass_detector,
    gaussian_obfuscate,
    surface_to_csv,
)
from maskrevive.revival import extract_mask
from maskrevive.tensor_io import WeightMatrix


def wm(arr, name="w"):
    return WeightMatrix(np.asarray(arr, dtype=float), name)


def mc_detect_probability(params: DefenseParams, n: int, seed: int) -> float:
    """Monte Carlo oracle: fraction of in-window samples that were modified."""
    rng = np.random.default_rng(seed)
    modified = rng.random(n) < params.alpha
    x = rng.standard_normal(n)
    x[modified] *= params.sigma_m
    x[~modified] *= params.sigma_u
    in_window = np.abs(x) <= params.w
    assert in_window.any()
    return float(np.mean(modified[in_window]))


# ---------------------------------------------------------------- erf


def test_erf_reference_points():
    assert erf(0.0) == 0.0
    assert abs(erf(1.0) - math.erf(1.0)) < 1e-14
    assert abs(erf(-1.0) + erf(1.0)) == 0.0
    assert erf(10.0) == pytest.approx(1.0, abs=1e-15)
    assert erf(40.0) == 1.0


def test_erf_accuracy_on_grid():
    xs = np.concatenate(
        [
            np.linspace(-8, 8, 4001),
            np.linspace(1.95, 2.05, 501),  # series/continued-fraction handoff
            np.geomspace(1e-12, 1.0, 200),
        ]
    )
    worst = max(abs(erf(float(x)) - math.erf(float(x))) for x in xs)
    assert worst < 1e-12


@given(st.floats(min_value=-30, max_value=30, allow_nan=False))
def test_erf_matches_stdlib(x):
    assert abs(erf(x) - math.erf(x)) < 1e-12


@given(st.floats(min_value=0, max_value=30, allow_nan=False))
def test_erf_odd_and_bounded(x):
    assert erf(-x) == -erf(x)
    assert 0.0 <= erf(x) <= 1.0


# ---------------------------------------------------------------- sigma estimation


def test_estimate_sigma_u_two_point():
    m = wm([[1.0, -1.0]])
    mask = extract_mask(m)  # nothing pruned
    assert estimate_sigma_u(m, mask) == 1.0


def test_estimate_sigma_u_monte_carlo():
    rng = np.random.default_rng(0)
    vals = rng.normal(0, 0.02, size=(1000, 1000))
    m = wm(vals)
    mask = extract_mask(m)
    assert estimate_sigma_u(m, mask) == pytest.approx(0.02, rel=0.01)


def test_estimate_sigma_u_degenerate_warns():
    m = wm([[0.0, 0.0], [0.0, 1.0]])
    mask = extract_mask(m, "supplied", supplied=np.array([[False, False], [False, True]]))
    with pytest.warns(UserWarning):
        assert estimate_sigma_u(m, mask) == 0.0


def test_estimate_sigma_u_too_few_entries():
    m = wm([[0.0, 1.0]])
    mask = extract_mask(m)
    with pytest.raises(ValueError):
        estimate_sigma_u(m, mask)


# ---------------------------------------------------------------- obfuscation


def test_obfuscate_sigma_zero_is_identity():
    m = wm([[0.0, 1.0], [2.0, 0.0]])
    mask = extract_mask(m)
    out = gaussian_obfuscate(m, mask, sigma_m=0.0, seed=1)
    assert np.array_equal(out.data, m.data)


def test_obfuscate_fills_pruned_only():
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(50, 40))
    vals[rng.random((50, 40)) < 0.3] = 0.0
    m = wm(vals)
    mask = extract_mask(m)
    out = gaussian_obfuscate(m, mask, sigma_m=1e-4, seed=2)
    assert np.array_equal(out.data[~mask.pruned], vals[~mask.pruned])
    filled = out.data[mask.pruned]
    assert np.all(filled != 0.0)


def test_obfuscate_sample_std_and_mask_hiding():
    rng = np.random.default_rng(2)
    vals = rng.normal(size=(500, 400))
    vals[rng.random((500, 400)) < 0.5] = 0.0
    m = wm(vals)
    mask = extract_mask(m)
    assert mask.n_pruned > 1e5
    out = gaussian_obfuscate(m, mask, sigma_m=1e-4, seed=3)
    filled = out.data[mask.pruned]
    assert np.std(filled) == pytest.approx(1e-4, rel=0.01)
    assert extract_mask(out).n_pruned == 0


def test_obfuscate_deterministic():
    m = wm([[0.0, 1.0], [0.0, 2.0]])
    mask = extract_mask(m)
    a = gaussian_obfuscate(m, mask, 0.01, seed=7)
    b = gaussian_obfuscate(m, mask, 0.01, seed=7)
    c = gaussian_obfuscate(m, mask, 0.01, seed=8)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


# ---------------------------------------------------------------- detect_probability


def test_params_validation():
    with pytest.raises(ValueError):
        DefenseParams(0.0, 1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        DefenseParams(1.0, -1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        DefenseParams(1.0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        DefenseParams(1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        DefenseParams(1.0, 1.0, 0.5, 0.0)


def test_equal_stds_give_alpha_exactly():
    for alpha in (0.05, 0.2, 0.5, 0.9):
        for w in (1e-6, 0.01, 3.0):
            p = detect_probability(DefenseParams(0.02, 0.02, alpha, w))
            assert abs(p - alpha) < 1e-12


def test_wide_window_tends_to_alpha():
    p = detect_probability(DefenseParams(1e-3, 2e-2, 0.2, 10.0))
    assert p == pytest.approx(0.2, abs=1e-12)


def test_small_sigma_m_concentrates_mass_in_window():
    # nearly all modified mass is inside the window, so p is far above alpha
    p = detect_probability(DefenseParams(1e-3, 2e-2, 0.2, 1e-3))
    assert p > 0.8


def test_detect_probability_against_monte_carlo():
    params = DefenseParams(1e-3, 2e-2, 0.2, 1e-3)
    mc = mc_detect_probability(params, n=1_000_000, seed=0)
    assert detect_probability(params) == pytest.approx(mc, abs=1e-2)


def test_detect_probability_against_monte_carlo_random_cells():
    rng = np.random.default_rng(4)
    for i in range(5):
        sigma_u = float(rng.uniform(0.01, 0.05))
        params = DefenseParams(
            sigma_m=float(sigma_u * rng.uniform(0.05, 1.5)),
            sigma_u=sigma_u,
            alpha=float(rng.uniform(0.05, 0.6)),
            w=float(sigma_u * rng.uniform(0.05, 1.0)),
        )
        mc = mc_detect_probability(params, n=1_000_000, seed=10 + i)
        assert detect_probability(params) == pytest.approx(mc, abs=1e-2)


# ---------------------------------------------------------------- surface


def test_surface_single_cell_matches_pointwise():
    grid = detectability_surface([0.2], [1e-3], sigma_u=2e-2, w=2e-3)
    assert grid.p.shape == (1, 1)
    assert grid.p[0, 0] == detect_probability(DefenseParams(1e-3, 2e-2, 0.2, 2e-3))


def test_surface_monotonicity():
    alphas = np.linspace(0.05, 0.5, 10)
    sigmas = np.geomspace(1e-6, 1e-1, 25)
    grid = detectability_surface(alphas, sigmas, sigma_u=2e-2, w=2e-3)
    assert np.all(np.diff(grid.p, axis=1) <= 1e-15)  # non-increasing in sigma_m
    assert np.all(np.diff(grid.p, axis=0) > 0)  # increasing in alpha


def test_surface_grid_validation():
    with pytest.raises(ValueError):
        detectability_surface([], [1e-3], 0.02, 1e-3)
    with pytest.raises(ValueError):
        detectability_surface([0.2, 0.1], [1e-3], 0.02, 1e-3)
    with pytest.raises(ValueError):
        DetectabilityGrid((0.2,), (1e-3,), 0.02, 1e-3, np.array([[1.5]]))


def test_surface_csv_round_trip(tmp_path):
    grid = detectability_surface(
        np.linspace(0.1, 0.4, 4), np.geomspace(1e-4, 1e-2, 3), 2e-2, 2e-3
    )
    path = tmp_path / "surface.csv"
    surface_to_csv(grid, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "alpha,sigma_m,p"
    assert len(lines) == 1 + 4 * 3
    k = 1
    for i, a in enumerate(grid.alpha_values):
        for j, s in enumerate(grid.sigma_m_values):
            fa, fs, fp = (float(tok) for tok in lines[k].split(","))
            assert (fa, fs, fp) == (a, s, grid.p[i, j])
            k += 1


# ---------------------------------------------------------------- detector


def test_detector_null_case_near_one():
    rng = np.random.default_rng(5)
    sigma = 0.02
    m = wm(rng.normal(0, sigma, size=(400, 400)))
    score = excess_mass_detector(m, w=sigma)
    n = m.data.size
    assert score == pytest.approx(1.0, abs=3 / math.sqrt(n) + 0.01)


def test_detector_flags_plain_pruning():
    rng = np.random.default_rng(6)
    sigma = 0.02
    vals = rng.normal(0, sigma, size=(300, 300))
    vals[rng.random((300, 300)) < 0.2] = 0.0
    score = excess_mass_detector(wm(vals), w=0.01 * sigma)
    assert score >= 5.0


def test_detector_full_mimicry_near_one():
    rng = np.random.default_rng(7)
    sigma = 0.02
    vals = rng.normal(0, sigma, size=(300, 300))
    vals[rng.random((300, 300)) < 0.2] = 0.0
    m = wm(vals)
    mask = extract_mask(m)
    out = gaussian_obfuscate(m, mask, sigma_m=sigma, seed=8)
    score = excess_mass_detector(out, w=default_window(sigma))
    assert score == pytest.approx(1.0, abs=0.05)


def test_detector_monotone_in_sigma_m():
    # concealment improves as sigma_m climbs toward sigma_u, so the unmodified
    # scale is set at the top of the ladder (the last rung is exact mimicry);
    # past mimicry the statistic would rise again, since over-dispersed
    # obfuscation is just as much of a mixture as under-dispersed
    rng = np.random.default_rng(8)
    sigma = 0.1
    vals = rng.normal(0, sigma, size=(200, 200))
    vals[rng.random((200, 200)) < 0.2] = 0.0
    m = wm(vals)
    mask = extract_mask(m)
    scores = []
    for sigma_m in (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1):
        out = gaussian_obfuscate(m, mask, sigma_m, seed=9)
        scores.append(excess_mass_detector(out, w=default_window(sigma)))
    # slack of 1e-3 absorbs counting discreteness on the flat low-sigma rungs
    assert all(b <= a + 1e-3 for a, b in zip(scores, scores[1:]))
    assert scores[-1] == pytest.approx(1.0, abs=0.05)


def test_detector_degenerate_input():
    with pytest.raises(ValueError):
        excess_mass_detector(wm(np.zeros((3, 3))), w=0.1)
    with pytest.raises(ValueError):
        excess_mass_detector(wm(np.ones((3, 3))), w=0.0)
