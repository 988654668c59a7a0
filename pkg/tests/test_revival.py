import numpy as np
import pytest

from maskrevive.completion import CompletionConfig
from maskrevive.revival import (
    LayerAttackError,
    PruneMask,
    RevivalPlan,
    SignPlan,
    assign_magnitudes,
    attack_layer,
    attack_model,
    extract_mask,
    retention_count,
    topk_sign_retention,
)
from maskrevive.tensor_io import LayerSet, WeightMatrix


def wm(arr, name="w"):
    return WeightMatrix(np.asarray(arr, dtype=float), name)


def prune_uniform(w: np.ndarray, frac: float, seed: int) -> np.ndarray:
    """Zero a random fraction of entries; returns the pruned copy."""
    rng = np.random.default_rng(seed)
    out = w.copy()
    out[rng.random(w.shape) < frac] = 0.0
    return out


# ---------------------------------------------------------------- masks


def test_extract_mask_exact_zero():
    mask = extract_mask(wm([[0.0, 1.0], [2.0, 0.0]]))
    np.testing.assert_array_equal(mask.pruned, [[True, False], [False, True]])
    assert mask.pruned_fraction == 0.5
    assert mask.source == "exact_zero"
    assert not mask.suspicious


def test_extract_mask_all_nonzero_is_empty():
    mask = extract_mask(wm([[1.0, -2.0], [3.0, 4.0]]))
    assert mask.n_pruned == 0
    assert mask.pruned_fraction == 0.0


def test_extract_mask_near_total_pruning_is_suspicious():
    arr = np.zeros((10, 10))
    arr[0, 0] = 1.0
    mask = extract_mask(wm(arr))
    assert mask.suspicious
    assert mask.pruned_fraction == 0.99


def test_extract_mask_supplied():
    sup = np.array([[True, False], [False, False]])
    mask = extract_mask(wm([[5.0, 1.0], [2.0, 3.0]]), "supplied", supplied=sup)
    np.testing.assert_array_equal(mask.pruned, sup)
    assert mask.source == "supplied"
    with pytest.raises(ValueError):
        extract_mask(wm([[1.0]]), "supplied", supplied=np.ones((2, 2), dtype=bool))


def test_prune_mask_fraction_checked():
    with pytest.raises(ValueError):
        PruneMask(np.array([[True, False]]), "supplied", 0.9)


# ---------------------------------------------------------------- retention


def test_retention_count_exact_at_float_boundaries():
    # naive ceil(0.6 * 10) gives 7 because 0.6 * 10 rounds above 6.0
    assert retention_count(0.6, 10) == 6
    assert retention_count(0.2, 5) == 1
    assert retention_count(1.0, 7) == 7
    assert retention_count(0.5, 9) == 5
    assert retention_count(0.3, 10) == 3


def test_topk_ranking_and_drop():
    recovered = wm([[3.0, -2.0], [0.1, -0.05]])
    mask = extract_mask(wm([[0.0, 0.0], [0.0, 0.0]]), "supplied",
                        supplied=np.ones((2, 2), dtype=bool))
    plan = topk_sign_retention(recovered, mask, 0.5)
    np.testing.assert_array_equal(plan.signs, [[1, -1], [0, 0]])
    assert plan.retained == 2
    assert plan.dropped == 2


def test_topk_full_retention():
    recovered = wm([[3.0, -2.0], [0.1, -0.05]])
    mask = extract_mask(wm(np.zeros((2, 2))), "supplied",
                        supplied=np.ones((2, 2), dtype=bool))
    plan = topk_sign_retention(recovered, mask, 1.0)
    np.testing.assert_array_equal(plan.signs, [[1, -1], [1, -1]])
    assert plan.dropped == 0


def test_topk_zero_recovered_value_dropped():
    recovered = wm([[0.0, -2.0], [5.0, 1.0]])
    mask = extract_mask(wm(np.zeros((2, 2))), "supplied",
                        supplied=np.ones((2, 2), dtype=bool))
    plan = topk_sign_retention(recovered, mask, 1.0)
    assert plan.signs[0, 0] == 0
    assert plan.retained == 3
    assert plan.dropped == 1


def test_topk_ties_broken_row_major():
    recovered = wm([[1.0, 1.0], [1.0, 1.0]])
    mask = extract_mask(wm(np.zeros((2, 2))), "supplied",
                        supplied=np.ones((2, 2), dtype=bool))
    plan = topk_sign_retention(recovered, mask, 0.5)
    np.testing.assert_array_equal(plan.signs, [[1, 1], [0, 0]])


def test_topk_only_ranks_pruned_entries():
    recovered = wm([[100.0, 2.0], [3.0, 1.0]])
    pruned = np.array([[False, True], [True, True]])
    mask = extract_mask(wm([[1.0, 0.0], [0.0, 0.0]]), "supplied", supplied=pruned)
    plan = topk_sign_retention(recovered, mask, 0.3)
    # only the pruned entries compete; 100.0 at (0,0) is unpruned
    np.testing.assert_array_equal(plan.signs, [[0, 0], [1, 0]])


# ---------------------------------------------------------------- magnitudes


def pruned_mask_from(arr):
    return extract_mask(wm(arr))


def test_neuron_max_row_pool():
    m = wm([[0.0, 2.0, -4.0]])
    mask = pruned_mask_from([[0.0, 2.0, -4.0]])
    signs = SignPlan(np.array([[1, 0, 0]], dtype=np.int8), 1, 0)
    plan = RevivalPlan(magnitude_strategy="neuron_max", pool_axis="row")
    out = assign_magnitudes(m, mask, plan, signs)
    assert out.data[0, 0] == 4.0
    np.testing.assert_array_equal(out.data[0, 1:], [2.0, -4.0])


def test_neuron_average_row_pool():
    m = wm([[0.0, 2.0, -4.0]])
    mask = pruned_mask_from([[0.0, 2.0, -4.0]])
    signs = SignPlan(np.array([[1, 0, 0]], dtype=np.int8), 1, 0)
    plan = RevivalPlan(magnitude_strategy="neuron_average", pool_axis="row")
    out = assign_magnitudes(m, mask, plan, signs)
    assert out.data[0, 0] == 3.0


def test_column_pool_default():
    m = wm([[0.0, 9.0], [2.0, 1.0], [-5.0, 1.0]])
    mask = pruned_mask_from(m.data)
    signs = SignPlan(np.array([[-1, 0], [0, 0], [0, 0]], dtype=np.int8), 1, 0)
    out = assign_magnitudes(m, mask, RevivalPlan(), signs)
    assert out.data[0, 0] == -5.0  # max |{2, -5}| of column 0, negative sign


def test_dropped_entries_stay_zero_unpruned_untouched():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(20, 15))
    pruned = prune_uniform(w, 0.3, 1)
    m = wm(pruned)
    mask = extract_mask(m)
    signs = topk_sign_retention(wm(rng.normal(size=(20, 15))), mask, 0.5)
    out = assign_magnitudes(m, mask, RevivalPlan(), signs)
    untouched = ~mask.pruned
    np.testing.assert_array_equal(out.data[untouched], pruned[untouched])
    dropped = mask.pruned & (signs.signs == 0)
    assert np.all(out.data[dropped] == 0.0)


def test_neuron_sample_and_layer_sample_deterministic():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(30, 20))
    pruned = prune_uniform(w, 0.25, 3)
    m = wm(pruned)
    mask = extract_mask(m)
    signs = topk_sign_retention(wm(rng.normal(size=(30, 20))), mask, 0.8)
    for strategy in ("neuron_sample", "layer_sample"):
        plan = RevivalPlan(magnitude_strategy=strategy, seed=42)
        a = assign_magnitudes(m, mask, plan, signs)
        b = assign_magnitudes(m, mask, plan, signs)
        assert np.array_equal(a.data, b.data), strategy
        c = assign_magnitudes(m, mask, RevivalPlan(magnitude_strategy=strategy, seed=43), signs)
        assert not np.array_equal(a.data, c.data), strategy


def test_sample_magnitudes_come_from_pool():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(10, 6))
    pruned = prune_uniform(w, 0.3, 5)
    m = wm(pruned)
    mask = extract_mask(m)
    signs = topk_sign_retention(wm(rng.normal(size=(10, 6))), mask, 1.0)
    plan = RevivalPlan(magnitude_strategy="neuron_sample", pool_axis="column", seed=1)
    out = assign_magnitudes(m, mask, plan, signs)
    ret_i, ret_j = np.nonzero(signs.signs)
    for i, j in zip(ret_i, ret_j):
        pool = np.abs(pruned[~mask.pruned[:, j], j])
        assert np.abs(out.data[i, j]) in pool


def test_nms_dominates_average_everywhere():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(25, 18))
    pruned = prune_uniform(w, 0.2, 7)
    m = wm(pruned)
    mask = extract_mask(m)
    signs = topk_sign_retention(wm(rng.normal(size=(25, 18))), mask, 1.0)
    out_max = assign_magnitudes(m, mask, RevivalPlan(magnitude_strategy="neuron_max"), signs)
    out_avg = assign_magnitudes(m, mask, RevivalPlan(magnitude_strategy="neuron_average"), signs)
    retained = signs.signs != 0
    assert np.all(np.abs(out_max.data[retained]) >= np.abs(out_avg.data[retained]))
    assert np.all(np.abs(out_avg.data[retained]) >= 0)


def test_empty_pool_falls_back_to_layer():
    # column 0 fully pruned: its entries must pool from the whole layer
    m = wm([[0.0, 3.0], [0.0, -7.0]])
    mask = pruned_mask_from(m.data)
    signs = SignPlan(np.array([[1, 0], [-1, 0]], dtype=np.int8), 2, 0)
    plan = RevivalPlan(magnitude_strategy="neuron_max", pool_axis="column")
    out = assign_magnitudes(m, mask, plan, signs)
    assert out.data[0, 0] == 7.0
    assert out.data[1, 0] == -7.0


def test_fully_pruned_layer_rejected():
    m = wm(np.zeros((3, 3)))
    mask = pruned_mask_from(m.data)
    signs = SignPlan(np.zeros((3, 3), dtype=np.int8), 0, 9)
    with pytest.raises(ValueError):
        assign_magnitudes(m, mask, RevivalPlan(), signs)


# ---------------------------------------------------------------- pipeline


def test_attack_layer_no_mask_passthrough():
    rng = np.random.default_rng(8)
    w = rng.normal(size=(10, 8))
    w[w == 0.0] = 1.0
    m = wm(w, "clean")
    out, report = attack_layer(m, CompletionConfig(), RevivalPlan())
    assert np.array_equal(out.data, w)
    assert report.retained == 0
    assert report.pruned_fraction == 0.0


def test_attack_layer_recovers_signs_on_lowrank_truth():
    rng = np.random.default_rng(9)
    truth = rng.normal(size=(60, 5)) @ rng.normal(size=(40, 5)).T
    pruned = prune_uniform(truth, 0.2, 10)
    m = wm(pruned, "ffn")
    out, report = attack_layer(m, CompletionConfig(seed=0), RevivalPlan(k_fraction=0.6))
    mask = extract_mask(m)
    untouched = ~mask.pruned
    np.testing.assert_array_equal(out.data[untouched], pruned[untouched])
    retained = (out.data != 0) & mask.pruned
    acc = np.mean(np.sign(out.data[retained]) == np.sign(truth[retained]))
    assert acc > 0.7
    assert report.retained == retention_count(0.6, mask.n_pruned)
    assert report.retained + report.zeroed == mask.n_pruned


def test_attack_layer_scale_equivariant_signs():
    # scaling the input by a power of two scales the default lambda path and
    # every iterate exactly, so the retained index set and signs are identical
    rng = np.random.default_rng(11)
    truth = rng.normal(size=(40, 30)) * 0.02
    pruned = prune_uniform(truth, 0.25, 12)
    cfg = CompletionConfig(seed=3)
    plan = RevivalPlan(k_fraction=0.6)
    out_1, _ = attack_layer(wm(pruned, "a"), cfg, plan)
    out_c, _ = attack_layer(wm(pruned * 4.0, "a"), cfg, plan)
    s1 = np.sign(out_1.data)
    sc = np.sign(out_c.data)
    np.testing.assert_array_equal(s1, sc)


def test_attack_model_aggregates_and_preserves_names():
    rng = np.random.default_rng(13)
    layers = []
    for i in range(3):
        truth = rng.normal(size=(20, 3)) @ rng.normal(size=(15, 3)).T
        layers.append(wm(prune_uniform(truth, 0.2, i), f"blk{i}"))
    ls = LayerSet(tuple(layers))
    out, report = attack_model(ls, CompletionConfig(seed=1), RevivalPlan())
    assert out.names == ls.names
    assert len(report.layers) == 3
    assert report.total_retained == sum(r.retained for r in report.layers)
    assert report.total_pruned == sum(r.retained + r.zeroed for r in report.layers)


def test_attack_model_clean_layer_passes_through():
    rng = np.random.default_rng(14)
    clean = rng.normal(size=(10, 10))
    clean[clean == 0] = 0.5
    truth = rng.normal(size=(10, 2)) @ rng.normal(size=(10, 2)).T
    ls = LayerSet((wm(clean, "clean"), wm(prune_uniform(truth, 0.2, 1), "holes")))
    out, report = attack_model(ls, CompletionConfig(seed=2), RevivalPlan())
    assert np.array_equal(out["clean"].data, clean)
    by_name = {r.name: r for r in report.layers}
    assert by_name["clean"].retained == 0
    assert by_name["holes"].retained > 0


def test_attack_model_failure_names_layer():
    ls = LayerSet((wm(np.zeros((3, 3)), "allzero"),))
    with pytest.raises(LayerAttackError, match="allzero"):
        attack_model(ls, CompletionConfig(), RevivalPlan())


def test_plan_validation():
    with pytest.raises(ValueError):
        RevivalPlan(k_fraction=0.0)
    with pytest.raises(ValueError):
        RevivalPlan(k_fraction=1.5)
    with pytest.raises(ValueError):
        RevivalPlan(magnitude_strategy="psychic")
    with pytest.raises(ValueError):
        RevivalPlan(pool_axis="diagonal")
