import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokdiv.compress import (
    CompressionPlan,
    OutlierCensus,
    QuantSpec,
    absmax_quantize_dequantize,
    apply_plan,
    magnitude_mask,
    outlier_census,
    random_mask,
)
from tokdiv.model import models_equal


def ones_like(w):
    return np.ones_like(w)


def test_magnitude_mask_extremes():
    w = np.array([[3.0, -1.0], [2.0, -4.0]])
    np.testing.assert_array_equal(magnitude_mask(w, ones_like(w), 0.0), ones_like(w))
    np.testing.assert_array_equal(magnitude_mask(w, ones_like(w), 1.0), np.zeros_like(w))


def test_magnitude_mask_hand_case():
    w = np.array([3.0, -1.0, 2.0, -4.0])
    mask = magnitude_mask(w, np.ones(4), 0.5)
    np.testing.assert_array_equal(mask, [1.0, 0.0, 0.0, 1.0])


def test_magnitude_mask_tie_break_flat_order():
    w = np.array([1.0, -1.0, 1.0, -1.0])
    mask = magnitude_mask(w, np.ones(4), 0.5)
    np.testing.assert_array_equal(mask, [0.0, 0.0, 1.0, 1.0])


def test_magnitude_mask_rejects_shrinking():
    w = np.arange(4.0)
    dense = np.ones(4)
    half = magnitude_mask(w, dense, 0.5)
    with pytest.raises(ValueError):
        magnitude_mask(w, half, 0.25)


def test_magnitude_mask_float_count():
    w = np.arange(10.0) + 1
    mask = magnitude_mask(w, np.ones(10), 0.1)
    assert int(mask.sum()) == 9  # floor(0.1 * 10) = 1 zero, no float dust


@given(st.integers(0, 2**32 - 1), st.integers(1, 30),
       st.tuples(st.floats(0, 1), st.floats(0, 1)))
def test_magnitude_mask_monotone(seed, size, targets):
    t1, t2 = sorted(targets)
    w = np.random.default_rng(seed).standard_normal(size)
    m1 = magnitude_mask(w, np.ones(size), t1)
    m2 = magnitude_mask(w, m1, t2)
    assert np.all(m2 <= m1)  # zeros never resurrect
    assert int(m2.sum()) == size - int(np.floor(t2 * size + 1e-9))


def test_random_mask_identity_and_determinism():
    w = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(random_mask(w, ones_like(w), 0.0, seed=1), ones_like(w))
    a = random_mask(w, ones_like(w), 0.5, seed=9)
    b = random_mask(w, ones_like(w), 0.5, seed=9)
    np.testing.assert_array_equal(a, b)
    assert int(a.sum()) == 6


def test_random_mask_overlap_expectation():
    # Pruning half at random overlaps the magnitude mask on ~half its slots.
    rng = np.random.default_rng(0)
    w = rng.standard_normal(40)
    mag = magnitude_mask(w, np.ones(40), 0.5)
    mag_zeros = mag == 0
    overlaps = []
    for seed in range(400):
        rand = random_mask(w, np.ones(40), 0.5, seed=seed)
        overlaps.append(np.count_nonzero((rand == 0) & mag_zeros) / 20.0)
    assert abs(np.mean(overlaps) - 0.5) < 0.03


def test_absmax_grid_aligned_values_exact():
    w = np.array([1.0, -127.0])
    out = absmax_quantize_dequantize(w, QuantSpec(bits=8))
    np.testing.assert_array_equal(out, w)


def test_absmax_all_zero_passthrough():
    w = np.zeros((3, 3))
    np.testing.assert_array_equal(absmax_quantize_dequantize(w, QuantSpec(bits=8)), w)


def test_absmax_rejects_non_finite():
    with pytest.raises(ValueError):
        absmax_quantize_dequantize(np.array([np.inf, 1.0]), QuantSpec(bits=8))


def test_absmax_half_away_from_zero_rounding():
    # scale = 1 for both signs: 2.5 -> 3, -2.5 -> -3 under half-away-from-zero.
    w = np.array([127.0, 2.5, -2.5, -127.0])
    out = absmax_quantize_dequantize(w, QuantSpec(bits=8))
    np.testing.assert_array_equal(out, [127.0, 3.0, -3.0, -127.0])


@given(st.integers(0, 2**32 - 1), st.sampled_from([4, 8]))
def test_absmax_error_bound_and_idempotence(seed, bits):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((5, 7)) * rng.uniform(0.01, 100.0)
    spec = QuantSpec(bits=bits)
    out = absmax_quantize_dequantize(w, spec)
    scale = np.max(np.abs(w)) / spec.qmax
    assert np.max(np.abs(out - w)) <= scale / 2 + 1e-15
    again = absmax_quantize_dequantize(out, spec)
    np.testing.assert_allclose(again, out, atol=1e-12)


def test_quant_spec_validation():
    with pytest.raises(ValueError):
        QuantSpec(bits=16)
    with pytest.raises(ValueError):
        QuantSpec(scheme="gptq")
    assert QuantSpec(bits=4).qmax == 7


# ---------------------------------------------------------------------------
# outlier census


def test_census_zero_model(tiny_model):
    model = tiny_model.copy()
    for key in model.params:
        model.params[key][:] = 0.0
    census = outlier_census(model, [np.array([1, 2, 3])], threshold=1e-9)
    assert census.total == 0


def test_census_infinite_threshold(tiny_model):
    census = outlier_census(tiny_model, [np.array([1, 2, 3, 4])], threshold=np.inf)
    assert census.total == 0


def test_census_threshold_monotone(tiny_model):
    probes = [np.array([1, 2, 3, 4, 5]), np.array([9, 8, 7])]
    totals = [
        outlier_census(tiny_model, probes, threshold=t).total
        for t in (0.0, 0.5, 1.0, 2.0, 6.0)
    ]
    assert all(a >= b for a, b in zip(totals, totals[1:]))
    assert totals[0] > 0  # threshold 0 counts every nonzero activation


def test_census_probe_order_invariant(tiny_model):
    probes = [np.array([1, 2, 3]), np.array([4, 5, 6]), np.array([7, 8, 9])]
    a = outlier_census(tiny_model, probes, threshold=0.5)
    b = outlier_census(tiny_model, probes[::-1], threshold=0.5)
    assert a.per_component == b.per_component
    assert a.total == sum(a.per_component.values())


def test_census_rejects_empty_probes(tiny_model):
    with pytest.raises(ValueError):
        outlier_census(tiny_model, [], threshold=1.0)


# ---------------------------------------------------------------------------
# plans


def test_apply_empty_plan_is_identity(tiny_model):
    out = apply_plan(tiny_model, CompressionPlan())
    assert models_equal(out, tiny_model)
    assert out is not tiny_model


def test_apply_full_sparsity_zeroes_component(tiny_model):
    plan = CompressionPlan.from_sparsities({"0.attn_v": 1.0})
    out = apply_plan(tiny_model, plan)
    assert np.all(out.effective_weight("0.attn_v") == 0.0)
    assert models_equal(tiny_model, tiny_model)  # base untouched
    np.testing.assert_array_equal(tiny_model.masks["0.attn_v"],
                                  np.ones_like(tiny_model.masks["0.attn_v"]))


def test_apply_plan_component_order_commutes(tiny_model):
    entries = {"0.mlp_up": {"sparsity": 0.25}, "1.attn_q": {"bits": 8},
               "1.mlp_down": {"sparsity": 0.5}}
    forwardized = apply_plan(tiny_model, CompressionPlan(dict(entries)))
    reversed_entries = dict(reversed(list(entries.items())))
    backwardized = apply_plan(tiny_model, CompressionPlan(reversed_entries))
    assert models_equal(forwardized, backwardized)


def test_apply_plan_rejects_unknown_component(tiny_model):
    with pytest.raises(ValueError):
        apply_plan(tiny_model, CompressionPlan({"99.attn_q": {"sparsity": 0.5}}))
    with pytest.raises(ValueError):
        apply_plan(tiny_model, CompressionPlan({"0.attn_q": {"sparsity": 0.5, "bits": 8}}))


def test_plan_json_roundtrip(tmp_path):
    plan = CompressionPlan({"0.attn_q": {"sparsity": 0.3}, "1.mlp_up": {"bits": 4}})
    path = tmp_path / "plan.json"
    plan.write_json(path)
    loaded = CompressionPlan.read_json(path)
    assert loaded.entries == plan.entries
