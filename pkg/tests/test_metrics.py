import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokdiv.metrics import (
    CONVENTIONS,
    DivergenceReport,
    ProbeSpec,
    ProbeResult,
    aggregate,
    check_dppl_bound,
    construct_ppl_adversary,
    dppl_rows,
    fdt,
    nll,
    ppl,
    probe_pair,
    sdt,
    sdt_rows,
    shrink_top_gaps,
    validate_report_dict,
)
from tokdiv.model import forward, greedy_decode, random_init


def test_probe_spec_validation():
    with pytest.raises(ValueError):
        ProbeSpec(prefix_len=5, total_len=5)
    with pytest.raises(ValueError):
        ProbeSpec(prefix_len=0, total_len=5)
    assert ProbeSpec(prefix_len=3, total_len=11).completion_len == 8


def test_nll_certain_logits_near_zero():
    y = np.array([0, 2, 1, 3])
    logits = np.full((4, 4), -1000.0)
    for i in range(3):
        logits[i, y[i + 1]] = 1000.0
    assert nll(y, logits, 1) == pytest.approx(0.0, abs=1e-12)
    assert ppl(y, logits, 1) == pytest.approx(1.0, abs=1e-9)


def test_nll_flat_logits_is_log_vocab():
    y = np.array([0, 1, 2, 3, 0])
    logits = np.zeros((5, 4))
    assert nll(y, logits, 1) == pytest.approx(math.log(4.0), abs=1e-12)
    assert ppl(y, logits, 1) == pytest.approx(4.0, abs=1e-9)


def test_nll_hand_oracle_three_steps():
    # Hand evaluation with scalar exp/log sums, independent of the library path.
    y = np.array([2, 0, 1, 2])
    logits = np.array([
        [0.5, -0.25, 1.0],
        [2.0, 0.0, -1.0],
        [0.1, 0.2, 0.3],
        [9.0, 9.0, 9.0],
    ])
    n = 1
    expected_terms = []
    for t in range(n, 4):
        row = logits[t - 1]
        denom = sum(math.exp(v) for v in row)
        expected_terms.append(-math.log(math.exp(row[y[t]]) / denom))
    expected = sum(expected_terms) / len(expected_terms)
    assert nll(y, logits, n) == pytest.approx(expected, rel=1e-12)


def test_nll_prefix_bounds():
    y = np.array([0, 1, 2])
    logits = np.zeros((3, 4))
    with pytest.raises(ValueError):
        nll(y, logits, 3)
    with pytest.raises(ValueError):
        nll(y, logits, 0)


def test_sdt_zero_on_own_greedy_completion(tiny_model):
    spec = ProbeSpec(prefix_len=3, total_len=12)
    z = greedy_decode(tiny_model, [4, 2, 9], spec.total_len)
    logits = forward(tiny_model, z)
    assert sdt(z, logits, spec.prefix_len) == 0
    assert fdt(z, logits, spec.prefix_len) == spec.completion_len


def test_sdt_all_wrong():
    y = np.zeros(6, dtype=int)
    logits = np.zeros((6, 4))
    logits[:, 2] = 5.0  # argmax 2 everywhere, targets all 0
    assert sdt(y, logits, 2) == 4


def test_sdt_matches_bruteforce(rng):
    y = rng.integers(0, 8, size=6)
    logits = rng.standard_normal((6, 8))
    n = 1
    count = 0
    for t in range(n, 6):
        if int(np.argmax(logits[t - 1])) != y[t]:
            count += 1
    assert sdt(y, logits, n) == count


def test_fdt_first_token_differs():
    y = np.array([0, 0, 0, 0])
    logits = np.zeros((4, 4))
    logits[:, 1] = 3.0
    assert fdt(y, logits, 1) == 0


def test_fdt_fig1_style_case():
    # 3-token prefix, 8 generated tokens, first mismatch at the 4th generated
    # token -> FDT counts the 3 fully matching tokens before it.
    n, total = 3, 11
    y = np.arange(total) % 5
    logits = np.zeros((total, 5))
    for t in range(n, total):
        logits[t - 1, y[t]] = 4.0  # agree everywhere...
    wrong = (y[n + 3] + 1) % 5
    logits[n + 3 - 1] = 0.0
    logits[n + 3 - 1, wrong] = 4.0  # ...except the 4th generated token
    assert fdt(y, logits, n) == 3
    assert sdt(y, logits, n) == 1


def test_fdt_range_and_sdt_relation(rng):
    for _ in range(50):
        y = rng.integers(0, 6, size=9)
        logits = rng.standard_normal((9, 6))
        n = int(rng.integers(1, 8))
        f, s = fdt(y, logits, n), sdt(y, logits, n)
        assert 0 <= f <= 9 - n and 0 <= s <= 9 - n
        assert (f == 9 - n) == (s == 0)


# ---------------------------------------------------------------------------
# row-level pair metrics and the propositions


def test_adversary_single_row_flip():
    delta = 1e-6
    row = np.array([[1.0, 1.0 - delta / 2, 0.0]])
    bumped = construct_ppl_adversary(row, delta)
    assert np.argmax(row[0]) == 0 and np.argmax(bumped[0]) == 1


def test_adversary_flips_every_row_and_preserves_ppl(rng):
    delta = 1e-6
    base = shrink_top_gaps(rng.standard_normal((32, 8)), delta)
    adv = construct_ppl_adversary(base, delta)
    assert sdt_rows(base, adv) == 32
    assert np.max(np.abs(base - adv)) <= delta * (1 + 1e-9)
    y = rng.integers(0, 8, size=32)
    assert abs(ppl(y, base, 1) - ppl(y, adv, 1)) < 1e-3


def test_adversary_requires_small_gaps():
    with pytest.raises(ValueError):
        construct_ppl_adversary(np.array([[2.0, 0.0, 1.0]]), delta=1e-6)


def test_adversary_requires_distinct_values():
    with pytest.raises(ValueError):
        construct_ppl_adversary(np.array([[1.0, 1.0, 0.0]]), delta=10.0)


def test_shrink_top_gaps_prepares_any_matrix(rng):
    raw = rng.integers(0, 3, size=(10, 6)).astype(float)  # plenty of duplicates
    prepared = shrink_top_gaps(raw, 1e-6)
    adv = construct_ppl_adversary(prepared, 1e-6)
    assert sdt_rows(prepared, adv) == 10


def test_bound_identical_logits(rng):
    l = rng.standard_normal((8, 5))
    res = check_dppl_bound(l, l.copy())
    assert res.sdt == 0 and res.holds


def test_bound_single_row_flat():
    # One scored row, evaluated distribution flat over 2 -> dppl 2, bound 1.
    ref = np.array([[3.0, 0.0]])
    alt = np.array([[0.0, 0.0]])
    res = check_dppl_bound(ref, alt)
    assert res.dppl == pytest.approx(2.0, rel=1e-12)
    assert res.bound == pytest.approx(1.0, rel=1e-12)
    assert res.sdt in (0, 1) and res.holds


def test_bound_random_sweep(rng):
    for _ in range(1000):
        l = rng.standard_normal((16, 8)) * rng.uniform(0.1, 4.0)
        l2 = l + rng.standard_normal((16, 8)) * rng.uniform(0.01, 2.0)
        assert check_dppl_bound(l, l2, skip=2).holds


def test_dppl_rows_at_least_one(rng):
    l = rng.standard_normal((12, 6))
    l2 = rng.standard_normal((12, 6))
    assert dppl_rows(l, l2) >= 1.0


# ---------------------------------------------------------------------------
# probing and aggregation


def test_probe_pair_identity(tiny_model):
    spec = ProbeSpec(prefix_len=4, total_len=14)
    prefix = np.array([3, 7, 1, 12])
    res = probe_pair(tiny_model, tiny_model, prefix, spec)
    assert res.fdt == spec.completion_len
    assert res.sdt == 0
    z = greedy_decode(tiny_model, prefix, spec.total_len)
    assert res.dppl == pytest.approx(ppl(z, forward(tiny_model, z), spec.prefix_len))


def test_probe_pair_symmetry_and_two_decode_oracle(tiny_model):
    spec = ProbeSpec(prefix_len=3, total_len=12)
    rng = np.random.default_rng(42)
    for trial in range(10):
        other = random_init(tiny_model.config, seed=1000 + trial)
        prefix = rng.integers(0, tiny_model.config.vocab_size, size=3)
        ab = probe_pair(tiny_model, other, prefix, spec).fdt
        ba = probe_pair(other, tiny_model, prefix, spec).fdt
        za = greedy_decode(tiny_model, prefix, spec.total_len)
        zb = greedy_decode(other, prefix, spec.total_len)
        diffs = np.nonzero(za[spec.prefix_len:] != zb[spec.prefix_len:])[0]
        oracle = int(diffs[0]) if diffs.size else spec.completion_len
        assert ab == ba == oracle


def test_aggregate_identity(tiny_model):
    spec = ProbeSpec(prefix_len=3, total_len=10)
    prefixes = [np.array([1, 2, 3]), np.array([4, 5, 6]), np.array([7, 8, 9])]
    report = aggregate(tiny_model, tiny_model, prefixes, spec)
    agg = report.aggregates()
    assert agg["fdt_75"] == spec.completion_len
    assert agg["mean_sdt"] == 0.0


def test_aggregate_single_probe_equals_record(tiny_model):
    spec = ProbeSpec(prefix_len=2, total_len=8)
    other = random_init(tiny_model.config, seed=99)
    report = aggregate(tiny_model, other, [np.array([1, 2])], spec)
    agg = report.aggregates()
    rec = report.records[0]
    assert agg["count"] == 1
    assert agg["mean_fdt"] == rec.fdt and agg["fdt_75"] == rec.fdt
    assert agg["mean_dppl"] == rec.dppl


def test_aggregate_quantile_rule():
    spec = ProbeSpec(prefix_len=10, total_len=110)
    records = [ProbeResult(i, f, 0, 1.0, 1.0) for i, f in enumerate((10, 20, 90))]
    report = DivergenceReport(probe_spec=spec, records=records)
    assert report.aggregates()["fdt_75"] == 20


def test_aggregate_empty_dataset_raises(tiny_model):
    with pytest.raises(ValueError):
        aggregate(tiny_model, tiny_model, [], ProbeSpec(2, 6))


def test_aggregate_workers_deterministic(tiny_model):
    spec = ProbeSpec(prefix_len=3, total_len=9)
    other = random_init(tiny_model.config, seed=55)
    prefixes = [np.array([i, i + 1, i + 2]) for i in range(6)]
    seq = aggregate(tiny_model, other, prefixes, spec, workers=1)
    par = aggregate(tiny_model, other, prefixes, spec, workers=3)
    assert seq.records == par.records


# ---------------------------------------------------------------------------
# report serialization


def test_report_json_roundtrip(tiny_model, tmp_path):
    spec = ProbeSpec(prefix_len=2, total_len=8)
    other = random_init(tiny_model.config, seed=3)
    report = aggregate(tiny_model, other, [np.array([1, 5]), np.array([2, 9])], spec)
    path = tmp_path / "report.json"
    report.write_json(path)
    loaded = DivergenceReport.read_json(path)
    assert loaded.records == report.records
    assert loaded.probe_spec == report.probe_spec
    raw = json.loads(path.read_text())
    assert raw["conventions"] == CONVENTIONS


def test_report_csv_layout(tiny_model, tmp_path):
    spec = ProbeSpec(prefix_len=2, total_len=8)
    report = aggregate(tiny_model, tiny_model, [np.array([1, 5])], spec)
    path = tmp_path / "report.csv"
    report.write_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "probe_id,fdt,sdt,dppl,ppl"
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == str(spec.completion_len)


def test_report_schema_rejects_bad_records():
    good = {
        "schema_version": 1,
        "kind": "divergence_report",
        "probe_spec": {"prefix_len": 2, "total_len": 8},
        "records": [{"probe_id": 0, "fdt": 6, "sdt": 0, "dppl": 1.0, "ppl": 1.0}],
        "aggregates": {},
    }
    validate_report_dict(good)
    bad_fdt = json.loads(json.dumps(good))
    bad_fdt["records"][0]["fdt"] = 7
    with pytest.raises(ValueError):
        validate_report_dict(bad_fdt)
    bad_version = json.loads(json.dumps(good))
    bad_version["schema_version"] = 99
    with pytest.raises(ValueError):
        validate_report_dict(bad_version)


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6),
                          st.floats(1.0, 50.0), st.floats(1.0, 50.0)),
                min_size=1, max_size=8))
def test_report_roundtrip_property(entries):
    spec = ProbeSpec(prefix_len=2, total_len=8)
    records = [
        ProbeResult(i, f, s, d, p) for i, (f, s, d, p) in enumerate(entries)
    ]
    report = DivergenceReport(probe_spec=spec, records=records)
    again = DivergenceReport.from_dict(report.to_dict())
    assert again.records == report.records
