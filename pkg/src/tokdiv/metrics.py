"""Token-divergence metrics and the two supporting propositions.

Two views of the same definitions live here. Sequence-level functions
(`nll`, `ppl`, `sdt`, `fdt`) take a realized token sequence plus the logits a
model produced for it, and score the transitions after a prefix of length n:
the row computed after consuming the first t tokens is compared against token
t (zero-based), for t in [n, N). A length-N sequence therefore has exactly
N - n scored positions.

Row-level pair functions (`sdt_rows`, `dppl_rows`, ...) compare two logit
matrices directly, row by row, treating the reference argmax of each row as
the token the reference would generate next. These are the executable form of
the two discontinuity propositions, where there is no model, only logits; all
rows from `skip` on are scored, so a matrix with R rows and skip=0 can diverge
at all R positions.

FDT convention used everywhere: the value counts fully matching generated
tokens after the prefix, so 0 means immediate divergence and completion_len
means no divergence at all.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import log_softmax, quantile, require_finite
from .model import ToyModel, forward, freeze_effective, greedy_decode


CONVENTIONS = {
    "fdt": "count of fully matching generated tokens after the prefix; "
           "0 = immediate divergence, completion_len = no divergence",
    "sdt": "number of scored positions where the evaluated argmax mismatches "
           "the reference next token",
    "dppl": "perplexity of the evaluated model, teacher-forced on the "
            "reference model's greedy completion, prefix excluded",
    "ppl": "perplexity of the evaluated model on the same completion from "
           "position 1 (prefix included), the standard no-prefix convention",
    "quantile": "lower interpolation on the sorted sample",
    "argmax_ties": "broken to the lowest index",
}

REPORT_SCHEMA_VERSION = 1
REPORT_CSV_HEADER = ["probe_id", "fdt", "sdt", "dppl", "ppl"]


@dataclass(frozen=True)
class ProbeSpec:
    """Prefix length n and total length N of every probe; 0 < n < N."""

    prefix_len: int = 100
    total_len: int = 200

    def __post_init__(self):
        if not 0 < self.prefix_len < self.total_len:
            raise ValueError("need 0 < prefix_len < total_len")

    @property
    def completion_len(self) -> int:
        return self.total_len - self.prefix_len


# ---------------------------------------------------------------------------
# sequence-level metrics


def _check_args(y: np.ndarray, logits: np.ndarray, n: int) -> int:
    N = y.shape[0]
    if logits.shape[0] != N:
        raise ValueError(f"logits rows {logits.shape[0]} != sequence length {N}")
    if not 0 < n < N:
        raise ValueError(f"prefix length must satisfy 0 < n < {N}, got {n}")
    return N


def nll(y, logits, n: int) -> float:
    """Mean negative log-likelihood of tokens y[n:] under their preceding rows."""
    y = np.asarray(y, dtype=np.int64)
    logits = np.asarray(logits, dtype=np.float64)
    require_finite(logits, "logits")
    N = _check_args(y, logits, n)
    logp = log_softmax(logits[n - 1 : N - 1], axis=-1)
    return float(-np.mean(logp[np.arange(N - n), y[n:]]))


def ppl(y, logits, n: int = 1) -> float:
    """exp(nll); n defaults to 1, the standard prefix-free convention."""
    return float(np.exp(nll(y, logits, n)))


def sdt(y, logits, n: int) -> int:
    """Count of scored positions whose argmax mismatches the realized token."""
    y = np.asarray(y, dtype=np.int64)
    logits = np.asarray(logits, dtype=np.float64)
    N = _check_args(y, logits, n)
    pred = np.argmax(logits[n - 1 : N - 1], axis=-1)
    return int(np.count_nonzero(pred != y[n:]))


def fdt(y, logits, n: int) -> int:
    """Index of the first divergent position after the prefix, in [0, N - n].

    Returns N - n when no scored position diverges.
    """
    y = np.asarray(y, dtype=np.int64)
    logits = np.asarray(logits, dtype=np.float64)
    N = _check_args(y, logits, n)
    pred = np.argmax(logits[n - 1 : N - 1], axis=-1)
    mismatch = np.nonzero(pred != y[n:])[0]
    return int(mismatch[0]) if mismatch.size else N - n


# ---------------------------------------------------------------------------
# row-level pair metrics (the propositions quantify over these)


def _pair_shapes(ref_logits, alt_logits, skip: int):
    ref = np.asarray(ref_logits, dtype=np.float64)
    alt = np.asarray(alt_logits, dtype=np.float64)
    if ref.shape != alt.shape or ref.ndim != 2:
        raise ValueError("logit matrices must share one 2-D shape")
    if not 0 <= skip < ref.shape[0]:
        raise ValueError(f"skip must be in [0, {ref.shape[0]}), got {skip}")
    return ref, alt


def sdt_rows(ref_logits, alt_logits, skip: int = 0) -> int:
    """Number of rows >= skip whose argmax differs between the two matrices."""
    ref, alt = _pair_shapes(ref_logits, alt_logits, skip)
    return int(
        np.count_nonzero(
            np.argmax(ref[skip:], axis=-1) != np.argmax(alt[skip:], axis=-1)
        )
    )


def dppl_rows(ref_logits, alt_logits, skip: int = 0) -> float:
    """Perplexity of alt on the tokens ref would greedily generate, rows >= skip."""
    ref, alt = _pair_shapes(ref_logits, alt_logits, skip)
    next_tok = np.argmax(ref[skip:], axis=-1)
    logp = log_softmax(alt[skip:], axis=-1)
    rows = np.arange(next_tok.shape[0])
    return float(np.exp(-np.mean(logp[rows, next_tok])))


@dataclass(frozen=True)
class BoundCheck:
    sdt: int
    dppl: float
    bound: float
    holds: bool


def check_dppl_bound(ref_logits, alt_logits, skip: int = 0) -> BoundCheck:
    """Verify sdt <= R / log(2) * log(dppl) over the R scored rows."""
    s = sdt_rows(ref_logits, alt_logits, skip)
    d = dppl_rows(ref_logits, alt_logits, skip)
    rows = np.asarray(ref_logits).shape[0] - skip
    bound = rows / math.log(2.0) * math.log(d)
    return BoundCheck(sdt=s, dppl=d, bound=bound, holds=s <= bound + 1e-9)


def shrink_top_gaps(logits, delta: float) -> np.ndarray:
    """Deterministically prepare a matrix for `construct_ppl_adversary`.

    Breaks re-occurring values with an index-proportional jitter far below
    delta, then pins each row's top value to top-2 + delta/2 so every
    top-1/top-2 gap is strictly below delta.
    """
    l = np.array(logits, dtype=np.float64)
    if l.ndim != 2 or l.shape[1] < 2:
        raise ValueError("need a 2-D matrix with at least two columns")
    if delta <= 0:
        raise ValueError("delta must be positive")
    jitter = np.arange(l.shape[1]) * (delta * 1e-6 / l.shape[1])
    for i in range(l.shape[0]):
        row = l[i]
        if np.unique(row).size != row.size:
            row += jitter
        order = np.argsort(row)
        a1, a2 = order[-1], order[-2]
        row[a1] = row[a2] + delta / 2.0
    return l


def construct_ppl_adversary(logits, delta: float) -> np.ndarray:
    """Bump each row's top-2 entry by delta, flipping every argmax.

    Requires distinct values per row and a top-1/top-2 gap below delta in
    every row (use `shrink_top_gaps` first); the result differs from the
    input by at most delta in any entry yet disagrees in argmax on all rows.
    """
    l = np.asarray(logits, dtype=np.float64)
    if l.ndim != 2 or l.shape[1] < 2:
        raise ValueError("need a 2-D matrix with at least two columns")
    out = l.copy()
    for i in range(l.shape[0]):
        row = l[i]
        if np.unique(row).size != row.size:
            raise ValueError(f"row {i} has re-occurring values")
        order = np.argsort(row)
        a1, a2 = order[-1], order[-2]
        gap = row[a1] - row[a2]
        if gap >= delta:
            raise ValueError(
                f"row {i} top-1/top-2 gap {gap} >= delta {delta}; shrink gaps first"
            )
        out[i, a2] += delta
    return out


# ---------------------------------------------------------------------------
# model-pair probing


@dataclass(frozen=True)
class ProbeResult:
    probe_id: int
    fdt: int
    sdt: int
    dppl: float
    ppl: float


def evaluate_on_completion(compressed: ToyModel, completion, spec: ProbeSpec) -> dict:
    """Score one precomputed reference completion with a single forward pass."""
    logits = forward(compressed, completion)
    n = spec.prefix_len
    return {
        "fdt": fdt(completion, logits, n),
        "sdt": sdt(completion, logits, n),
        "dppl": ppl(completion, logits, n),
        "ppl": ppl(completion, logits, 1),
    }


def probe_pair(base: ToyModel, compressed: ToyModel, prefix, spec: ProbeSpec) -> ProbeResult:
    """One probe: decode the base once, forward the compressed model once."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.shape[0] != spec.prefix_len:
        raise ValueError(
            f"prefix length {prefix.shape[0]} != spec.prefix_len {spec.prefix_len}"
        )
    z = greedy_decode(base, prefix, spec.total_len)
    vals = evaluate_on_completion(compressed, z, spec)
    return ProbeResult(probe_id=0, **vals)


@dataclass
class DivergenceReport:
    probe_spec: ProbeSpec
    records: list = field(default_factory=list)

    @property
    def fdts(self) -> np.ndarray:
        return np.array([r.fdt for r in self.records], dtype=np.float64)

    def aggregates(self) -> dict:
        if not self.records:
            raise ValueError("empty report")
        cols = {
            name: np.array([getattr(r, name) for r in self.records], dtype=np.float64)
            for name in ("fdt", "sdt", "dppl", "ppl")
        }
        agg = {"count": len(self.records)}
        for name, v in cols.items():
            agg[f"mean_{name}"] = float(np.mean(v))
            agg[f"median_{name}"] = quantile(v, 0.5)
        agg["fdt_75"] = quantile(cols["fdt"], 0.75)
        return agg

    @property
    def fdt_75(self) -> float:
        return quantile(self.fdts, 0.75)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": "divergence_report",
            "probe_spec": {
                "prefix_len": self.probe_spec.prefix_len,
                "total_len": self.probe_spec.total_len,
            },
            "conventions": dict(CONVENTIONS),
            "records": [
                {"probe_id": r.probe_id, "fdt": r.fdt, "sdt": r.sdt,
                 "dppl": r.dppl, "ppl": r.ppl}
                for r in self.records
            ],
            "aggregates": self.aggregates(),
        }

    @staticmethod
    def from_dict(d: dict) -> "DivergenceReport":
        validate_report_dict(d)
        spec = ProbeSpec(**d["probe_spec"])
        records = [
            ProbeResult(probe_id=int(r["probe_id"]), fdt=int(r["fdt"]),
                        sdt=int(r["sdt"]), dppl=float(r["dppl"]), ppl=float(r["ppl"]))
            for r in d["records"]
        ]
        return DivergenceReport(probe_spec=spec, records=records)

    def write_json(self, path) -> None:
        d = self.to_dict()
        validate_report_dict(d)
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_CSV_HEADER)
            for r in self.records:
                writer.writerow([r.probe_id, r.fdt, r.sdt, repr(r.dppl), repr(r.ppl)])

    @staticmethod
    def read_json(path) -> "DivergenceReport":
        with open(path) as fh:
            return DivergenceReport.from_dict(json.load(fh))


def validate_report_dict(d: dict) -> None:
    """Schema check run on every report emission and ingestion."""
    if d.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema: {d.get('schema_version')}")
    if d.get("kind") != "divergence_report":
        raise ValueError("not a divergence report")
    spec = d["probe_spec"]
    n, N = spec["prefix_len"], spec["total_len"]
    if not 0 < n < N:
        raise ValueError("invalid probe_spec in report")
    for r in d["records"]:
        for key in REPORT_CSV_HEADER:
            if key not in r:
                raise ValueError(f"record missing field {key}")
        if not 0 <= r["fdt"] <= N - n or not 0 <= r["sdt"] <= N - n:
            raise ValueError("fdt/sdt out of range in record")
        if r["dppl"] < 1.0 - 1e-9 or r["ppl"] < 1.0 - 1e-9:
            raise ValueError("perplexity below 1 in record")


_POOL_MODEL: ToyModel | None = None
_POOL_JOBS: list | None = None
_POOL_LIMITS = None


def _pool_init(model, jobs):
    global _POOL_MODEL, _POOL_JOBS
    _POOL_MODEL = model
    _POOL_JOBS = jobs


def _pool_init_worker(model, jobs):
    _pool_init(model, jobs)
    global _POOL_LIMITS
    try:
        # One BLAS thread per worker: probe matrices are small enough that
        # BLAS threading only oversubscribes the cores the pool already uses.
        import threadpoolctl

        _POOL_LIMITS = threadpoolctl.threadpool_limits(1, user_api="blas")
    except ImportError:
        pass


def _pool_decode(idx: int):
    prefix, total_len = _POOL_JOBS[idx]
    return greedy_decode(_POOL_MODEL, prefix, total_len)


def _pool_score(idx: int):
    completion, spec = _POOL_JOBS[idx]
    return evaluate_on_completion(_POOL_MODEL, completion, spec)


def _indexed_map(worker_fn, model, jobs, workers: int) -> list:
    """Run worker_fn(idx) over all jobs, results in index order.

    With workers > 1 the jobs fan out over processes (the per-probe loops are
    too fine-grained for threads to help); each worker holds one read-only
    copy of the model, and index keying keeps results order-independent.
    """
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(
            max_workers=workers, initializer=_pool_init_worker, initargs=(model, jobs)
        ) as pool:
            return list(pool.map(worker_fn, range(len(jobs)), chunksize=8))
    _pool_init(model, jobs)
    return [worker_fn(i) for i in range(len(jobs))]


def decode_completions(base: ToyModel, prefixes, spec: ProbeSpec,
                       workers: int = 1) -> list:
    """Greedy base completions for a list of prefixes.

    Decoding is one sequence at a time (no batched inference, no KV cache);
    `workers` fans independent probes out against the read-only model.
    """
    prefixes = list(prefixes)
    frozen = freeze_effective(base)
    jobs = [(p, spec.total_len) for p in prefixes]
    return _indexed_map(_pool_decode, frozen, jobs, workers)


def aggregate(
    base: ToyModel,
    compressed: ToyModel,
    prefixes,
    spec: ProbeSpec,
    workers: int = 1,
    completions=None,
) -> DivergenceReport:
    """Probe every prefix and aggregate; deterministic in dataset order.

    `completions` may carry precomputed base decodes for these prefixes (the
    planner and search reuse them across many compressed variants). Records
    are keyed by probe index, so worker fan-out cannot reorder results.
    """
    prefixes = list(prefixes)
    if not prefixes:
        raise ValueError("empty probe dataset")
    if completions is None:
        completions = decode_completions(base, prefixes, spec, workers=workers)
    if len(completions) != len(prefixes):
        raise ValueError("completions do not match prefixes")
    frozen = freeze_effective(compressed)
    jobs = [(completions[i], spec) for i in range(len(prefixes))]
    values = _indexed_map(_pool_score, frozen, jobs, workers)
    records = [ProbeResult(probe_id=i, **vals) for i, vals in enumerate(values)]
    return DivergenceReport(probe_spec=spec, records=records)
