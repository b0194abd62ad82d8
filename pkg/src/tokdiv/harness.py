"""Experiment harness: corpus ingestion, run configs, commands, manifests.

Text is tokenized byte-level (identity map into vocab 256), so prefixes and
completions round-trip losslessly and no tokenizer assets are needed. Every
command is batch-style: it reads a config, runs, and writes its artifacts plus
a manifest (config echo, seeds, package and numpy versions, wall time) into
the output directory. Reports never embed timestamps, so re-running a config
reproduces them exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from .compress import CompressionPlan, apply_plan, magnitude_mask, random_mask
from .metrics import (
    DivergenceReport,
    ProbeSpec,
    aggregate,
    check_dppl_bound,
    construct_ppl_adversary,
    decode_completions,
    ppl,
    sdt_rows,
    shrink_top_gaps,
)
from .model import ModelConfig, ToyModel, load_model, random_init, save_model
from .planner import Schedule, no_op_trainer, run_schedule, write_sparsity_map_csv
from .quantsearch import SearchConfig, run_greedy, run_search, top_k_plan
from .compress import QuantSpec
from .train import LossTrace, TrainConfig, loss_and_grads, sgd_step, train_masked

MANIFEST_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Corpus:
    tokens: np.ndarray
    source: str
    tokenizer: str = "byte"

    def __len__(self) -> int:
        return int(self.tokens.size)


def tokenize(data: bytes) -> np.ndarray:
    """Identity byte mapping into vocab 256."""
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> bytes:
    return np.asarray(tokens, dtype=np.int64).astype(np.uint8).tobytes()


def load_corpus(path) -> Corpus:
    data = Path(path).read_bytes()
    return Corpus(tokens=tokenize(data), source=str(path))


_WORDS = (
    "the of and to a in is that it was for on are with as his they at be this "
    "have from or one had by word but not what all were we when your can said "
    "there use an each which she do how their if will up other about out many "
    "then them these so some her would make like him into time has look two "
    "more write go see number no way could people my than first water been "
    "call who oil its now find long down day did get come made may part over "
    "new sound take only little work know place year live me back give most "
    "very after thing our just name good sentence man think say great where "
    "help through much before line right too mean old any same tell boy "
    "follow came want show also around form three small set put end does "
    "another well large must big even such because turn here why ask went "
    "men read need land different home us move try kind hand picture again "
    "change off play spell air away animal house point page letter mother "
    "answer found study still learn should america world"
).split()


def synthetic_corpus(seed: int = 0, size: int = 200_000) -> Corpus:
    """Deterministic English-like filler text for self-contained runs."""
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, len(_WORDS) + 1)
    weights /= weights.sum()
    pieces = []
    total = 0
    while total < size:
        n_words = int(rng.integers(4, 13))
        words = [_WORDS[i] for i in rng.choice(len(_WORDS), size=n_words, p=weights)]
        if rng.random() < 0.12:
            words.insert(int(rng.integers(0, len(words))), str(rng.integers(0, 1000)))
        sentence = " ".join(words).capitalize() + ". "
        if rng.random() < 0.08:
            sentence += "\n"
        pieces.append(sentence)
        total += len(sentence)
    text = "".join(pieces)[:size]
    return Corpus(tokens=tokenize(text.encode("ascii")), source=f"synthetic(seed={seed})")


def sample_prefixes(corpus: Corpus, count: int, n: int, seed: int):
    """`count` prefixes of length n at uniform offsets; returns (prefixes, offsets)."""
    if len(corpus) < n:
        raise ValueError(f"corpus has {len(corpus)} tokens, need at least {n}")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, len(corpus) - n + 1, size=count)
    prefixes = [corpus.tokens[o : o + n] for o in offsets]
    return prefixes, offsets


def batch_stream(corpus: Corpus, batch_size: int, seq_len: int, seed: int):
    """Infinite generator of (batch_size, seq_len) token batches."""
    if len(corpus) < seq_len:
        raise ValueError("corpus shorter than seq_len")
    rng = np.random.default_rng(seed)
    while True:
        offsets = rng.integers(0, len(corpus) - seq_len + 1, size=batch_size)
        yield np.stack([corpus.tokens[o : o + seq_len] for o in offsets])


# ---------------------------------------------------------------------------
# run configuration


RUN_KINDS = ("metrics", "discriminate", "sparsify", "quantsearch", "train", "props")


@dataclass
class RunConfig:
    kind: str
    out_dir: str = "runs/out"
    seed: int = 0
    workers: int = 1
    corpus_path: str | None = None
    corpus_seed: int = 0
    corpus_size: int = 200_000
    checkpoint: str | None = None
    model: dict = field(default_factory=dict)
    prefix_len: int = 100
    total_len: int = 200
    probes: int = 100
    plan_path: str | None = None
    train: dict = field(default_factory=dict)
    sparsify: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    discriminate: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in RUN_KINDS:
            raise ValueError(f"unknown run kind {self.kind}; expected one of {RUN_KINDS}")

    @staticmethod
    def from_file(path, **overrides) -> "RunConfig":
        with open(path) as fh:
            raw = json.load(fh)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        known = set(RunConfig.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**raw)

    def probe_spec(self) -> ProbeSpec:
        return ProbeSpec(prefix_len=self.prefix_len, total_len=self.total_len)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def load_base_model(self) -> ToyModel:
        if self.checkpoint:
            return load_model(self.checkpoint)
        return random_init(self.model_config(), seed=self.seed)

    def load_corpus(self) -> Corpus:
        if self.corpus_path:
            return load_corpus(self.corpus_path)
        return synthetic_corpus(seed=self.corpus_seed, size=self.corpus_size)


def write_manifest(out_dir: Path, cfg: RunConfig, wall_time_s: float, outputs: list) -> None:
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "kind": "run_manifest",
        "command": cfg.kind,
        "config": asdict(cfg),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "wall_time_s": wall_time_s,
        "outputs": sorted(outputs),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> dict:
    """Pretrain (or continue training) a model on the corpus; save checkpoint."""
    t0 = time.perf_counter()
    out = _prepare_out(cfg)
    model = cfg.load_base_model()
    corpus = cfg.load_corpus()
    tconf = TrainConfig(**{k: v for k, v in cfg.train.items() if k != "steps"},
                        steps=int(cfg.train.get("steps", 500)))
    batches = batch_stream(corpus, tconf.batch_size, tconf.seq_len, seed=tconf.seed)
    trace = LossTrace()
    for step in range(tconf.steps):
        loss, grads = loss_and_grads(model, next(batches), use_masks=True)
        sgd_step(model, grads, tconf)
        trace.append(step, "dense", loss)
    save_model(model, out / "model.bin")
    trace.write_csv(out / "loss_trace.csv")
    summary = {
        "steps": tconf.steps,
        "first_loss": trace.records[0][2] if trace.records else None,
        "final_loss": trace.records[-1][2] if trace.records else None,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, cfg, time.perf_counter() - t0,
                   ["model.bin", "loss_trace.csv", "summary.json"])
    return summary


def cmd_metrics(cfg: RunConfig) -> dict:
    """Divergence report between a base model and a plan-compressed variant."""
    t0 = time.perf_counter()
    out = _prepare_out(cfg)
    base = cfg.load_base_model()
    if cfg.plan_path:
        plan = CompressionPlan.read_json(cfg.plan_path)
        compressed = apply_plan(base, plan)
    else:
        compressed = base.copy()
    corpus = cfg.load_corpus()
    spec = cfg.probe_spec()
    prefixes, offsets = sample_prefixes(corpus, cfg.probes, spec.prefix_len, cfg.seed)
    report = aggregate(base, compressed, prefixes, spec, workers=cfg.workers)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    np.savetxt(out / "probe_offsets.csv", offsets, fmt="%d", header="offset", comments="")
    write_manifest(out, cfg, time.perf_counter() - t0,
                   ["report.json", "report.csv", "probe_offsets.csv"])
    return report.aggregates()


def _bootstrap_se(values: np.ndarray, rng: np.random.Generator, resamples: int) -> float:
    n = values.size
    means = np.array([
        float(np.mean(values[rng.integers(0, n, size=n)])) for _ in range(resamples)
    ])
    return float(np.std(means, ddof=1))


def separation_stats(report_a: DivergenceReport, report_b: DivergenceReport,
                     seed: int, resamples: int = 1000) -> dict:
    """Unpaired mean separation per metric, in bootstrap standard errors."""
    rng = np.random.default_rng(seed)
    stats = {}
    for name in ("fdt", "sdt", "dppl", "ppl"):
        a = np.array([getattr(r, name) for r in report_a.records], dtype=np.float64)
        b = np.array([getattr(r, name) for r in report_b.records], dtype=np.float64)
        se = math.sqrt(
            _bootstrap_se(a, rng, resamples) ** 2 + _bootstrap_se(b, rng, resamples) ** 2
        )
        diff = float(np.mean(b) - np.mean(a))
        stats[name] = {
            "mean_lowest": float(np.mean(a)),
            "mean_random": float(np.mean(b)),
            "diff": diff,
            "se": se,
            "ratio": abs(diff) / se if se > 0 else float("inf"),
            "separated": bool(abs(diff) > 2.0 * se),
        }
    return stats


def cmd_discriminate(cfg: RunConfig) -> dict:
    """Prune every component by a small fraction, lowest-|w| vs random, and
    test which metrics separate the two variants."""
    t0 = time.perf_counter()
    out = _prepare_out(cfg)
    base = cfg.load_base_model()
    fraction = float(cfg.discriminate.get("fraction", 0.001))
    resamples = int(cfg.discriminate.get("bootstrap", 1000))
    spec = cfg.probe_spec()
    corpus = cfg.load_corpus()
    prefixes, _ = sample_prefixes(corpus, cfg.probes, spec.prefix_len, cfg.seed)

    lowest = base.copy()
    random_variant = base.copy()
    for i, cid in enumerate(base.component_ids()):
        key = cid.key
        target = min(base.component_sparsity(cid) + fraction, 1.0)
        lowest.masks[key] = magnitude_mask(base.params[key], base.masks[key], target)
        random_variant.masks[key] = random_mask(
            base.params[key], base.masks[key], target, seed=cfg.seed * 100003 + i
        )

    completions = decode_completions(base, prefixes, spec)
    report_lowest = aggregate(base, lowest, prefixes, spec,
                              workers=cfg.workers, completions=completions)
    report_random = aggregate(base, random_variant, prefixes, spec,
                              workers=cfg.workers, completions=completions)
    stats = separation_stats(report_lowest, report_random, seed=cfg.seed + 1,
                             resamples=resamples)
    verdict = {
        "prune_fraction": fraction,
        "probes": cfg.probes,
        "metrics": stats,
        "fdt_separates": stats["fdt"]["separated"],
        "ppl_separates": stats["ppl"]["separated"],
    }
    report_lowest.write_json(out / "report_lowest.json")
    report_lowest.write_csv(out / "report_lowest.csv")
    report_random.write_json(out / "report_random.json")
    report_random.write_csv(out / "report_random.csv")
    with open(out / "separation.json", "w") as fh:
        json.dump(verdict, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, cfg, time.perf_counter() - t0,
                   ["report_lowest.json", "report_lowest.csv", "report_random.json",
                    "report_random.csv", "separation.json"])
    return verdict


def cmd_sparsify(cfg: RunConfig) -> dict:
    """Multi-round FDT-balanced (or uniform) sparsification with AC/DC training."""
    t0 = time.perf_counter()
    out = _prepare_out(cfg)
    base = cfg.load_base_model()
    corpus = cfg.load_corpus()
    spec = cfg.probe_spec()
    prefixes, _ = sample_prefixes(corpus, cfg.probes, spec.prefix_len, cfg.seed)

    schedule = Schedule(
        steps=tuple(cfg.sparsify.get("schedule", Schedule().steps)),
        masked_steps=int(cfg.sparsify.get("masked_steps", 450)),
        dense_steps=int(cfg.sparsify.get("dense_steps", 50)),
    )
    mode = cfg.sparsify.get("mode", "balanced")
    trainer_kind = cfg.sparsify.get("trainer", "acdc")
    if trainer_kind == "none":
        trainer = no_op_trainer
    elif trainer_kind == "acdc":
        tconf = TrainConfig(**cfg.train)
        batches = batch_stream(corpus, tconf.batch_size, tconf.seq_len, seed=tconf.seed)

        def trainer(model, round_index):
            return train_masked(model, tconf, batches,
                                schedule.masked_steps, schedule.dense_steps)
    else:
        raise ValueError(f"unknown trainer {trainer_kind}")

    final_model, rounds = run_schedule(
        base, schedule, prefixes, spec, trainer=trainer, mode=mode, workers=cfg.workers
    )
    outputs = []
    summary_rounds = []
    for art in rounds:
        rdir = out / f"round_{art.round_index:02d}"
        rdir.mkdir(exist_ok=True)
        art.plan.to_compression_plan().write_json(rdir / "plan.json")
        art.report.write_json(rdir / "report.json")
        art.report.write_csv(rdir / "report.csv")
        if art.loss_trace is not None:
            art.loss_trace.write_csv(rdir / "loss_trace.csv")
        write_sparsity_map_csv(rdir / "sparsity_map.csv", base.config,
                               art.component_sparsity)
        outputs.append(rdir.name)
        agg = art.report.aggregates()
        summary_rounds.append({
            "round": art.round_index,
            "step": art.step,
            "f_star": None if math.isnan(art.plan.f_star) else art.plan.f_star,
            "achieved_mean_added": art.plan.achieved_mean_added,
            "model_sparsity": art.model_sparsity,
            "fdt_75": agg["fdt_75"],
            "mean_fdt": agg["mean_fdt"],
            "mean_dppl": agg["mean_dppl"],
        })
    save_model(final_model, out / "final_model.bin")
    summary = {
        "mode": mode,
        "rounds": summary_rounds,
        "final_sparsity": rounds[-1].model_sparsity,
        "final_mean_dppl": summary_rounds[-1]["mean_dppl"],
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, cfg, time.perf_counter() - t0,
                   outputs + ["final_model.bin", "summary.json"])
    return summary


def cmd_quantsearch(cfg: RunConfig) -> dict:
    """Metric-ranked beam (or greedy) search over quantization orderings."""
    t0 = time.perf_counter()
    out = _prepare_out(cfg)
    base = cfg.load_base_model()
    corpus = cfg.load_corpus()
    spec = cfg.probe_spec()
    prefixes, _ = sample_prefixes(corpus, cfg.probes, spec.prefix_len, cfg.seed)
    sconf = SearchConfig(
        beam_width=int(cfg.search.get("beam_width", 10)),
        criterion=cfg.search.get("criterion", "fdt"),
        quant=QuantSpec(bits=int(cfg.search.get("bits", 8))),
        max_depth=cfg.search.get("max_depth"),
        fdt_statistic=cfg.search.get("fdt_statistic", "mean"),
        outlier_threshold=float(cfg.search.get("outlier_threshold", 6.0)),
    )
    mode = cfg.search.get("mode", "beam")
    runner = run_search if mode == "beam" else run_greedy
    log = runner(base, sconf, prefixes, spec)
    log.write_jsonl(out / "search_log.jsonl")
    log.write_frontier_csv(out / "frontier.csv")
    top_k = int(cfg.search.get("top_k", len(log.frontiers)))
    plan = top_k_plan(log, top_k)
    plan.write_json(out / "best_plan.json")
    best_by_depth = [
        {"depth": d + 1, "score": f[0].score,
         "components": list(f[0].components), "outliers": f[0].outliers}
        for d, f in enumerate(log.frontiers)
    ]
    summary = {
        "mode": mode,
        "criterion": sconf.criterion,
        "bits": sconf.quant.bits,
        "evaluations": log.evaluations,
        "depths": len(log.frontiers),
        "top_k": top_k,
        "best_by_depth": best_by_depth,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, cfg, time.perf_counter() - t0,
                   ["search_log.jsonl", "frontier.csv", "best_plan.json", "summary.json"])
    return summary


def run_prop1_check(seed: int = 0, rows: int = 64, vocab: int = 16,
                    delta: float = 1e-6, ppl_tol: float = 1e-3) -> dict:
    """Adversary construction: every argmax flips, perplexity barely moves."""
    rng = np.random.default_rng(seed)
    base_logits = shrink_top_gaps(rng.standard_normal((rows, vocab)), delta)
    adversary = construct_ppl_adversary(base_logits, delta)
    y = rng.integers(0, vocab, size=rows)
    flipped = sdt_rows(base_logits, adversary, skip=0)
    ppl_gap = abs(ppl(y, base_logits, 1) - ppl(y, adversary, 1))
    max_entry_gap = float(np.max(np.abs(base_logits - adversary)))
    return {
        "rows": rows,
        "flipped": flipped,
        "ppl_gap": ppl_gap,
        "max_entry_gap": max_entry_gap,
        "passed": bool(
            flipped == rows and ppl_gap < ppl_tol and max_entry_gap <= delta * (1 + 1e-9)
        ),
    }


def run_prop2_check(seed: int = 0, trials: int = 10_000, rows: int = 32,
                    vocab: int = 16, skip: int = 4) -> dict:
    """Divergence bound sdt <= R/log 2 * log dppl over random logit pairs."""
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(trials):
        scale = rng.uniform(0.1, 5.0)
        l = rng.standard_normal((rows, vocab)) * scale
        l2 = l + rng.standard_normal((rows, vocab)) * rng.uniform(0.01, 2.0)
        if not check_dppl_bound(l, l2, skip=skip).holds:
            violations += 1
    return {"trials": trials, "violations": violations, "passed": violations == 0}


def cmd_props(cfg: RunConfig) -> dict:
    """Run both proposition suites; success only if every check passes."""
    t0 = time.perf_counter()
    out = _prepare_out(cfg)
    p1 = run_prop1_check(seed=cfg.seed)
    p2 = run_prop2_check(seed=cfg.seed)
    results = {"prop1": p1, "prop2": p2, "passed": p1["passed"] and p2["passed"]}
    print(f"prop1 (ppl-blind argmax flips): {'PASS' if p1['passed'] else 'FAIL'} "
          f"(flipped {p1['flipped']}/{p1['rows']}, ppl gap {p1['ppl_gap']:.2e})")
    print(f"prop2 (sdt <= divergence bound): {'PASS' if p2['passed'] else 'FAIL'} "
          f"({p2['violations']} violations in {p2['trials']} trials)")
    with open(out / "props.json", "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, cfg, time.perf_counter() - t0, ["props.json"])
    return results


COMMANDS = {
    "train": cmd_train,
    "metrics": cmd_metrics,
    "discriminate": cmd_discriminate,
    "sparsify": cmd_sparsify,
    "quantsearch": cmd_quantsearch,
    "props": cmd_props,
}
