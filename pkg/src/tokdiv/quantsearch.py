"""Beam tree search ordering components for naive AbsMax quantization.

Depth-synchronized search: every node at depth d is a set of d quantized
components; each level extends the current top-width nodes by one more
component, deduplicates by component set, scores every child against the
unquantized base on a probe set fixed once per run, and keeps the best width
nodes. FDT ranks descending (higher is better, mean over probes by default
with the 75% quantile logged alongside), DPPL/PPL ascending; ties break on
the lexicographic component tuple so runs are fully deterministic.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .compress import QuantSpec, absmax_quantize_dequantize
from .metrics import ProbeSpec, decode_completions, fdt, sdt, ppl
from .model import ToyModel, forward_with_census
from .numerics import quantile

SEARCH_LOG_SCHEMA_VERSION = 1
CRITERIA = ("fdt", "dppl", "ppl")


@dataclass(frozen=True)
class SearchConfig:
    beam_width: int = 10
    criterion: str = "fdt"
    quant: QuantSpec = QuantSpec(bits=8)
    max_depth: int | None = None  # defaults to the full component count
    fdt_statistic: str = "mean"  # ranking statistic for the fdt criterion
    outlier_threshold: float = 6.0

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")
        if self.fdt_statistic not in ("mean", "q75"):
            raise ValueError("fdt_statistic must be mean or q75")


@dataclass(frozen=True)
class SearchNode:
    components: tuple  # sorted component keys; len(components) == depth
    score: float
    metrics: dict
    outliers: int

    @property
    def depth(self) -> int:
        return len(self.components)


class _Evaluator:
    """Scores component sets against a fixed base model and probe set."""

    def __init__(self, base: ToyModel, config: SearchConfig, prefixes, spec: ProbeSpec):
        self.base = base
        self.config = config
        self.spec = spec
        self.completions = decode_completions(base, list(prefixes), spec)
        if not self.completions:
            raise ValueError("need probe prefixes")
        self.evaluations = 0
        self._seen: set = set()

    def quantized_model(self, components) -> ToyModel:
        out = ToyModel(config=self.base.config, params=dict(self.base.params),
                       masks=self.base.masks)
        for key in components:
            out.params[key] = absmax_quantize_dequantize(
                self.base.params[key], self.config.quant
            )
        return out

    def evaluate(self, components: tuple) -> SearchNode:
        key = frozenset(components)
        if key in self._seen:
            raise RuntimeError(f"component set evaluated twice: {sorted(components)}")
        self._seen.add(key)
        self.evaluations += 1
        model = self.quantized_model(components)
        n = self.spec.prefix_len
        fdts, sdts, dppls, ppls, outliers = [], [], [], [], 0
        for z in self.completions:
            logits, census = forward_with_census(
                model, z, self.config.outlier_threshold
            )
            fdts.append(fdt(z, logits, n))
            sdts.append(sdt(z, logits, n))
            dppls.append(ppl(z, logits, n))
            ppls.append(ppl(z, logits, 1))
            outliers += sum(census.values())
        metrics = {
            "mean_fdt": float(np.mean(fdts)),
            "fdt75": quantile(fdts, 0.75),
            "mean_sdt": float(np.mean(sdts)),
            "dppl": float(np.mean(dppls)),
            "ppl": float(np.mean(ppls)),
        }
        if self.config.criterion == "fdt":
            score = metrics["mean_fdt"] if self.config.fdt_statistic == "mean" else metrics["fdt75"]
        else:
            score = metrics[self.config.criterion]
        return SearchNode(components=tuple(sorted(components)), score=score,
                          metrics=metrics, outliers=outliers)


def select(children, config: SearchConfig):
    """Keep the best `beam_width` nodes; deterministic under score ties."""
    children = list(children)
    if not children:
        raise ValueError("nothing to select from")
    reverse = config.criterion == "fdt"
    keyed = sorted(
        children,
        key=lambda node: ((-node.score if reverse else node.score), node.components),
    )
    return keyed[: config.beam_width]


def expand(frontier, evaluator: _Evaluator, all_keys):
    """All one-component extensions of the frontier, deduplicated by set."""
    if not frontier:
        raise ValueError("empty frontier")
    depths = {node.depth for node in frontier}
    if len(depths) != 1:
        raise ValueError("frontier nodes must share one depth")
    child_sets = sorted(
        {
            tuple(sorted(set(node.components) | {key}))
            for node in frontier
            for key in all_keys
            if key not in node.components
        }
    )
    return [evaluator.evaluate(s) for s in child_sets]


@dataclass
class SearchLog:
    config: SearchConfig
    probe_spec: ProbeSpec
    nodes: list = field(default_factory=list)  # every evaluated node, in order
    frontiers: list = field(default_factory=list)  # per depth, selected nodes
    evaluations: int = 0
    mode: str = "beam"

    def best_at_depth(self, depth: int) -> SearchNode:
        return self.frontiers[depth - 1][0]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            header = {
                "schema_version": SEARCH_LOG_SCHEMA_VERSION,
                "kind": "search_log",
                "mode": self.mode,
                "criterion": self.config.criterion,
                "beam_width": self.config.beam_width,
                "bits": self.config.quant.bits,
                "evaluations": self.evaluations,
            }
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for node in self.nodes:
                fh.write(json.dumps({
                    "depth": node.depth,
                    "components": list(node.components),
                    "score": node.score,
                    "fdt75": node.metrics["fdt75"],
                    "mean_fdt": node.metrics["mean_fdt"],
                    "mean_sdt": node.metrics["mean_sdt"],
                    "dppl": node.metrics["dppl"],
                    "ppl": node.metrics["ppl"],
                    "outliers": node.outliers,
                }, sort_keys=True) + "\n")

    def write_frontier_csv(self, path) -> None:
        """Per-depth frontier averages plus the kind histogram of best nodes."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "depth", "frontier_size", "mean_score", "mean_fdt", "mean_sdt",
                "mean_dppl", "mean_ppl", "mean_outliers", "best_components",
            ])
            for depth, frontier in enumerate(self.frontiers, start=1):
                writer.writerow([
                    depth,
                    len(frontier),
                    repr(float(np.mean([n.score for n in frontier]))),
                    repr(float(np.mean([n.metrics["mean_fdt"] for n in frontier]))),
                    repr(float(np.mean([n.metrics["mean_sdt"] for n in frontier]))),
                    repr(float(np.mean([n.metrics["dppl"] for n in frontier]))),
                    repr(float(np.mean([n.metrics["ppl"] for n in frontier]))),
                    repr(float(np.mean([n.outliers for n in frontier]))),
                    " ".join(frontier[0].components),
                ])

    def kind_histogram(self, depth: int) -> dict:
        """How many components of each kind the best depth-d node quantizes."""
        hist: dict[str, int] = {}
        for key in self.best_at_depth(depth).components:
            kind = key.split(".", 1)[1]
            hist[kind] = hist.get(kind, 0) + 1
        return hist


def run_search(base: ToyModel, config: SearchConfig, prefixes, spec: ProbeSpec) -> SearchLog:
    """Beam search to max_depth; deterministic given model, probes, config."""
    evaluator = _Evaluator(base, config, prefixes, spec)
    all_keys = [cid.key for cid in base.component_ids()]
    max_depth = config.max_depth or len(all_keys)
    if not 1 <= max_depth <= len(all_keys):
        raise ValueError(f"max_depth must be in [1, {len(all_keys)}]")
    log = SearchLog(config=config, probe_spec=spec, mode="beam")
    frontier = [SearchNode(components=(), score=float("nan"), metrics={}, outliers=0)]
    for _ in range(max_depth):
        children = expand(frontier, evaluator, all_keys)
        log.nodes.extend(children)
        frontier = select(children, config)
        log.frontiers.append(frontier)
    log.evaluations = evaluator.evaluations
    return log


def run_greedy(base: ToyModel, config: SearchConfig, prefixes, spec: ProbeSpec) -> SearchLog:
    """Greedy variant: rank singletons once, then follow that fixed order."""
    evaluator = _Evaluator(base, config, prefixes, spec)
    all_keys = [cid.key for cid in base.component_ids()]
    singles = [evaluator.evaluate((key,)) for key in sorted(all_keys)]
    ranked = select(singles, SearchConfig(
        beam_width=len(singles), criterion=config.criterion,
        quant=config.quant, fdt_statistic=config.fdt_statistic,
        outlier_threshold=config.outlier_threshold,
    ))
    order = [node.components[0] for node in ranked]
    max_depth = config.max_depth or len(all_keys)
    log = SearchLog(config=config, probe_spec=spec, mode="greedy")
    log.nodes.extend(singles)
    log.frontiers.append([ranked[0]])
    for depth in range(2, max_depth + 1):
        node = evaluator.evaluate(tuple(sorted(order[:depth])))
        log.nodes.append(node)
        log.frontiers.append([node])
    log.evaluations = evaluator.evaluations
    return log


def top_k_plan(log: SearchLog, k: int):
    """Plan quantizing the k components of the best depth-k node."""
    from .compress import CompressionPlan

    if k == 0:
        return CompressionPlan()
    if k > len(log.frontiers):
        raise ValueError(f"search only reached depth {len(log.frontiers)}")
    best = log.best_at_depth(k)
    return CompressionPlan.from_quantized(best.components, bits=log.config.quant.bits)
