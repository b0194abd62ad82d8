"""Balanced per-component sparsity allocation driven by FDT probing.

One planning round: probe every component with two extra pruning levels
(step/2 and step + step/2 on top of its current mask), build a four-anchor
piecewise-linear map from added sparsity to FDT75, then lower a common FDT
floor f from its maximum until the parameter-weighted mean of the per-
component maximal sparsities reaches the round's target. The integer descent
of f mirrors the reference procedure; a final bisection between the last two
integer floors pins the allocation to the max-min optimum, so the emitted
plan never overshoots the budget by more than the interpolation's resolution.

Added sparsity is measured in percentage points of a component's entries,
relative to its current mask; absolute targets are current + added, capped at
100%.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .compress import CompressionPlan, magnitude_mask
from .metrics import DivergenceReport, ProbeSpec, aggregate, decode_completions
from .model import ToyModel, ALL_KINDS
from .numerics import quantile


@dataclass
class FdtSparseMap:
    """Per-component anchors [(added_pct, fdt75)], exactly four each."""

    anchors: dict  # key -> list[(float, float)]
    fdt_max: float

    def __post_init__(self):
        for key, pts in self.anchors.items():
            if len(pts) != 4:
                raise ValueError(f"{key}: expected 4 anchors, got {len(pts)}")
            xs = [p[0] for p in pts]
            if any(x1 <= x0 for x0, x1 in zip(xs, xs[1:])):
                raise ValueError(f"{key}: anchor sparsities must strictly increase")
            if any(not 0 <= p[1] <= self.fdt_max for p in pts):
                raise ValueError(f"{key}: fdt values must lie in [0, {self.fdt_max}]")


def probe_components(
    base: ToyModel,
    step: float,
    prefixes,
    spec: ProbeSpec,
    workers: int = 1,
    completions=None,
) -> FdtSparseMap:
    """Measure FDT75 per component at added sparsities step/2 and 1.5 * step.

    Each variant prunes only one component beyond its current mask; the base
    model's completions are decoded once and shared across all variants.
    Constant anchors at 0% (maximal FDT) and 100% (zero FDT) complete the map.
    """
    if not 0 < step < 100:
        raise ValueError(f"step must be in (0, 100), got {step}")
    prefixes = list(prefixes)
    if not prefixes:
        raise ValueError("need probe prefixes")
    if completions is None:
        completions = decode_completions(base, prefixes, spec)
    fdt_max = float(spec.completion_len)
    xs = (step / 2.0, step * 1.5)
    anchors: dict[str, list] = {}
    for cid in base.component_ids():
        key = cid.key
        current = base.component_sparsity(cid)
        measured = []
        for x in xs:
            target = min(current + x / 100.0, 1.0)
            variant = ToyModel(
                config=base.config,
                params=base.params,
                masks={**base.masks,
                       key: magnitude_mask(base.params[key], base.masks[key], target)},
            )
            rep = aggregate(base, variant, prefixes, spec,
                            workers=workers, completions=completions)
            measured.append(min(max(rep.fdt_75, 0.0), fdt_max))
        anchors[key] = [(0.0, fdt_max), (xs[0], measured[0]),
                        (xs[1], measured[1]), (100.0, 0.0)]
    return FdtSparseMap(anchors=anchors, fdt_max=fdt_max)


def interpolate_max_sparsity(anchors, f: float) -> float:
    """Largest added sparsity whose piecewise-linear FDT value is still >= f.

    Clamps f into [0, max anchor value]; scanning segments right to left finds
    the rightmost admissible point even for non-monotone measured anchors.
    """
    ys = [y for _, y in anchors]
    f = min(max(f, 0.0), max(ys))
    for (x0, y0), (x1, y1) in zip(reversed(anchors[:-1]), reversed(anchors[1:])):
        if y1 >= f:
            return x1
        if y0 >= f:
            if y0 == y1:
                return x1
            return x0 + (x1 - x0) * (y0 - f) / (y0 - y1)
    return anchors[0][0]


def curve_value(anchors, s: float) -> float:
    """Piecewise-linear FDT value of the anchor curve at added sparsity s."""
    s = min(max(s, anchors[0][0]), anchors[-1][0])
    for (x0, y0), (x1, y1) in zip(anchors[:-1], anchors[1:]):
        if s <= x1:
            if x1 == x0:
                return y1
            t = (s - x0) / (x1 - x0)
            return y0 + t * (y1 - y0)
    return anchors[-1][1]


@dataclass
class SparsityPlan:
    added: dict  # key -> added percentage points (nominal, from the curve)
    targets: dict  # key -> absolute sparsity fraction in [0, 1]
    f_star: float  # integer floor where the descent stopped
    f_refined: float  # bisected floor actually used for the allocation
    achieved_mean_added: float  # parameter-weighted, percentage points
    target_step: float
    min_interpolated_fdt: float

    def to_compression_plan(self) -> CompressionPlan:
        return CompressionPlan.from_sparsities(self.targets)


def allocate(
    fdt_map: FdtSparseMap,
    target_step: float,
    weights: dict,
    current_sparsity: dict | None = None,
) -> SparsityPlan:
    """Descend the FDT floor until the weighted mean added sparsity meets the
    target, then bisect between the last two integer floors.

    `weights` are component parameter counts; `current_sparsity` (fractions)
    caps each component's effective added sparsity at 100% absolute.
    """
    if not 0 < target_step < 100:
        raise ValueError(f"target_step must be in (0, 100), got {target_step}")
    keys = sorted(fdt_map.anchors)
    if set(weights) < set(keys):
        raise ValueError("missing parameter counts for some components")
    current = {k: (current_sparsity or {}).get(k, 0.0) for k in keys}
    total_w = float(sum(weights[k] for k in keys))

    def added_at(f: float) -> dict:
        return {k: interpolate_max_sparsity(fdt_map.anchors[k], f) for k in keys}

    def effective_mean(added: dict) -> float:
        cap = {k: 100.0 * (1.0 - current[k]) for k in keys}
        return sum(weights[k] * min(added[k], cap[k]) for k in keys) / total_w

    f_star = None
    f = float(int(np.ceil(fdt_map.fdt_max)))
    while f >= 0.0:
        if effective_mean(added_at(f)) >= target_step:
            f_star = f
            break
        f -= 1.0
    if f_star is None:
        raise RuntimeError(
            "no FDT floor meets the sparsity target; the model cannot absorb "
            f"{target_step} more percentage points"
        )

    # Bisect toward the supremum feasible floor: tightest max-min allocation
    # that still meets the budget.
    lo, hi = f_star, min(f_star + 1.0, fdt_map.fdt_max)
    if hi > lo:
        if effective_mean(added_at(hi)) >= target_step:
            lo = hi
        else:
            for _ in range(60):
                mid = (lo + hi) / 2.0
                if effective_mean(added_at(mid)) >= target_step:
                    lo = mid
                else:
                    hi = mid
    added = added_at(lo)
    targets = {k: min(current[k] + added[k] / 100.0, 1.0) for k in keys}
    return SparsityPlan(
        added=added,
        targets=targets,
        f_star=f_star,
        f_refined=lo,
        achieved_mean_added=effective_mean(added),
        target_step=target_step,
        min_interpolated_fdt=min(curve_value(fdt_map.anchors[k], added[k]) for k in keys),
    )


def uniform_plan(base: ToyModel, step: float) -> SparsityPlan:
    """Baseline arm: every component gets the same added sparsity."""
    keys = [cid.key for cid in base.component_ids()]
    current = {cid.key: base.component_sparsity(cid) for cid in base.component_ids()}
    added = {k: step for k in keys}
    targets = {k: min(current[k] + step / 100.0, 1.0) for k in keys}
    weights = {k: base.params[k].size for k in keys}
    total_w = float(sum(weights.values()))
    eff = sum(
        weights[k] * min(step, 100.0 * (1.0 - current[k])) for k in keys
    ) / total_w
    return SparsityPlan(
        added=added, targets=targets, f_star=float("nan"), f_refined=float("nan"),
        achieved_mean_added=eff, target_step=step, min_interpolated_fdt=float("nan"),
    )


# ---------------------------------------------------------------------------
# multi-round schedule driver


@dataclass(frozen=True)
class Schedule:
    steps: tuple = (20.0, 15.0, 10.0, 10.0, 5.0, 5.0, 5.0, 5.0)
    masked_steps: int = 450
    dense_steps: int = 50

    def __post_init__(self):
        if any(s <= 0 for s in self.steps):
            raise ValueError("schedule increments must be positive")
        if sum(self.steps) > 100.0 + 1e-9:
            raise ValueError("schedule increments must sum to at most 100")


@dataclass
class RoundArtifact:
    round_index: int
    step: float
    mode: str
    plan: SparsityPlan
    report: DivergenceReport
    loss_trace: object  # LossTrace or None for a no-op trainer
    component_sparsity: dict  # key -> achieved fraction after masking
    model_sparsity: float  # overall fraction of zeros across components


def no_op_trainer(model: ToyModel, round_index: int):
    return None


def model_component_sparsity(model: ToyModel) -> dict:
    return {cid.key: model.component_sparsity(cid) for cid in model.component_ids()}


def overall_sparsity(model: ToyModel) -> float:
    zeros = sum(
        m.size - int(np.count_nonzero(m)) for m in model.masks.values()
    )
    return zeros / float(model.total_component_params())


def write_sparsity_map_csv(path, config, component_sparsity: dict) -> None:
    """Layer x kind grid of sparsity fractions for external plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer"] + [k.value for k in ALL_KINDS])
        for l in range(config.n_layers):
            writer.writerow(
                [l] + [repr(component_sparsity[f"{l}.{k.value}"]) for k in ALL_KINDS]
            )


def run_schedule(
    base: ToyModel,
    schedule: Schedule,
    prefixes,
    spec: ProbeSpec,
    trainer=no_op_trainer,
    mode: str = "balanced",
    workers: int = 1,
) -> tuple[ToyModel, list]:
    """Iterate probe -> allocate -> mask -> train over the schedule.

    Per-round divergence is always measured against the original `base`
    model; the working model is mutated in place by the injected trainer and
    returned alongside the per-round artifacts.
    """
    if mode not in ("balanced", "uniform"):
        raise ValueError(f"mode must be balanced or uniform, got {mode}")
    prefixes = list(prefixes)
    reference = base.copy()
    # The reference never changes, so its completions are decoded once and
    # shared by every round's report.
    reference_completions = decode_completions(reference, prefixes, spec, workers=workers)
    model = base.copy()
    weights = {cid.key: model.params[cid.key].size for cid in model.component_ids()}
    artifacts = []
    for round_index, step in enumerate(schedule.steps):
        if mode == "balanced":
            fdt_map = probe_components(model, step, prefixes, spec, workers=workers)
            plan = allocate(
                fdt_map, step, weights,
                current_sparsity=model_component_sparsity(model),
            )
        else:
            plan = uniform_plan(model, step)
        for key in sorted(plan.targets):
            model.masks[key] = magnitude_mask(
                model.params[key], model.masks[key], plan.targets[key]
            )
        trace = trainer(model, round_index)
        for key, mask in model.masks.items():
            model.params[key] *= mask
        report = aggregate(reference, model, prefixes, spec, workers=workers,
                           completions=reference_completions)
        artifacts.append(
            RoundArtifact(
                round_index=round_index,
                step=step,
                mode=mode,
                plan=plan,
                report=report,
                loss_trace=trace,
                component_sparsity=model_component_sparsity(model),
                model_sparsity=overall_sparsity(model),
            )
        )
    return model, artifacts
