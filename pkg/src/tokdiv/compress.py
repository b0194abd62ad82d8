"""Pruning mask construction, simulated AbsMax quantization, outlier census.

Quantization is simulated: weights are rounded onto the uniform AbsMax grid
and dequantized back to float64, which reproduces the numerical error the
metrics care about without integer kernels. Rounding is half-away-from-zero.
Sparsity targets are absolute fractions of a component's entries; masks only
ever grow their zero set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import require_finite
from .model import ComponentId, ToyModel, forward_with_census

PLAN_SCHEMA_VERSION = 1


def _zero_budget(target: float, numel: int) -> int:
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {target}")
    # Tiny epsilon absorbs float artifacts like 0.1 * 10 -> 0.999...
    return int(np.floor(target * numel + 1e-9))


def magnitude_mask(w: np.ndarray, existing_mask: np.ndarray, target: float) -> np.ndarray:
    """Grow the zero set to floor(target * numel), zeroing the smallest |w|.

    Only currently-unmasked entries are candidates; ties in |w| break by flat
    index order. The result is a monotone superset of the existing zeros.
    """
    w = np.asarray(w, dtype=np.float64)
    mask = np.asarray(existing_mask, dtype=np.float64)
    if w.shape != mask.shape:
        raise ValueError("weight and mask shapes differ")
    numel = w.size
    flat_mask = mask.reshape(-1).copy()
    current_zeros = numel - int(np.count_nonzero(flat_mask))
    want_zeros = _zero_budget(target, numel)
    if want_zeros < current_zeros:
        raise ValueError(
            f"target sparsity {target} below current {current_zeros / numel}"
        )
    extra = want_zeros - current_zeros
    if extra:
        candidates = np.nonzero(flat_mask)[0]
        order = np.argsort(np.abs(w.reshape(-1)[candidates]), kind="stable")
        flat_mask[candidates[order[:extra]]] = 0.0
    return flat_mask.reshape(w.shape)


def random_mask(
    w: np.ndarray, existing_mask: np.ndarray, target: float, seed: int
) -> np.ndarray:
    """Same count contract as magnitude_mask with uniformly drawn positions."""
    w = np.asarray(w, dtype=np.float64)
    mask = np.asarray(existing_mask, dtype=np.float64)
    if w.shape != mask.shape:
        raise ValueError("weight and mask shapes differ")
    numel = w.size
    flat_mask = mask.reshape(-1).copy()
    current_zeros = numel - int(np.count_nonzero(flat_mask))
    want_zeros = _zero_budget(target, numel)
    if want_zeros < current_zeros:
        raise ValueError(
            f"target sparsity {target} below current {current_zeros / numel}"
        )
    extra = want_zeros - current_zeros
    if extra:
        candidates = np.nonzero(flat_mask)[0]
        chosen = np.random.default_rng(seed).choice(candidates, size=extra, replace=False)
        flat_mask[chosen] = 0.0
    return flat_mask.reshape(w.shape)


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8
    scheme: str = "absmax"

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {self.bits}")
        if self.scheme != "absmax":
            raise ValueError(f"unknown quantization scheme {self.scheme}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def absmax_quantize_dequantize(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Round onto the uniform grid scale * {-qmax..qmax}, scale = max|w|/qmax.

    Rounding is half-away-from-zero; an all-zero matrix passes through.
    """
    w = np.asarray(w, dtype=np.float64)
    require_finite(w, "weights")
    peak = np.max(np.abs(w)) if w.size else 0.0
    if peak == 0.0:
        return w.copy()
    scale = peak / spec.qmax
    scaled = w / scale
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return q * scale


@dataclass
class OutlierCensus:
    threshold: float
    per_component: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_component.values())


def outlier_census(model: ToyModel, probe_sequences, threshold: float) -> OutlierCensus:
    """Count component-input activations with |a| > threshold over all probes."""
    probe_sequences = list(probe_sequences)
    if not probe_sequences:
        raise ValueError("need at least one probe sequence")
    counts = {cid.key: 0 for cid in model.component_ids()}
    for seq in probe_sequences:
        _, census = forward_with_census(model, seq, threshold)
        for key, c in census.items():
            counts[key] += c
    return OutlierCensus(threshold=threshold, per_component=counts)


# ---------------------------------------------------------------------------
# compression plans


@dataclass
class CompressionPlan:
    """Per-component actions: {"layer.kind": {"sparsity": f} | {"bits": b}}."""

    entries: dict = field(default_factory=dict)

    @staticmethod
    def from_sparsities(targets: dict) -> "CompressionPlan":
        return CompressionPlan({k: {"sparsity": float(v)} for k, v in targets.items()})

    @staticmethod
    def from_quantized(component_keys, bits: int = 8) -> "CompressionPlan":
        return CompressionPlan({k: {"bits": int(bits)} for k in component_keys})

    def validate(self, model: ToyModel) -> None:
        valid = {cid.key for cid in model.component_ids()}
        for key, action in self.entries.items():
            if key not in valid:
                raise ValueError(f"plan references unknown component {key}")
            if set(action) == {"sparsity"}:
                if not 0.0 <= action["sparsity"] <= 1.0:
                    raise ValueError(f"sparsity out of range for {key}")
            elif set(action) == {"bits"}:
                QuantSpec(bits=action["bits"])
            else:
                raise ValueError(
                    f"plan entry for {key} must set exactly one of sparsity/bits"
                )

    def to_dict(self) -> dict:
        return {
            "schema_version": PLAN_SCHEMA_VERSION,
            "kind": "compression_plan",
            "entries": {k: dict(v) for k, v in sorted(self.entries.items())},
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_dict(d: dict) -> "CompressionPlan":
        if d.get("schema_version") != PLAN_SCHEMA_VERSION:
            raise ValueError(f"unsupported plan schema: {d.get('schema_version')}")
        if d.get("kind") != "compression_plan":
            raise ValueError("not a compression plan")
        return CompressionPlan({k: dict(v) for k, v in d["entries"].items()})

    @staticmethod
    def read_json(path) -> "CompressionPlan":
        with open(path) as fh:
            return CompressionPlan.from_dict(json.load(fh))


def apply_plan(model: ToyModel, plan: CompressionPlan) -> ToyModel:
    """New model with the plan applied; the input model is untouched.

    Component order does not matter: actions touch disjoint weights.
    """
    plan.validate(model)
    out = model.copy()
    for key in sorted(plan.entries):
        ComponentId.from_key(key)
        action = plan.entries[key]
        if "sparsity" in action:
            out.masks[key] = magnitude_mask(
                out.params[key], out.masks[key], action["sparsity"]
            )
        else:
            out.params[key] = absmax_quantize_dequantize(
                out.params[key], QuantSpec(bits=action["bits"])
            )
    return out
