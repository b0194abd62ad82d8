"""Exact reverse-mode gradients for the toy model and the masked/dense loop.

The optimizer is plain SGD with decoupled weight decay (applied to matrix
parameters, not norm gains). During the masked phase the forward pass uses
masked weights, updates land on the raw weights, and masked positions are
re-zeroed after every step; the dense phase ignores masks entirely, so
previously masked weights regrow from zero. Training is bit-reproducible for
a fixed seed and data stream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import ToyModel, _forward_internal, _unapply_rope, _rope_tables


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    seq_len: int = 128
    steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("hyperparameters must be nonnegative")
        if self.batch_size <= 0 or self.seq_len <= 1 or self.steps < 0:
            raise ValueError("batch_size/seq_len/steps out of range")


@dataclass
class LossTrace:
    records: list = field(default_factory=list)  # (step, phase, loss)

    def append(self, step: int, phase: str, loss: float) -> None:
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at step {step} ({phase})")
        self.records.append((step, phase, float(loss)))

    def losses(self, phase: str | None = None) -> list:
        return [l for s, p, l in self.records if phase is None or p == phase]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "phase", "loss"])
            for step, phase, loss in self.records:
                writer.writerow([step, phase, repr(loss)])


def _rms_norm_backward(dy, x, gain, inv, dgain_out):
    d = x.shape[-1]
    dgain_out += np.sum((dy * x * inv).reshape(-1, d), axis=0)
    t = np.sum(dy * gain * x, axis=-1, keepdims=True)
    return dy * gain * inv - x * (inv**3) * t / d


def loss_and_grads(model: ToyModel, batch, use_masks: bool = True):
    """Mean next-token cross-entropy and exact gradients for every parameter.

    batch: (B, S) int array. Gradients are reported with respect to the raw
    weights; with masks active, masked positions therefore get gradient zero.
    """
    tokens = np.asarray(batch, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, S = tokens.shape
    if S < 2:
        raise ValueError("need sequences of at least 2 tokens to form targets")
    cfg = model.config
    logits, cache, _ = _forward_internal(model, tokens, use_masks=use_masks, need_cache=True)

    # Softmax in place and reuse the buffer as dlogits; the raw logits are not
    # needed once the loss gradient exists.
    work = logits
    view = work[:, :-1]
    view -= np.max(view, axis=-1, keepdims=True)
    np.exp(view, out=view)
    view /= np.sum(view, axis=-1, keepdims=True)
    targets = tokens[:, 1:]
    count = B * (S - 1)
    rows = np.arange(S - 1)
    picked = view[np.arange(B)[:, None], rows[None, :], targets]
    loss = float(-np.mean(np.log(picked)))
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite training loss (min prob {picked.min():.3e})"
        )

    dlogits = work
    dlogits[:, -1] = 0.0
    dlogits[np.arange(B)[:, None], rows[None, :], targets] -= 1.0
    dlogits /= count

    def w(key):
        return model.effective_weight(key) if use_masks else model.params[key]

    grads = {name: np.zeros_like(p) for name, p in model.params.items()}
    d, H, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    cos, sin = _rope_tables(S, hd, cfg.rope_base)

    def flat(t):
        return t.reshape(-1, t.shape[-1])

    def split_heads(t):
        return t.reshape(B, S, H, hd).transpose(0, 2, 1, 3)

    def merge_heads(t):
        return t.transpose(0, 2, 1, 3).reshape(B, S, d)

    xf = cache["xf"]
    grads["unemb"] += flat(xf).T @ flat(dlogits)
    dxf = dlogits @ model.params["unemb"].T
    dx = _rms_norm_backward(
        dxf, cache["x_out"], model.params["final_gain"], cache["f_inv"], grads["final_gain"]
    )

    for l in reversed(range(cfg.n_layers)):
        c = cache["layers"][l]
        # MLP branch
        dm = dx
        grads[f"{l}.mlp_down"] += flat(c["h"]).T @ flat(dm)
        dh = dm @ w(f"{l}.mlp_down").T
        gate_act = c["g"] * c["sig"]
        du = dh * gate_act
        dg = (dh * c["u"]) * c["sig"] * (1.0 + c["g"] * (1.0 - c["sig"]))
        grads[f"{l}.mlp_up"] += flat(c["b"]).T @ flat(du)
        grads[f"{l}.mlp_gate"] += flat(c["b"]).T @ flat(dg)
        db = du @ w(f"{l}.mlp_up").T + dg @ w(f"{l}.mlp_gate").T
        dx_mid = dx + _rms_norm_backward(
            db, c["x_mid"], model.params[f"{l}.mlp_gain"], c["b_inv"], grads[f"{l}.mlp_gain"]
        )
        # attention branch
        do = dx_mid
        grads[f"{l}.attn_dense"] += flat(c["ctx"]).T @ flat(do)
        dctx = split_heads(do @ w(f"{l}.attn_dense").T)
        dp = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["p"].transpose(0, 1, 3, 2) @ dctx
        # dscores = p * (dp - sum(dp * p)), computed in place in the dp buffer.
        dp -= np.einsum("bhij,bhij->bhi", dp, c["p"])[..., None]
        dp *= c["p"]
        dscores = dp
        # cached q already carries the 1/sqrt(hd) factor; k does not
        dq_rot = dscores @ c["k"] * scale
        dk_rot = dscores.transpose(0, 1, 3, 2) @ c["q"]
        dq = merge_heads(_unapply_rope(dq_rot, cos, sin))
        dk = merge_heads(_unapply_rope(dk_rot, cos, sin))
        dvm = merge_heads(dv)
        grads[f"{l}.attn_q"] += flat(c["a"]).T @ flat(dq)
        grads[f"{l}.attn_k"] += flat(c["a"]).T @ flat(dk)
        grads[f"{l}.attn_v"] += flat(c["a"]).T @ flat(dvm)
        da = dq @ w(f"{l}.attn_q").T + dk @ w(f"{l}.attn_k").T + dvm @ w(f"{l}.attn_v").T
        dx = dx_mid + _rms_norm_backward(
            da, c["x_in"], model.params[f"{l}.attn_gain"], c["a_inv"], grads[f"{l}.attn_gain"]
        )

    np.add.at(grads["emb"], tokens.reshape(-1), dx.reshape(-1, d))

    if use_masks:
        for key, mask in model.masks.items():
            grads[key] *= mask
    return loss, grads


def sgd_step(model: ToyModel, grads: dict, config: TrainConfig) -> None:
    """In-place SGD with decoupled weight decay on matrix parameters."""
    lr, wd = config.learning_rate, config.weight_decay
    for name in sorted(model.params):
        p = model.params[name]
        p -= lr * grads[name]
        if wd > 0 and p.ndim == 2:
            p -= lr * wd * p


def remask(model: ToyModel) -> None:
    """Zero raw weights at masked positions."""
    for key, mask in model.masks.items():
        model.params[key] *= mask


def train_masked(
    model: ToyModel,
    config: TrainConfig,
    batches,
    masked_steps: int,
    dense_steps: int,
) -> LossTrace:
    """Masked phase then dense phase, consuming one batch per step.

    Masked phase: forward with masks, update raw weights, re-mask. Dense
    phase: masks ignored, weights at masked positions warm-start from zero.
    """
    trace = LossTrace()
    it = iter(batches)
    remask(model)
    for step in range(masked_steps):
        loss, grads = loss_and_grads(model, next(it), use_masks=True)
        sgd_step(model, grads, config)
        remask(model)
        trace.append(step, "masked", loss)
    for step in range(masked_steps, masked_steps + dense_steps):
        loss, grads = loss_and_grads(model, next(it), use_masks=False)
        sgd_step(model, grads, config)
        trace.append(step, "dense", loss)
    return trace
