"""Desk-scale decoder-only transformer with per-component weight addressing.

The architecture mirrors the Llama component inventory: four attention
matrices (query/key/value/dense) and a gated MLP (up/gate/down) per layer,
pre-layer RMS normalization with learned gains, and rotary position mixing on
query/key. Every weight matrix is addressable by (layer, kind) so compression
procedures can probe components one at a time. Binary pruning masks are stored
separately from the raw weights; the forward pass applies them
multiplicatively.

All arithmetic is float64 and fully deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from .numerics import require_finite


class ComponentKind(str, Enum):
    ATTN_QUERY = "attn_q"
    ATTN_KEY = "attn_k"
    ATTN_VALUE = "attn_v"
    ATTN_DENSE = "attn_dense"
    MLP_UP = "mlp_up"
    MLP_GATE = "mlp_gate"
    MLP_DOWN = "mlp_down"


ATTENTION_KINDS = (
    ComponentKind.ATTN_QUERY,
    ComponentKind.ATTN_KEY,
    ComponentKind.ATTN_VALUE,
    ComponentKind.ATTN_DENSE,
)
MLP_KINDS = (ComponentKind.MLP_UP, ComponentKind.MLP_GATE, ComponentKind.MLP_DOWN)
ALL_KINDS = ATTENTION_KINDS + MLP_KINDS


@dataclass(frozen=True, order=True)
class ComponentId:
    layer: int
    kind: ComponentKind

    @property
    def key(self) -> str:
        return f"{self.layer}.{self.kind.value}"

    @staticmethod
    def from_key(key: str) -> "ComponentId":
        layer_str, kind_str = key.split(".", 1)
        return ComponentId(int(layer_str), ComponentKind(kind_str))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 172
    max_seq: int = 512
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary mixing")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def component_ids(self) -> list[ComponentId]:
        return [ComponentId(l, k) for l in range(self.n_layers) for k in ALL_KINDS]

    def component_shape(self, kind: ComponentKind) -> tuple[int, int]:
        if kind in ATTENTION_KINDS:
            return (self.d_model, self.d_model)
        if kind in (ComponentKind.MLP_UP, ComponentKind.MLP_GATE):
            return (self.d_model, self.d_ff)
        return (self.d_ff, self.d_model)


def _gain_keys(config: ModelConfig) -> list[str]:
    keys = []
    for l in range(config.n_layers):
        keys.append(f"{l}.attn_gain")
        keys.append(f"{l}.mlp_gain")
    keys.append("final_gain")
    return keys


@dataclass
class ToyModel:
    """Parameter container; `params` maps names to float64 arrays.

    Parameter names: "emb", "unemb", "final_gain", "{layer}.attn_gain",
    "{layer}.mlp_gain", and one entry per component key ("{layer}.{kind}").
    `masks` holds a binary array per component key; effective weight is
    raw * mask.
    """

    config: ModelConfig
    params: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)

    def component_ids(self) -> list[ComponentId]:
        return self.config.component_ids()

    def copy(self) -> "ToyModel":
        return ToyModel(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            masks={k: v.copy() for k, v in self.masks.items()},
        )

    def effective_weight(self, key: str) -> np.ndarray:
        w = self.params[key]
        m = self.masks.get(key)
        return w * m if m is not None else w

    def component_sparsity(self, cid: ComponentId) -> float:
        m = self.masks[cid.key]
        return 1.0 - float(np.count_nonzero(m)) / m.size

    def total_component_params(self) -> int:
        return sum(self.params[c.key].size for c in self.component_ids())

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())


def get_component(model: ToyModel, cid: ComponentId) -> np.ndarray:
    """Raw (unmasked) weight matrix of a component, as a copy."""
    return model.params[cid.key].copy()


def set_component(model: ToyModel, cid: ComponentId, w: np.ndarray) -> None:
    """Replace a component's raw matrix; the shape must be preserved."""
    w = np.asarray(w, dtype=np.float64)
    current = model.params[cid.key]
    if w.shape != current.shape:
        raise ValueError(f"shape mismatch for {cid.key}: {w.shape} != {current.shape}")
    model.params[cid.key] = w.copy()


def random_init(config: ModelConfig, seed: int) -> ToyModel:
    """Seed-reproducible model with O(1) initial logits.

    Hidden matrices use 1/sqrt(fan_in) scaling; norm gains start at 1 and all
    masks at all-ones.
    """
    rng = np.random.default_rng(seed)
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    params: dict[str, np.ndarray] = {}
    params["emb"] = rng.standard_normal((v, d))
    params["unemb"] = rng.standard_normal((d, v)) / np.sqrt(d)
    for l in range(config.n_layers):
        params[f"{l}.attn_gain"] = np.ones(d)
        params[f"{l}.mlp_gain"] = np.ones(d)
    params["final_gain"] = np.ones(d)
    masks: dict[str, np.ndarray] = {}
    for cid in config.component_ids():
        rows, cols = config.component_shape(cid.kind)
        params[cid.key] = rng.standard_normal((rows, cols)) / np.sqrt(rows)
        masks[cid.key] = np.ones((rows, cols))
    return ToyModel(config=config, params=params, masks=masks)


# ---------------------------------------------------------------------------
# forward pass


_ROPE_CACHE: dict = {}
_CAUSAL_CACHE: dict = {}


def _rope_tables(seq_len: int, head_dim: int, base: float):
    key = (seq_len, head_dim, base)
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        half = head_dim // 2
        freqs = base ** (-np.arange(half) * 2.0 / head_dim)
        angles = np.outer(np.arange(seq_len), freqs)
        hit = (np.cos(angles), np.sin(angles))
        _ROPE_CACHE[key] = hit
    return hit


def _causal_bias(seq_len: int) -> np.ndarray:
    bias = _CAUSAL_CACHE.get(seq_len)
    if bias is None:
        bias = np.triu(np.full((seq_len, seq_len), -np.inf), k=1)
        _CAUSAL_CACHE[seq_len] = bias
    return bias


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (B, H, S, hd); rotate the (first-half, second-half) pairs.
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    out = np.empty_like(x)
    np.multiply(x1, cos, out=out[..., :half])
    out[..., :half] -= x2 * sin
    np.multiply(x1, sin, out=out[..., half:])
    out[..., half:] += x2 * cos
    return out


def _unapply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # Inverse rotation; rotations are orthogonal so this is the exact adjoint.
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    out = np.empty_like(x)
    np.multiply(x1, cos, out=out[..., :half])
    out[..., :half] += x2 * sin
    np.multiply(x2, cos, out=out[..., half:])
    out[..., half:] -= x1 * sin
    return out


def _rms_norm(x: np.ndarray, gain: np.ndarray, eps: float):
    sq = np.einsum("...i,...i->...", x, x)[..., None]
    inv = 1.0 / np.sqrt(sq / x.shape[-1] + eps)
    return x * inv * gain, inv


def _forward_internal(
    model: ToyModel,
    tokens: np.ndarray,
    use_masks: bool = True,
    need_cache: bool = False,
    outlier_threshold: float | None = None,
    last_row_only: bool = False,
):
    """Batched forward. tokens: (B, S) int array.

    Returns (logits, cache, outlier_counts). cache is None unless requested;
    outlier_counts maps component keys to counts of input activations with
    |a| > threshold, or None when no threshold is given.
    """
    cfg = model.config
    B, S = tokens.shape
    if S > cfg.max_seq:
        raise ValueError(f"sequence length {S} exceeds max_seq {cfg.max_seq}")
    if S == 0:
        raise ValueError("empty sequence")
    H, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    cos, sin = _rope_tables(S, hd, cfg.rope_base)
    bias = _causal_bias(S)

    def w(key):
        return model.effective_weight(key) if use_masks else model.params[key]

    census: dict[str, int] | None = None
    if outlier_threshold is not None:
        census = {}

    def count_outliers(key, act):
        if census is not None:
            census[key] = census.get(key, 0) + int(
                np.count_nonzero(np.abs(act) > outlier_threshold)
            )

    x = model.params["emb"][tokens]  # (B, S, d)
    cache = {"tokens": tokens, "layers": []} if need_cache else None

    def split_heads(t):
        return t.reshape(B, S, H, hd).transpose(0, 2, 1, 3)

    def merge_heads(t):
        return t.transpose(0, 2, 1, 3).reshape(B, S, cfg.d_model)

    for l in range(cfg.n_layers):
        a, a_inv = _rms_norm(x, model.params[f"{l}.attn_gain"], cfg.norm_eps)
        count_outliers(f"{l}.attn_q", a)
        count_outliers(f"{l}.attn_k", a)
        count_outliers(f"{l}.attn_v", a)
        q = split_heads(a @ w(f"{l}.attn_q"))
        k = split_heads(a @ w(f"{l}.attn_k"))
        v = split_heads(a @ w(f"{l}.attn_v"))
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        q *= scale  # pre-scaling avoids a full pass over the score tensor
        # In-place softmax: the score tensor dominates memory traffic.
        p = q @ k.transpose(0, 1, 3, 2)
        p += bias
        p -= np.max(p, axis=-1, keepdims=True)
        np.exp(p, out=p)
        p /= np.sum(p, axis=-1, keepdims=True)
        ctx = merge_heads(p @ v)
        count_outliers(f"{l}.attn_dense", ctx)
        o = ctx @ w(f"{l}.attn_dense")
        x_mid = x + o
        b, b_inv = _rms_norm(x_mid, model.params[f"{l}.mlp_gain"], cfg.norm_eps)
        count_outliers(f"{l}.mlp_up", b)
        count_outliers(f"{l}.mlp_gate", b)
        u = b @ w(f"{l}.mlp_up")
        g = b @ w(f"{l}.mlp_gate")
        sig = 1.0 / (1.0 + np.exp(-g))
        h = (g * sig) * u
        count_outliers(f"{l}.mlp_down", h)
        m = h @ w(f"{l}.mlp_down")
        x_new = x_mid + m
        if need_cache:
            cache["layers"].append(
                dict(x_in=x, a=a, a_inv=a_inv, q=q, k=k, v=v, p=p, ctx=ctx,
                     x_mid=x_mid, b=b, b_inv=b_inv, u=u, g=g, sig=sig, h=h)
            )
        x = x_new

    if last_row_only and not need_cache:
        x = x[:, -1:]
    xf, f_inv = _rms_norm(x, model.params["final_gain"], cfg.norm_eps)
    logits = xf @ model.params["unemb"]
    if need_cache:
        cache["x_out"] = x
        cache["xf"] = xf
        cache["f_inv"] = f_inv
    return logits, cache, census


def forward(model: ToyModel, tokens, use_masks: bool = True) -> np.ndarray:
    """Logit matrix (N x vocab) for one token sequence; causal and deterministic."""
    y = _as_token_array(model.config, tokens)
    logits, _, _ = _forward_internal(model, y[None, :], use_masks=use_masks)
    return logits[0]


def forward_with_census(model: ToyModel, tokens, threshold: float):
    """Forward plus per-component count of input activations above `threshold`."""
    y = _as_token_array(model.config, tokens)
    logits, _, census = _forward_internal(
        model, y[None, :], outlier_threshold=threshold
    )
    return logits[0], census


def _as_token_array(config: ModelConfig, tokens) -> np.ndarray:
    y = np.asarray(tokens, dtype=np.int64)
    if y.ndim != 1:
        raise ValueError("token sequence must be one-dimensional")
    if y.size == 0:
        raise ValueError("empty token sequence")
    if np.any(y < 0) or np.any(y >= config.vocab_size):
        raise ValueError("token id out of vocabulary range")
    return y


def greedy_decode(model: ToyModel, prefix, total_len: int) -> np.ndarray:
    """Greedy continuation of `prefix` to `total_len` tokens.

    Each next token is the argmax of the last logit row (ties to the lowest
    index). total_len == len(prefix) returns the prefix unchanged.
    """
    y = _as_token_array(model.config, prefix)
    n = y.size
    if total_len < n:
        raise ValueError(f"total_len {total_len} shorter than prefix {n}")
    if total_len > model.config.max_seq:
        raise ValueError(f"total_len {total_len} exceeds max_seq {model.config.max_seq}")
    out = np.empty(total_len, dtype=np.int64)
    out[:n] = y
    for i in range(n, total_len):
        logits, _, _ = _forward_internal(model, out[None, :i], last_row_only=True)
        out[i] = int(np.argmax(logits[0, -1]))
    return out


def freeze_effective(model: ToyModel) -> ToyModel:
    """Snapshot with masks multiplied into the weights once.

    Forward results are bit-identical to the source model; read-only probing
    loops use this to avoid re-applying masks on every pass.
    """
    return ToyModel(
        config=model.config,
        params={k: model.effective_weight(k) for k in model.params},
        masks={},
    )


# ---------------------------------------------------------------------------
# checkpoint container: versioned binary, byte-stable for identical models

_MAGIC = b"TOKDIV01"


def save_model(model: ToyModel, path) -> None:
    """Write config + all arrays (row-major float64) to a byte-stable file."""
    names = sorted(model.params) + sorted(model.masks)
    manifest = []
    for i, name in enumerate(names):
        arr = model.params[name] if i < len(model.params) else model.masks[name]
        manifest.append({"name": name, "shape": list(arr.shape),
                         "kind": "param" if i < len(model.params) else "mask"})
    header = json.dumps(
        {"format_version": 1, "config": asdict(model.config), "arrays": manifest},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for i, name in enumerate(names):
            arr = model.params[name] if i < len(model.params) else model.masks[name]
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> ToyModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"not a model checkpoint: {path}")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len))
        if header["format_version"] != 1:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        config = ModelConfig(**header["config"])
        params: dict[str, np.ndarray] = {}
        masks: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            (params if entry["kind"] == "param" else masks)[entry["name"]] = arr
    return ToyModel(config=config, params=params, masks=masks)


def models_equal(a: ToyModel, b: ToyModel) -> bool:
    if a.config != b.config or set(a.params) != set(b.params) or set(a.masks) != set(b.masks):
        return False
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params) and all(
        np.array_equal(a.masks[k], b.masks[k]) for k in a.masks
    )
