"""Decoder-style transformer regressor.

sensor window (B, L, C) -> affine embedding + learned positions -> n_layers
blocks of multi-head self-attention and FFN with residuals and layer norm ->
average pool + attention pool, summed -> MLP head (d_model -> 50 -> 10 -> 1).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import Tensor

ParameterStore = dict[str, Tensor]

LAYER_TENSORS = (
    "attn.W_Q", "attn.b_Q", "attn.W_K", "attn.b_K", "attn.W_V", "attn.b_V", "attn.W_O", "attn.b_O",
    "ffn.W_1", "ffn.b_1", "ffn.W_2", "ffn.b_2",
    "norm1.gamma", "norm1.beta", "norm2.gamma", "norm2.beta",
)
HEAD_TENSORS = ("head.W_1", "head.b_1", "head.W_2", "head.b_2", "head.W_3", "head.b_3")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    window_len: int = 30
    n_channels: int = 21
    head_dims: tuple[int, ...] = (50, 10, 1)
    activation: str = "relu"
    causal: bool = True
    norm_placement: str = "post"
    dtype: str = "float32"
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        dims = (self.d_model, self.n_layers, self.n_heads, self.d_ff, self.window_len, self.n_channels)
        if min(dims) < 1 or min(self.head_dims) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dims[-1] != 1:
            raise ValueError("regression head must end in a single output")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm_placement not in ("post", "pre"):
            raise ValueError(f"unknown norm placement {self.norm_placement!r}")
        nx.resolve_dtype(self.dtype)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# published width and depth; n_heads and d_ff follow the GPT-2-medium layout.
FULL_CONFIG = ModelConfig(d_model=1024, n_layers=24, n_heads=16, d_ff=4096)
DESK_CONFIG = ModelConfig()


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.W_e": (cfg.n_channels, d),
        "embed.b_e": (d,),
        "pos.P": (cfg.window_len, d),
    }
    per_layer = {
        "attn.W_Q": (d, d), "attn.b_Q": (d,), "attn.W_K": (d, d), "attn.b_K": (d,),
        "attn.W_V": (d, d), "attn.b_V": (d,), "attn.W_O": (d, d), "attn.b_O": (d,),
        "ffn.W_1": (d, f), "ffn.b_1": (f,), "ffn.W_2": (f, d), "ffn.b_2": (d,),
        "norm1.gamma": (d,), "norm1.beta": (d,), "norm2.gamma": (d,), "norm2.beta": (d,),
    }
    for layer in range(1, cfg.n_layers + 1):
        for name in LAYER_TENSORS:
            shapes[f"layers.{layer}.{name}"] = per_layer[name]
    shapes["pool.w"] = (d,)
    widths = (d,) + cfg.head_dims
    for i in range(len(cfg.head_dims)):
        shapes[f"head.W_{i + 1}"] = (widths[i], widths[i + 1])
        shapes[f"head.b_{i + 1}"] = (widths[i + 1],)
    return shapes


def layer_of(name: str) -> int | None:
    """1-based backbone layer index of a parameter name, None outside the stack."""
    if name.startswith("layers."):
        return int(name.split(".")[1])
    return None


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> ParameterStore:
    """normal(0, std) for matrices and pool.w; zeros for biases, betas and
    positions; ones for layer-norm gains."""
    rng = np.random.default_rng(seed)
    dt = nx.resolve_dtype(cfg.dtype)
    params: ParameterStore = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf.startswith("W_") or name == "pool.w":
            arr = rng.normal(0.0, std, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dt), requires_grad=True)
    return params


def check_params(params: ParameterStore, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    missing = set(shapes) - set(params)
    extra = set(params) - set(shapes)
    if missing or extra:
        raise ValueError(f"parameter names do not match config (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, config expects {shape}")


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


# ---------------------------------------------------------------- components


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, W), b)


def embed(window: Tensor, params: ParameterStore) -> Tensor:
    """X W_e + b_e, plus the learned positional row for each timestep."""
    W = params["embed.W_e"]
    if window.shape[-1] != W.shape[0]:
        raise nx.ShapeError(f"window has {window.shape[-1]} channels, embedding expects {W.shape[0]}")
    P = params["pos.P"]
    if window.shape[-2] != P.shape[0]:
        raise nx.ShapeError(f"window length {window.shape[-2]} does not match positions {P.shape[0]}")
    return nx.add(_affine(window, W, params["embed.b_e"]), P)


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))


def attention(Q: Tensor, K: Tensor, V: Tensor, causal: bool = False) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise nx.ShapeError(f"attention shapes Q{Q.shape} K{K.shape} V{V.shape}")
    scores = nx.scale(nx.matmul(Q, nx.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    mask = causal_mask(Q.shape[-2]) if causal else None
    return nx.matmul(nx.softmax_lastdim(scores, mask), V)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, L, d = x.shape
    return nx.transpose(nx.reshape(x, (*lead, L, h, d // h)), _head_axes(len(lead)))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, L, dh = x.shape
    return nx.reshape(nx.transpose(x, _head_axes(len(lead))), (*lead, L, h * dh))


def _head_axes(n_lead: int) -> tuple[int, ...]:
    lead = tuple(range(n_lead))
    return lead + (n_lead + 1, n_lead, n_lead + 2)


def multi_head(H: Tensor, params: ParameterStore, layer: int, n_heads: int, causal: bool) -> Tensor:
    p = f"layers.{layer}.attn."
    if H.shape[-1] % n_heads:
        raise nx.ShapeError(f"width {H.shape[-1]} not divisible by {n_heads} heads")
    q = _split_heads(_affine(H, params[p + "W_Q"], params[p + "b_Q"]), n_heads)
    k = _split_heads(_affine(H, params[p + "W_K"], params[p + "b_K"]), n_heads)
    v = _split_heads(_affine(H, params[p + "W_V"], params[p + "b_V"]), n_heads)
    ctx = _merge_heads(attention(q, k, v, causal))
    return _affine(ctx, params[p + "W_O"], params[p + "b_O"])


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"relu": nx.relu, "gelu": nx.gelu}


def ffn(H: Tensor, params: ParameterStore, layer: int, activation: str = "relu") -> Tensor:
    p = f"layers.{layer}.ffn."
    hidden = _ACTIVATIONS[activation](_affine(H, params[p + "W_1"], params[p + "b_1"]))
    return _affine(hidden, params[p + "W_2"], params[p + "b_2"])


def transformer_block(H: Tensor, params: ParameterStore, layer: int, cfg: ModelConfig) -> Tensor:
    p = f"layers.{layer}."

    def norm(x, which):
        return nx.layer_norm(x, params[p + which + ".gamma"], params[p + which + ".beta"], cfg.ln_eps)

    if cfg.norm_placement == "post":
        H1 = norm(nx.add(H, multi_head(H, params, layer, cfg.n_heads, cfg.causal)), "norm1")
        return norm(nx.add(H1, ffn(H1, params, layer, cfg.activation)), "norm2")
    H1 = nx.add(H, multi_head(norm(H, "norm1"), params, layer, cfg.n_heads, cfg.causal))
    return nx.add(H1, ffn(norm(H1, "norm2"), params, layer, cfg.activation))


def pool_fuse(H: Tensor, w: Tensor) -> Tensor:
    """mean_i H_i + sum_i softmax_i(w . H_i) H_i, over the time axis."""
    *lead, L, d = H.shape
    avg = nx.mean(H, axis=-2)
    logits = nx.transpose(nx.matmul(H, nx.reshape(w, (d, 1))))  # (..., 1, L)
    att = nx.reshape(nx.matmul(nx.softmax_lastdim(logits), H), (*lead, d))
    return nx.add(avg, att)


def regress_head(h: Tensor, params: ParameterStore) -> Tensor:
    """Linear output, ReLU between layers; returns (...,) scalars."""
    n = sum(1 for k in params if k.startswith("head.W_"))
    single = h.data.ndim == 1
    x = nx.reshape(h, (1, h.shape[0])) if single else h
    for i in range(1, n + 1):
        x = _affine(x, params[f"head.W_{i}"], params[f"head.b_{i}"])
        if i < n:
            x = nx.relu(x)
    return nx.reshape(x, () if single else x.shape[:-1])


def model_forward(batch, params: ParameterStore, cfg: ModelConfig) -> Tensor:
    """(B, L, C) windows -> (B,) normalized RUL predictions."""
    x = nx.as_tensor(batch, dtype=cfg.dtype)
    if x.dtype != nx.resolve_dtype(cfg.dtype):
        x = Tensor(x.data, dtype=cfg.dtype)
    if x.data.ndim != 3 or x.shape[1:] != (cfg.window_len, cfg.n_channels):
        raise nx.ShapeError(f"batch shape {x.shape}, expected (B, {cfg.window_len}, {cfg.n_channels})")
    H = embed(x, params)
    for layer in range(1, cfg.n_layers + 1):
        H = transformer_block(H, params, layer, cfg)
    return regress_head(pool_fuse(H, params["pool.w"]), params)


def predict(params: ParameterStore, cfg: ModelConfig, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference without a tape, in fixed-size chunks."""
    out = [model_forward(X[i:i + batch_size], params, cfg).data for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)
