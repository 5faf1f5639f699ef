"""Multi-head attention and the residual encoder/cross blocks.

All functions take token tensors shaped ``[..., tokens, d]``; any leading
axes (typically the minibatch) are carried through. There are no positional
encodings, so every block is equivariant to token permutations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, NormState, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    n_layers: int = 1
    d_k: int | None = None
    d_v: int | None = None

    def __post_init__(self):
        if self.d_k is None or self.d_v is None:
            if self.d_model % self.n_heads:
                raise ContractError(
                    f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
                )
            width = self.d_model // self.n_heads
            object.__setattr__(self, "d_k", self.d_k or width)
            object.__setattr__(self, "d_v", self.d_v or width)
        if self.d_k <= 0 or self.d_v <= 0:
            raise ContractError("attention head widths must be positive")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return T.parameter(rng.uniform(-bound, bound, size=shape))


@dataclass
class MultiHeadParams:
    """Head projections stored side by side: column block ``i`` of ``w_q`` is W_i^Q."""

    w_q: Tensor  # d x (h * d_k)
    w_k: Tensor  # d x (h * d_k)
    w_v: Tensor  # d x (h * d_v)
    w_o: Tensor  # (h * d_v) x d
    n_heads: int

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "MultiHeadParams":
        d, h = cfg.d_model, cfg.n_heads
        return cls(
            w_q=uniform_init(rng, (d, h * cfg.d_k), d),
            w_k=uniform_init(rng, (d, h * cfg.d_k), d),
            w_v=uniform_init(rng, (d, h * cfg.d_v), d),
            w_o=uniform_init(rng, (h * cfg.d_v, d), h * cfg.d_v),
            n_heads=h,
        )

    def head(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(W_i^Q, W_i^K, W_i^V) of head ``i`` as arrays."""
        dk = self.w_q.shape[1] // self.n_heads
        dv = self.w_v.shape[1] // self.n_heads
        return (
            self.w_q.data[:, i * dk : (i + 1) * dk],
            self.w_k.data[:, i * dk : (i + 1) * dk],
            self.w_v.data[:, i * dv : (i + 1) * dv],
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


@dataclass
class MlpParams:
    """Stack of affine layers with ReLU between them (none after the last)."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, widths, rng: np.random.Generator) -> "MlpParams":
        if any(w < 1 for w in widths):
            raise ContractError(f"MLP widths must be positive, got {widths}")
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            ws.append(uniform_init(rng, (fan_in, fan_out), fan_in))
            bs.append(uniform_init(rng, (fan_out,), fan_in))
        return cls(ws, bs)

    def __call__(self, a: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = T.linear(a, w, b)
            if i < last:
                a = T.relu(a)
        return a

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


def scaled_attention(q, k, v) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / sqrt(d_k)) v, returning (output, weights)."""
    q, k, v = T._as_tensor(q), T._as_tensor(k), T._as_tensor(v)
    d_k = q.shape[-1]
    if d_k == 0:
        raise ContractError("scaled_attention: d_k must be positive")
    if k.shape[-1] != d_k:
        raise DimensionError(f"scaled_attention: query width {d_k} vs key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2] or k.shape[-2] < 1:
        raise DimensionError(f"scaled_attention: keys {k.shape} vs values {v.shape}")
    logits = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d_k))
    weights = T.softmax_rows(logits)
    return T.matmul(weights, v), weights


def _split_heads(a: Tensor, h: int) -> Tensor:
    # [..., m, h*w] -> [..., h, m, w]
    *lead, m, hw = a.shape
    return T.swapaxes(T.reshape(a, (*lead, m, h, hw // h)), -3, -2)


def multi_head(params: MultiHeadParams, q_in, k_in, v_in) -> tuple[Tensor, Tensor]:
    """Concat(head_1..head_h) W^O; weights come back as ``[..., h, m, n]``."""
    q_in, k_in, v_in = T._as_tensor(q_in), T._as_tensor(k_in), T._as_tensor(v_in)
    d = params.w_q.shape[0]
    for name, a in (("query", q_in), ("key", k_in), ("value", v_in)):
        if a.shape[-1] != d:
            raise ContractError(f"multi_head: {name} width {a.shape[-1]} != d_model {d}")
    h = params.n_heads
    if params.w_q.shape[1] % h or params.w_v.shape[1] % h or params.w_o.shape[0] != params.w_v.shape[1]:
        raise ContractError("multi_head: projection widths inconsistent with head count")
    q = _split_heads(T.matmul(q_in, params.w_q), h)
    k = _split_heads(T.matmul(k_in, params.w_k), h)
    v = _split_heads(T.matmul(v_in, params.w_v), h)
    heads, weights = scaled_attention(q, k, v)
    *lead, _, m, dv = heads.shape
    merged = T.reshape(T.swapaxes(heads, -3, -2), (*lead, m, h * dv))
    return T.matmul(merged, params.w_o), weights


@dataclass
class EncoderParams:
    attn: MultiHeadParams
    norm: NormState
    mlp: MlpParams

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "EncoderParams":
        d = cfg.d_model
        return cls(MultiHeadParams.init(cfg, rng), NormState.create(d), MlpParams.init((d, d, d), rng))


@dataclass
class CrossParams:
    attn: MultiHeadParams
    mlp: MlpParams

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "CrossParams":
        d = cfg.d_model
        return cls(MultiHeadParams.init(cfg, rng), MlpParams.init((d, d, d), rng))


def encoder_block(params: EncoderParams, tokens, mode: str = "train") -> Tensor:
    """Self-attention + residual, then BatchNorm -> MLP inside a second residual."""
    tokens = T._as_tensor(tokens)
    attended, _ = multi_head(params.attn, tokens, tokens, tokens)
    hat = attended + tokens
    return params.mlp(T.batch_norm(hat, params.norm, mode)) + hat


def cross_block(params: CrossParams, queries, context) -> tuple[Tensor, Tensor]:
    """Queries attend over the context; residual on the query path, then MLP + residual."""
    queries, context = T._as_tensor(queries), T._as_tensor(context)
    if context.ndim < 2 or context.shape[-2] == 0:
        raise DimensionError("cross_block: empty context")
    attended, weights = multi_head(params.attn, queries, context, context)
    hat = attended + queries
    return params.mlp(hat) + hat, weights
