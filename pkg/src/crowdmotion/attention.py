"""Multi-head attention and the encoder/decoder layers built from it.

Both encoders, the decoder, and the discriminator share these blocks. Layers
use the post-norm residual order (attention -> add -> norm -> feed-forward ->
add -> norm) with a ReLU feed-forward. There is no masking anywhere: inputs
are past-only by construction. Attention weights are recorded on every pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    concat,
    layer_norm,
    matmul,
    relu,
    reshape,
    scale,
    softmax_last,
    transpose,
    xavier_uniform,
)
from .errors import ShapeError

LAYER_NORM_EPS = 1e-5


@dataclass
class LinearParams:
    """An affine map ``x @ w + b``."""

    w: Parameter
    b: Parameter

    @staticmethod
    def init(d_in: int, d_out: int, rng: np.random.Generator, name: str) -> "LinearParams":
        return LinearParams(
            w=Parameter(xavier_uniform((d_in, d_out), rng), f"{name}.w"),
            b=Parameter(np.zeros(d_out), f"{name}.b"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def apply(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return matmul(x, self.w) + self.b
        lead = x.shape[:-1]
        flat = reshape(x, -1, x.shape[-1])
        return reshape(matmul(flat, self.w) + self.b, *lead, self.w.shape[1])


@dataclass
class LayerNormParams:
    gamma: Parameter
    beta: Parameter

    @staticmethod
    def init(dim: int, name: str) -> "LayerNormParams":
        return LayerNormParams(
            gamma=Parameter(np.ones(dim), f"{name}.gamma"),
            beta=Parameter(np.zeros(dim), f"{name}.beta"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def apply(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, eps=LAYER_NORM_EPS)


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the output projection."""

    wq: list[Parameter]
    wk: list[Parameter]
    wv: list[Parameter]
    wo: Parameter

    @staticmethod
    def init(d_model: int, heads: int, rng: np.random.Generator, name: str) -> "AttentionParams":
        if d_model % heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by heads {heads}")
        d_key = d_model // heads
        make = lambda kind, i: Parameter(
            xavier_uniform((d_model, d_key), rng), f"{name}.{kind}.head{i}"
        )
        return AttentionParams(
            wq=[make("wq", i) for i in range(heads)],
            wk=[make("wk", i) for i in range(heads)],
            wv=[make("wv", i) for i in range(heads)],
            wo=Parameter(xavier_uniform((heads * d_key, d_model), rng), f"{name}.wo"),
        )

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def d_key(self) -> int:
        return self.wq[0].shape[1]

    def parameters(self) -> list[Parameter]:
        return [*self.wq, *self.wk, *self.wv, self.wo]


@dataclass
class AttentionRecord:
    """Post-softmax attention weights captured during one forward pass.

    ``scores`` is (heads, queries, keys); ``key_labels`` optionally names each
    key token (e.g. "local:p0:t3" or "global:p2:t7"). Records are detached
    from the tape and never feed back into gradients.
    """

    scores: np.ndarray
    key_labels: list[str] | None = None

    def __post_init__(self) -> None:
        row_sums = self.scores.sum(axis=-1)
        if not np.allclose(row_sums, 1.0, atol=1e-6):
            raise ShapeError("attention record rows must sum to 1")
        if self.key_labels is not None and len(self.key_labels) != self.scores.shape[-1]:
            raise ShapeError(
                f"{len(self.key_labels)} labels for {self.scores.shape[-1]} keys"
            )


@dataclass
class EncoderLayerParams:
    """One transformer layer: attention, feed-forward, and two layer norms."""

    attn: AttentionParams
    ff1: LinearParams
    ff2: LinearParams
    norm1: LayerNormParams
    norm2: LayerNormParams

    @staticmethod
    def init(
        d_model: int, d_ff: int, heads: int, rng: np.random.Generator, name: str
    ) -> "EncoderLayerParams":
        return EncoderLayerParams(
            attn=AttentionParams.init(d_model, heads, rng, f"{name}.attn"),
            ff1=LinearParams.init(d_model, d_ff, rng, f"{name}.ff1"),
            ff2=LinearParams.init(d_ff, d_model, rng, f"{name}.ff2"),
            norm1=LayerNormParams.init(d_model, f"{name}.norm1"),
            norm2=LayerNormParams.init(d_model, f"{name}.norm2"),
        )

    def parameters(self) -> list[Parameter]:
        return [
            *self.attn.parameters(),
            *self.ff1.parameters(),
            *self.ff2.parameters(),
            *self.norm1.parameters(),
            *self.norm2.parameters(),
        ]


def multi_head_attention(
    query_tokens: Tensor,
    key_value_tokens: Tensor,
    params: AttentionParams,
    key_labels: list[str] | None = None,
    capture_record: bool = True,
) -> tuple[Tensor, AttentionRecord | None]:
    """Scaled dot-product attention over all heads.

    Per head: project queries/keys/values, scale logits by 1/sqrt(d_key),
    softmax over the key axis, and mix the values; head outputs are
    concatenated and sent through the output projection.

    Inputs are (queries, d_model) / (keys, d_model) matrices, or 3-d stacks
    (batch, tokens, d_model) whose slabs attend independently; records are
    captured on the 2-d path only.
    """
    if query_tokens.ndim != key_value_tokens.ndim or query_tokens.ndim not in (2, 3):
        raise ShapeError(
            f"attention expects matching 2-d or 3-d token stacks, got "
            f"{query_tokens.shape} and {key_value_tokens.shape}"
        )
    d_model = params.wq[0].shape[0]
    if query_tokens.shape[-1] != d_model or key_value_tokens.shape[-1] != d_model:
        raise ShapeError(
            f"token dim must be {d_model}, got query {query_tokens.shape} "
            f"and key/value {key_value_tokens.shape}"
        )
    h, d_key = params.heads, params.d_key
    batched = query_tokens.ndim == 3
    if batched and query_tokens.shape[0] != key_value_tokens.shape[0]:
        raise ShapeError(
            f"batch dims disagree: {query_tokens.shape} vs {key_value_tokens.shape}"
        )
    m, s = query_tokens.shape[-2], key_value_tokens.shape[-2]
    batch = query_tokens.shape[0] if batched else 1

    def project(tokens: Tensor, weights: list[Parameter]) -> Tensor:
        # (..., tokens, d_model) -> (batch * h, tokens, d_key)
        n_tokens = tokens.shape[-2]
        flat = reshape(tokens, -1, d_model) if batched else tokens
        mixed = matmul(flat, concat(weights, axis=1))
        if batched:
            split = reshape(mixed, batch, n_tokens, h, d_key)
            return reshape(transpose(split, 0, 2, 1, 3), batch * h, n_tokens, d_key)
        return transpose(reshape(mixed, n_tokens, h, d_key), 1, 0, 2)

    q = project(query_tokens, params.wq)
    k = project(key_value_tokens, params.wk)
    v = project(key_value_tokens, params.wv)
    logits = scale(matmul(q, transpose(k, 0, 2, 1)), 1.0 / np.sqrt(d_key))
    weights = softmax_last(logits)  # (batch * h, m, s)
    context = matmul(weights, v)  # (batch * h, m, d_key)
    if batched:
        merged = reshape(transpose(reshape(context, batch, h, m, d_key), 0, 2, 1, 3), -1, h * d_key)
        out = reshape(matmul(merged, params.wo), batch, m, d_model)
    else:
        merged = reshape(transpose(context, 1, 0, 2), m, h * d_key)
        out = matmul(merged, params.wo)
    record = None
    if capture_record and not batched:
        record = AttentionRecord(scores=weights.data.copy(), key_labels=key_labels)
    return out, record


def _feed_forward(x: Tensor, p: EncoderLayerParams) -> Tensor:
    return p.ff2.apply(relu(p.ff1.apply(x)))


def encoder_layer(
    tokens: Tensor,
    params: EncoderLayerParams,
    record_sink: list[AttentionRecord] | None = None,
) -> Tensor:
    """Self-attention encoder layer; output shape equals input shape.

    Accepts a (tokens, d_model) matrix or an independent (batch, tokens,
    d_model) stack; self-attention records are captured only when a sink is
    passed (2-d inputs).
    """
    attn_out, record = multi_head_attention(
        tokens, tokens, params.attn, capture_record=record_sink is not None
    )
    if record_sink is not None and record is not None:
        record_sink.append(record)
    x = params.norm1.apply(tokens + attn_out)
    return params.norm2.apply(x + _feed_forward(x, params))


def decoder_layer(
    query: Tensor,
    memory: Tensor,
    params: EncoderLayerParams,
    key_labels: list[str] | None = None,
) -> tuple[Tensor, AttentionRecord]:
    """Cross-attention decoder layer over a single query token.

    The single-token query is structural: the decoder cannot copy an input
    sequence, so all sequential structure must come from attending over the
    encoded memory.
    """
    if query.ndim != 2 or query.shape[0] != 1:
        raise ShapeError(
            f"decoder query must be a single token of shape (1, d_model), got {query.shape}"
        )
    if memory.ndim != 2 or memory.shape[0] < 1:
        raise ShapeError(f"decoder memory must be non-empty 2-d, got {memory.shape}")
    attn_out, record = multi_head_attention(query, memory, params.attn, key_labels=key_labels)
    x = params.norm1.apply(query + attn_out)
    out = params.norm2.apply(x + _feed_forward(x, params))
    return out, record
