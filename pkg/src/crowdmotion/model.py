"""The motion predictor and discriminator.

The predictor has three parts sharing one width: a per-person local encoder
over offset sequences in the DCT domain, a scene-wide global encoder over all
persons' absolute-pose tokens (computed once per scene), and a decoder that
attends from a single embedded query pose over the concatenated memory. The
decoder head emits DCT coefficients of an offset sequence; inverse-DCT plus
integration from the query pose yields absolute future poses.

The discriminator mirrors the local encoder over absolute poses and scores
each time step of a motion window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import functools

from .attention import (
    AttentionRecord,
    EncoderLayerParams,
    LinearParams,
    decoder_layer,
    encoder_layer,
)
from .autodiff import Parameter, Tensor, concat, cumsum, no_grad, relu, reshape
from .data import MotionSequence, Scene
from .errors import ConfigError, DataError, ShapeError
from .transforms import (
    dct_forward,
    dct_forward_stacked,
    dct_inverse,
    spatial_pe,
    temporal_pe,
)


@functools.lru_cache(maxsize=64)
def _pe_table(length: int, dim: int) -> np.ndarray:
    table = temporal_pe(length, dim)
    table.setflags(write=False)
    return table


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the skeleton layout rides along."""

    joints: int = 15
    out_steps: int = 15  # poses emitted per decoder pass
    layers: int = 3
    heads: int = 8
    d_model: int = 128
    d_ff: int = 256
    frame_rate: float = 15.0
    root_joint: int = 0

    def __post_init__(self) -> None:
        if self.joints < 1:
            raise ConfigError(f"joints must be >= 1, got {self.joints}")
        if self.out_steps < 2:
            raise ConfigError(f"out_steps must be >= 2, got {self.out_steps}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must be divisible by heads {self.heads}"
            )
        if self.frame_rate <= 0:
            raise ConfigError(f"frame_rate must be positive, got {self.frame_rate}")
        if not 0 <= self.root_joint < self.joints:
            raise ConfigError(f"root_joint {self.root_joint} outside 0..{self.joints - 1}")

    @property
    def pose_dim(self) -> int:
        return 3 * self.joints


def _layer_stack(
    config: ModelConfig, rng: np.random.Generator, name: str
) -> list[EncoderLayerParams]:
    return [
        EncoderLayerParams.init(
            config.d_model, config.d_ff, config.heads, rng, f"{name}.layer{i}"
        )
        for i in range(config.layers)
    ]


@dataclass
class PredictorParams:
    """All trainable weights of the predictor."""

    local_embed: LinearParams
    local_layers: list[EncoderLayerParams]
    global_embed: LinearParams
    global_layers: list[EncoderLayerParams]
    query_embed: LinearParams
    decoder_layers: list[EncoderLayerParams]
    head1: LinearParams
    head2: LinearParams

    @staticmethod
    def init(config: ModelConfig, rng: np.random.Generator) -> "PredictorParams":
        d, pd = config.d_model, config.pose_dim
        return PredictorParams(
            local_embed=LinearParams.init(pd, d, rng, "local_embed"),
            local_layers=_layer_stack(config, rng, "local"),
            global_embed=LinearParams.init(pd, d, rng, "global_embed"),
            global_layers=_layer_stack(config, rng, "global"),
            query_embed=LinearParams.init(pd, d, rng, "query_embed"),
            decoder_layers=_layer_stack(config, rng, "decoder"),
            head1=LinearParams.init(d, config.d_ff, rng, "head1"),
            head2=LinearParams.init(config.d_ff, config.out_steps * pd, rng, "head2"),
        )

    def parameters(self) -> list[Parameter]:
        out = [*self.local_embed.parameters()]
        for layer in self.local_layers:
            out.extend(layer.parameters())
        out.extend(self.global_embed.parameters())
        for layer in self.global_layers:
            out.extend(layer.parameters())
        out.extend(self.query_embed.parameters())
        for layer in self.decoder_layers:
            out.extend(layer.parameters())
        out.extend(self.head1.parameters())
        out.extend(self.head2.parameters())
        return out


@dataclass
class DiscriminatorParams:
    """Encoder stack shaped like the local encoder plus a per-token scorer."""

    embed: LinearParams
    layers: list[EncoderLayerParams]
    head1: LinearParams
    head2: LinearParams

    @staticmethod
    def init(config: ModelConfig, rng: np.random.Generator) -> "DiscriminatorParams":
        d = config.d_model
        return DiscriminatorParams(
            embed=LinearParams.init(config.pose_dim, d, rng, "embed"),
            layers=_layer_stack(config, rng, "enc"),
            head1=LinearParams.init(d, config.d_ff, rng, "head1"),
            head2=LinearParams.init(config.d_ff, 1, rng, "head2"),
        )

    def parameters(self) -> list[Parameter]:
        out = [*self.embed.parameters()]
        for layer in self.layers:
            out.extend(layer.parameters())
        out.extend(self.head1.parameters())
        out.extend(self.head2.parameters())
        return out


@dataclass
class GlobalContext:
    """Scene-wide encoder output: one token per (person, step), with labels."""

    tokens: Tensor  # (n_persons * n_steps, d_model)
    labels: list[tuple[int, int]]  # (person, step) per token
    n_persons: int
    n_steps: int


@dataclass
class EncodedContext:
    """Per-person local features paired with the shared global context."""

    local: Tensor  # (n_steps, d_model)
    global_ctx: GlobalContext


@dataclass
class PredictionChunk:
    """One decoder pass: future offsets, integrated poses, attention records.

    ``poses[0]`` equals the query pose plus ``offsets[0]``; consecutive poses
    differ by exactly the stated offsets (cumulative-sum integration).
    """

    offsets: Tensor  # (out_steps, pose_dim)
    poses: Tensor  # (out_steps, pose_dim) absolute
    attention: list[AttentionRecord]
    query_pose: np.ndarray = field(repr=False, default=None)


def _as_flat_history(seq, pose_dim: int) -> np.ndarray:
    if isinstance(seq, MotionSequence):
        flat = seq.flat()
    else:
        flat = np.asarray(seq, dtype=np.float64)
    if flat.ndim != 2 or flat.shape[1] != pose_dim:
        raise DataError(
            f"history must be (steps, {pose_dim}) for this config, got {flat.shape}"
        )
    return flat


def _as_scene_array(scene, pose_dim: int) -> np.ndarray:
    if isinstance(scene, Scene):
        arr = scene.flat_stacked()
    else:
        arr = np.asarray(scene, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != pose_dim:
        raise DataError(
            f"scene history must be (persons, steps, {pose_dim}), got {arr.shape}"
        )
    return arr


def local_encode(seq, params: PredictorParams, config: ModelConfig) -> Tensor:
    """Encode one person's history into per-step local features.

    The k poses become k offset tokens (a zero offset is prepended so the
    token count matches the step count), transformed to the DCT domain,
    linearly embedded, tagged with the temporal encoding, and passed through
    the encoder stack. Offsets erase absolute position, so the result is
    translation-invariant.
    """
    flat = _as_flat_history(seq, config.pose_dim)
    steps = flat.shape[0]
    if steps < 2:
        raise DataError(f"local encoding needs at least 2 steps, got {steps}")
    offsets = np.zeros_like(flat)
    offsets[1:] = flat[1:] - flat[:-1]
    coeffs = dct_forward(offsets)
    tokens = params.local_embed.apply(Tensor(coeffs))
    tokens = tokens + _pe_table(steps, config.d_model)
    for layer in params.local_layers:
        tokens = encoder_layer(tokens, layer)
    return tokens


def local_encode_batch(
    histories: np.ndarray, params: PredictorParams, config: ModelConfig
) -> Tensor:
    """Local-encode several equal-length histories as one independent stack.

    Same math as :func:`local_encode` per slab, batched for throughput;
    returns (batch, steps, d_model).
    """
    histories = np.asarray(histories, dtype=np.float64)
    if histories.ndim != 3 or histories.shape[2] != config.pose_dim:
        raise DataError(
            f"histories must be (batch, steps, {config.pose_dim}), got {histories.shape}"
        )
    steps = histories.shape[1]
    if steps < 2:
        raise DataError(f"local encoding needs at least 2 steps, got {steps}")
    offsets = np.zeros_like(histories)
    offsets[:, 1:] = histories[:, 1:] - histories[:, :-1]
    coeffs = dct_forward_stacked(offsets)
    tokens = params.local_embed.apply(Tensor(coeffs))
    tokens = tokens + _pe_table(steps, config.d_model)
    for layer in params.local_layers:
        tokens = encoder_layer(tokens, layer)
    return tokens


def global_encode(scene, params: PredictorParams, config: ModelConfig) -> GlobalContext:
    """Encode all persons' absolute poses into one shared token set.

    Tokens keep absolute coordinates (no offsets, no DCT); the temporal
    encoding restarts per person block and there is no person-index
    embedding, so the encoder is equivariant to person order and the person
    count is unbounded at inference. Runs once per scene.
    """
    arr = _as_scene_array(scene, config.pose_dim)
    n_persons, steps, pose_dim = arr.shape
    if steps < 1:
        raise DataError("global encoding needs at least 1 step")
    tokens = params.global_embed.apply(Tensor(arr.reshape(n_persons * steps, pose_dim)))
    tokens = tokens + np.tile(_pe_table(steps, config.d_model), (n_persons, 1))
    for layer in params.global_layers:
        tokens = encoder_layer(tokens, layer)
    labels = [(n, t) for n in range(n_persons) for t in range(steps)]
    return GlobalContext(tokens=tokens, labels=labels, n_persons=n_persons, n_steps=steps)


def global_encode_batch(
    histories: np.ndarray, params: PredictorParams, config: ModelConfig
) -> Tensor:
    """Globally encode several same-shape scenes as one independent stack.

    Same math as :func:`global_encode` per slab; returns
    (batch, persons * steps, d_model).
    """
    histories = np.asarray(histories, dtype=np.float64)
    if histories.ndim != 4 or histories.shape[3] != config.pose_dim:
        raise DataError(
            f"histories must be (batch, persons, steps, {config.pose_dim}), "
            f"got {histories.shape}"
        )
    b, n_persons, steps, pose_dim = histories.shape
    tokens = params.global_embed.apply(Tensor(histories.reshape(b, n_persons * steps, pose_dim)))
    tokens = tokens + np.tile(_pe_table(steps, config.d_model), (n_persons, 1))
    for layer in params.global_layers:
        tokens = encoder_layer(tokens, layer)
    return tokens


@functools.lru_cache(maxsize=512)
def _memory_labels(steps: int, n_persons: int, person_index: int | None) -> tuple[str, ...]:
    local_tag = f"local:p{person_index}" if person_index is not None else "local"
    local = tuple(f"{local_tag}:t{t}" for t in range(steps))
    glob = tuple(
        f"global:p{n}:t{t}" for n in range(n_persons) for t in range(steps)
    )
    return local + glob


def decode_person(
    context: EncodedContext,
    query_pose: np.ndarray,
    all_poses,
    params: PredictorParams,
    config: ModelConfig,
    person_index: int | None = None,
) -> PredictionChunk:
    """Predict one person's next ``out_steps`` poses from the encoded context.

    The query-relative spatial encoding is broadcast-added onto every channel
    of each global token; the decoder then cross-attends from the embedded
    query pose over [local tokens, spatially-tagged global tokens]. Spatial
    encoding values derive from raw input poses and carry no gradient.
    """
    arr = _as_scene_array(all_poses, config.pose_dim)
    n_persons, steps, _ = arr.shape
    gctx = context.global_ctx
    if (n_persons, steps) != (gctx.n_persons, gctx.n_steps):
        raise DataError(
            f"context was built for {gctx.n_persons} persons x {gctx.n_steps} steps, "
            f"got poses for {n_persons} x {steps}"
        )
    if context.local.shape[0] != steps:
        raise DataError(
            f"local features cover {context.local.shape[0]} steps, scene has {steps}"
        )
    query_pose = np.asarray(query_pose, dtype=np.float64).reshape(-1)
    if query_pose.shape[0] != config.pose_dim:
        raise DataError(
            f"query pose must have {config.pose_dim} values, got {query_pose.shape[0]}"
        )

    spe = spatial_pe(arr, query_pose)
    tagged = gctx.tokens + Tensor(spe.values.reshape(-1, 1))
    memory = concat([context.local, tagged], axis=0)
    labels = list(_memory_labels(steps, gctx.n_persons, person_index))

    q = params.query_embed.apply(Tensor(query_pose.reshape(1, -1)))
    records: list[AttentionRecord] = []
    for layer in params.decoder_layers:
        q, record = decoder_layer(q, memory, layer, key_labels=labels)
        records.append(record)

    out = params.head2.apply(relu(params.head1.apply(q)))
    coeffs = reshape(out, config.out_steps, config.pose_dim)
    offsets = dct_inverse(coeffs)
    poses = Tensor(query_pose.reshape(1, -1)) + cumsum(offsets, axis=0)
    return PredictionChunk(
        offsets=offsets, poses=poses, attention=records, query_pose=query_pose.copy()
    )


def predict_scene(scene, params: PredictorParams, config: ModelConfig) -> list[PredictionChunk]:
    """One prediction chunk per person: shared global encoding, then a local
    encode + decode with each person's final observed pose as the query.

    Inference-only (runs without building a tape).
    """
    arr = _as_scene_array(scene, config.pose_dim)
    with no_grad():
        gctx = global_encode(arr, params, config)
        chunks = []
        for n in range(arr.shape[0]):
            context = EncodedContext(local=local_encode(arr[n], params, config), global_ctx=gctx)
            chunks.append(
                decode_person(context, arr[n, -1], arr, params, config, person_index=n)
            )
    return chunks


def discriminate(motion, params: DiscriminatorParams, config: ModelConfig) -> Tensor:
    """Score each step of an absolute-pose motion window (1 = real-looking).

    Mirrors the local encoder (DCT along time, embed, temporal encoding,
    encoder stack) followed by a two-layer per-token head; returns one scalar
    per input step.
    """
    if not isinstance(motion, Tensor):
        motion = Tensor(np.asarray(motion, dtype=np.float64))
    if motion.ndim != 2 or motion.shape[1] != config.pose_dim:
        raise ShapeError(
            f"motion must be (steps, {config.pose_dim}), got {motion.shape}"
        )
    steps = motion.shape[0]
    coeffs = dct_forward(motion)
    tokens = params.embed.apply(coeffs) + _pe_table(steps, config.d_model)
    for layer in params.layers:
        tokens = encoder_layer(tokens, layer)
    scores = params.head2.apply(relu(params.head1.apply(tokens)))
    return reshape(scores, steps)


def discriminate_batch(motions, params: DiscriminatorParams, config: ModelConfig) -> Tensor:
    """Score a stack of equal-length windows; returns (batch, steps).

    Same math as :func:`discriminate` per slab, batched for throughput.
    """
    if not isinstance(motions, Tensor):
        motions = Tensor(np.asarray(motions, dtype=np.float64))
    if motions.ndim != 3 or motions.shape[2] != config.pose_dim:
        raise ShapeError(
            f"motions must be (batch, steps, {config.pose_dim}), got {motions.shape}"
        )
    b, steps, _ = motions.shape
    coeffs = dct_forward_stacked(motions)
    tokens = params.embed.apply(coeffs) + _pe_table(steps, config.d_model)
    for layer in params.layers:
        tokens = encoder_layer(tokens, layer)
    scores = params.head2.apply(relu(params.head1.apply(tokens)))
    return reshape(scores, b, steps)
