"""Losses, progressive-length samples, the adversarial training loop, and
autoregressive inference.

The predictor trains on a least-squares reconstruction of offset sequences
plus a least-squares adversarial term; the discriminator trains one step per
predictor step on detached fake windows against real windows. Training samples
are built with progressively longer ground-truth histories (k, 2k, 3k, ...)
so that inference can keep the full concatenated history when predicting
chunk after chunk.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, mean_scalars, no_grad, scale, select, square, stack
from .checkpoint import save_checkpoint
from .data import Scene
from .errors import ConfigError, DataError, ShapeError, TrainingError
from .model import (
    DiscriminatorParams,
    EncodedContext,
    GlobalContext,
    ModelConfig,
    PredictionChunk,
    PredictorParams,
    decode_person,
    discriminate_batch,
    global_encode_batch,
    local_encode_batch,
    predict_scene,
)
from .optim import AdamState, adam_step, zero_grads
from .seeding import stream_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters and the sampling protocol."""

    lr_predictor: float = 3e-4
    lr_discriminator: float = 5e-4
    lambda_rec: float = 1.0
    lambda_adv: float = 5e-4
    batch_size: int = 32  # drop to 8 for large-crowd scenes
    max_steps: int = 2000
    seed: int = 0
    history_steps: int = 15  # observed window k; histories grow in multiples of it
    checkpoint_interval: int = 500
    train_discriminator: bool = True
    scheduled_sampling: bool = False  # model-predicted queries for long-history samples

    def __post_init__(self) -> None:
        if self.lr_predictor <= 0 or self.lr_discriminator <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lambda_rec <= 0:
            raise ConfigError(f"lambda_rec must be > 0, got {self.lambda_rec}")
        if self.lambda_adv < 0:
            raise ConfigError(f"lambda_adv must be >= 0, got {self.lambda_adv}")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and max_steps >= 0")
        if self.history_steps < 2:
            raise ConfigError(f"history_steps must be >= 2, got {self.history_steps}")


@dataclass
class TrainSample:
    """One teacher-forced sample: a history prefix and the window after it."""

    history: np.ndarray  # (persons, history_len, pose_dim) ground truth
    query_poses: np.ndarray  # (persons, pose_dim) pose at the last history step
    target_offsets: np.ndarray  # (persons, out_steps, pose_dim)
    target_window: np.ndarray  # (persons, out_steps, pose_dim) absolute poses
    scene_id: str = ""

    @property
    def history_len(self) -> int:
        return self.history.shape[1]

    @property
    def n_persons(self) -> int:
        return self.history.shape[0]


# -- losses ---------------------------------------------------------------


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def loss_rec(pred_offsets, true_offsets) -> Tensor:
    """Mean over time steps of the squared L2 norm of the offset error."""
    pred = _coerce(pred_offsets)
    true = _coerce(true_offsets)
    if pred.shape != true.shape:
        raise ShapeError(f"offset shapes differ: {pred.shape} vs {true.shape}")
    return square(pred - true).sum(axis=-1).mean()


def loss_adv(scores) -> Tensor:
    """Least-squares generator loss: mean squared deviation of scores from 1."""
    scores = _coerce(scores)
    return square(scores - 1.0).mean()


def loss_disc(fake_scores, real_scores) -> Tensor:
    """Least-squares discriminator loss: fakes toward 0, reals toward 1."""
    fake = _coerce(fake_scores)
    real = _coerce(real_scores)
    return square(fake).mean() + square(real - 1.0).mean()


# -- sample construction ----------------------------------------------------


def make_samples(scene: Scene, config: ModelConfig, history_steps: int) -> list[TrainSample]:
    """Progressive-length samples from one scene.

    One sample per prefix length in {k, 2k, 3k, ...} that still leaves
    ``out_steps`` future steps; histories and queries are ground truth
    (teacher forcing). Returns an empty list (with a warning) if the scene is
    too short for even the first prefix.
    """
    k, out = history_steps, config.out_steps
    arr = scene.flat_stacked()  # (persons, steps, pose_dim)
    total = arr.shape[1]
    samples: list[TrainSample] = []
    prefix = k
    while prefix + out <= total:
        window_with_query = arr[:, prefix - 1 : prefix + out]
        samples.append(
            TrainSample(
                history=arr[:, :prefix].copy(),
                query_poses=arr[:, prefix - 1].copy(),
                target_offsets=np.diff(window_with_query, axis=1),
                target_window=arr[:, prefix : prefix + out].copy(),
                scene_id=scene.scene_id,
            )
        )
        prefix += k
    if not samples:
        log.warning(
            "scene %s has %d steps, too short for history %d + horizon %d",
            scene.scene_id, total, k, out,
        )
    return samples


# -- training step ----------------------------------------------------------


def _predicted_queries(
    sample: TrainSample, predictor: PredictorParams, config: ModelConfig, history_steps: int
) -> np.ndarray:
    """Queries for scheduled sampling: the model's own prediction of the pose
    at the end of the sample's history (encoder inputs stay ground truth)."""
    span = sample.history_len - history_steps
    if span <= 0 or span % config.out_steps != 0:
        return sample.query_poses
    result = predict_autoregressive(
        sample.history[:, :history_steps], span // config.out_steps, predictor, config
    )
    return np.stack([m[-1] for m in result.motions])


def _batched_contexts(
    batch: Sequence[TrainSample], predictor: PredictorParams, config: ModelConfig
) -> tuple[dict, dict]:
    """Local features per (sample, person) and a global context per sample.

    Encodes are grouped by shape and run as independent stacks; per-slab math
    matches the unbatched encoders.
    """
    local_groups: dict[int, list[tuple[int, int]]] = {}
    for si, sample in enumerate(batch):
        for n in range(sample.n_persons):
            local_groups.setdefault(sample.history_len, []).append((si, n))
    local_feats: dict[tuple[int, int], Tensor] = {}
    for items in local_groups.values():
        stacked = np.stack([batch[si].history[n] for si, n in items])
        encoded = local_encode_batch(stacked, predictor, config)
        for j, key in enumerate(items):
            local_feats[key] = select(encoded, j)

    global_groups: dict[tuple[int, int], list[int]] = {}
    for si, sample in enumerate(batch):
        global_groups.setdefault((sample.n_persons, sample.history_len), []).append(si)
    global_ctxs: dict[int, GlobalContext] = {}
    for (n_persons, steps), sample_ids in global_groups.items():
        stacked = np.stack([batch[si].history for si in sample_ids])
        encoded = global_encode_batch(stacked, predictor, config)
        labels = [(n, t) for n in range(n_persons) for t in range(steps)]
        for j, si in enumerate(sample_ids):
            global_ctxs[si] = GlobalContext(
                tokens=select(encoded, j), labels=labels,
                n_persons=n_persons, n_steps=steps,
            )
    return local_feats, global_ctxs


def predictor_loss(
    batch: Sequence[TrainSample],
    predictor: PredictorParams,
    discriminator: DiscriminatorParams,
    config: ModelConfig,
    train_config: TrainConfig,
) -> tuple[Tensor, Tensor, Tensor, list[np.ndarray]]:
    """Forward pass for one predictor update.

    Returns (weighted total, reconstruction, adversarial) loss tensors plus
    the detached fake windows for the discriminator's own step. The
    adversarial term runs through the discriminator's forward pass.
    """
    if not batch:
        raise DataError("predictor_loss requires a non-empty batch")
    tc = train_config
    queries_per_sample = []
    for sample in batch:
        queries = sample.query_poses
        if tc.scheduled_sampling and sample.history_len > tc.history_steps:
            queries = _predicted_queries(sample, predictor, config, tc.history_steps)
        queries_per_sample.append(queries)

    local_feats, global_ctxs = _batched_contexts(batch, predictor, config)
    rec_terms: list[Tensor] = []
    fake_tensors: list[Tensor] = []
    for si, sample in enumerate(batch):
        for n in range(sample.n_persons):
            context = EncodedContext(local=local_feats[(si, n)], global_ctx=global_ctxs[si])
            chunk = decode_person(
                context, queries_per_sample[si][n], sample.history,
                predictor, config, person_index=n,
            )
            rec_terms.append(loss_rec(chunk.offsets, sample.target_offsets[n]))
            fake_tensors.append(chunk.poses)

    l_rec = mean_scalars(rec_terms)
    if tc.lambda_adv != 0.0:
        scores = discriminate_batch(stack(fake_tensors), discriminator, config)
        l_adv = loss_adv(scores)  # windows share a length, so the flat mean
        # equals the mean of per-window adversarial losses
    else:
        l_adv = Tensor(0.0)
    l_pred = scale(l_rec, tc.lambda_rec) + scale(l_adv, tc.lambda_adv)
    fake_windows = [t.data.copy() for t in fake_tensors]
    return l_pred, l_rec, l_adv, fake_windows


def discriminator_loss(
    fake_windows: Sequence[np.ndarray],
    real_windows: Sequence[np.ndarray],
    discriminator: DiscriminatorParams,
    config: ModelConfig,
) -> Tensor:
    """Discriminator objective on equal-length fake/real windows (reals are
    cycled to pair one per fake)."""
    if not fake_windows or not real_windows:
        raise DataError("discriminator_loss requires fake and real windows")
    fakes = np.stack([np.asarray(w, dtype=np.float64) for w in fake_windows])
    reals = np.stack(
        [
            np.asarray(real_windows[i % len(real_windows)], dtype=np.float64)
            for i in range(len(fake_windows))
        ]
    )
    return loss_disc(
        discriminate_batch(fakes, discriminator, config),
        discriminate_batch(reals, discriminator, config),
    )


def train_step(
    batch: Sequence[TrainSample],
    predictor: PredictorParams,
    discriminator: DiscriminatorParams,
    opt_predictor: AdamState,
    opt_discriminator: AdamState,
    config: ModelConfig,
    train_config: TrainConfig,
    real_windows: Sequence[np.ndarray] | None = None,
) -> dict[str, float]:
    """One joint update: predictor step, then discriminator step.

    The adversarial gradient reaches the predictor through the
    discriminator's forward pass (whose own accumulated gradients are
    discarded before its update); the discriminator trains on detached fake
    windows paired with real windows (the batch's ground-truth targets unless
    ``real_windows`` supplies corpus slices).
    """
    tc = train_config
    l_pred, l_rec, l_adv, fake_windows = predictor_loss(
        batch, predictor, discriminator, config, tc
    )
    metrics = {
        "L_P": l_pred.item(),
        "L_rec": l_rec.item(),
        "L_adv": l_adv.item(),
        "L_D": math.nan,
    }
    if not math.isfinite(metrics["L_P"]):
        raise TrainingError(
            f"non-finite predictor loss: L_rec={metrics['L_rec']}, L_adv={metrics['L_adv']}"
        )
    assert metrics["L_P"] == tc.lambda_rec * metrics["L_rec"] + tc.lambda_adv * metrics["L_adv"]
    l_pred.backward()
    adam_step(predictor.parameters(), opt_predictor)
    # the adversarial term leaked gradients into the (frozen-for-this-step)
    # discriminator; drop them before its own update
    zero_grads(discriminator.parameters())

    if tc.train_discriminator:
        if real_windows is None:
            real_windows = [s.target_window[n] for s in batch for n in range(s.n_persons)]
        l_disc = discriminator_loss(fake_windows, real_windows, discriminator, config)
        metrics["L_D"] = l_disc.item()
        if not math.isfinite(metrics["L_D"]):
            raise TrainingError(f"non-finite discriminator loss: L_D={metrics['L_D']}")
        l_disc.backward()
        adam_step(discriminator.parameters(), opt_discriminator)
    return metrics


def discriminator_step(
    fake_windows: Sequence[np.ndarray],
    real_windows: Sequence[np.ndarray],
    discriminator: DiscriminatorParams,
    opt: AdamState,
    config: ModelConfig,
) -> float:
    """One discriminator-only update on paired fake/real windows."""
    total = discriminator_loss(fake_windows, real_windows, discriminator, config)
    value = total.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite discriminator loss: {value}")
    total.backward()
    adam_step(discriminator.parameters(), opt)
    return value


# -- autoregressive inference ------------------------------------------------


@dataclass
class AutoregressiveResult:
    """Chunked rollout: per-person motion plus per-chunk prediction records."""

    motions: list[np.ndarray]  # per person, (chunks * out_steps, pose_dim)
    chunks: list[list[PredictionChunk]]  # [chunk][person]
    history_lengths: list[int]  # encoder input length used for each chunk


def predict_autoregressive(
    scene,
    horizon_chunks: int,
    params: PredictorParams,
    config: ModelConfig,
) -> AutoregressiveResult:
    """Roll the predictor forward chunk by chunk.

    Every chunk re-encodes the full concatenated history (observed steps plus
    everything predicted so far) and queries with the last pose of that
    history, so early interactions stay visible at long horizons. Ground
    truth beyond the given scene is never consulted.
    """
    if horizon_chunks < 1:
        raise ConfigError(f"horizon_chunks must be >= 1, got {horizon_chunks}")
    from .model import _as_scene_array  # shared coercion/validation

    history = _as_scene_array(scene, config.pose_dim)
    chunk_lists: list[list[PredictionChunk]] = []
    history_lengths: list[int] = []
    for _ in range(horizon_chunks):
        history_lengths.append(history.shape[1])
        chunks = predict_scene(history, params, config)
        chunk_lists.append(chunks)
        predicted = np.stack([c.poses.data for c in chunks])  # (persons, out, pose_dim)
        history = np.concatenate([history, predicted], axis=1)
    motions = [
        np.concatenate([chunk_lists[c][n].poses.data for c in range(horizon_chunks)])
        for n in range(history.shape[0])
    ]
    return AutoregressiveResult(
        motions=motions, chunks=chunk_lists, history_lengths=history_lengths
    )


# -- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    steps: int
    checkpoint_path: Path
    metrics_path: Path
    final_metrics: dict[str, float] = field(default_factory=dict)


def _sample_real_windows(
    scenes: Sequence[Scene], count: int, out_steps: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Uniform out_steps-length single-person slices from the corpus."""
    windows = []
    for _ in range(count):
        scene = scenes[int(rng.integers(len(scenes)))]
        arr = scene.flat_stacked()
        person = int(rng.integers(arr.shape[0]))
        start = int(rng.integers(arr.shape[1] - out_steps + 1))
        windows.append(arr[person, start : start + out_steps].copy())
    return windows


def train_loop(
    scenes: Sequence[Scene],
    config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path,
    predictor: PredictorParams | None = None,
    discriminator: DiscriminatorParams | None = None,
    opt_predictor: AdamState | None = None,
    opt_discriminator: AdamState | None = None,
    start_step: int = 0,
) -> TrainResult:
    """Train to ``max_steps``, logging per-step losses as CSV and writing
    periodic plus final checkpoints. Pass loaded checkpoint state to resume;
    the step counter continues from ``start_step``."""
    tc = train_config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool: list[TrainSample] = []
    for scene in scenes:
        pool.extend(make_samples(scene, config, tc.history_steps))
    if not pool:
        raise DataError(
            f"no usable training samples: scenes need at least "
            f"{tc.history_steps + config.out_steps} steps"
        )

    init_rng = stream_rng(tc.seed, "init")
    if predictor is None:
        predictor = PredictorParams.init(config, init_rng)
    if discriminator is None:
        discriminator = DiscriminatorParams.init(config, init_rng)
    if opt_predictor is None:
        opt_predictor = AdamState(lr=tc.lr_predictor)
    if opt_discriminator is None:
        opt_discriminator = AdamState(lr=tc.lr_discriminator)

    sample_rng = stream_rng(tc.seed, "sampling")
    metrics_path = out_dir / "metrics.csv"
    checkpoint_path = out_dir / "checkpoint-final.ckpt"
    metrics: dict[str, float] = {}
    last_step = start_step
    mode = "a" if start_step > 0 and metrics_path.exists() else "w"
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "L_P", "L_rec", "L_adv", "L_D"])
        for step in range(start_step + 1, tc.max_steps + 1):
            picks = sample_rng.integers(0, len(pool), size=tc.batch_size)
            batch = [pool[int(i)] for i in picks]
            n_fakes = sum(s.n_persons for s in batch)
            reals = _sample_real_windows(scenes, n_fakes, config.out_steps, sample_rng)
            metrics = train_step(
                batch,
                predictor,
                discriminator,
                opt_predictor,
                opt_discriminator,
                config,
                tc,
                real_windows=reals,
            )
            writer.writerow(
                [step, metrics["L_P"], metrics["L_rec"], metrics["L_adv"], metrics["L_D"]]
            )
            last_step = step
            if step % max(1, tc.checkpoint_interval) == 0 and step < tc.max_steps:
                save_checkpoint(
                    out_dir / f"checkpoint-step{step}.ckpt",
                    predictor, discriminator, config, step,
                    opt_predictor, opt_discriminator,
                )
            if step % 100 == 0 or step == tc.max_steps:
                log.info("step %d: L_P=%.6f L_D=%.6f", step, metrics["L_P"], metrics["L_D"])
    save_checkpoint(
        checkpoint_path, predictor, discriminator, config,
        last_step, opt_predictor, opt_discriminator,
    )
    return TrainResult(
        steps=last_step,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        final_metrics=metrics,
    )
