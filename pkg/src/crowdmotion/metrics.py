"""Forecast quality metrics, movement histograms, and attention-table export.

All pose errors are in meters; reports also carry the 0.1-meter convention
used by the motion-forecasting literature, clearly labeled. Metric inputs are
flat (steps, 3*joints) arrays matching the predictor's output layout.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Scene
from .errors import DataError, RecordsUnavailableError, ShapeError

HORIZON_SECONDS = (1.0, 2.0, 3.0)


def _reshape_joints(flat: np.ndarray) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 2 or flat.shape[1] % 3 != 0:
        raise ShapeError(f"expected (steps, 3*joints), got {flat.shape}")
    return flat.reshape(flat.shape[0], flat.shape[1] // 3, 3)


def _check_pair(pred: np.ndarray, truth: np.ndarray, horizon_steps: int) -> tuple:
    p = _reshape_joints(pred)
    t = _reshape_joints(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} disagree")
    if not 1 <= horizon_steps <= p.shape[0]:
        raise ShapeError(
            f"horizon {horizon_steps} outside 1..{p.shape[0]} available steps"
        )
    return p[:horizon_steps], t[:horizon_steps]


def mpjpe(pred, truth, horizon_steps: int) -> float:
    """Mean per-joint position error without any alignment."""
    p, t = _check_pair(pred, truth, horizon_steps)
    return float(np.linalg.norm(p - t, axis=2).mean())


def root_error(pred, truth, horizon_steps: int, root_joint: int = 0) -> float:
    """Mean position error of the root joint alone."""
    p, t = _check_pair(pred, truth, horizon_steps)
    if not 0 <= root_joint < p.shape[1]:
        raise ShapeError(f"root joint {root_joint} outside 0..{p.shape[1] - 1}")
    return float(np.linalg.norm(p[:, root_joint] - t[:, root_joint], axis=1).mean())


def pose_error(pred, truth, horizon_steps: int, root_joint: int = 0) -> float:
    """Mean per-joint error after aligning root joints per frame."""
    p, t = _check_pair(pred, truth, horizon_steps)
    if not 0 <= root_joint < p.shape[1]:
        raise ShapeError(f"root joint {root_joint} outside 0..{p.shape[1] - 1}")
    p = p - p[:, root_joint : root_joint + 1]
    t = t - t[:, root_joint : root_joint + 1]
    return float(np.linalg.norm(p - t, axis=2).mean())


def movement_distance(seq) -> float:
    """Mean over joints of the distance between first and last pose."""
    joints = _reshape_joints(seq)
    if joints.shape[0] < 2:
        raise ShapeError(f"movement needs at least 2 steps, got {joints.shape[0]}")
    return float(np.linalg.norm(joints[-1] - joints[0], axis=1).mean())


# -- histograms --------------------------------------------------------------


@dataclass
class MovementHistogram:
    """Counts of per-person start-to-end movement; 50 uniform bins over
    [0, max observed] (documented in the emitted header)."""

    edges: np.ndarray  # (bins + 1,)
    counts: np.ndarray  # (bins,)
    label: str = ""

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def build_movement_histogram(
    distances: Sequence[float], bins: int = 50, label: str = ""
) -> MovementHistogram:
    distances = np.asarray(list(distances), dtype=np.float64)
    if distances.size == 0:
        raise DataError("histogram needs at least one distance")
    top = max(float(distances.max()), 1e-12)
    counts, edges = np.histogram(distances, bins=bins, range=(0.0, top))
    return MovementHistogram(edges=edges, counts=counts, label=label)


def write_histogram_csv(hist: MovementHistogram, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(
            f"# start-to-end movement histogram ({hist.label or 'unlabeled'}); "
            f"{len(hist.counts)} uniform bins over [0, {hist.edges[-1]:.6g}] meters\n"
        )
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for left, right, count in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            writer.writerow([f"{left:.9g}", f"{right:.9g}", int(count)])


# -- corpus reports -----------------------------------------------------------

METRIC_NAMES = ("mpjpe", "root_error", "pose_error")


@dataclass
class SceneMetrics:
    scene_id: str
    values: dict[str, dict[str, float]]  # horizon label -> metric -> meters


@dataclass
class MetricReport:
    """Per-scene and corpus-aggregate errors at the 1/2/3-second horizons."""

    scenes: list[SceneMetrics]
    corpus: dict[str, dict[str, float]]
    horizons: list[str]
    frame_rate: float
    n_persons: int = 0


def _horizon_steps(frame_rate: float, available: int) -> dict[str, int]:
    out = {}
    for seconds in HORIZON_SECONDS:
        steps = int(round(seconds * frame_rate))
        if 1 <= steps <= available:
            out[f"{seconds:g}s"] = steps
    return out


def evaluate_scene_pair(
    pred: Scene, truth: Scene, root_joint: int = 0
) -> tuple[dict[str, dict[str, float]], list[float]]:
    """Per-horizon metrics (person-averaged) plus per-person movements."""
    if pred.n_persons != truth.n_persons or pred.joints != truth.joints:
        raise DataError(
            f"prediction ({pred.n_persons} persons, {pred.joints} joints) and truth "
            f"({truth.n_persons} persons, {truth.joints} joints) disagree"
        )
    if pred.n_steps != truth.n_steps:
        raise DataError(
            f"horizon mismatch: prediction has {pred.n_steps} steps, "
            f"truth has {truth.n_steps}"
        )
    horizons = _horizon_steps(pred.frame_rate, pred.n_steps)
    if not horizons:
        raise DataError(
            f"prediction too short for any horizon at {pred.frame_rate} steps/s"
        )
    p_flat = pred.flat_stacked()
    t_flat = truth.flat_stacked()
    values: dict[str, dict[str, float]] = {}
    for label, steps in horizons.items():
        per_metric = {name: [] for name in METRIC_NAMES}
        for n in range(pred.n_persons):
            per_metric["mpjpe"].append(mpjpe(p_flat[n], t_flat[n], steps))
            per_metric["root_error"].append(
                root_error(p_flat[n], t_flat[n], steps, root_joint)
            )
            per_metric["pose_error"].append(
                pose_error(p_flat[n], t_flat[n], steps, root_joint)
            )
        values[label] = {k: float(np.mean(v)) for k, v in per_metric.items()}
    movements = [movement_distance(p_flat[n]) for n in range(pred.n_persons)]
    return values, movements


def evaluate_corpus(
    pairs: Sequence[tuple[Scene, Scene]], root_joint: int = 0
) -> tuple[MetricReport, MovementHistogram]:
    """Evaluate (prediction, truth) scene pairs; aggregates weight every
    person equally across the corpus."""
    if not pairs:
        raise DataError("no scene pairs to evaluate")
    scenes: list[SceneMetrics] = []
    movements: list[float] = []
    sums: dict[str, dict[str, float]] = {}
    weights: dict[str, int] = {}
    n_persons = 0
    for pred, truth in pairs:
        values, scene_movements = evaluate_scene_pair(pred, truth, root_joint)
        scenes.append(SceneMetrics(scene_id=truth.scene_id or pred.scene_id, values=values))
        movements.extend(scene_movements)
        n_persons += pred.n_persons
        for label, metrics_dict in values.items():
            bucket = sums.setdefault(label, {name: 0.0 for name in METRIC_NAMES})
            for name in METRIC_NAMES:
                bucket[name] += metrics_dict[name] * pred.n_persons
            weights[label] = weights.get(label, 0) + pred.n_persons
    corpus = {
        label: {name: sums[label][name] / weights[label] for name in METRIC_NAMES}
        for label in sums
    }
    horizons = sorted(corpus, key=lambda s: float(s[:-1]))
    report = MetricReport(
        scenes=scenes,
        corpus=corpus,
        horizons=horizons,
        frame_rate=pairs[0][0].frame_rate,
        n_persons=n_persons,
    )
    hist = build_movement_histogram(movements, label="prediction")
    return report, hist


def report_to_dict(report: MetricReport) -> dict:
    def with_units(values: dict[str, dict[str, float]]) -> dict:
        return {
            label: {
                name: {"meters": v, "0.1m": v * 10.0} for name, v in metrics_dict.items()
            }
            for label, metrics_dict in values.items()
        }

    return {
        "horizons": report.horizons,
        "frame_rate": report.frame_rate,
        "persons_evaluated": report.n_persons,
        "corpus": with_units(report.corpus),
        "scenes": [
            {"scene_id": s.scene_id, "metrics": with_units(s.values)} for s in report.scenes
        ],
    }


def write_report(report: MetricReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Emit metrics.json and metrics.csv; the CSV mirrors the 1s/2s/3s column
    layout with one row per (scene, metric, unit)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "metrics.json"
    json_path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "metric", "unit", *report.horizons])
        rows = [("corpus", report.corpus)] + [(s.scene_id, s.values) for s in report.scenes]
        for scene_id, values in rows:
            for name in METRIC_NAMES:
                for unit, factor in (("meters", 1.0), ("0.1m", 10.0)):
                    writer.writerow(
                        [scene_id, name, unit]
                        + [
                            f"{values[h][name] * factor:.9g}" if h in values else ""
                            for h in report.horizons
                        ]
                    )
    return json_path, csv_path


# -- attention export ----------------------------------------------------------


@dataclass
class AttentionTable:
    """Heads-by-memory attention matrix for one queried person, with the local
    and global key segments renormalized separately (display convention)."""

    person_index: int
    matrix: np.ndarray  # (heads, local_keys + global_keys)
    labels: list[str]


@dataclass
class RecordedChunk:
    """Prediction records reloaded from disk (attention only)."""

    attention: list


def build_attention_table(chunk, layer: int, person_index: int) -> AttentionTable:
    """Concatenate one decoder layer's per-head score vectors into a matrix,
    renormalizing the local and global segments independently per head."""
    records = getattr(chunk, "attention", None)
    if not records:
        raise RecordsUnavailableError(
            "prediction carries no attention records; re-run prediction to capture them"
        )
    if not 0 <= layer < len(records):
        raise RecordsUnavailableError(
            f"no record for decoder layer {layer}; {len(records)} layers recorded"
        )
    record = records[layer]
    if record.key_labels is None:
        raise RecordsUnavailableError("attention record carries no key labels")
    scores = record.scores.reshape(record.scores.shape[0], -1).astype(np.float64).copy()
    labels = list(record.key_labels)
    local_idx = [i for i, lbl in enumerate(labels) if lbl.startswith("local")]
    global_idx = [i for i, lbl in enumerate(labels) if lbl.startswith("global")]
    for idx in (local_idx, global_idx):
        if idx:
            segment = scores[:, idx]
            scores[:, idx] = segment / segment.sum(axis=1, keepdims=True)
    return AttentionTable(person_index=person_index, matrix=scores, labels=labels)


def export_attention(
    chunks: Sequence, layer: int, out_dir: str | Path, prefix: str = "attention"
) -> list[Path]:
    """Write one CSV per queried person (label header row, one row per head)
    plus a cosine-similarity table over the persons' global attention."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = [build_attention_table(chunk, layer, n) for n, chunk in enumerate(chunks)]
    paths = []
    for table in tables:
        path = out_dir / f"{prefix}-layer{layer}-p{table.person_index}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["head", *table.labels])
            for head, row in enumerate(table.matrix):
                writer.writerow([head, *[f"{v:.9g}" for v in row]])
        paths.append(path)
    sim = attention_similarity(tables)
    sim_path = out_dir / f"{prefix}-layer{layer}-similarity.csv"
    with open(sim_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["person", *[f"p{t.person_index}" for t in tables]])
        for table, row in zip(tables, sim):
            writer.writerow([f"p{table.person_index}", *[f"{v:.9g}" for v in row]])
    paths.append(sim_path)
    return paths


def attention_similarity(tables: Sequence[AttentionTable]) -> np.ndarray:
    """Pairwise cosine similarity of the persons' global-segment attention."""
    vectors = []
    for table in tables:
        idx = [i for i, lbl in enumerate(table.labels) if lbl.startswith("global")]
        v = table.matrix[:, idx].reshape(-1)
        vectors.append(v / max(np.linalg.norm(v), 1e-12))
    vectors = np.stack(vectors)
    return vectors @ vectors.T


# -- record (de)serialization ----------------------------------------------------


def save_prediction_records(chunk_lists: Sequence[Sequence], path: str | Path) -> None:
    """Serialize attention records of an autoregressive rollout as JSON."""
    payload = {
        "format": "crowdmotion.attn",
        "version": 1,
        "chunks": [
            [
                {
                    "layers": [
                        {"scores": rec.scores.tolist(), "labels": rec.key_labels}
                        for rec in chunk.attention
                    ]
                }
                for chunk in chunks
            ]
            for chunks in chunk_lists
        ],
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_prediction_records(path: str | Path) -> list[list[RecordedChunk]]:
    from .attention import AttentionRecord

    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed records file: {exc}") from exc
    if payload.get("format") != "crowdmotion.attn":
        raise DataError(f"{path}: not a crowdmotion.attn records file")
    chunk_lists = []
    for chunks in payload["chunks"]:
        row = []
        for chunk in chunks:
            records = [
                AttentionRecord(
                    scores=np.asarray(layer["scores"], dtype=np.float64),
                    key_labels=layer["labels"],
                )
                for layer in chunk["layers"]
            ]
            row.append(RecordedChunk(attention=records))
        chunk_lists.append(row)
    return chunk_lists


# -- model-in-the-loop helper ------------------------------------------------------


def forecast_mpjpe(
    scenes: Sequence[Scene],
    predictor,
    config,
    history_steps: int,
    horizon_steps: int,
) -> float:
    """Corpus MPJPE of single-chunk forecasts against held-out continuations.

    Each scene is split into its first ``history_steps`` (model input) and the
    following ``horizon_steps`` (ground truth); the mean is over all persons.
    """
    from .model import predict_scene

    if horizon_steps > config.out_steps:
        raise DataError(
            f"horizon {horizon_steps} exceeds single-chunk output {config.out_steps}"
        )
    errors = []
    for scene in scenes:
        if scene.n_steps < history_steps + horizon_steps:
            raise DataError(
                f"scene {scene.scene_id} too short: {scene.n_steps} steps for "
                f"{history_steps}+{horizon_steps}"
            )
        arr = scene.flat_stacked()
        chunks = predict_scene(arr[:, :history_steps], predictor, config)
        for n, chunk in enumerate(chunks):
            truth = arr[n, history_steps : history_steps + horizon_steps]
            errors.append(mpjpe(chunk.poses.data[:horizon_steps], truth, horizon_steps))
    return float(np.mean(errors))
