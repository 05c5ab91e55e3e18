"""Parameter checkpoints: a flat name -> float32 array archive with a JSON
header that records the model configuration and training progress.

Layout: one JSON header line (format tag, config, entry manifest with shapes)
followed by the concatenated row-major little-endian float32 values of every
entry in manifest order. Values round-trip bit-exactly at 32-bit precision.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import DiscriminatorParams, ModelConfig, PredictorParams
from .optim import AdamState

ARCHIVE_FORMAT = "crowdmotion.params"
ARCHIVE_VERSION = 1


def save_archive(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = [
        {"name": name, "shape": list(np.asarray(a).shape)} for name, a in arrays.items()
    ]
    header = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "meta": meta,
        "entries": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read archive {path}: {exc}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise DataError(f"{path}: no header line found")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed archive header: {exc}") from exc
    if header.get("format") != ARCHIVE_FORMAT:
        raise DataError(f"{path}: not a {ARCHIVE_FORMAT} archive")
    body = raw[newline + 1 :]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(body):
            raise DataError(
                f"{path}: archive truncated at entry {entry['name']!r} "
                f"(need {nbytes} bytes at offset {offset}, have {len(body) - offset})"
            )
        arrays[entry["name"]] = (
            np.frombuffer(body, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(body):
        raise DataError(f"{path}: {len(body) - offset} trailing bytes after last entry")
    return arrays, header.get("meta", {})


@dataclass
class Checkpoint:
    predictor: PredictorParams
    discriminator: DiscriminatorParams
    config: ModelConfig
    step: int
    opt_predictor: AdamState | None = None
    opt_discriminator: AdamState | None = None


def _opt_entries(prefix: str, state: AdamState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, value in state.m.items():
        out[f"{prefix}.m.{name}"] = value
    for name, value in state.v.items():
        out[f"{prefix}.v.{name}"] = value
    return out


def save_checkpoint(
    path: str | Path,
    predictor: PredictorParams,
    discriminator: DiscriminatorParams,
    config: ModelConfig,
    step: int,
    opt_predictor: AdamState | None = None,
    opt_discriminator: AdamState | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for p in predictor.parameters():
        arrays[f"P.{p.name}"] = p.data
    for p in discriminator.parameters():
        arrays[f"D.{p.name}"] = p.data
    meta = {"model_config": asdict(config), "step": int(step)}
    if opt_predictor is not None and opt_discriminator is not None:
        arrays.update(_opt_entries("optP", opt_predictor))
        arrays.update(_opt_entries("optD", opt_discriminator))
        meta["optimizer"] = {
            "p": {"lr": opt_predictor.lr, "step_count": opt_predictor.step_count},
            "d": {"lr": opt_discriminator.lr, "step_count": opt_discriminator.step_count},
        }
    save_archive(path, arrays, meta)


def _fill(params, arrays: dict[str, np.ndarray], prefix: str, path) -> None:
    for p in params.parameters():
        key = f"{prefix}.{p.name}"
        if key not in arrays:
            raise DataError(f"{path}: checkpoint missing parameter {key!r}")
        stored = arrays.pop(key)
        if stored.shape != p.data.shape:
            raise DataError(
                f"{path}: parameter {key!r} has shape {stored.shape}, "
                f"expected {p.data.shape}"
            )
        p.data[...] = stored.astype(np.float64)
        p.grad[...] = 0.0


def _load_opt(prefix: str, arrays: dict[str, np.ndarray], lr: float, step_count: int) -> AdamState:
    state = AdamState(lr=lr, step_count=step_count)
    marker_m, marker_v = f"{prefix}.m.", f"{prefix}.v."
    for key in [k for k in arrays if k.startswith((marker_m, marker_v))]:
        value = arrays.pop(key).astype(np.float64)
        if key.startswith(marker_m):
            state.m[key[len(marker_m) :]] = value
        else:
            state.v[key[len(marker_v) :]] = value
    return state


def load_checkpoint(path: str | Path) -> Checkpoint:
    arrays, meta = load_archive(path)
    if "model_config" not in meta:
        raise DataError(f"{path}: checkpoint header lacks a model config")
    config = ModelConfig(**meta["model_config"])
    rng = np.random.default_rng(0)  # values are overwritten below
    predictor = PredictorParams.init(config, rng)
    discriminator = DiscriminatorParams.init(config, rng)
    _fill(predictor, arrays, "P", path)
    _fill(discriminator, arrays, "D", path)
    opt_p = opt_d = None
    opt_meta = meta.get("optimizer")
    if opt_meta is not None:
        opt_p = _load_opt("optP", arrays, opt_meta["p"]["lr"], opt_meta["p"]["step_count"])
        opt_d = _load_opt("optD", arrays, opt_meta["d"]["lr"], opt_meta["d"]["step_count"])
    if arrays:
        raise DataError(f"{path}: unexpected extra entries {sorted(arrays)[:3]}...")
    return Checkpoint(
        predictor=predictor,
        discriminator=discriminator,
        config=config,
        step=int(meta.get("step", 0)),
        opt_predictor=opt_p,
        opt_discriminator=opt_d,
    )
