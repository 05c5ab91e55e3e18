"""Command-line entry point: data generation, training, prediction,
evaluation, and attention export as reproducible runs.

Configuration precedence (lowest to highest): built-in defaults, --config
file (JSON), CROWDMOTION_* environment variables, command-line flags. The
effective configuration is dumped into the output directory of every run.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    GeneratorParams,
    Scene,
    generate_synthetic,
    load_scene,
    load_split,
    save_scene,
    scene_from_array,
    write_manifest,
)
from .errors import ConfigError, CrowdMotionError, DataError, TrainingError
from .metrics import (
    evaluate_corpus,
    export_attention,
    load_prediction_records,
    save_prediction_records,
    write_histogram_csv,
    write_report,
)
from .model import ModelConfig
from .seeding import stream_rng, stream_seed
from .training import TrainConfig, predict_autoregressive, train_loop

log = logging.getLogger(__name__)

ENV_PREFIX = "CROWDMOTION_"


class UsageError(CrowdMotionError):
    pass


@dataclass
class RunConfig:
    """Everything a training run needs, mergeable from file/env/flags."""

    seed: int = 0
    corpus: str = "corpus"
    out_dir: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "corpus": self.corpus,
            "out_dir": self.out_dir,
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
        }


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _env_overrides(environ) -> dict:
    """CROWDMOTION_SEED=7 or CROWDMOTION_TRAIN__MAX_STEPS=100 style overrides;
    double underscores separate nesting levels."""
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        dotted = key[len(ENV_PREFIX) :].lower().replace("__", ".")
        out[dotted] = _parse_env_value(raw)
    return out


def _apply_overrides(tree: dict, overrides: dict) -> None:
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = tree
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {part!r} in {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value


def load_run_config(
    config_path: str | None, flag_overrides: dict, environ=None
) -> RunConfig:
    tree = RunConfig().to_dict()
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed config: {exc}") from exc
        flat: dict = {}

        def flatten(node, prefix=""):
            for k, v in node.items():
                if isinstance(v, dict):
                    flatten(v, f"{prefix}{k}.")
                else:
                    flat[f"{prefix}{k}"] = v

        flatten(loaded)
        _apply_overrides(tree, flat)
    _apply_overrides(tree, _env_overrides(environ if environ is not None else os.environ))
    _apply_overrides(tree, flag_overrides)
    try:
        return RunConfig(
            seed=int(tree["seed"]),
            corpus=str(tree["corpus"]),
            out_dir=str(tree["out_dir"]),
            model=ModelConfig(**tree["model"]),
            train=TrainConfig(**tree["train"]),
        )
    except TypeError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def _dump_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    gen = GeneratorParams(area=args.area, interaction_prob=args.interaction_prob)
    names = []
    for i in range(args.scenes):
        scene = generate_synthetic(
            n_persons=args.persons,
            n_steps=args.steps,
            joints=args.joints,
            seed=stream_seed(args.seed, f"data/scene{i}"),
            params=gen,
        )
        name = f"scene-{i:03d}.scene"
        save_scene(scene, out / name)
        names.append(name)
    n_test = int(round(args.test_fraction * len(names)))
    n_test = min(max(n_test, 0), len(names) - 1) if len(names) > 1 else 0
    train_names = names[: len(names) - n_test]
    test_names = names[len(names) - n_test :]
    write_manifest(out, train_names, test_names)
    _dump_json(
        {
            "command": "gen-data",
            "persons": args.persons,
            "steps": args.steps,
            "scenes": args.scenes,
            "joints": args.joints,
            "seed": args.seed,
            "area": args.area,
            "interaction_prob": args.interaction_prob,
            "test_fraction": args.test_fraction,
        },
        out / "command.json",
    )
    print(f"wrote {len(names)} scenes to {out} ({len(train_names)} train, {len(test_names)} test)")
    return 0


_TRAIN_FLAG_MAP = {
    "seed": "seed",
    "corpus": "corpus",
    "out": "out_dir",
    "max_steps": "train.max_steps",
    "batch_size": "train.batch_size",
    "lambda_adv": "train.lambda_adv",
    "lambda_rec": "train.lambda_rec",
    "lr_predictor": "train.lr_predictor",
    "lr_discriminator": "train.lr_discriminator",
    "history_steps": "train.history_steps",
    "checkpoint_interval": "train.checkpoint_interval",
    "d_model": "model.d_model",
    "d_ff": "model.d_ff",
    "layers": "model.layers",
    "heads": "model.heads",
    "joints": "model.joints",
    "out_steps": "model.out_steps",
    "frame_rate": "model.frame_rate",
}


def cmd_train(args) -> int:
    overrides = {}
    for flag, dotted in _TRAIN_FLAG_MAP.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[dotted] = value
    if args.no_discriminator:
        overrides["train.train_discriminator"] = False
    run = load_run_config(args.config, overrides)
    # training seed rides on the run seed unless set explicitly
    if "train.seed" not in overrides and run.train.seed == 0:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, seed=run.seed))

    scenes = load_split(run.corpus, "train")
    predictor = discriminator = opt_p = opt_d = None
    start_step = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.config != run.model:
            log.info("resume: using the checkpoint's model config")
            run = dataclasses.replace(run, model=ckpt.config)
        predictor, discriminator = ckpt.predictor, ckpt.discriminator
        opt_p, opt_d = ckpt.opt_predictor, ckpt.opt_discriminator
        start_step = ckpt.step
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(run.to_dict(), out_dir / "config.json")
    result = train_loop(
        scenes,
        run.model,
        run.train,
        out_dir,
        predictor=predictor,
        discriminator=discriminator,
        opt_predictor=opt_p,
        opt_discriminator=opt_d,
        start_step=start_step,
    )
    print(f"trained to step {result.steps}; checkpoint at {result.checkpoint_path}")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    if scene.joints != ckpt.config.joints:
        raise ConfigError(
            f"scene has {scene.joints} joints but the checkpoint was trained "
            f"with {ckpt.config.joints}"
        )
    result = predict_autoregressive(scene, args.chunks, ckpt.predictor, ckpt.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    steps = args.chunks * ckpt.config.out_steps
    positions = np.stack(
        [m.reshape(steps, ckpt.config.joints, 3) for m in result.motions]
    )
    predicted = scene_from_array(
        positions,
        frame_rate=scene.frame_rate,
        source=f"prediction:{scene.source}",
        scene_id=scene.scene_id,
    )
    scene_path = out / "prediction.scene"
    save_scene(predicted, scene_path)
    records_path = out / "records.json"
    save_prediction_records(result.chunks, records_path)
    _dump_json(
        {
            "command": "predict",
            "checkpoint": str(args.checkpoint),
            "scene": str(args.scene),
            "chunks": args.chunks,
            "history_lengths": result.history_lengths,
        },
        out / "command.json",
    )
    print(f"wrote {steps}-step prediction to {scene_path} (records: {records_path})")
    return 0


def _scene_pairs(pred_path: Path, truth_path: Path) -> list[tuple[Scene, Scene]]:
    if pred_path.is_dir() != truth_path.is_dir():
        raise DataError("--pred and --truth must both be files or both directories")
    if not pred_path.is_dir():
        return [(load_scene(pred_path), load_scene(truth_path))]
    names = sorted(p.name for p in pred_path.glob("*.scene"))
    if not names:
        raise DataError(f"no *.scene files under {pred_path}")
    pairs = []
    for name in names:
        other = truth_path / name
        if not other.exists():
            raise DataError(f"truth scene missing for {name}")
        pairs.append((load_scene(pred_path / name), load_scene(other)))
    return pairs


def cmd_eval(args) -> int:
    pairs = _scene_pairs(Path(args.pred), Path(args.truth))
    report, hist = evaluate_corpus(pairs, root_joint=args.root_joint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = write_report(report, out)
    write_histogram_csv(hist, out / "movement_histogram.csv")
    _dump_json(
        {
            "command": "eval",
            "pred": str(args.pred),
            "truth": str(args.truth),
            "root_joint": args.root_joint,
        },
        out / "command.json",
    )
    summary = {h: report.corpus[h]["mpjpe"] for h in report.horizons}
    print(f"corpus MPJPE (meters): {summary}; report at {json_path} / {csv_path}")
    return 0


def cmd_export_attention(args) -> int:
    chunk_lists = load_prediction_records(args.pred_records)
    if not 0 <= args.chunk < len(chunk_lists):
        raise DataError(
            f"chunk {args.chunk} out of range; records hold {len(chunk_lists)} chunks"
        )
    paths = export_attention(chunk_lists[args.chunk], args.layer, args.out)
    print(f"wrote {len(paths)} attention tables to {args.out}")
    return 0


# -- parser ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage to 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="crowdmotion", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic scene corpus")
    g.add_argument("--persons", type=int, default=3)
    g.add_argument("--steps", type=int, default=60)
    g.add_argument("--scenes", type=int, default=8)
    g.add_argument("--joints", type=int, default=15)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--area", type=float, default=25.0)
    g.add_argument("--interaction-prob", type=float, default=0.6)
    g.add_argument("--test-fraction", type=float, default=0.25)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train predictor and discriminator")
    t.add_argument("--config", default=None, help="JSON run configuration")
    t.add_argument("--corpus", default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lambda-adv", type=float, default=None)
    t.add_argument("--lambda-rec", type=float, default=None)
    t.add_argument("--lr-predictor", type=float, default=None)
    t.add_argument("--lr-discriminator", type=float, default=None)
    t.add_argument("--history-steps", type=int, default=None)
    t.add_argument("--checkpoint-interval", type=int, default=None)
    t.add_argument("--d-model", type=int, default=None)
    t.add_argument("--d-ff", type=int, default=None)
    t.add_argument("--layers", type=int, default=None)
    t.add_argument("--heads", type=int, default=None)
    t.add_argument("--joints", type=int, default=None)
    t.add_argument("--out-steps", type=int, default=None)
    t.add_argument("--frame-rate", type=float, default=None)
    t.add_argument("--no-discriminator", action="store_true")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="autoregressive rollout from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--chunks", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--root-joint", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-attention", help="dump decoder attention tables")
    x.add_argument("--pred-records", required=True)
    x.add_argument("--layer", type=int, default=0)
    x.add_argument("--chunk", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            stream=sys.stderr,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except CrowdMotionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
