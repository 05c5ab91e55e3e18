"""Multi-person 3D motion forecasting.

A per-person local encoder (offset sequences in the DCT domain) and a
scene-wide global encoder feed a decoder that predicts each person's future
motion from a single query pose, trained adversarially against a motion
discriminator. Everything runs on a small numpy-based reverse-mode autodiff.
"""

from .autodiff import Parameter, Tensor, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    GeneratorParams,
    MotionSequence,
    Scene,
    generate_synthetic,
    load_scene,
    preprocess,
    save_scene,
    scene_from_array,
)
from .model import (
    DiscriminatorParams,
    EncodedContext,
    ModelConfig,
    PredictionChunk,
    PredictorParams,
    decode_person,
    discriminate,
    global_encode,
    local_encode,
    predict_scene,
)
from .optim import AdamState, adam_step, grad_check
from .training import (
    TrainConfig,
    TrainSample,
    loss_adv,
    loss_disc,
    loss_rec,
    make_samples,
    predict_autoregressive,
    train_loop,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Checkpoint",
    "DiscriminatorParams",
    "EncodedContext",
    "GeneratorParams",
    "ModelConfig",
    "MotionSequence",
    "Parameter",
    "PredictionChunk",
    "PredictorParams",
    "Scene",
    "Tensor",
    "TrainConfig",
    "TrainSample",
    "adam_step",
    "decode_person",
    "discriminate",
    "generate_synthetic",
    "global_encode",
    "grad_check",
    "load_checkpoint",
    "load_scene",
    "local_encode",
    "loss_adv",
    "loss_disc",
    "loss_rec",
    "make_samples",
    "no_grad",
    "predict_autoregressive",
    "predict_scene",
    "preprocess",
    "save_checkpoint",
    "save_scene",
    "scene_from_array",
    "train_loop",
    "train_step",
    "__version__",
]
