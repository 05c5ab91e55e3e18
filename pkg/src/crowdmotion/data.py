"""Scene containers, the scene-file format, preprocessing, and a synthetic
multi-person motion generator.

Poses are absolute world coordinates in meters, (joints, 3) per person per
step, with z up. A scene holds N persons on a shared clock. Scene files are a
single self-describing container: one JSON header line followed by row-major
little-endian float32 coordinates in (steps, persons, joints, 3) order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, SceneFormatError

log = logging.getLogger(__name__)

SCENE_FORMAT = "crowdmotion.scene"
SCENE_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class MotionSequence:
    """One person's time-ordered absolute poses at a fixed frame rate."""

    poses: np.ndarray  # (steps, joints, 3)
    frame_rate: float = 15.0

    def __post_init__(self) -> None:
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 3 or self.poses.shape[2] != 3 or self.poses.shape[0] < 1:
            raise DataError(f"poses must have shape (steps>=1, joints, 3), got {self.poses.shape}")
        if not np.all(np.isfinite(self.poses)):
            raise DataError("poses contain non-finite coordinates")
        if self.frame_rate <= 0:
            raise DataError(f"frame_rate must be positive, got {self.frame_rate}")

    @property
    def length(self) -> int:
        return self.poses.shape[0]

    @property
    def joints(self) -> int:
        return self.poses.shape[1]

    def flat(self) -> np.ndarray:
        """Poses as (steps, 3*joints) row vectors (x0, y0, z0, x1, ...)."""
        return self.poses.reshape(self.length, 3 * self.joints)

    def offsets(self) -> np.ndarray:
        """Per-step pose differences, (steps-1, 3*joints)."""
        flat = self.flat()
        return flat[1:] - flat[:-1]


@dataclass
class Scene:
    """N persons' aligned motion sequences over a shared clock."""

    persons: list[MotionSequence]
    source: str = "unknown"
    scene_id: str = ""

    def __post_init__(self) -> None:
        if not self.persons:
            raise DataError("a scene needs at least one person")
        first = self.persons[0]
        for i, p in enumerate(self.persons):
            if p.length != first.length:
                raise DataError(
                    f"person {i} has {p.length} steps, expected {first.length}"
                )
            if p.joints != first.joints:
                raise DataError(f"person {i} has {p.joints} joints, expected {first.joints}")
            if p.frame_rate != first.frame_rate:
                raise DataError("persons disagree on frame rate")

    @property
    def n_persons(self) -> int:
        return len(self.persons)

    @property
    def n_steps(self) -> int:
        return self.persons[0].length

    @property
    def joints(self) -> int:
        return self.persons[0].joints

    @property
    def frame_rate(self) -> float:
        return self.persons[0].frame_rate

    def stacked(self) -> np.ndarray:
        """All poses as (persons, steps, joints, 3)."""
        return np.stack([p.poses for p in self.persons])

    def flat_stacked(self) -> np.ndarray:
        """All poses as (persons, steps, 3*joints)."""
        return np.stack([p.flat() for p in self.persons])

    def slice_steps(self, start: int, stop: int) -> "Scene":
        persons = [
            MotionSequence(p.poses[start:stop], frame_rate=p.frame_rate)
            for p in self.persons
        ]
        return Scene(persons=persons, source=self.source, scene_id=self.scene_id)


def scene_from_array(
    positions: np.ndarray,
    frame_rate: float = 15.0,
    source: str = "unknown",
    scene_id: str = "",
) -> Scene:
    """Build a scene from a (persons, steps, joints, 3) array."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 4:
        raise DataError(f"expected (persons, steps, joints, 3), got {positions.shape}")
    persons = [MotionSequence(p, frame_rate=frame_rate) for p in positions]
    return Scene(persons=persons, source=source, scene_id=scene_id)


# -- scene file container -------------------------------------------------


def save_scene(scene: Scene, path: str | Path) -> None:
    """Write the single-file container: JSON header line + float32 body."""
    path = Path(path)
    header = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "joints": scene.joints,
        "frame_rate": scene.frame_rate,
        "persons": scene.n_persons,
        "steps": scene.n_steps,
        "source": scene.source,
        "scene_id": scene.scene_id,
    }
    body = scene.stacked().transpose(1, 0, 2, 3)  # (steps, persons, joints, 3)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(body, dtype="<f4").tobytes())


def load_scene(path: str | Path) -> Scene:
    """Read a scene file, validating header/body agreement and finiteness."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SceneFormatError(f"cannot read scene file {path}: {exc}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise SceneFormatError(f"{path}: no header line found (byte 0)")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", 0)
        raise SceneFormatError(f"{path}: malformed header at byte {pos}: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != SCENE_FORMAT:
        raise SceneFormatError(f"{path}: not a {SCENE_FORMAT} file (line 1)")
    for key in ("version", "joints", "frame_rate", "persons", "steps"):
        if key not in header:
            raise SceneFormatError(f"{path}: header missing field {key!r} (line 1)")
    joints, n_persons, n_steps = header["joints"], header["persons"], header["steps"]
    expected_values = n_steps * n_persons * joints * 3
    body = raw[newline + 1 :]
    if len(body) % 4 != 0 or len(body) // 4 != expected_values:
        raise SceneFormatError(
            f"{path}: body holds {len(body) // 4} float32 values "
            f"({len(body)} bytes from byte {newline + 1}), expected {expected_values}"
        )
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise SceneFormatError(
            f"{path}: non-finite coordinate at value {bad[0]} "
            f"(byte {newline + 1 + 4 * int(bad[0])})"
        )
    positions = flat.reshape(n_steps, n_persons, joints, 3).transpose(1, 0, 2, 3)
    return scene_from_array(
        positions,
        frame_rate=float(header["frame_rate"]),
        source=str(header.get("source", "unknown")),
        scene_id=str(header.get("scene_id", path.stem)),
    )


# -- corpus manifests ------------------------------------------------------


def write_manifest(corpus_dir: str | Path, train: Sequence[str], test: Sequence[str]) -> None:
    manifest = {"version": 1, "train": list(train), "test": list(test)}
    path = Path(corpus_dir) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(corpus_dir: str | Path) -> dict:
    path = Path(corpus_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no {MANIFEST_NAME} in {corpus_dir}")
    manifest = json.loads(path.read_text())
    for key in ("train", "test"):
        if key not in manifest:
            raise DataError(f"{path}: manifest missing split {key!r}")
    return manifest


def load_split(corpus_dir: str | Path, split: str) -> list[Scene]:
    manifest = read_manifest(corpus_dir)
    if split not in manifest:
        raise DataError(f"unknown split {split!r}")
    return [load_scene(Path(corpus_dir) / name) for name in manifest[split]]


# -- preprocessing ---------------------------------------------------------

HEIGHT_RANGE = (1.5, 2.0)


def preprocess(
    scene: Scene,
    joint_map: Sequence[int],
    rng_seed: int,
    placement_area: float,
    groups: Sequence[Sequence[int]] | None = None,
) -> Scene:
    """Select joints, rescale skeletons into the standing-height range, and
    place person groups at random positions inside a square on the x-y plane.

    Height is the vertical extent of the first pose; skeletons already inside
    the range are left at scale 1. Each group (default: the whole scene) is
    translated rigidly by one uniform draw from a square of ``placement_area``
    square meters centered on the origin, so within-group geometry survives.
    """
    joint_map = list(joint_map)
    if any(j < 0 or j >= scene.joints for j in joint_map):
        raise ConfigError(
            f"joint_map {joint_map} out of range for {scene.joints}-joint skeletons"
        )
    if placement_area < 0:
        raise ConfigError(f"placement_area must be >= 0, got {placement_area}")
    rng = np.random.default_rng(rng_seed)

    selected = [p.poses[:, joint_map, :].copy() for p in scene.persons]
    scaled = []
    for poses in selected:
        first = poses[0]
        height = float(first[:, 2].max() - first[:, 2].min())
        if height <= 0:
            raise DataError("first pose has zero vertical extent; cannot infer height")
        if HEIGHT_RANGE[0] <= height <= HEIGHT_RANGE[1]:
            scaled.append(poses)
            continue
        target = rng.uniform(*HEIGHT_RANGE)
        anchor = first[0]  # root joint of the first frame
        scaled.append(anchor + (target / height) * (poses - anchor))

    if groups is None:
        groups = [list(range(scene.n_persons))]
    side = math.sqrt(placement_area)
    for members in groups:
        offset = np.zeros(3)
        offset[:2] = rng.uniform(-side / 2.0, side / 2.0, size=2)
        for i in members:
            scaled[i] = scaled[i] + offset

    persons = [MotionSequence(p, frame_rate=scene.frame_rate) for p in scaled]
    return Scene(persons=persons, source=scene.source, scene_id=scene.scene_id)


# -- synthetic generator ---------------------------------------------------


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs for the procedural walker crowd."""

    frame_rate: float = 15.0
    area: float = 25.0  # square meters for start placement
    min_speed: float = 0.4
    max_speed: float = 1.4
    min_height: float = 1.55
    max_height: float = 1.95
    turn_noise: float = 1.2  # rad/s scale of smoothed heading noise
    interaction_prob: float = 0.6  # chance that a candidate pair interacts
    stop_distance: float = 0.9  # meters between interacting partners at rest
    bob_amplitude: float = 0.015  # vertical pelvis bob, fraction of height
    max_step_freq: float = 2.5  # Hz cap on the gait cycle

    def max_root_step(self) -> float:
        """Upper bound on per-step root displacement in meters."""
        dt = 1.0 / self.frame_rate
        max_bob_rate = self.bob_amplitude * self.max_height * 2.0 * (2.0 * math.pi * self.max_step_freq)
        return (self.max_speed + max_bob_rate) * dt


# Canonical 15-joint skeleton: pelvis, neck, head, then left arm, right arm,
# left leg, right leg (shoulder/elbow/wrist and hip/knee/ankle chains).
_TEMPLATE_Z = {
    "pelvis": 0.52, "neck": 0.85, "head": 1.02,
    "shoulder": 0.80, "elbow": 0.65, "wrist": 0.50,
    "hip": 0.50, "knee": 0.27, "ankle": 0.02,
}


def _skeleton(
    height: float, phase: float, gait: float, bob_amp: float
) -> np.ndarray:
    """Local-frame joint positions (x forward, y left, z up) for one instant.

    ``gait`` in [0, 1] scales limb swing so a stopped walker stands still; at
    phase 0 both feet are grounded and the bob is zero, making the first-frame
    vertical extent exactly ``height``.
    """
    h, z = height, _TEMPLATE_Z
    swing = 0.20 * h * gait
    arm_swing = 0.12 * h * gait
    lift = 0.04 * h * gait
    bob = bob_amp * h * gait * math.sin(2.0 * phase)
    sin_p, sin_q = math.sin(phase), math.sin(phase + math.pi)
    joints = np.array(
        [
            [0.0, 0.0, z["pelvis"] * h + bob],
            [0.0, 0.0, z["neck"] * h + bob],
            [0.0, 0.0, z["head"] * h + bob],
            [0.0, 0.18 * h, z["shoulder"] * h + bob],
            [arm_swing * 0.5 * sin_q, 0.20 * h, z["elbow"] * h],
            [arm_swing * sin_q, 0.20 * h, z["wrist"] * h],
            [0.0, -0.18 * h, z["shoulder"] * h + bob],
            [arm_swing * 0.5 * sin_p, -0.20 * h, z["elbow"] * h],
            [arm_swing * sin_p, -0.20 * h, z["wrist"] * h],
            [0.0, 0.10 * h, z["hip"] * h],
            [swing * 0.5 * sin_p, 0.10 * h, z["knee"] * h],
            [swing * sin_p, 0.10 * h, z["ankle"] * h + lift * max(0.0, sin_p)],
            [0.0, -0.10 * h, z["hip"] * h],
            [swing * 0.5 * sin_q, -0.10 * h, z["knee"] * h],
            [swing * sin_q, -0.10 * h, z["ankle"] * h + lift * max(0.0, sin_q)],
        ]
    )
    return joints


def _resize_skeleton(joints15: np.ndarray, n_joints: int) -> np.ndarray:
    if n_joints == 15:
        return joints15
    if n_joints < 15:
        return joints15[:n_joints]
    extra = n_joints - 15
    # pad with a spine chain interpolated between pelvis and neck
    fractions = np.arange(1, extra + 1, dtype=np.float64) / (extra + 1)
    spine = joints15[0] + fractions[:, None] * (joints15[1] - joints15[0])
    return np.concatenate([joints15, spine])


def _smooth_noise(rng: np.random.Generator, n: int, window: int) -> np.ndarray:
    """Zero-mean noise low-passed with a moving average; unit-ish scale."""
    raw = rng.standard_normal(n + window)
    kernel = np.ones(window) / window
    return np.convolve(raw, kernel, mode="valid")[:n] * math.sqrt(window)


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def generate_synthetic(
    n_persons: int,
    n_steps: int,
    joints: int = 15,
    seed: int = 0,
    params: GeneratorParams | None = None,
) -> Scene:
    """Procedural walkers with smooth random headings and sinusoidal gait.

    Some person pairs are assigned an approach-and-face interaction so scenes
    carry cross-person signal; everything is deterministic per seed.
    """
    if n_persons < 1 or n_steps < 1 or joints < 1:
        raise ConfigError("n_persons, n_steps, and joints must all be >= 1")
    p = params or GeneratorParams()
    rng = np.random.default_rng(seed)
    dt = 1.0 / p.frame_rate
    side = math.sqrt(p.area)

    heights = rng.uniform(p.min_height, p.max_height, size=n_persons)
    base_speeds = rng.uniform(p.min_speed, p.max_speed, size=n_persons)
    positions = rng.uniform(-side / 2.0, side / 2.0, size=(n_persons, 2))
    headings = rng.uniform(0.0, 2.0 * math.pi, size=n_persons)
    turn = [
        p.turn_noise * _smooth_noise(rng, n_steps, window=int(p.frame_rate))
        for _ in range(n_persons)
    ]
    speed_mod = [
        1.0 + 0.25 * np.clip(_smooth_noise(rng, n_steps, window=int(2 * p.frame_rate)), -2, 2)
        for _ in range(n_persons)
    ]

    partner = {}
    order = rng.permutation(n_persons)
    for a, b in zip(order[0::2], order[1::2]):
        if rng.uniform() < p.interaction_prob:
            start = int(rng.integers(n_steps // 4 + 1, max(n_steps // 2, n_steps // 4 + 2)))
            partner[int(a)] = (int(b), start)
            partner[int(b)] = (int(a), start)

    out = np.zeros((n_persons, n_steps, joints, 3))
    phases = np.zeros(n_persons)  # phase 0 grounds both feet in the first frame
    speeds = base_speeds.copy()
    roam = side  # soft boundary radius
    for t in range(n_steps):
        for i in range(n_persons):
            target_speed = float(np.clip(base_speeds[i] * speed_mod[i][t], 0.1, p.max_speed))
            steer = turn[i][t] * dt
            inter = partner.get(i)
            if inter is not None and t >= inter[1]:
                other = positions[inter[0]]
                delta = other - positions[i]
                dist = float(np.hypot(*delta))
                desired = math.atan2(delta[1], delta[0])
                steer = float(np.clip(_wrap_angle(desired - headings[i]), -3.0 * dt, 3.0 * dt))
                target_speed = float(
                    np.clip(base_speeds[i] * (dist - p.stop_distance) / 1.0, 0.0, p.max_speed)
                )
            elif float(np.hypot(*positions[i])) > roam:
                # steer back toward the scene center
                desired = math.atan2(-positions[i][1], -positions[i][0])
                steer = float(np.clip(_wrap_angle(desired - headings[i]), -2.0 * dt, 2.0 * dt))
            # first-order lag keeps speed (and thus the gait) smooth
            speeds[i] += (target_speed - speeds[i]) * min(1.0, 4.0 * dt)
            headings[i] = headings[i] + steer

            gait = float(np.clip(speeds[i] / 1.0, 0.0, 1.0))
            step_freq = min(p.max_step_freq, max(0.6, speeds[i] / (0.4 * heights[i])))
            local = _resize_skeleton(
                _skeleton(heights[i], phases[i], gait, p.bob_amplitude), joints
            )
            c, s = math.cos(headings[i]), math.sin(headings[i])
            world = np.empty_like(local)
            world[:, 0] = positions[i][0] + c * local[:, 0] - s * local[:, 1]
            world[:, 1] = positions[i][1] + s * local[:, 0] + c * local[:, 1]
            world[:, 2] = local[:, 2]
            out[i, t] = world

            direction = np.array([c, s])
            positions[i] = positions[i] + direction * speeds[i] * dt
            phases[i] += 2.0 * math.pi * step_freq * dt

    return scene_from_array(
        out, frame_rate=p.frame_rate, source="synthetic", scene_id=f"synth-{seed}"
    )
