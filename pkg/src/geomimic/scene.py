"""Synthetic desk-scene simulator.

A pinhole camera watches a fronto-parallel desk plane on which one feature
entity (the mover) is driven toward a static target entity while
distractor features wander around. Demonstrations are generated directly
as feature tracks: the ground-truth association's error norm decays
geometrically while every distractor performs a bounded random walk, so
only the demonstrated association looks like a controlled signal.

World tracks are kept in 3D so perturbations (moved target, new camera
pose, occlusions, leaving the field of view, appearance noise) can be
applied by editing the world and reprojecting.
"""

from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from .geometry import ImagePoint, KernelKind

IMAGE_SIZE = (640, 480)
DEFAULT_FOCAL = 800.0
DESK_DEPTH_M = 1.0
_MIN_DEPTH = 1e-6

# Sub-stream tags so every random quantity hangs off one seed.
_TAG_LAYOUT = 1
_TAG_NOISE = 2
_TAG_JITTER = 3
_TAG_GT_DESC = 101
_TAG_DISTRACTOR_DESC = 102
_TAG_SERVO = 7
_TAG_PERTURB = {
    "random_target": 11,
    "change_camera": 12,
    "occlusion": 13,
    "outside_fov": 14,
    "change_illumination": 15,
}


class SceneError(ValueError):
    """Invalid scene configuration or operation."""


class BehindCameraError(SceneError):
    """A world point lies on or behind the camera plane."""


class FeatureClass(str, enum.Enum):
    POINT = "point"
    SEGMENT_ENDPOINT = "segment_endpoint"
    CONIC_SAMPLE = "conic_sample"


class PerturbationKind(str, enum.Enum):
    RANDOM_TARGET = "random_target"
    CHANGE_CAMERA = "change_camera"
    OCCLUSION = "occlusion"
    OUTSIDE_FOV = "outside_fov"
    CHANGE_ILLUMINATION = "change_illumination"


@dataclass
class PerturbationSetting:
    """Kind plus a scalar magnitude.

    Magnitude semantics per kind: random_target scales the rigid
    displacement of the target (1.0 is roughly 120 px), change_camera
    scales the camera rotation/translation (1.0 is 3 degrees, 2 cm),
    occlusion and outside_fov give the fraction of frames affected, and
    change_illumination is the descriptor noise sigma.
    """

    kind: PerturbationKind
    magnitude: float = 1.0


@dataclass
class CameraModel:
    """Pinhole camera; `rotation`/`translation` map world to camera frame."""

    f: float = DEFAULT_FOCAL
    cu: float = IMAGE_SIZE[0] / 2.0
    cv: float = IMAGE_SIZE[1] / 2.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if self.f <= 0:
            raise SceneError("focal length must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9):
            raise SceneError("camera rotation must be orthonormal")
        if not math.isclose(float(np.linalg.det(self.rotation)), 1.0, abs_tol=1e-9):
            raise SceneError("camera rotation must have determinant +1")

    def world_to_camera(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def to_json_dict(self) -> dict:
        return {
            "f": self.f,
            "cu": self.cu,
            "cv": self.cv,
            "rotation": [[float(x) for x in row] for row in self.rotation],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "CameraModel":
        return cls(
            f=payload["f"],
            cu=payload["cu"],
            cv=payload["cv"],
            rotation=np.array(payload["rotation"], dtype=float),
            translation=np.array(payload["translation"], dtype=float),
        )


def project(point: np.ndarray, camera: CameraModel) -> ImagePoint:
    """Project a world point; raises BehindCameraError at depth <= 1e-6."""
    xc = camera.world_to_camera(point)
    if xc[2] <= _MIN_DEPTH:
        raise BehindCameraError(f"point at camera depth {xc[2]:.3g} cannot be projected")
    return ImagePoint(
        camera.f * xc[0] / xc[2] + camera.cu,
        camera.f * xc[1] / xc[2] + camera.cv,
    )


def rodrigues(vec: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle vector."""
    vec = np.asarray(vec, dtype=float)
    angle = float(np.linalg.norm(vec))
    if angle < 1e-12:
        return np.eye(3)
    kx, ky, kz = vec / angle
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


@dataclass
class FeatureObservation:
    """One detected feature on one frame."""

    id: int
    pixel: ImagePoint
    descriptor: np.ndarray
    visible: bool
    feature_class: FeatureClass

    def __post_init__(self) -> None:
        self.descriptor = np.asarray(self.descriptor, dtype=float)
        if self.descriptor.ndim != 1 or self.descriptor.shape[0] < 2:
            raise SceneError("descriptor must be a vector with at least 2 entries")


@dataclass
class DemoConfig:
    """Controls for demonstration generation.

    `seed` fixes everything including the ground-truth entities'
    appearance; `layout_seed` (defaults to seed) controls distractor
    placement and appearance separately, so held-out evaluation scenes can
    keep the demonstrated entities while swapping the background.
    """

    kernel_kind: KernelKind = KernelKind.P2P
    n_frames: int = 60
    n_distractors: int = 8
    approach_rate: float = 0.9
    noise_px: float = 0.5
    seed: int = 0
    descriptor_dim: int = 16
    descriptor_jitter: float = 0.02
    start_error_px: float | None = None
    layout_seed: int | None = None
    n_distractor_segments: int = 2
    image_size: tuple[int, int] = IMAGE_SIZE

    def __post_init__(self) -> None:
        self.kernel_kind = KernelKind(self.kernel_kind)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.n_frames < 2:
            raise SceneError("a demonstration needs at least 2 frames")
        if not 0.0 < self.approach_rate < 1.0:
            raise SceneError("approach_rate must lie in (0, 1)")
        if self.noise_px < 0 or self.descriptor_jitter < 0:
            raise SceneError("noise levels must be >= 0")
        if self.descriptor_dim < 2:
            raise SceneError("descriptor_dim must be >= 2")
        if self.n_distractors < 0 or self.n_distractor_segments < 0:
            raise SceneError("distractor counts must be >= 0")
        if self.start_error_px is not None and self.start_error_px <= 0:
            raise SceneError("start_error_px must be positive")

    @property
    def effective_layout_seed(self) -> int:
        return self.seed if self.layout_seed is None else self.layout_seed

    def to_json_dict(self) -> dict:
        payload = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            payload[f.name] = value
        return payload

    @classmethod
    def from_json_dict(cls, payload: dict) -> "DemoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise SceneError(f"unknown demo config keys: {sorted(unknown)}")
        kwargs = dict(payload)
        if "image_size" in kwargs:
            kwargs["image_size"] = tuple(kwargs["image_size"])
        return cls(**kwargs)


@dataclass
class DemoSequence:
    """A demonstrated image sequence plus generation-side ground truth.

    `world_tracks` maps feature id to a noiseless (n_frames, 3) world
    trajectory; it is kept in memory for perturbations but not exported.
    """

    frames: list[list[FeatureObservation]]
    ground_truth: tuple[int, ...]
    camera: CameraModel
    seed: int
    kernel_kind: KernelKind
    config: DemoConfig | None = None
    world_tracks: dict[int, np.ndarray] | None = None
    mover_ids: tuple[int, ...] = ()
    target_ids: tuple[int, ...] = ()

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def feature_ids(self) -> list[int]:
        return sorted({obs.id for frame in self.frames for obs in frame})

    def gt_visible(self, frame_index: int) -> bool:
        gt = set(self.ground_truth)
        seen = {obs.id for obs in self.frames[frame_index] if obs.visible}
        return gt <= seen


def base_descriptor(entity_id: int, dim: int, seed: int, tag: int = _TAG_GT_DESC) -> np.ndarray:
    """Stable appearance vector for a feature id, i.i.d. uniform entries."""
    rng = np.random.default_rng([seed, tag, entity_id])
    return rng.uniform(0.0, 1.0, dim)


def descriptor_of(
    base: np.ndarray, jitter: float, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Observed descriptor: the base plus Gaussian per-frame jitter."""
    base = np.asarray(base, dtype=float)
    if jitter < 0:
        raise SceneError("descriptor jitter must be >= 0")
    if jitter == 0.0 or rng is None:
        return base.copy()
    return base + rng.normal(0.0, jitter, base.shape)


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def _walk(
    rng: np.random.Generator,
    start: np.ndarray,
    n_frames: int,
    step: float,
    lo: np.ndarray,
    hi: np.ndarray,
) -> np.ndarray:
    """Bounded random walk; per-frame displacement never exceeds `step`."""
    track = np.empty((n_frames, 2))
    track[0] = np.clip(start, lo, hi)
    for t in range(1, n_frames):
        delta = rng.uniform(0.0, step) * _unit(rng.uniform(0.0, 2.0 * math.pi))
        track[t] = np.clip(track[t - 1] + delta, lo, hi)
    return track


def _orbit_track(
    rng: np.random.Generator,
    n_frames: int,
    lo: np.ndarray,
    hi: np.ndarray,
) -> np.ndarray:
    """Smooth closed elliptical path inside the [lo, hi] box.

    Used for target entities. The orbit sweeps a large image area, so
    absolute pixel position never becomes a reliable selection cue and
    descriptors have to carry the association. Because the path closes
    on itself, the target's net displacement is ~zero and distances to
    static distractors end where they started: orbiting cannot hand a
    (target, distractor) pair a decreasing error trace.
    """
    radii = rng.uniform(35.0, 55.0, size=2)
    radii = np.minimum(radii, 0.45 * (hi - lo).min())
    center = rng.uniform(lo + radii.max(), hi - radii.max())
    tilt = rng.uniform(0.0, math.pi)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    direction = 1.0 if rng.uniform() < 0.5 else -1.0
    angles = phase + direction * 2.0 * math.pi * np.arange(n_frames) / n_frames
    flat = np.stack([radii[0] * np.cos(angles), radii[1] * np.sin(angles)], axis=1)
    rot = np.array([[math.cos(tilt), -math.sin(tilt)], [math.sin(tilt), math.cos(tilt)]])
    return center + flat @ rot.T


def _place(
    rng: np.random.Generator,
    lo: np.ndarray,
    hi: np.ndarray,
    keep_away: Sequence[tuple[np.ndarray, float]],
    tries: int = 400,
) -> np.ndarray:
    for _ in range(tries):
        cand = rng.uniform(lo, hi)
        if all(np.linalg.norm(cand - c) >= d for c, d in keep_away):
            return cand
    raise SceneError("could not place a feature with the requested separations")


def _px_to_world(track_px: np.ndarray, camera: CameraModel, depth: float) -> np.ndarray:
    """Lift pixel tracks onto the desk plane (camera at identity pose)."""
    out = np.empty((track_px.shape[0], 3))
    out[:, 0] = (track_px[:, 0] - camera.cu) * depth / camera.f
    out[:, 1] = (track_px[:, 1] - camera.cv) * depth / camera.f
    out[:, 2] = depth
    return out


@dataclass
class _Layout:
    """Noise-free pixel tracks plus entity bookkeeping."""

    tracks_px: dict[int, np.ndarray]
    classes: dict[int, FeatureClass]
    ground_truth: tuple[int, ...]
    mover_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    distractor_ids: tuple[int, ...]


def _decay_profile(config: DemoConfig, rng: np.random.Generator) -> np.ndarray:
    e0 = config.start_error_px
    if e0 is None:
        e0 = rng.uniform(40.0, 80.0)
    t = np.arange(config.n_frames)
    return e0 * config.approach_rate**t


def _layout_p2p(config: DemoConfig, rng: np.random.Generator, lay_rng: np.random.Generator) -> _Layout:
    w, h = config.image_size
    margin = 60.0
    central_lo = np.array([0.32 * w, 0.33 * h])
    central_hi = np.array([0.68 * w, 0.67 * h])
    target_track = _orbit_track(rng, config.n_frames, central_lo, central_hi)
    offsets = _decay_profile(config, rng)[:, None] * _unit(rng.uniform(0.0, 2.0 * math.pi))
    mover_track = target_track + offsets

    lo = np.array([margin, margin])
    hi = np.array([w - margin, h - margin])
    tracks = {0: mover_track, 1: target_track}
    keep_away: list[tuple[np.ndarray, float]] = [(target_track[0], 40.0), (mover_track[0], 30.0)]
    for i in range(config.n_distractors):
        start = _place(lay_rng, lo, hi, keep_away)
        keep_away.append((start, 20.0))
        tracks[2 + i] = _walk(lay_rng, start, config.n_frames, 2.0, lo, hi)
    classes = {fid: FeatureClass.POINT for fid in tracks}
    return _Layout(
        tracks, classes, (0, 1), (0,), (1,), tuple(range(2, 2 + config.n_distractors))
    )


def _segment_tracks(
    center_track: np.ndarray, angle: float, half_len: float
) -> tuple[np.ndarray, np.ndarray]:
    arm = half_len * _unit(angle)
    return center_track - arm, center_track + arm


def _layout_p2l(config: DemoConfig, rng: np.random.Generator, lay_rng: np.random.Generator) -> _Layout:
    w, h = config.image_size
    central_lo = np.array([0.35 * w, 0.35 * h])
    central_hi = np.array([0.65 * w, 0.65 * h])
    angle = rng.uniform(0.0, math.pi)
    half_len = 75.0
    center_track = _orbit_track(rng, config.n_frames, central_lo, central_hi)
    ep_a, ep_b = _segment_tracks(center_track, angle, half_len)
    normal = _unit(angle + math.pi / 2.0)
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    along = rng.uniform(-0.35, 0.35) * half_len
    base = center_track + along * _unit(angle)
    mover_track = base + (side * _decay_profile(config, rng))[:, None] * normal

    tracks = {0: mover_track, 1: ep_a, 2: ep_b}
    classes = {
        0: FeatureClass.POINT,
        1: FeatureClass.SEGMENT_ENDPOINT,
        2: FeatureClass.SEGMENT_ENDPOINT,
    }
    margin = 60.0
    lo = np.array([margin, margin])
    hi = np.array([w - margin, h - margin])
    keep_away = [(center_track[0], 2.2 * half_len)]
    next_id = 3
    for _ in range(config.n_distractors):
        start = _place(lay_rng, lo, hi, keep_away)
        keep_away.append((start, 20.0))
        tracks[next_id] = _walk(lay_rng, start, config.n_frames, 2.0, lo, hi)
        classes[next_id] = FeatureClass.POINT
        next_id += 1
    for _ in range(config.n_distractor_segments):
        seg_center = _place(lay_rng, lo + half_len, hi - half_len, keep_away)
        keep_away.append((seg_center, 30.0))
        seg_track = _walk(lay_rng, seg_center, config.n_frames, 2.0, lo + half_len, hi - half_len)
        sa, sb = _segment_tracks(seg_track, lay_rng.uniform(0.0, math.pi), half_len)
        tracks[next_id], tracks[next_id + 1] = sa, sb
        classes[next_id] = FeatureClass.SEGMENT_ENDPOINT
        classes[next_id + 1] = FeatureClass.SEGMENT_ENDPOINT
        next_id += 2
    return _Layout(tracks, classes, (0, 1, 2), (0,), (1, 2), tuple(range(3, next_id)))


def _layout_l2l(config: DemoConfig, rng: np.random.Generator, lay_rng: np.random.Generator) -> _Layout:
    w, h = config.image_size
    central_lo = np.array([0.35 * w, 0.35 * h])
    central_hi = np.array([0.65 * w, 0.65 * h])
    angle = rng.uniform(0.0, math.pi)
    half_len = 75.0
    center_track = _orbit_track(rng, config.n_frames, central_lo, central_hi)
    tgt_a, tgt_b = _segment_tracks(center_track, angle, half_len)
    normal = _unit(angle + math.pi / 2.0)
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    # Both endpoints share the perpendicular offset, so the residual pair
    # has norm equal to the decay profile.
    dist = (side * _decay_profile(config, rng) / math.sqrt(2.0))[:, None] * normal
    base_a = center_track - 0.5 * half_len * _unit(angle)
    base_b = center_track + 0.5 * half_len * _unit(angle)

    tracks = {0: base_a + dist, 1: base_b + dist, 2: tgt_a, 3: tgt_b}
    classes = {i: FeatureClass.SEGMENT_ENDPOINT for i in range(4)}
    margin = 60.0
    lo = np.array([margin + half_len, margin + half_len])
    hi = np.array([w - margin - half_len, h - margin - half_len])
    keep_away = [(center_track[0], 2.2 * half_len)]
    next_id = 4
    for _ in range(config.n_distractors):
        seg_center = _place(lay_rng, lo, hi, keep_away)
        keep_away.append((seg_center, 30.0))
        seg_track = _walk(lay_rng, seg_center, config.n_frames, 2.0, lo, hi)
        sa, sb = _segment_tracks(seg_track, lay_rng.uniform(0.0, math.pi), half_len)
        tracks[next_id], tracks[next_id + 1] = sa, sb
        classes[next_id] = FeatureClass.SEGMENT_ENDPOINT
        classes[next_id + 1] = FeatureClass.SEGMENT_ENDPOINT
        next_id += 2
    return _Layout(tracks, classes, (0, 1, 2, 3), (0, 1), (2, 3), tuple(range(4, next_id)))


_CONIC_SAMPLE_ANGLES = np.deg2rad([10.0, 82.0, 154.0, 226.0, 298.0])


def _conic_sample_tracks(
    center_track: np.ndarray, axes: tuple[float, float]
) -> list[np.ndarray]:
    a, b = axes
    out = []
    for phi in _CONIC_SAMPLE_ANGLES:
        offset = np.array([a * math.cos(phi), b * math.sin(phi)])
        out.append(center_track + offset)
    return out


def _layout_p2c(config: DemoConfig, rng: np.random.Generator, lay_rng: np.random.Generator) -> _Layout:
    from .geometry import conic_through, p2c_error  # local to avoid cycle at import time

    w, h = config.image_size
    central_lo = np.array([0.4 * w, 0.42 * h])
    central_hi = np.array([0.6 * w, 0.58 * h])
    axes = (70.0, 45.0)
    center_track = _orbit_track(rng, config.n_frames, central_lo, central_hi)
    samples = _conic_sample_tracks(center_track, axes)

    ray = rng.uniform(0.0, 2.0 * math.pi)
    direction = _unit(ray)
    g = (direction[0] / axes[0]) ** 2 + (direction[1] / axes[1]) ** 2
    r_on = 1.0 / math.sqrt(g)
    e0 = config.start_error_px if config.start_error_px is not None else rng.uniform(40.0, 80.0)

    # Solve for the radius giving each frame's target residual against that
    # frame's exact sample conic, so the signal decays by construction.
    mover_track = np.empty((config.n_frames, 2))
    v0 = None
    for t in range(config.n_frames):
        conic = conic_through([ImagePoint(*s[t]) for s in samples])
        probe_r = r_on + 25.0
        probe = ImagePoint(*(center_track[t] + probe_r * direction))
        scale = float(p2c_error(probe, conic).values[0]) / (probe_r**2 * g - 1.0)
        if v0 is None:
            r_start = r_on + e0
            v0 = abs(scale) * (r_start**2 * g - 1.0)
        target_resid = v0 * config.approach_rate**t
        r_t = math.sqrt((target_resid / abs(scale) + 1.0) / g)
        mover_track[t] = center_track[t] + r_t * direction

    tracks = {0: mover_track}
    classes = {0: FeatureClass.POINT}
    for i, s in enumerate(samples):
        tracks[1 + i] = s
        classes[1 + i] = FeatureClass.CONIC_SAMPLE
    margin = 60.0
    lo = np.array([margin, margin])
    hi = np.array([w - margin, h - margin])
    keep_away = [(center_track[0], axes[0] + 60.0)]
    next_id = 6
    for _ in range(config.n_distractors):
        start = _place(lay_rng, lo, hi, keep_away)
        keep_away.append((start, 20.0))
        tracks[next_id] = _walk(lay_rng, start, config.n_frames, 2.0, lo, hi)
        classes[next_id] = FeatureClass.POINT
        next_id += 1
    # One wandering distractor conic keeps the entity pairing non-trivial.
    d_center = _place(lay_rng, lo + axes[0], hi - axes[0], keep_away)
    d_track = _walk(lay_rng, d_center, config.n_frames, 1.0, lo + axes[0], hi - axes[0])
    for s in _conic_sample_tracks(d_track, (55.0, 65.0)):
        tracks[next_id] = s
        classes[next_id] = FeatureClass.CONIC_SAMPLE
        next_id += 1
    return _Layout(tracks, classes, tuple(range(6)), (0,), tuple(range(1, 6)), tuple(range(6, next_id)))


_LAYOUTS = {
    KernelKind.P2P: _layout_p2p,
    KernelKind.P2L: _layout_p2l,
    KernelKind.L2L: _layout_l2l,
    KernelKind.P2C: _layout_p2c,
}


def _observe_tracks(
    world_tracks: dict[int, np.ndarray],
    classes: dict[int, FeatureClass],
    bases: dict[int, np.ndarray],
    camera: CameraModel,
    n_frames: int,
    noise_px: float,
    jitter: float,
    image_size: tuple[int, int],
    noise_rng: np.random.Generator,
    jitter_rng: np.random.Generator,
) -> list[list[FeatureObservation]]:
    w, h = image_size
    frames: list[list[FeatureObservation]] = []
    for t in range(n_frames):
        frame: list[FeatureObservation] = []
        for fid in sorted(world_tracks):
            try:
                pix = project(world_tracks[fid][t], camera)
                u, v = pix.u, pix.v
                in_front = True
            except BehindCameraError:
                u, v, in_front = -1.0, -1.0, False
            if noise_px > 0 and in_front:
                u += noise_rng.normal(0.0, noise_px)
                v += noise_rng.normal(0.0, noise_px)
            visible = in_front and 0.0 <= u < w and 0.0 <= v < h
            frame.append(
                FeatureObservation(
                    id=fid,
                    pixel=ImagePoint(float(u), float(v)),
                    descriptor=descriptor_of(bases[fid], jitter, jitter_rng),
                    visible=visible,
                    feature_class=classes[fid],
                )
            )
        frames.append(frame)
    return frames


def _descriptor_bases(
    layout: _Layout, config: DemoConfig
) -> dict[int, np.ndarray]:
    gt = set(layout.ground_truth)
    bases = {}
    for fid in layout.tracks_px:
        if fid in gt:
            bases[fid] = base_descriptor(fid, config.descriptor_dim, config.seed, _TAG_GT_DESC)
        else:
            bases[fid] = base_descriptor(
                fid, config.descriptor_dim, config.effective_layout_seed, _TAG_DISTRACTOR_DESC
            )
    return bases


def gen_demo(config: DemoConfig) -> DemoSequence:
    """Generate one demonstration.

    The ground-truth association appears first in the id range (mover
    entity, then target entity); everything is deterministic given the
    config. Segment endpoints and conic samples are allocated on
    consecutive ids, which downstream candidate enumeration relies on.
    """
    rng = np.random.default_rng([config.seed, _TAG_LAYOUT])
    lay_rng = np.random.default_rng([config.effective_layout_seed, _TAG_LAYOUT, 2])
    layout = _LAYOUTS[config.kernel_kind](config, rng, lay_rng)

    camera = CameraModel(
        cu=config.image_size[0] / 2.0, cv=config.image_size[1] / 2.0
    )
    world_tracks = {
        fid: _px_to_world(track, camera, DESK_DEPTH_M)
        for fid, track in layout.tracks_px.items()
    }
    bases = _descriptor_bases(layout, config)
    frames = _observe_tracks(
        world_tracks,
        layout.classes,
        bases,
        camera,
        config.n_frames,
        config.noise_px,
        config.descriptor_jitter,
        config.image_size,
        np.random.default_rng([config.seed, _TAG_NOISE]),
        np.random.default_rng([config.seed, _TAG_JITTER]),
    )
    demo = DemoSequence(
        frames=frames,
        ground_truth=layout.ground_truth,
        camera=camera,
        seed=config.seed,
        kernel_kind=config.kernel_kind,
        config=config,
        world_tracks=world_tracks,
        mover_ids=layout.mover_ids,
        target_ids=layout.target_ids,
    )
    if not demo.gt_visible(0):
        raise SceneError("generated demo does not show the ground truth in frame 1")
    return demo


def _classes_of(demo: DemoSequence) -> dict[int, FeatureClass]:
    return {obs.id: obs.feature_class for obs in demo.frames[0]}


def _bases_of(demo: DemoSequence) -> dict[int, np.ndarray]:
    if demo.config is None:
        raise SceneError("demo lacks its generation config")
    cfg = demo.config
    gt = set(demo.ground_truth)
    bases = {}
    for fid in demo.feature_ids():
        if fid in gt:
            bases[fid] = base_descriptor(fid, cfg.descriptor_dim, cfg.seed, _TAG_GT_DESC)
        else:
            bases[fid] = base_descriptor(
                fid, cfg.descriptor_dim, cfg.effective_layout_seed, _TAG_DISTRACTOR_DESC
            )
    return bases


def _reproject(
    demo: DemoSequence,
    world_tracks: dict[int, np.ndarray],
    camera: CameraModel,
    seed: int,
    tag: int,
) -> DemoSequence:
    cfg = demo.config
    frames = _observe_tracks(
        world_tracks,
        _classes_of(demo),
        _bases_of(demo),
        camera,
        demo.n_frames,
        cfg.noise_px,
        cfg.descriptor_jitter,
        cfg.image_size,
        np.random.default_rng([seed, tag, _TAG_NOISE]),
        np.random.default_rng([seed, tag, _TAG_JITTER]),
    )
    return DemoSequence(
        frames=frames,
        ground_truth=demo.ground_truth,
        camera=camera,
        seed=demo.seed,
        kernel_kind=demo.kernel_kind,
        config=cfg,
        world_tracks=world_tracks,
        mover_ids=demo.mover_ids,
        target_ids=demo.target_ids,
    )


def _window(magnitude: float, n_frames: int) -> tuple[int, int]:
    """Centered frame window covering a magnitude fraction of the demo."""
    span = int(round(min(max(magnitude, 0.0), 1.0) * n_frames))
    span = min(span, n_frames - 2)
    start = max(1, (n_frames - span) // 2)
    return start, start + span


def apply_perturbation(
    demo: DemoSequence, setting: PerturbationSetting, seed: int = 0
) -> DemoSequence:
    """Return a perturbed copy of a demonstration.

    Geometric perturbations (random_target, change_camera, outside_fov)
    re-render from the stored world tracks, so they require a demo that
    still carries them (i.e. generated in-process, not loaded from JSON).
    """
    kind = PerturbationKind(setting.kind)
    rng = np.random.default_rng([seed, _TAG_PERTURB[kind.value]])

    if kind is PerturbationKind.OCCLUSION:
        if setting.magnitude == 0:
            return copy.deepcopy(demo)
        out = copy.deepcopy(demo)
        start, stop = _window(setting.magnitude, demo.n_frames)
        gt = set(demo.ground_truth)
        for t in range(start, stop):
            for obs in out.frames[t]:
                if obs.id in gt:
                    obs.visible = False
        return out

    if kind is PerturbationKind.CHANGE_ILLUMINATION:
        out = copy.deepcopy(demo)
        for frame in out.frames:
            for obs in frame:
                obs.descriptor = obs.descriptor + rng.normal(
                    0.0, setting.magnitude, obs.descriptor.shape
                )
        return out

    if demo.world_tracks is None or demo.config is None:
        raise SceneError(f"{kind.value} needs world tracks; re-generate the demo in-process")

    if kind is PerturbationKind.OUTSIDE_FOV:
        tracks = {fid: tr.copy() for fid, tr in demo.world_tracks.items()}
        start, stop = _window(setting.magnitude, demo.n_frames)
        shift = np.array([2.0 * demo.config.image_size[0] * DESK_DEPTH_M / demo.camera.f, 0.0, 0.0])
        for fid in demo.mover_ids:
            tracks[fid][start:stop] += shift
        return _reproject(demo, tracks, demo.camera, seed, _TAG_PERTURB[kind.value])

    if kind is PerturbationKind.CHANGE_CAMERA:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = math.radians(3.0 * setting.magnitude)
        rot = rodrigues(axis * angle)
        shift = rng.normal(0.0, 0.02 * setting.magnitude / math.sqrt(3.0), 3)
        camera = CameraModel(
            f=demo.camera.f,
            cu=demo.camera.cu,
            cv=demo.camera.cv,
            rotation=rot @ demo.camera.rotation,
            translation=rot @ demo.camera.translation + shift,
        )
        return _reproject(demo, demo.world_tracks, camera, seed, _TAG_PERTURB[kind.value])

    # random_target: one rigid in-plane motion applied to both the target
    # and the mover tracks, i.e. the same approach demonstrated at a new
    # target pose. Distances within the pair are preserved exactly.
    scale = DESK_DEPTH_M / demo.camera.f
    cfg = demo.config
    w, h = cfg.image_size
    gt_ids = set(demo.mover_ids) | set(demo.target_ids)
    anchor = np.concatenate(
        [np.mean([demo.world_tracks[fid][0][:2] for fid in demo.target_ids], axis=0), [0.0]]
    )
    for attempt in range(200):
        angle = rng.uniform(-0.6, 0.6) * min(setting.magnitude, 2.0)
        direction = rng.uniform(0.0, 2.0 * math.pi)
        # Later attempts shrink the displacement until everything stays in view.
        dist_px = 120.0 * setting.magnitude * (0.85 ** (attempt // 20))
        delta = np.array([math.cos(direction), math.sin(direction), 0.0]) * dist_px * scale
        rot = rodrigues(np.array([0.0, 0.0, angle]))
        tracks = {fid: tr.copy() for fid, tr in demo.world_tracks.items()}
        ok = True
        for fid in gt_ids:
            moved = (rot @ (tracks[fid] - anchor).T).T + anchor + delta
            tracks[fid] = moved
            px_u = moved[:, 0] / moved[:, 2] * demo.camera.f + demo.camera.cu
            px_v = moved[:, 1] / moved[:, 2] * demo.camera.f + demo.camera.cv
            pad = 15.0
            if not (
                (px_u > pad).all()
                and (px_u < w - pad).all()
                and (px_v > pad).all()
                and (px_v < h - pad).all()
            ):
                ok = False
                break
        if ok:
            return _reproject(demo, tracks, demo.camera, seed, _TAG_PERTURB[kind.value])
    raise SceneError("could not find an in-view rigid target displacement")


def demo_to_json_dict(demo: DemoSequence) -> dict:
    payload = {
        "camera": demo.camera.to_json_dict(),
        "seed": demo.seed,
        "ground_truth": list(demo.ground_truth),
        "frames": [
            [
                {
                    "id": obs.id,
                    "u": float(obs.pixel.u),
                    "v": float(obs.pixel.v),
                    "visible": bool(obs.visible),
                    "descriptor": [float(x) for x in obs.descriptor],
                    "feature_class": obs.feature_class.value,
                }
                for obs in frame
            ]
            for frame in demo.frames
        ],
    }
    if demo.config is not None:
        payload["config"] = demo.config.to_json_dict()
    return payload


def demo_from_json_dict(payload: dict) -> DemoSequence:
    config = DemoConfig.from_json_dict(payload["config"]) if "config" in payload else None
    frames = [
        [
            FeatureObservation(
                id=entry["id"],
                pixel=ImagePoint(entry["u"], entry["v"]),
                descriptor=np.array(entry["descriptor"], dtype=float),
                visible=entry["visible"],
                feature_class=FeatureClass(entry["feature_class"]),
            )
            for entry in frame
        ]
        for frame in payload["frames"]
    ]
    kind = config.kernel_kind if config else KernelKind.P2P
    return DemoSequence(
        frames=frames,
        ground_truth=tuple(payload["ground_truth"]),
        camera=CameraModel.from_json_dict(payload["camera"]),
        seed=payload["seed"],
        kernel_kind=kind,
        config=config,
    )


def save_demo(demo: DemoSequence, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(demo_to_json_dict(demo), fh)


def load_demo(path: str) -> DemoSequence:
    with open(path) as fh:
        return demo_from_json_dict(json.load(fh))


@dataclass
class SimWorld:
    """A static scene whose mover entity or camera can be actuated.

    Unlike a demonstration, the world holds a single configuration; the
    servo loop renders it, acts, and renders again.
    """

    camera: CameraModel
    positions: dict[int, np.ndarray]
    classes: dict[int, FeatureClass]
    bases: dict[int, np.ndarray]
    mover_ids: tuple[int, ...]
    ground_truth: tuple[int, ...]
    kernel_kind: KernelKind
    image_size: tuple[int, int] = IMAGE_SIZE
    descriptor_jitter: float = 0.0
    jitter_rng: np.random.Generator = field(
        default_factory=lambda: np.random.default_rng(0)
    )

    def render(self) -> list[FeatureObservation]:
        w, h = self.image_size
        frame = []
        for fid in sorted(self.positions):
            try:
                pix = project(self.positions[fid], self.camera)
                visible = 0.0 <= pix.u < w and 0.0 <= pix.v < h
            except BehindCameraError:
                pix, visible = ImagePoint(-1.0, -1.0), False
            frame.append(
                FeatureObservation(
                    id=fid,
                    pixel=pix,
                    descriptor=descriptor_of(self.bases[fid], self.descriptor_jitter, self.jitter_rng),
                    visible=visible,
                    feature_class=self.classes[fid],
                )
            )
        return frame

    def depth_of(self, feature_id: int) -> float:
        return float(self.camera.world_to_camera(self.positions[feature_id])[2])

    def move_object(self, delta_xy: np.ndarray, d_theta: float = 0.0) -> None:
        """Rigidly move the mover entity in the desk plane."""
        delta = np.asarray(delta_xy, dtype=float).reshape(2)
        ids = list(self.mover_ids)
        centroid = np.mean([self.positions[fid] for fid in ids], axis=0)
        rot = rodrigues(np.array([0.0, 0.0, float(d_theta)]))
        for fid in ids:
            moved = rot @ (self.positions[fid] - centroid) + centroid
            moved[0] += delta[0]
            moved[1] += delta[1]
            self.positions[fid] = moved

    def move_camera(self, twist: np.ndarray) -> None:
        """Integrate a camera-frame velocity screw (vx, vy, vz, wx, wy, wz)."""
        twist = np.asarray(twist, dtype=float).reshape(6)
        v, omega = twist[:3], twist[3:]
        rot = rodrigues(-omega)
        self.camera = CameraModel(
            f=self.camera.f,
            cu=self.camera.cu,
            cv=self.camera.cv,
            rotation=rot @ self.camera.rotation,
            translation=rot @ self.camera.translation - v,
        )


def make_servo_world(
    kind: KernelKind = KernelKind.P2P,
    seed: int = 0,
    n_distractors: int = 6,
    start_error_px: float = 60.0,
    descriptor_dim: int = 16,
    descriptor_jitter: float = 0.0,
    image_size: tuple[int, int] = IMAGE_SIZE,
) -> SimWorld:
    """Build a static scene matching the demo generator's conventions.

    Ground-truth entities reuse the descriptor streams of `seed`, so a
    kernel trained on ``gen_demo(DemoConfig(seed=seed))`` recognizes them.
    """
    kind = KernelKind(kind)
    rng = np.random.default_rng([seed, _TAG_SERVO])
    w, h = image_size
    camera = CameraModel(cu=w / 2.0, cv=h / 2.0)

    def to_world(px: np.ndarray) -> np.ndarray:
        return np.array(
            [
                (px[0] - camera.cu) / camera.f * DESK_DEPTH_M,
                (px[1] - camera.cv) / camera.f * DESK_DEPTH_M,
                DESK_DEPTH_M,
            ]
        )

    central_lo = np.array([0.35 * w, 0.35 * h])
    central_hi = np.array([0.65 * w, 0.65 * h])
    positions_px: dict[int, np.ndarray] = {}
    classes: dict[int, FeatureClass] = {}

    if kind is KernelKind.P2P:
        target = rng.uniform(central_lo, central_hi)
        offset = start_error_px * _unit(rng.uniform(0.0, 2.0 * math.pi))
        positions_px[0] = target + offset
        positions_px[1] = target
        classes[0] = classes[1] = FeatureClass.POINT
        mover_ids, gt = (0,), (0, 1)
        next_id, anchor = 2, target
    elif kind is KernelKind.P2L:
        center = rng.uniform(central_lo, central_hi)
        angle = rng.uniform(0.0, math.pi)
        arm = 75.0 * _unit(angle)
        positions_px[1], positions_px[2] = center - arm, center + arm
        positions_px[0] = center + start_error_px * _unit(angle + math.pi / 2.0)
        classes[0] = FeatureClass.POINT
        classes[1] = classes[2] = FeatureClass.SEGMENT_ENDPOINT
        mover_ids, gt = (0,), (0, 1, 2)
        next_id, anchor = 3, center
    elif kind is KernelKind.L2L:
        center = rng.uniform(central_lo, central_hi)
        angle = rng.uniform(0.0, math.pi)
        arm = 75.0 * _unit(angle)
        normal = _unit(angle + math.pi / 2.0)
        positions_px[2], positions_px[3] = center - arm, center + arm
        positions_px[0] = center - 0.5 * arm + (start_error_px / math.sqrt(2.0)) * normal
        positions_px[1] = center + 0.5 * arm + (start_error_px / math.sqrt(2.0)) * normal
        classes = {i: FeatureClass.SEGMENT_ENDPOINT for i in range(4)}
        mover_ids, gt = (0, 1), (0, 1, 2, 3)
        next_id, anchor = 4, center
    else:
        center = rng.uniform(central_lo, central_hi)
        axes = (70.0, 45.0)
        ray = rng.uniform(0.0, 2.0 * math.pi)
        direction = _unit(ray)
        g = (direction[0] / axes[0]) ** 2 + (direction[1] / axes[1]) ** 2
        positions_px[0] = center + (1.0 / math.sqrt(g) + start_error_px) * direction
        classes[0] = FeatureClass.POINT
        for i, phi in enumerate(_CONIC_SAMPLE_ANGLES):
            positions_px[1 + i] = center + np.array(
                [axes[0] * math.cos(phi), axes[1] * math.sin(phi)]
            )
            classes[1 + i] = FeatureClass.CONIC_SAMPLE
        mover_ids, gt = (0,), tuple(range(6))
        next_id, anchor = 6, center

    margin = 60.0
    lo = np.array([margin, margin])
    hi = np.array([w - margin, h - margin])
    keep_away = [(anchor, 170.0)]
    for _ in range(n_distractors):
        spot = _place(rng, lo, hi, keep_away)
        keep_away.append((spot, 20.0))
        positions_px[next_id] = spot
        classes[next_id] = FeatureClass.POINT
        next_id += 1

    bases = {}
    for fid in positions_px:
        if fid in set(gt):
            bases[fid] = base_descriptor(fid, descriptor_dim, seed, _TAG_GT_DESC)
        else:
            bases[fid] = base_descriptor(fid, descriptor_dim, seed, _TAG_DISTRACTOR_DESC)

    return SimWorld(
        camera=camera,
        positions={fid: to_world(px) for fid, px in positions_px.items()},
        classes=classes,
        bases=bases,
        mover_ids=mover_ids,
        ground_truth=gt,
        kernel_kind=kind,
        image_size=image_size,
        descriptor_jitter=descriptor_jitter,
        jitter_rng=np.random.default_rng([seed, _TAG_SERVO, 2]),
    )
