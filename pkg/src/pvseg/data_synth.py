"""Deterministic synthetic videos of moving shapes, with occlusion events.

Clips contain simple colored shapes (disks, rectangles, L-shapes) moving with
constant velocity and reflecting off the frame borders.  A scheduled occlusion
hides an object for a span of frames while its motion keeps integrating, so it
reappears at the kinematically extrapolated position.  Overlapping objects are
rendered painter-style (higher object id wins) and masks cover only the
visible pixels, so partial and full cover-ups arise naturally.

Also implements the on-disk dataset layout::

    root/manifest.json
    root/clip_<k>/frames/<t:06d>.png          # RGB, 8-bit
    root/clip_<k>/masks/obj_<o>/<t:06d>.png   # single channel, 0/255

All pixel data round-trips losslessly (frames are quantized to 8 bits at
generation time).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

SHAPE_KINDS = ("disk", "rectangle", "l_shape")
BACKGROUNDS = ("flat", "noise")

FLAT_BACKGROUND_GRAY = 40  # uint8 value used for every channel of a flat background


class ConfigurationError(ValueError):
    """Raised for synthesis configs that violate their invariants."""


class DatasetIntegrityError(RuntimeError):
    """Raised when an on-disk dataset is missing files or its manifest."""


@dataclass
class SynthConfig:
    """Parameters of one synthetic clip.

    ``occlusion_schedule`` holds ``(object_id, start_frame, end_frame)`` spans
    (inclusive) during which the object is hidden.  ``motion`` optionally pins
    per-object velocities in pixels/frame as ``(vx, vy)``; when ``None`` they
    are drawn from the seed.
    """

    num_frames: int = 8
    height: int = 64
    width: int = 64
    num_objects: int = 1
    channels: int = 3
    occlusion_schedule: list[tuple[int, int, int]] = field(default_factory=list)
    motion: list[tuple[float, float]] | None = None
    shape_kind: str = "disk"
    background: str = "flat"

    def validate(self) -> None:
        if self.num_frames < 1:
            raise ConfigurationError(f"num_frames must be >= 1, got {self.num_frames}")
        if self.height < 8 or self.width < 8:
            raise ConfigurationError(f"frame size too small: {self.height}x{self.width}")
        if self.num_objects < 1:
            raise ConfigurationError(f"num_objects must be >= 1, got {self.num_objects}")
        if self.channels != 3:
            raise ConfigurationError(f"channels is fixed to 3, got {self.channels}")
        if self.shape_kind not in SHAPE_KINDS:
            raise ConfigurationError(f"unknown shape_kind {self.shape_kind!r}")
        if self.background not in BACKGROUNDS:
            raise ConfigurationError(f"unknown background {self.background!r}")
        for obj, start, end in self.occlusion_schedule:
            if not (0 <= obj < self.num_objects):
                raise ConfigurationError(f"occlusion object id {obj} out of range")
            if not (0 <= start <= end < self.num_frames):
                raise ConfigurationError(
                    f"occlusion span ({start}, {end}) invalid for {self.num_frames} frames"
                )
        if self.motion is not None and len(self.motion) != self.num_objects:
            raise ConfigurationError(
                f"motion has {len(self.motion)} entries for {self.num_objects} objects"
            )


@dataclass
class VideoClip:
    """Frame tensor of shape [n, c, h, w], float32 in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be [n, c, h, w], got shape {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain NaN/Inf")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]


@dataclass
class MaskAnnotation:
    """Per-object, per-frame binary masks [num_objects, n, h, w] plus a
    visibility table [num_objects, n] (1 iff the mask is nonempty)."""

    masks: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        if self.masks.ndim != 4:
            raise ValueError(f"masks must be [num_objects, n, h, w], got {self.masks.shape}")
        uniq = np.unique(self.masks)
        if not np.isin(uniq, [0, 1]).all():
            raise ValueError("masks must be binary")
        derived = (self.masks.sum(axis=(2, 3)) > 0).astype(np.uint8)
        if not np.array_equal(derived, self.visibility):
            raise ValueError("visibility table inconsistent with masks")

    @classmethod
    def from_masks(cls, masks: np.ndarray) -> "MaskAnnotation":
        visibility = (masks.sum(axis=(2, 3)) > 0).astype(np.uint8)
        return cls(masks=masks.astype(np.uint8), visibility=visibility)


@dataclass
class ObjectState:
    """Per-object geometry trace: shape kind, size parameters, color and the
    per-frame center positions (x, y) in pixel coordinates."""

    kind: str
    size: float
    aspect: float
    color: np.ndarray  # uint8 [3]
    centers: np.ndarray  # float64 [n, 2] as (x, y)
    occluded: np.ndarray  # bool [n]


def _reflect(pos: float, lo: float, hi: float, vel: float) -> tuple[float, float]:
    """One reflecting-boundary step: returns corrected position and velocity."""
    if hi <= lo:
        return (lo + hi) / 2.0, 0.0
    while pos < lo or pos > hi:
        if pos < lo:
            pos = 2 * lo - pos
            vel = -vel
        elif pos > hi:
            pos = 2 * hi - pos
            vel = -vel
    return pos, vel


def _half_extents(kind: str, size: float, aspect: float) -> tuple[float, float]:
    """Shape half-extent in (x, y)."""
    if kind == "disk":
        return size, size
    return size * aspect, size


def object_states(config: SynthConfig, seed: int) -> list[ObjectState]:
    """Derive the full deterministic geometry trace for every object.

    Motion integrates across occluded frames, so reappearance is at the
    extrapolated position rather than the disappearance point.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n, h, w = config.num_frames, config.height, config.width
    min_dim = min(h, w)

    states = []
    for obj in range(config.num_objects):
        size = float(rng.uniform(0.16, 0.24) * min_dim)
        aspect = float(rng.uniform(0.7, 1.3)) if config.shape_kind != "disk" else 1.0
        # Bright, saturated-ish colors that stand out from the dark background.
        color = rng.integers(100, 256, size=3).astype(np.uint8)
        ex, ey = _half_extents(config.shape_kind, size, aspect)
        if 2 * max(ex, ey) >= min_dim:
            raise ConfigurationError("object diameter exceeds frame size")
        cx = float(rng.uniform(ex + 1, w - 1 - ex - 1))
        cy = float(rng.uniform(ey + 1, h - 1 - ey - 1))
        if config.motion is not None:
            vx, vy = (float(v) for v in config.motion[obj])
        else:
            speed = rng.uniform(0.8, 2.5)
            angle = rng.uniform(0, 2 * np.pi)
            vx, vy = float(speed * np.cos(angle)), float(speed * np.sin(angle))

        centers = np.zeros((n, 2), dtype=np.float64)
        occluded = np.zeros(n, dtype=bool)
        for t in range(n):
            centers[t] = (cx, cy)
            cx, vx = _reflect(cx + vx, ex + 1, w - 1 - ex - 1, vx)
            cy, vy = _reflect(cy + vy, ey + 1, h - 1 - ey - 1, vy)
        for sched_obj, start, end in config.occlusion_schedule:
            if sched_obj == obj:
                occluded[start : end + 1] = True
        states.append(
            ObjectState(
                kind=config.shape_kind,
                size=size,
                aspect=aspect,
                color=color,
                centers=centers,
                occluded=occluded,
            )
        )
    return states


def rasterize_shape(
    kind: str, center: tuple[float, float], size: float, aspect: float, height: int, width: int
) -> np.ndarray:
    """Boolean mask of a shape instance on an empty frame."""
    cx, cy = center
    yy, xx = np.mgrid[0:height, 0:width]
    if kind == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= size**2
    ex, ey = _half_extents(kind, size, aspect)
    rect = (np.abs(xx - cx) <= ex) & (np.abs(yy - cy) <= ey)
    if kind == "rectangle":
        return rect
    # L-shape: rectangle with the top-right quadrant removed.
    notch = (yy < cy) & (xx > cx)
    return rect & ~notch


def generate_clip(config: SynthConfig, seed: int) -> tuple[VideoClip, MaskAnnotation]:
    """Render one clip. Pure function of (config, seed)."""
    config.validate()
    states = object_states(config, seed)
    n, h, w = config.num_frames, config.height, config.width
    rng_bg = np.random.default_rng(seed + 1_000_003)  # background noise stream

    frames_u8 = np.zeros((n, h, w, 3), dtype=np.uint8)
    masks = np.zeros((config.num_objects, n, h, w), dtype=np.uint8)

    for t in range(n):
        if config.background == "flat":
            frame = np.full((h, w, 3), FLAT_BACKGROUND_GRAY, dtype=np.uint8)
        else:
            frame = rng_bg.integers(0, 80, size=(h, w, 3)).astype(np.uint8)
        # Ownership map: -1 background, else highest object id covering the pixel.
        owner = np.full((h, w), -1, dtype=np.int32)
        for obj, st in enumerate(states):
            if st.occluded[t]:
                continue
            shape = rasterize_shape(st.kind, tuple(st.centers[t]), st.size, st.aspect, h, w)
            owner[shape] = obj
        for obj, st in enumerate(states):
            vis = owner == obj
            masks[obj, t] = vis.astype(np.uint8)
            frame[vis] = st.color
        frames_u8[t] = frame

    frames = frames_u8.astype(np.float32) / np.float32(255.0)
    frames = np.transpose(frames, (0, 3, 1, 2))  # [n, c, h, w]
    return VideoClip(frames=frames), MaskAnnotation.from_masks(masks)


DATASET_SPEC_DEFAULTS = {
    "num_clips": 10,
    "num_frames": 8,
    "height": 64,
    "width": 64,
    "num_objects": 1,
    "shape_kinds": list(SHAPE_KINDS),
    "backgrounds": ["flat"],
    "occlusion_prob": 0.5,
    "occlusion_min_len": 2,
    "occlusion_max_len": 4,
}


def synth_dataset(spec: dict, seed: int) -> tuple[list[VideoClip], list[MaskAnnotation]]:
    """Generate a multi-clip dataset from a declarative spec dict (see
    DATASET_SPEC_DEFAULTS).  Shape kinds and backgrounds cycle across clips;
    occlusion spans keep the first and last frame visible so every occluded
    object also reappears.  Deterministic for (spec, seed)."""
    cfg = {**DATASET_SPEC_DEFAULTS, **spec}
    unknown = set(cfg) - set(DATASET_SPEC_DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown dataset spec keys: {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    n = cfg["num_frames"]
    clips, annotations = [], []
    for k in range(cfg["num_clips"]):
        schedule = []
        for o in range(cfg["num_objects"]):
            max_len = min(cfg["occlusion_max_len"], n - 2)
            if rng.random() < cfg["occlusion_prob"] and max_len >= cfg["occlusion_min_len"]:
                length = int(rng.integers(cfg["occlusion_min_len"], max_len + 1))
                start = int(rng.integers(1, n - length))
                schedule.append((o, start, start + length - 1))
        clip_cfg = SynthConfig(
            num_frames=n,
            height=cfg["height"],
            width=cfg["width"],
            num_objects=cfg["num_objects"],
            occlusion_schedule=schedule,
            shape_kind=cfg["shape_kinds"][k % len(cfg["shape_kinds"])],
            background=cfg["backgrounds"][k % len(cfg["backgrounds"])],
        )
        clip_seed = int(rng.integers(2**31 - 1))
        clip, ann = generate_clip(clip_cfg, clip_seed)
        clips.append(clip)
        annotations.append(ann)
    return clips, annotations


# --------------------------------------------------------------------------
# On-disk dataset format
# --------------------------------------------------------------------------


def _clip_id(k: int) -> str:
    return f"clip_{k}"


def frames_to_uint8(frames: np.ndarray) -> np.ndarray:
    """[n, c, h, w] float in [0,1] -> [n, h, w, c] uint8."""
    u8 = np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.transpose(u8, (0, 2, 3, 1))


def write_dataset(
    clips: list[VideoClip], annotations: list[MaskAnnotation], root_dir: str
) -> str:
    """Write clips and masks as PNG trees plus a manifest. Returns the
    manifest path."""
    if len(clips) != len(annotations):
        raise ValueError("clips and annotations must pair up")
    os.makedirs(root_dir, exist_ok=True)
    manifest = {"clips": []}
    for k, (clip, ann) in enumerate(zip(clips, annotations)):
        cid = _clip_id(k)
        n, _, h, w = clip.frames.shape
        num_objects = ann.masks.shape[0]
        frame_dir = os.path.join(root_dir, cid, "frames")
        os.makedirs(frame_dir, exist_ok=True)
        u8 = frames_to_uint8(clip.frames)
        for t in range(n):
            Image.fromarray(u8[t], mode="RGB").save(os.path.join(frame_dir, f"{t:06d}.png"))
        for o in range(num_objects):
            mask_dir = os.path.join(root_dir, cid, "masks", f"obj_{o}")
            os.makedirs(mask_dir, exist_ok=True)
            for t in range(n):
                m = (ann.masks[o, t] * 255).astype(np.uint8)
                Image.fromarray(m, mode="L").save(os.path.join(mask_dir, f"{t:06d}.png"))
        manifest["clips"].append(
            {"id": cid, "n": int(n), "h": int(h), "w": int(w), "num_objects": int(num_objects)}
        )
    manifest_path = os.path.join(root_dir, "manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest_path


def read_manifest(root_dir: str) -> dict:
    manifest_path = os.path.join(root_dir, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DatasetIntegrityError(
            f"no dataset manifest at {manifest_path}: found 0 clips"
        )
    with open(manifest_path) as f:
        return json.load(f)


def read_clip(root_dir: str, entry: dict) -> tuple[VideoClip, MaskAnnotation]:
    """Load a single clip named by its manifest entry."""
    cid, n, h, w = entry["id"], entry["n"], entry["h"], entry["w"]
    num_objects = entry["num_objects"]
    frames_u8 = np.zeros((n, h, w, 3), dtype=np.uint8)
    for t in range(n):
        path = os.path.join(root_dir, cid, "frames", f"{t:06d}.png")
        if not os.path.isfile(path):
            raise DatasetIntegrityError(f"missing frame file: {path}")
        frames_u8[t] = np.asarray(Image.open(path).convert("RGB"))
    masks = np.zeros((num_objects, n, h, w), dtype=np.uint8)
    for o in range(num_objects):
        for t in range(n):
            path = os.path.join(root_dir, cid, "masks", f"obj_{o}", f"{t:06d}.png")
            if not os.path.isfile(path):
                raise DatasetIntegrityError(f"missing mask file: {path}")
            masks[o, t] = (np.asarray(Image.open(path).convert("L")) >= 128).astype(np.uint8)
    frames = frames_u8.astype(np.float32) / np.float32(255.0)
    frames = np.transpose(frames, (0, 3, 1, 2))
    return VideoClip(frames=frames), MaskAnnotation.from_masks(masks)


def read_dataset(root_dir: str) -> tuple[list[VideoClip], list[MaskAnnotation]]:
    """Load every clip listed by the manifest. Raises DatasetIntegrityError
    naming the first missing file."""
    manifest = read_manifest(root_dir)
    clips, annotations = [], []
    for entry in manifest["clips"]:
        clip, ann = read_clip(root_dir, entry)
        clips.append(clip)
        annotations.append(ann)
    return clips, annotations
