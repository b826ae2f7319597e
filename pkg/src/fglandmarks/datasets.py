"""Sample records, preprocessing crops, synthetic scenes, and splits.

The synthetic generator is the workhorse for end-to-end checks: a textured
static background plate with a flat-color sprite moving on integer
coordinates, so every frame comes with an exact binary mask and exact
keypoints, and compositing mask * sprite + (1 - mask) * background
reproduces the frame bit for bit.

On-disk layout: <root>/<split>/<sequence>/<frame>.png with per-frame
keypoint CSVs (id,x,y), mask PNGs, and a line-delimited JSON manifest
assigning sequences to splits. Pixel values are quantized to 8 bits at
generation time so the files round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, replace

import numpy as np
import torch
from PIL import Image
from torch import Tensor
from torch.nn import functional as F

from .geometry import composite
from .training import PerturbedPair, TrainConfig, build_pair, collate_pairs

RULE_KEYPOINT_CENTROID = "keypoint-centroid"
RULE_RESIZE_CENTER = "resize-center"

MOTION_STATIC = "static"
MOTION_RANDOM_WALK = "random-walk"
MOTION_CONSTANT_VELOCITY = "constant-velocity"
MOTIONS = (MOTION_STATIC, MOTION_RANDOM_WALK, MOTION_CONSTANT_VELOCITY)

SPLIT_NAMES = ("train", "val", "test")
PROTOCOL_SYNTHETIC = "synthetic-80-10-10"
PROTOCOL_HOLDOUT = "exclude-holdout"


@dataclass(frozen=True)
class SampleRecord:
    """One frame with optional annotations.

    ``keypoints`` are (N, 2) pixel coordinates as (x, y) with the origin at
    the top-left pixel center; ``mask`` is a (1, H, W) float tensor;
    ``transform`` records the pixel-coordinate map applied by preprocessing
    (out = in * scale - offset, per axis) so points can be mapped back.
    """

    image: Tensor
    sequence_id: str
    frame_index: int
    keypoints: np.ndarray | None = None
    mask: Tensor | None = None
    source: str | None = None
    transform: dict | None = None

    def __post_init__(self) -> None:
        if self.image.dim() != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {tuple(self.image.shape)}")
        _, h, w = self.image.shape
        if self.keypoints is not None:
            kp = np.asarray(self.keypoints, dtype=np.float64)
            if kp.ndim != 2 or kp.shape[1] != 2:
                raise ValueError(f"keypoints must be (N, 2), got {kp.shape}")
            if kp.size and (
                kp[:, 0].min() < 0 or kp[:, 0].max() > w - 1
                or kp[:, 1].min() < 0 or kp[:, 1].max() > h - 1
            ):
                raise ValueError("keypoints fall outside the image bounds")
            object.__setattr__(self, "keypoints", kp)
        if self.mask is not None:
            if self.mask.shape != (1, h, w):
                raise ValueError(
                    f"mask must be (1, {h}, {w}), got {tuple(self.mask.shape)}"
                )
            if self.mask.min() < 0 or self.mask.max() > 1:
                raise ValueError("mask values must lie in [0, 1]")


@dataclass(frozen=True)
class CropSpec:
    """Preprocessing recipe.

    keypoint-centroid: cut a crop_size square centered on the keypoint
    centroid (zero-padded at frame borders), then resize to resize_to.
    resize-center: resize the frame to pre_resize square, then cut the
    central crop_size square; output size is crop_size.
    """

    rule: str = RULE_KEYPOINT_CENTROID
    crop_size: int = 300
    resize_to: int = 128
    pre_resize: int = 160

    def __post_init__(self) -> None:
        if self.rule not in (RULE_KEYPOINT_CENTROID, RULE_RESIZE_CENTER):
            raise ValueError(f"unknown crop rule {self.rule!r}")
        if min(self.crop_size, self.resize_to, self.pre_resize) < 1:
            raise ValueError("crop sizes must be positive")
        if self.rule == RULE_RESIZE_CENTER and self.pre_resize < self.crop_size:
            raise ValueError("pre_resize must be at least crop_size")


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Textured static background plus one moving sprite."""

    resolution: int = 64
    length: int = 60
    sprite_shape: str = "rect"
    sprite_size: int = 16
    sprite_color: tuple = (0.9, 0.2, 0.1)
    # "flat" fills the sprite with sprite_color; "quads" splits it into four
    # fixed-palette quadrants so each corner is visually distinct
    sprite_style: str = "flat"
    motion: str = MOTION_CONSTANT_VELOCITY
    velocity: tuple = (2, 1)
    step_size: int = 2
    texture_cells: int = 8
    # "rgb" draws independent noise per channel; "gray" draws one intensity
    # field, leaving saturated sprite and band colors visually unambiguous
    texture_style: str = "rgb"
    # >= 0 pins one plate shared by every sequence (a fixed set, like a
    # studio backdrop); negative draws a fresh plate per sequence seed
    background_seed: int = -1
    # static full-width horizontal bands baked into the plate at random
    # per-sequence heights; background by definition, so they never enter
    # the mask or keypoints
    bands: int = 0
    band_height: int = 6
    band_color: tuple = (0.15, 0.35, 0.85)

    def __post_init__(self) -> None:
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8")
        if self.length < 1:
            raise ValueError("length must be positive")
        if self.sprite_shape not in ("rect", "ellipse"):
            raise ValueError(f"unknown sprite shape {self.sprite_shape!r}")
        if self.sprite_style not in ("flat", "quads"):
            raise ValueError(f"unknown sprite style {self.sprite_style!r}")
        if self.sprite_size < 3:
            raise ValueError("sprite_size must be at least 3")
        if self.sprite_size > self.resolution:
            raise ValueError("sprite larger than frame")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if len(self.sprite_color) != 3:
            raise ValueError("sprite_color must have 3 channels")
        if self.texture_cells < 2:
            raise ValueError("texture_cells must be at least 2")
        if self.texture_style not in ("rgb", "gray"):
            raise ValueError(f"unknown texture style {self.texture_style!r}")
        if self.bands < 0:
            raise ValueError("bands must be non-negative")
        if self.bands and not 1 <= self.band_height <= self.resolution:
            raise ValueError("band_height must fit the frame")
        if len(self.band_color) != 3:
            raise ValueError("band_color must have 3 channels")


def _quantize(x: Tensor) -> Tensor:
    """Snap to the 8-bit lattice so PNG round trips are lossless."""
    return torch.round(x * 255.0) / 255.0


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _resize_image(image: Tensor, size: int) -> Tensor:
    return F.interpolate(
        image.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False,
        antialias=True,
    ).squeeze(0).clamp(0.0, 1.0)


def _resize_mask(mask: Tensor, size: int) -> Tensor:
    return F.interpolate(mask.unsqueeze(0), size=(size, size), mode="nearest").squeeze(0)


def _remap(kp: np.ndarray, scale_x, scale_y, offset_x, offset_y) -> np.ndarray:
    out = kp.copy()
    out[:, 0] = kp[:, 0] * scale_x - offset_x
    out[:, 1] = kp[:, 1] * scale_y - offset_y
    return out


def remap_to_original(keypoints: np.ndarray, transform: dict) -> np.ndarray:
    """Invert a preprocessing transform on (N, 2) pixel coordinates."""
    kp = np.asarray(keypoints, dtype=np.float64)
    out = kp.copy()
    out[:, 0] = (kp[:, 0] + transform["offset_x"]) / transform["scale_x"]
    out[:, 1] = (kp[:, 1] + transform["offset_y"]) / transform["scale_y"]
    return out


def preprocess_crop(record: SampleRecord, spec: CropSpec) -> SampleRecord:
    """Crop and resize one record, remapping annotations along."""
    _, h, w = record.image.shape
    if spec.rule == RULE_KEYPOINT_CENTROID:
        if record.keypoints is None or record.keypoints.size == 0:
            raise ValueError("keypoint-centroid crop requires keypoints on the record")
        cx, cy = record.keypoints.mean(axis=0)
        x0 = int(round(cx)) - spec.crop_size // 2
        y0 = int(round(cy)) - spec.crop_size // 2
        canvas = torch.zeros(3, spec.crop_size, spec.crop_size, dtype=record.image.dtype)
        src_x = slice(max(x0, 0), min(x0 + spec.crop_size, w))
        src_y = slice(max(y0, 0), min(y0 + spec.crop_size, h))
        dst_x = slice(src_x.start - x0, src_x.stop - x0)
        dst_y = slice(src_y.start - y0, src_y.stop - y0)
        canvas[:, dst_y, dst_x] = record.image[:, src_y, src_x]
        image = _resize_image(canvas, spec.resize_to)
        scale = spec.resize_to / spec.crop_size
        transform = {
            "scale_x": scale, "scale_y": scale,
            "offset_x": x0 * scale, "offset_y": y0 * scale,
        }
        mask = None
        if record.mask is not None:
            mcanvas = torch.zeros(1, spec.crop_size, spec.crop_size, dtype=record.mask.dtype)
            mcanvas[:, dst_y, dst_x] = record.mask[:, src_y, src_x]
            mask = _resize_mask(mcanvas, spec.resize_to)
    else:  # resize-center
        image = _resize_image(record.image, spec.pre_resize)
        margin = (spec.pre_resize - spec.crop_size) // 2
        image = image[:, margin: margin + spec.crop_size, margin: margin + spec.crop_size]
        transform = {
            "scale_x": spec.pre_resize / w, "scale_y": spec.pre_resize / h,
            "offset_x": float(margin), "offset_y": float(margin),
        }
        mask = None
        if record.mask is not None:
            mask = _resize_mask(record.mask, spec.pre_resize)
            mask = mask[:, margin: margin + spec.crop_size, margin: margin + spec.crop_size]

    keypoints = None
    if record.keypoints is not None:
        keypoints = _remap(
            record.keypoints,
            transform["scale_x"], transform["scale_y"],
            transform["offset_x"], transform["offset_y"],
        )
        side = image.shape[-1]
        if keypoints.size and (
            keypoints.min() < 0 or keypoints.max() > side - 1
        ):
            raise ValueError(
                "remapped keypoints leave the crop; widen crop_size or fix the center rule"
            )
    return replace(
        record, image=image, keypoints=keypoints, mask=mask, transform=transform
    )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def _background_plate(spec: SyntheticSceneSpec, rng: np.random.Generator) -> Tensor:
    channels = 1 if spec.texture_style == "gray" else 3
    coarse = torch.tensor(
        rng.uniform(0.05, 0.95, size=(1, channels, spec.texture_cells, spec.texture_cells)),
        dtype=torch.float32,
    )
    plate = F.interpolate(
        coarse, size=(spec.resolution, spec.resolution), mode="bilinear",
        align_corners=False,
    ).squeeze(0)
    if channels == 1:
        plate = plate.expand(3, -1, -1)
    return _quantize(plate.clamp(0.0, 1.0))


# quadrant palette for sprite_style "quads": top-left, top-right,
# bottom-left, bottom-right
QUAD_PALETTE = (
    (0.9, 0.15, 0.1),
    (0.95, 0.85, 0.1),
    (0.9, 0.1, 0.8),
    (0.1, 0.8, 0.15),
)


def _quad_plate(spec: SyntheticSceneSpec, x0: int, y0: int, like: Tensor) -> Tensor:
    """Four-color quadrant fill at the sprite's position (rest is masked out)."""
    plate = torch.zeros_like(like)
    s = spec.sprite_size
    half = s // 2
    for i, rgb in enumerate(QUAD_PALETTE):
        qx = x0 + (i % 2) * half
        qy = y0 + (i // 2) * half
        w = s - half if i % 2 else half  # odd sizes keep full coverage
        h = s - half if i // 2 else half
        color = _quantize(torch.tensor(rgb, dtype=torch.float32))
        plate[:, qy: qy + h, qx: qx + w] = color.view(3, 1, 1)
    return plate


def _sprite_mask(spec: SyntheticSceneSpec, x0: int, y0: int) -> Tensor:
    s, res = spec.sprite_size, spec.resolution
    mask = torch.zeros(1, res, res)
    if spec.sprite_shape == "rect":
        mask[:, y0: y0 + s, x0: x0 + s] = 1.0
    else:
        r = (s - 1) / 2.0
        ys = torch.arange(res).view(-1, 1) - (y0 + r)
        xs = torch.arange(res).view(1, -1) - (x0 + r)
        inside = (xs / r).square() + (ys / r).square() <= 1.0
        mask[0] = inside.float()
    return mask


def _sprite_keypoints(spec: SyntheticSceneSpec, x0: int, y0: int) -> np.ndarray:
    s = spec.sprite_size
    r = (s - 1) / 2.0
    return np.array(
        [
            [x0 + r, y0 + r],  # center
            [x0, y0],
            [x0 + s - 1, y0],
            [x0, y0 + s - 1],
            [x0 + s - 1, y0 + s - 1],
        ],
        dtype=np.float64,
    )


def synth_generate(
    spec: SyntheticSceneSpec, seed: int, sequence_id: str | None = None
) -> list[SampleRecord]:
    """Deterministic sequence of frames with exact masks and keypoints."""
    rng = np.random.default_rng(seed)
    sequence_id = sequence_id or f"synth-{seed:06d}"
    if spec.background_seed >= 0:
        background = _background_plate(spec, np.random.default_rng(spec.background_seed))
    else:
        background = _background_plate(spec, rng)
    if spec.bands:
        background = background.clone()
        height = spec.band_height
        color = _quantize(torch.tensor(spec.band_color, dtype=torch.float32))
        for _ in range(spec.bands):
            dy = int(rng.integers(0, spec.resolution - height + 1))
            background[:, dy: dy + height, :] = color.view(3, 1, 1)
    color = _quantize(torch.tensor(spec.sprite_color, dtype=torch.float32))
    sprite_plate = color.view(3, 1, 1).expand_as(background).contiguous()

    limit = spec.resolution - spec.sprite_size
    pos = rng.integers(0, limit + 1, size=2)  # (x0, y0)
    vel = np.array(spec.velocity, dtype=np.int64)

    records = []
    for t in range(spec.length):
        x0, y0 = int(pos[0]), int(pos[1])
        mask = _sprite_mask(spec, x0, y0)
        if spec.sprite_style == "quads":
            sprite_plate = _quad_plate(spec, x0, y0, background)
        frame = composite(mask, sprite_plate, background)
        records.append(
            SampleRecord(
                image=frame,
                sequence_id=sequence_id,
                frame_index=t,
                keypoints=_sprite_keypoints(spec, x0, y0),
                mask=mask,
            )
        )
        if spec.motion == MOTION_RANDOM_WALK:
            pos = np.clip(
                pos + rng.integers(-spec.step_size, spec.step_size + 1, size=2),
                0, limit,
            )
        elif spec.motion == MOTION_CONSTANT_VELOCITY:
            pos = pos + vel
            for axis in range(2):  # reflect off the frame edges
                if pos[axis] < 0:
                    pos[axis] = -pos[axis]
                    vel[axis] = -vel[axis]
                elif pos[axis] > limit:
                    pos[axis] = 2 * limit - pos[axis]
                    vel[axis] = -vel[axis]
    return records


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def _group_sequences(records: list[SampleRecord]) -> dict[str, list[SampleRecord]]:
    groups: dict[str, list[SampleRecord]] = {}
    for record in records:
        groups.setdefault(record.sequence_id, []).append(record)
    for seq in groups.values():
        seq.sort(key=lambda r: r.frame_index)
    return groups


def validate_disjoint(assignment: dict[str, str]) -> None:
    """Raise when a sequence id maps to more than one split (for manifests
    loaded from disk, where duplicates are possible)."""
    seen: dict[str, str] = {}
    for seq, split in assignment.items():
        if seq in seen and seen[seq] != split:
            raise ValueError(f"sequence {seq!r} assigned to both {seen[seq]} and {split}")
        seen[seq] = split


def write_split_manifest(path: str, assignment: dict[str, str]) -> None:
    with open(path, "w") as fh:
        for seq in sorted(assignment):
            fh.write(json.dumps({"sequence": seq, "split": assignment[seq]}) + "\n")


def read_split_manifest(path: str) -> dict[str, str]:
    assignment: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            seq, split = row["sequence"], row["split"]
            if split not in SPLIT_NAMES:
                raise ValueError(f"manifest names unknown split {split!r}")
            if seq in assignment and assignment[seq] != split:
                raise ValueError(
                    f"sequence {seq!r} assigned to both {assignment[seq]} and {split}"
                )
            assignment[seq] = split
    return assignment


def split_dataset(
    records: list[SampleRecord],
    protocol: str = PROTOCOL_SYNTHETIC,
    holdout_ids: set | None = None,
    manifest_path: str | None = None,
):
    """Partition records by sequence id into (train, val, test).

    synthetic-80-10-10 assigns sorted sequence ids 80/10/10; exclude-holdout
    sends the named ids to test and splits the rest 90/10 into train/val.
    An existing manifest at manifest_path overrides the computation so reruns
    reproduce the same partition; otherwise the assignment is persisted there.
    """
    groups = _group_sequences(records)
    ids = sorted(groups)
    if manifest_path is not None and os.path.exists(manifest_path):
        assignment = read_split_manifest(manifest_path)
        unknown = [s for s in ids if s not in assignment]
        if unknown:
            raise ValueError(f"manifest missing sequences: {unknown}")
    elif protocol == PROTOCOL_SYNTHETIC:
        n = len(ids)
        n_val = max(1, n // 10) if n >= 3 else 0
        n_test = max(1, n // 10) if n >= 3 else 0
        n_train = n - n_val - n_test
        if n_train < 1:
            raise ValueError(f"too few sequences ({n}) to split")
        assignment = {}
        for i, seq in enumerate(ids):
            if i < n_train:
                assignment[seq] = "train"
            elif i < n_train + n_val:
                assignment[seq] = "val"
            else:
                assignment[seq] = "test"
    elif protocol == PROTOCOL_HOLDOUT:
        if not holdout_ids:
            raise ValueError("exclude-holdout protocol requires holdout_ids")
        rest = [s for s in ids if s not in holdout_ids]
        if not rest:
            raise ValueError("every sequence is held out; nothing left to train on")
        n_val = max(1, len(rest) // 10) if len(rest) >= 2 else 0
        assignment = {s: "test" for s in ids if s in holdout_ids}
        for i, seq in enumerate(rest):
            assignment[seq] = "val" if i >= len(rest) - n_val else "train"
    else:
        raise ValueError(f"unknown split protocol {protocol!r}")

    validate_disjoint(assignment)
    if manifest_path is not None and not os.path.exists(manifest_path):
        write_split_manifest(manifest_path, assignment)

    out = {"train": [], "val": [], "test": []}
    for seq in ids:
        out[assignment[seq]].extend(groups[seq])
    return out["train"], out["val"], out["test"]


# ---------------------------------------------------------------------------
# directory layout
# ---------------------------------------------------------------------------

def _to_uint8(image: Tensor) -> np.ndarray:
    return (
        (image.clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    )


def save_records(records: list[SampleRecord], root: str, split: str) -> None:
    """Write <root>/<split>/<sequence>/<frame>.png plus sidecar annotations."""
    for record in records:
        seq_dir = os.path.join(root, split, record.sequence_id)
        os.makedirs(seq_dir, exist_ok=True)
        stem = f"{record.frame_index:05d}"
        Image.fromarray(_to_uint8(record.image)).save(os.path.join(seq_dir, stem + ".png"))
        if record.keypoints is not None:
            with open(os.path.join(seq_dir, stem + ".csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["id", "x", "y"])
                for i, (x, y) in enumerate(record.keypoints):
                    writer.writerow([i, repr(float(x)), repr(float(y))])
        if record.mask is not None:
            mask = (record.mask[0] * 255.0).round().to(torch.uint8).numpy()
            Image.fromarray(mask, mode="L").save(os.path.join(seq_dir, stem + "_mask.png"))


def load_records(root: str, split: str) -> list[SampleRecord]:
    split_dir = os.path.join(root, split)
    if not os.path.isdir(split_dir):
        raise FileNotFoundError(f"split directory not found: {split_dir}")
    records = []
    for seq_id in sorted(os.listdir(split_dir)):
        seq_dir = os.path.join(split_dir, seq_id)
        if not os.path.isdir(seq_dir):
            continue
        for name in sorted(os.listdir(seq_dir)):
            if not name.endswith(".png") or name.endswith("_mask.png"):
                continue
            stem = name[:-4]
            path = os.path.join(seq_dir, name)
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
            image = torch.from_numpy(arr).permute(2, 0, 1)
            keypoints = None
            csv_path = os.path.join(seq_dir, stem + ".csv")
            if os.path.exists(csv_path):
                with open(csv_path, newline="") as fh:
                    rows = list(csv.DictReader(fh))
                keypoints = np.array(
                    [[float(r["x"]), float(r["y"])] for r in rows], dtype=np.float64
                )
            mask = None
            mask_path = os.path.join(seq_dir, stem + "_mask.png")
            if os.path.exists(mask_path):
                marr = np.asarray(Image.open(mask_path), dtype=np.float32) / 255.0
                mask = torch.from_numpy(marr).unsqueeze(0)
            records.append(
                SampleRecord(
                    image=image,
                    sequence_id=seq_id,
                    frame_index=int(stem),
                    keypoints=keypoints,
                    mask=mask,
                    source=path,
                )
            )
    return records


# ---------------------------------------------------------------------------
# batch sampling for training
# ---------------------------------------------------------------------------

def make_batch_fn(records: list[SampleRecord], config: TrainConfig, seed: int = 0):
    """Return batch_fn(step) -> PerturbedPair drawing only from ``records``.

    Each step's batch is a pure function of (seed, step), so a rerun of the
    same config over the same records replays identical batches.
    """
    groups = _group_sequences(records)
    needs_temporal = config.perturbation_mode != "tps"
    min_len = config.temporal.min_offset + 1 if needs_temporal else 1
    sequences = [
        [r.image for r in groups[seq]] for seq in sorted(groups)
        if len(groups[seq]) >= min_len
    ]
    if not sequences:
        raise ValueError(
            f"no sequence is long enough (need at least {min_len} frames)"
        )

    def batch_fn(step: int) -> PerturbedPair:
        rng = np.random.default_rng([seed, step])
        pairs = []
        for _ in range(config.batch_size):
            frames = sequences[int(rng.integers(len(sequences)))]
            if needs_temporal:
                spec = config.temporal
                valid = [
                    t for t in range(len(frames))
                    if t + spec.min_offset <= len(frames) - 1 or t - spec.min_offset >= 0
                ]
                t = valid[int(rng.integers(len(valid)))]
            else:
                t = int(rng.integers(len(frames)))
            pairs.append(build_pair(frames, t, config, int(rng.integers(2**31))))
        return collate_pairs(pairs)

    return batch_fn
