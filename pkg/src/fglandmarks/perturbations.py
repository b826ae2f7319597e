"""Input perturbations that build the training pairs.

Three transforms: color jitter changes appearance while leaving geometry
untouched, thin-plate-spline warping moves content while leaving appearance
untouched, and temporal sampling swaps in a nearby frame of the same scene.
Each is a pure function of (input, spec, seed), so concurrent data-loading
workers only need independent seed streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torch import Tensor
from torch.nn import functional as F

from .geometry import Grid

_JITTER_OPS = ("brightness", "contrast", "saturation", "hue")


@dataclass(frozen=True)
class JitterSpec:
    """Color-jitter strengths; a strength of 0 disables that component."""

    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1

    def __post_init__(self) -> None:
        for name in _JITTER_OPS:
            if getattr(self, name) < 0:
                raise ValueError(f"jitter strength {name} must be non-negative")
        if self.hue > 0.5:
            raise ValueError("hue strength above 0.5 leaves the valid rotation range")


@dataclass(frozen=True)
class TpsSpec:
    """Control grid and displacement scale for the non-rigid warp.

    ``scale`` bounds each control point's displacement per coordinate, in the
    same normalized [-1, 1] units the image grid uses.
    """

    rows: int = 5
    cols: int = 5
    scale: float = 0.1

    def __post_init__(self) -> None:
        if self.rows < 3 or self.cols < 3:
            raise ValueError("control grid must be at least 3x3")
        if self.scale < 0:
            raise ValueError("displacement scale must be non-negative")

    @property
    def num_points(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class TemporalSpec:
    """Frame-offset range for sampling a second view from the same scene."""

    min_offset: int = 3
    max_offset: int = 60

    def __post_init__(self) -> None:
        if self.min_offset < 1:
            raise ValueError("min_offset must be at least 1")
        if self.max_offset < self.min_offset:
            raise ValueError("max_offset must be >= min_offset")


# ---------------------------------------------------------------------------
# color jitter
# ---------------------------------------------------------------------------

def draw_jitter_params(spec: JitterSpec, rng: np.random.Generator):
    """Sample the op order and per-op factors exactly as color_jitter does."""
    order = tuple(int(i) for i in rng.permutation(len(_JITTER_OPS)))
    factors = (
        float(rng.uniform(max(0.0, 1.0 - spec.brightness), 1.0 + spec.brightness)),
        float(rng.uniform(max(0.0, 1.0 - spec.contrast), 1.0 + spec.contrast)),
        float(rng.uniform(max(0.0, 1.0 - spec.saturation), 1.0 + spec.saturation)),
        float(rng.uniform(-spec.hue, spec.hue)),
    )
    return order, factors


def color_jitter(x: Tensor, spec: JitterSpec, seed: int) -> Tensor:
    """Photometric perturbation of a (3, H, W) image in [0, 1].

    Pixel locations never move; only channel values change. Components with
    strength 0 are skipped, so the all-zero spec is an exact identity.
    """
    if x.dim() != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(x.shape)}")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    order, factors = draw_jitter_params(spec, np.random.default_rng(seed))
    strengths = tuple(getattr(spec, name) for name in _JITTER_OPS)
    apply = (
        TF.adjust_brightness,
        TF.adjust_contrast,
        TF.adjust_saturation,
        TF.adjust_hue,
    )
    out = x
    for idx in order:
        if strengths[idx] == 0:
            continue
        out = apply[idx](out, factors[idx])
    return out.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# thin-plate-spline warp
# ---------------------------------------------------------------------------

def _control_points(rows: int, cols: int) -> Tensor:
    """(rows*cols, 2) lattice of (x, y) control points spanning [-1, 1]."""
    ys = torch.linspace(-1.0, 1.0, rows, dtype=torch.float64)
    xs = torch.linspace(-1.0, 1.0, cols, dtype=torch.float64)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).reshape(-1, 2)


def _tps_kernel(sq_dist: Tensor) -> Tensor:
    # U(r) = r^2 log r^2 with the removable singularity U(0) = 0
    return torch.where(
        sq_dist > 0,
        sq_dist * torch.log(sq_dist.clamp_min(1e-30)),
        torch.zeros_like(sq_dist),
    )


def tps_flow(displacements: Tensor, rows: int, cols: int, target: Grid) -> Tensor:
    """Dense (H, W, 2) displacement field interpolating the control points.

    Solves the standard thin-plate system (radial terms plus an affine part
    with vanishing-moment side conditions) once per warp and evaluates it at
    every cell center of ``target``.
    """
    if displacements.shape != (rows * cols, 2):
        raise ValueError(
            f"expected ({rows * cols}, 2) displacements, got {tuple(displacements.shape)}"
        )
    ctrl = _control_points(rows, cols)
    values = displacements.to(torch.float64)
    n = ctrl.shape[0]
    sq = torch.cdist(ctrl, ctrl).square()
    p = torch.cat([torch.ones(n, 1, dtype=torch.float64), ctrl], dim=1)  # (N, 3)
    system = torch.zeros(n + 3, n + 3, dtype=torch.float64)
    system[:n, :n] = _tps_kernel(sq)
    system[:n, n:] = p
    system[n:, :n] = p.T
    rhs = torch.zeros(n + 3, 2, dtype=torch.float64)
    rhs[:n] = values
    sol = torch.linalg.solve(system, rhs)
    weights, affine = sol[:n], sol[n:]  # (N, 2), (3, 2)

    points = target.coords(torch.float64).reshape(-1, 2)  # (H*W, 2)
    radial = _tps_kernel(torch.cdist(points, ctrl).square())  # (H*W, N)
    flow = radial @ weights + affine[0] + points @ affine[1:]
    return flow.reshape(target.height, target.width, 2)


def tps_apply(x: Tensor, displacements: Tensor, rows: int, cols: int) -> Tensor:
    """Warp a (C, H, W) image by the spline through ``displacements``.

    Backward mapping: the output at location p bilinearly samples the input
    at p + flow(p), with border replication outside the frame. Replaying a
    stored displacement tensor reproduces the warp bit for bit.
    """
    if x.dim() != 3:
        raise ValueError(f"expected a (C, H, W) image, got {tuple(x.shape)}")
    if displacements.shape != (rows * cols, 2):
        raise ValueError(
            f"expected ({rows * cols}, 2) displacements, got {tuple(displacements.shape)}"
        )
    if not bool(displacements.any()):
        return x.clone()  # exact identity, skips bilinear round-off
    grid = Grid(x.shape[1], x.shape[2])
    flow = tps_flow(displacements, rows, cols, grid)
    sample_at = (grid.coords(torch.float64) + flow).to(x.dtype)
    warped = F.grid_sample(
        x.unsqueeze(0),
        sample_at.unsqueeze(0),
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )
    return warped.squeeze(0)


def tps_warp(x: Tensor, spec: TpsSpec, seed: int) -> tuple[Tensor, Tensor]:
    """Random non-rigid warp; returns (warped image, control displacements).

    Control displacements are drawn uniformly in [-scale, scale] per
    coordinate. Fold-overs are allowed; nothing constrains the warp to stay
    injective. The returned displacements replay the warp via tps_apply.
    """
    rng = np.random.default_rng(seed)
    disp = torch.from_numpy(
        rng.uniform(-spec.scale, spec.scale, size=(spec.num_points, 2))
    )
    return tps_apply(x, disp, spec.rows, spec.cols), disp


# ---------------------------------------------------------------------------
# temporal sampling
# ---------------------------------------------------------------------------

def sample_offset(length: int, t: int, spec: TemporalSpec, rng: np.random.Generator) -> int:
    """Signed frame offset from anchor t, future first with a past fallback.

    Prefers a uniform draw from the future offsets [min, max] that stay in
    range; when fewer than min_offset future frames remain, falls back to
    past offsets. Never returns 0, so the anchor itself is never sampled.
    """
    if length < spec.min_offset + 1:
        raise ValueError(
            f"sequence of {length} frames cannot provide an offset >= {spec.min_offset}"
        )
    if not 0 <= t < length:
        raise ValueError(f"anchor index {t} outside sequence of {length} frames")
    hi_future = min(spec.max_offset, length - 1 - t)
    if hi_future >= spec.min_offset:
        return int(rng.integers(spec.min_offset, hi_future + 1))
    hi_past = min(spec.max_offset, t)
    if hi_past >= spec.min_offset:
        return -int(rng.integers(spec.min_offset, hi_past + 1))
    raise ValueError(
        f"anchor {t} in a {length}-frame sequence has no valid offset in "
        f"[{spec.min_offset}, {spec.max_offset}] in either direction"
    )


def temporal_sample(sequence, t: int, spec: TemporalSpec, seed: int) -> Tensor:
    """Return a frame of the same scene 3-60 steps away from frame t.

    ``sequence`` is any indexable of frames (list of tensors, lazy loader).
    """
    offset = sample_offset(len(sequence), t, spec, np.random.default_rng(seed))
    return sequence[t + offset]
