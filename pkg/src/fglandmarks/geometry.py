"""Differentiable landmark geometry: Gaussian fitting, heatmap rendering,
appearance pooling/projection, and mask compositing.

All operations are pure functions of their tensor inputs, preserve the
input dtype, and accept arbitrary leading batch dimensions. Coordinates
live on a normalized grid: the center of cell (0, 0) maps to (-1, -1)
and the center of cell (H-1, W-1) maps to (1, 1), with points ordered
as (x, y) -- x along the width axis, y along the height axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

# Regularizer added to fitted covariances so degenerate (single-cell) maps
# stay invertible.
COVARIANCE_EPS = 1e-6
# Normalizer added to the heatmap partition sum in appearance projection.
PROJECTION_WEIGHT_EPS = 1e-4
# Default isotropic variance for fixed-covariance landmark parameterization.
DEFAULT_FIXED_VARIANCE = 0.08

FITTED = "fitted"
FIXED = "fixed"


@dataclass(frozen=True)
class Grid:
    """A pixel grid with cell centers mapped into [-1, 1] x [-1, 1]."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.height}x{self.width}")

    def coords(self, dtype: torch.dtype = torch.float32, device=None) -> Tensor:
        """Normalized cell-center coordinates, shape (H, W, 2) as (x, y)."""
        ys = torch.linspace(-1.0, 1.0, self.height, dtype=dtype, device=device)
        xs = torch.linspace(-1.0, 1.0, self.width, dtype=dtype, device=device)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([gx, gy], dim=-1)

    @property
    def cell_width(self) -> float:
        """Horizontal distance between adjacent cell centers in normalized units."""
        return 2.0 / (self.width - 1)

    @property
    def cell_height(self) -> float:
        return 2.0 / (self.height - 1)


@dataclass
class PartActivationMap:
    """Per-landmark spatial activations, shape (..., K, H, W).

    ``normalized`` records whether each of the K maps has been
    softmax-normalized into a spatial probability distribution.
    """

    values: Tensor
    normalized: bool = False

    @property
    def num_parts(self) -> int:
        return self.values.shape[-3]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])


@dataclass
class GaussianParts:
    """K landmarks as 2D Gaussians: means (..., K, 2), covariances (..., K, 2, 2).

    Means are (x, y) in normalized grid coordinates; covariances are in
    normalized units squared. ``covariance_mode`` is "fitted" or "fixed".
    """

    means: Tensor
    covariances: Tensor
    covariance_mode: str = FITTED

    @property
    def num_parts(self) -> int:
        return self.means.shape[-2]

    def detach(self) -> "GaussianParts":
        return GaussianParts(self.means.detach(), self.covariances.detach(), self.covariance_mode)


def softmax_normalize(pose: PartActivationMap) -> PartActivationMap:
    """Softmax each part map over its flattened spatial logits."""
    if pose.normalized:
        raise ValueError("activation map is already normalized")
    values = pose.values
    if not torch.isfinite(values).all():
        raise ValueError("non-finite activation logits (upstream divergence?)")
    flat = values.flatten(start_dim=-2)
    probs = torch.softmax(flat, dim=-1).reshape(values.shape)
    return PartActivationMap(probs, normalized=True)


def pool_appearance(pose: PartActivationMap, features: Tensor) -> Tensor:
    """Pool a (..., C, H, W) feature map into per-part codes (..., K, C).

    code[k, c] = sum_ij pose[k, i, j] * features[c, i, j], with the pose
    maps acting as spatial probability weights.
    """
    if not pose.normalized:
        raise ValueError("pooling requires a softmax-normalized activation map")
    if pose.values.shape[-2:] != features.shape[-2:]:
        raise ValueError(
            f"spatial shapes differ: pose {tuple(pose.values.shape[-2:])} "
            f"vs features {tuple(features.shape[-2:])}"
        )
    return torch.einsum("...khw,...chw->...kc", pose.values, features)


def fit_gaussians(
    pose: PartActivationMap,
    grid: Grid,
    mode: str = FITTED,
    fixed_variance: float = DEFAULT_FIXED_VARIANCE,
    eps: float = COVARIANCE_EPS,
) -> GaussianParts:
    """Fit a 2D Gaussian to each normalized part map (soft-argmax + moments).

    Means are the probability-weighted grid coordinates. In "fitted" mode
    the covariance is the weighted second central moment plus eps*I; in
    "fixed" mode it is fixed_variance * I.
    """
    if not pose.normalized:
        raise ValueError("gaussian fitting requires a softmax-normalized activation map")
    if mode not in (FITTED, FIXED):
        raise ValueError(f"unknown covariance mode {mode!r}")
    p = pose.values
    if (p.shape[-2], p.shape[-1]) != (grid.height, grid.width):
        raise ValueError("activation map shape does not match grid")
    coords = grid.coords(dtype=p.dtype, device=p.device)  # (H, W, 2)
    means = torch.einsum("...khw,hwc->...kc", p, coords)
    eye = torch.eye(2, dtype=p.dtype, device=p.device)
    if mode == FIXED:
        cov_shape = means.shape[:-1] + (2, 2)
        covs = (fixed_variance * eye).expand(cov_shape).clone()
    else:
        # centered coords per part: (..., K, H, W, 2)
        diff = coords.reshape((1,) * (means.dim() - 1) + coords.shape) - means[..., None, None, :]
        covs = torch.einsum("...khw,...khwc,...khwd->...kcd", p, diff, diff)
        covs = covs + eps * eye
    return GaussianParts(means, covs, covariance_mode=mode)


def render_heatmaps(parts: GaussianParts, target: Grid) -> Tensor:
    """Render each Gaussian part to a heatmap on the target grid.

    s(k, l) = 1 / (1 + (l - mu_k)^T Sigma_k^-1 (l - mu_k)), so the value is
    exactly 1 at l = mu_k and falls off with Mahalanobis distance. Output
    shape (..., K, H', W'), entries in (0, 1].
    """
    mu = parts.means
    cov = parts.covariances
    coords = target.coords(dtype=mu.dtype, device=mu.device)  # (H', W', 2)
    diff = coords.reshape((1,) * (mu.dim() - 1) + coords.shape) - mu[..., None, None, :]
    cov_inv = torch.linalg.inv(cov)  # (..., K, 2, 2)
    quad = torch.einsum("...khwc,...kcd,...khwd->...khw", diff, cov_inv, diff)
    return 1.0 / (1.0 + quad)


def project_appearance(
    parts: GaussianParts,
    codes: Tensor,
    target: Grid,
    eps: float = PROJECTION_WEIGHT_EPS,
) -> Tensor:
    """Spread per-part codes (..., K, C) over the target grid, (..., C, H', W').

    Each location mixes the codes with partition-of-unity weights
    w_k(l) = s(k, l) / (sum_k' s(k', l) + eps) built from the rendered
    heatmaps, so parts dominate near their own mean.
    """
    if codes.shape[-2] != parts.num_parts:
        raise ValueError(
            f"code rows ({codes.shape[-2]}) do not match part count ({parts.num_parts})"
        )
    heat = render_heatmaps(parts, target)  # (..., K, H', W')
    weights = heat / (heat.sum(dim=-3, keepdim=True) + eps)
    return torch.einsum("...khw,...kc->...chw", weights, codes)


def composite(mask: Tensor, foreground: Tensor, background: Tensor) -> Tensor:
    """Per-pixel convex blend: mask * fg + (1 - mask) * bg.

    The mask must lie in [0, 1] and broadcasts over the channel axis.
    """
    if mask.min() < 0 or mask.max() > 1:
        raise ValueError("blend mask has entries outside [0, 1]")
    return mask * foreground + (1.0 - mask) * background


def composite_no_mask(foreground: Tensor, background: Tensor) -> Tensor:
    """Elementwise sum of renders; the mask-free ablation composition."""
    return foreground + background
