"""The five learnable sub-networks and their assembly.

A pose encoder produces part activation logits at half resolution, an
appearance encoder produces the feature map that gets pooled into per-part
codes, a foreground decoder renders parts and codes back into an image, a
background net repaints the masked-out scene, and a mask net blends the two.
The four encoder-style nets are small U-Nets with skip connections; the
decoder is a conditional upsampling stack whose normalization layers are
modulated by rendered part heatmaps and the projected appearance.

Every conv uses replicate padding so a constant image stays constant through
the whole stack, which keeps appearance codes degenerate on flat inputs (a
property the tests pin down).
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .geometry import (
    DEFAULT_FIXED_VARIANCE,
    FITTED,
    FIXED,
    GaussianParts,
    Grid,
    PartActivationMap,
    fit_gaussians,
    pool_appearance,
    project_appearance,
    render_heatmaps,
)

POSE_DOWN_CHANNELS = (64, 128, 256, 512)
POSE_UP_CHANNELS = (256, 128, 64)
APPEARANCE_BASE_CHANNELS = 64
MASK_CHANNELS = 32
BACKGROUND_DOWN_CHANNELS = (32, 64, 128)
DECODER_CHANNELS = (256, 256, 128, 64)
SPADE_HIDDEN_CHANNELS = 64
SEED_DOWNSAMPLE = 8

CHECKPOINT_SCHEMA_VERSION = 1
SUBNET_NAMES = ("pose", "appearance", "foreground", "background", "mask")


def _scaled(base: int, mult: float) -> int:
    return max(1, round(base * mult))


@dataclass(frozen=True)
class NetworkConfig:
    """Everything needed to rebuild the five sub-networks identically."""

    num_parts: int = 16
    appearance_channels: int = 16
    image_size: int = 128
    covariance_mode: str = FITTED
    fixed_variance: float = DEFAULT_FIXED_VARIANCE
    width_mult: float = 1.0

    def __post_init__(self) -> None:
        if self.num_parts < 1:
            raise ValueError("num_parts must be positive")
        if self.appearance_channels < 1:
            raise ValueError("appearance_channels must be positive")
        if self.image_size < 16 or self.image_size % 16 != 0:
            raise ValueError("image_size must be a positive multiple of 16")
        if self.covariance_mode not in (FITTED, FIXED):
            raise ValueError(f"unknown covariance_mode {self.covariance_mode!r}")
        if self.fixed_variance <= 0:
            raise ValueError("fixed_variance must be positive")
        if self.width_mult <= 0:
            raise ValueError("width_mult must be positive")


def _conv3(in_ch: int, out_ch: int) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, padding_mode="replicate")


class ConvNormRelu(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = _conv3(in_ch, out_ch)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.norm(self.conv(x)))


class DownModule(nn.Module):
    """conv-norm-relu then 2x average pooling; keeps the pre-pool activation
    around as the skip for the matching up module."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = ConvNormRelu(in_ch, out_ch)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        skip = self.block(x)
        return skip, F.avg_pool2d(skip, 2)


class UpModule(nn.Module):
    """2x bilinear upsample, concat the skip, conv-norm-relu."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.block = ConvNormRelu(in_ch + skip_ch, out_ch)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.block(torch.cat([x, skip], dim=-3))


class PoseEncoder(nn.Module):
    """4-down/3-up U-Net from image to K part logits at half resolution."""

    def __init__(self, num_parts: int, width_mult: float = 1.0):
        super().__init__()
        down_ch = [_scaled(c, width_mult) for c in POSE_DOWN_CHANNELS]
        up_ch = [_scaled(c, width_mult) for c in POSE_UP_CHANNELS]
        self.downs = nn.ModuleList()
        in_ch = 3
        for out_ch in down_ch:
            self.downs.append(DownModule(in_ch, out_ch))
            in_ch = out_ch
        # skips pair with pre-pool activations at H/8, H/4, H/2
        self.ups = nn.ModuleList(
            [
                UpModule(down_ch[3], down_ch[3], up_ch[0]),
                UpModule(up_ch[0], down_ch[2], up_ch[1]),
                UpModule(up_ch[1], down_ch[1], up_ch[2]),
            ]
        )
        self.head = _conv3(up_ch[2], num_parts)

    def forward(self, x: Tensor) -> Tensor:
        skips = []
        h = x
        for down in self.downs:
            skip, h = down(h)
            skips.append(skip)
        h = self.ups[0](h, skips[3])
        h = self.ups[1](h, skips[2])
        h = self.ups[2](h, skips[1])
        return self.head(h)  # (B, K, H/2, W/2)


class AppearanceEncoder(nn.Module):
    """One down module, one up module, then a fixed 2x average pool so the
    feature map lands on the pose-map grid and one normalization serves both
    the pooling and the Gaussian fit."""

    def __init__(self, channels: int, width_mult: float = 1.0):
        super().__init__()
        base = _scaled(APPEARANCE_BASE_CHANNELS, width_mult)
        self.down = DownModule(3, base)
        self.up_conv = _conv3(base + base, channels)  # bare conv: feature head

    def forward(self, x: Tensor) -> Tensor:
        skip, h = self.down(x)
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        features = self.up_conv(torch.cat([h, skip], dim=-3))
        return F.avg_pool2d(features, 2)  # (B, C, H/2, W/2)


class MaskNet(nn.Module):
    """3-down/3-up U-Net, 32 channels per module, from K rendered heatmaps
    to a single-channel blend mask in [0, 1]."""

    def __init__(self, num_parts: int, width_mult: float = 1.0):
        super().__init__()
        ch = _scaled(MASK_CHANNELS, width_mult)
        self.downs = nn.ModuleList(
            [DownModule(num_parts, ch), DownModule(ch, ch), DownModule(ch, ch)]
        )
        self.ups = nn.ModuleList(
            [UpModule(ch, ch, ch), UpModule(ch, ch, ch), UpModule(ch, ch, ch)]
        )
        self.head = _conv3(ch, 1)

    def forward(self, heatmaps: Tensor) -> Tensor:
        skips = []
        h = heatmaps
        for down in self.downs:
            skip, h = down(h)
            skips.append(skip)
        h = self.ups[0](h, skips[2])
        h = self.ups[1](h, skips[1])
        h = self.ups[2](h, skips[0])
        return torch.sigmoid(self.head(h))  # (B, 1, H, W)


class BackgroundNet(nn.Module):
    """3-down/3-up U-Net doubling from 32, repainting the masked frame."""

    def __init__(self, width_mult: float = 1.0):
        super().__init__()
        down_ch = [_scaled(c, width_mult) for c in BACKGROUND_DOWN_CHANNELS]
        up_ch = [max(1, c // 2) for c in reversed(down_ch)]
        self.downs = nn.ModuleList(
            [
                DownModule(3, down_ch[0]),
                DownModule(down_ch[0], down_ch[1]),
                DownModule(down_ch[1], down_ch[2]),
            ]
        )
        self.ups = nn.ModuleList(
            [
                UpModule(down_ch[2], down_ch[2], up_ch[0]),
                UpModule(up_ch[0], down_ch[1], up_ch[1]),
                UpModule(up_ch[1], down_ch[0], up_ch[2]),
            ]
        )
        self.head = _conv3(up_ch[2], 3)

    def forward(self, masked: Tensor) -> Tensor:
        skips = []
        h = masked
        for down in self.downs:
            skip, h = down(h)
            skips.append(skip)
        h = self.ups[0](h, skips[2])
        h = self.ups[1](h, skips[1])
        h = self.ups[2](h, skips[0])
        return torch.sigmoid(self.head(h))  # (B, 3, H, W)


class SpadeNorm(nn.Module):
    """Parameter-free instance norm whose scale and shift are predicted
    per-pixel from the conditioning tensor (resized with nearest sampling)."""

    def __init__(self, channels: int, cond_channels: int, hidden: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.shared = spectral_norm(_conv3(cond_channels, hidden))
        self.gamma = spectral_norm(_conv3(hidden, channels))
        self.beta = spectral_norm(_conv3(hidden, channels))

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        cond = F.interpolate(cond, size=x.shape[-2:], mode="nearest")
        h = F.relu(self.shared(cond))
        return self.norm(x) * (1.0 + self.gamma(h)) + self.beta(h)


class SpadeDecoder(nn.Module):
    """Conditional decoder from an 8x-downsampled appearance seed.

    Four conv + modulated-norm + relu modules with nearest upsampling after
    the first three, then a sigmoid-bounded 3-channel head. Every conv is
    spectral-normalized.
    """

    def __init__(self, seed_channels: int, cond_channels: int, width_mult: float = 1.0):
        super().__init__()
        chans = [_scaled(c, width_mult) for c in DECODER_CHANNELS]
        hidden = _scaled(SPADE_HIDDEN_CHANNELS, width_mult)
        ins = [seed_channels] + chans[:-1]
        self.convs = nn.ModuleList(
            [spectral_norm(_conv3(i, o)) for i, o in zip(ins, chans)]
        )
        self.norms = nn.ModuleList(
            [SpadeNorm(o, cond_channels, hidden) for o in chans]
        )
        self.head = spectral_norm(_conv3(chans[-1], 3))

    def forward(self, seed: Tensor, cond: Tensor) -> Tensor:
        h = seed
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = F.relu(norm(conv(h), cond))
            if i < 3:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.head(h))  # (B, 3, H, W)


class LandmarkModel(nn.Module):
    """Bundle of the five sub-networks plus the geometry glue between them."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        k, c, w = config.num_parts, config.appearance_channels, config.width_mult
        self.pose = PoseEncoder(k, w)
        self.appearance = AppearanceEncoder(c, w)
        # conditioning = summed heatmap (1 channel) + projected appearance (C)
        self.foreground = SpadeDecoder(seed_channels=c, cond_channels=1 + c, width_mult=w)
        self.background = BackgroundNet(w)
        self.mask = MaskNet(k, w)

    @property
    def image_grid(self) -> Grid:
        return Grid(self.config.image_size, self.config.image_size)

    @property
    def pose_grid(self) -> Grid:
        half = self.config.image_size // 2
        return Grid(half, half)

    def _check_image(self, x: Tensor, name: str) -> None:
        s = self.config.image_size
        if x.dim() != 4 or x.shape[-3:] != (3, s, s):
            raise ValueError(f"{name} must be (B, 3, {s}, {s}), got {tuple(x.shape)}")

    def pose_encode(self, x: Tensor) -> PartActivationMap:
        """K unnormalized part logits at half resolution."""
        self._check_image(x, "pose_encode input")
        return PartActivationMap(self.pose(x))

    def appearance_encode(self, x: Tensor, pose: PartActivationMap) -> Tensor:
        """Per-part appearance codes: feature map pooled under the pose maps."""
        self._check_image(x, "appearance_encode input")
        features = self.appearance(x)
        return pool_appearance(pose, features)  # (B, K, C)

    def fit_parts(self, pose: PartActivationMap) -> GaussianParts:
        """Gaussian (mean, covariance) per part under the configured mode."""
        return fit_gaussians(
            pose,
            self.pose_grid,
            mode=self.config.covariance_mode,
            fixed_variance=self.config.fixed_variance,
        )

    def fg_decode(self, parts: GaussianParts, codes: Tensor) -> Tensor:
        """Render parts and appearance codes into the foreground image."""
        if codes.shape[-2] != self.config.num_parts:
            raise ValueError(
                f"codes carry {codes.shape[-2]} parts, model expects {self.config.num_parts}"
            )
        grid = self.image_grid
        heat = render_heatmaps(parts, grid)  # (B, K, H, W)
        projected = project_appearance(parts, codes, grid)  # (B, C, H, W)
        cond = torch.cat([heat.sum(dim=-3, keepdim=True), projected], dim=-3)
        seed = F.avg_pool2d(projected, SEED_DOWNSAMPLE)
        return self.foreground(seed, cond)

    def bg_reconstruct(self, masked: Tensor) -> Tensor:
        """Repaint the full frame from the foreground-suppressed input."""
        self._check_image(masked, "bg_reconstruct input")
        return self.background(masked)

    def mask_predict(self, parts: GaussianParts) -> Tensor:
        """Blend mask in [0, 1] from the rendered part heatmaps."""
        heat = render_heatmaps(parts, self.image_grid)
        return self.mask(heat)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def checkpoint_save(model: LandmarkModel, path: str) -> None:
    """Write the five sub-network states plus the build config atomically."""
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": asdict(model.config),
        "subnets": {name: getattr(model, name).state_dict() for name in SUBNET_NAMES},
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_load(path: str, expect: NetworkConfig | None = None) -> LandmarkModel:
    """Rebuild a model from a checkpoint archive.

    With ``expect`` given, every config field must match the archive; the
    first differing field is named in the error.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(
            f"checkpoint schema version {version!r} not supported "
            f"(expected {CHECKPOINT_SCHEMA_VERSION})"
        )
    config = NetworkConfig(**payload["config"])
    if expect is not None:
        for field, value in asdict(expect).items():
            stored = getattr(config, field)
            if stored != value:
                raise ValueError(
                    f"checkpoint config mismatch on {field}: "
                    f"archive has {stored!r}, expected {value!r}"
                )
    missing = [n for n in SUBNET_NAMES if n not in payload["subnets"]]
    if missing:
        raise ValueError(f"checkpoint missing sub-networks: {missing}")
    model = LandmarkModel(config)
    for name in SUBNET_NAMES:
        getattr(model, name).load_state_dict(payload["subnets"][name])
    return model
