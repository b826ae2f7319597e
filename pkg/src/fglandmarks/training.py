"""Training pipeline: perturbed-pair forward pass, perceptual loss, Adam.

The reconstruction target x never enters any encoder; the forward pass only
ever sees the color-jittered view (appearance perturbed) and a pose-perturbed
view (temporally offset frame or a warped copy). The pose read from the
jittered view drives the foreground render and the final blend; the pose read
from the pose-perturbed view conditions appearance pooling and the
background's foreground-suppression mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .geometry import (
    DEFAULT_FIXED_VARIANCE,
    FITTED,
    GaussianParts,
    PartActivationMap,
    composite,
    composite_no_mask,
    softmax_normalize,
)
from .networks import LandmarkModel, NetworkConfig
from .perturbations import (
    JitterSpec,
    TemporalSpec,
    TpsSpec,
    color_jitter,
    temporal_sample,
    tps_warp,
)

VARIANT_FACTORIZED = "factorized"
VARIANT_NO_MASK = "no-mask"
VARIANT_BASELINE = "baseline-unfactorized"
VARIANTS = (VARIANT_FACTORIZED, VARIANT_NO_MASK, VARIANT_BASELINE)

MODE_TEMP = "temp"
MODE_TPS = "tps"
MODE_TEMP_TPS = "temp+tps"
PERTURBATION_MODES = (MODE_TEMP, MODE_TPS, MODE_TEMP_TPS)

# backbone slice indices for the named feature taps
VGG_TAPS = {"relu1_2": 3, "relu2_2": 8, "relu3_2": 13, "relu4_2": 22}
DEFAULT_PERCEPTUAL_LAYERS = ("relu1_2", "relu2_2", "relu3_2", "relu4_2")
DEFAULT_PERCEPTUAL_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4)

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class NonFiniteLossError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, batch_indices: list[int]):
        self.step = step
        self.batch_indices = batch_indices
        super().__init__(
            f"non-finite loss at step {step}; offending batch indices: {batch_indices}"
        )


@dataclass(frozen=True)
class PerceptualLossSpec:
    """Feature layers, weights, and backbone source for the image loss.

    The default taps and weights are the contract; override only for probing
    (e.g. a single layer in tests). Without pretrained weights available the
    backbone falls back to a frozen, seed-deterministic random init, which
    still yields a valid (if weaker) perceptual distance.
    """

    layers: tuple = DEFAULT_PERCEPTUAL_LAYERS
    weights: tuple = DEFAULT_PERCEPTUAL_WEIGHTS
    pretrained: bool = False
    init_seed: int = 0

    def __post_init__(self) -> None:
        if len(self.layers) == 0 or len(self.layers) != len(self.weights):
            raise ValueError("layers and weights must be non-empty and align")
        for name in self.layers:
            if name not in VGG_TAPS:
                raise ValueError(f"unknown feature layer {name!r}; valid: {sorted(VGG_TAPS)}")
        for w in self.weights:
            if w <= 0:
                raise ValueError("layer weights must be positive")


@dataclass(frozen=True)
class TrainConfig:
    num_parts: int = 16
    appearance_channels: int = 16
    image_size: int = 128
    covariance_mode: str = FITTED
    fixed_variance: float = DEFAULT_FIXED_VARIANCE
    width_mult: float = 1.0
    variant: str = VARIANT_FACTORIZED
    perturbation_mode: str = MODE_TEMP
    learning_rate: float = 1e-4
    weight_decay: float = 5e-6
    batch_size: int = 16
    total_steps: int = 5000
    seed: int = 0
    jitter: JitterSpec = field(default_factory=JitterSpec)
    tps: TpsSpec = field(default_factory=TpsSpec)
    temporal: TemporalSpec = field(default_factory=TemporalSpec)
    perceptual: PerceptualLossSpec = field(default_factory=PerceptualLossSpec)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.perturbation_mode not in PERTURBATION_MODES:
            raise ValueError(
                f"perturbation_mode must be one of {PERTURBATION_MODES}, "
                f"got {self.perturbation_mode!r}"
            )
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            num_parts=self.num_parts,
            appearance_channels=self.appearance_channels,
            image_size=self.image_size,
            covariance_mode=self.covariance_mode,
            fixed_variance=self.fixed_variance,
            width_mult=self.width_mult,
        )


# ---------------------------------------------------------------------------
# perceptual loss
# ---------------------------------------------------------------------------

def _vgg19_prefix(last_index: int, pretrained: bool, init_seed: int) -> nn.Sequential:
    """Layers 0..last_index of the VGG19 feature stack.

    The fallback path builds the stack fresh under a forked RNG so the init
    is reproducible and never disturbs the caller's seed stream.
    """
    if pretrained:
        from torchvision.models import VGG19_Weights, vgg19

        return vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features[: last_index + 1]
    widths = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M")
    with torch.random.fork_rng():
        torch.manual_seed(init_seed)
        layers: list[nn.Module] = []
        in_ch = 3
        for w in widths:
            if w == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers.append(nn.Conv2d(in_ch, w, kernel_size=3, padding=1))
                layers.append(nn.ReLU(inplace=False))
                in_ch = w
            if len(layers) > last_index:
                break
        return nn.Sequential(*layers[: last_index + 1])


class PerceptualLoss(nn.Module):
    """Weighted MSE between frozen backbone features of two images."""

    def __init__(self, spec: PerceptualLossSpec | None = None):
        super().__init__()
        self.spec = spec or PerceptualLossSpec()
        self.taps = {name: VGG_TAPS[name] for name in self.spec.layers}
        last = max(self.taps.values())
        self.backbone = _vgg19_prefix(last, self.spec.pretrained, self.spec.init_seed)
        self.backbone.eval()
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()  # frozen backbone never leaves eval
        return self

    def _features(self, x: Tensor) -> dict[str, Tensor]:
        h = (x - self.mean) / self.std
        wanted = {idx: name for name, idx in self.taps.items()}
        out: dict[str, Tensor] = {}
        for idx, layer in enumerate(self.backbone):
            h = layer(h)
            if idx in wanted:
                out[wanted[idx]] = h
        return out

    @staticmethod
    def _check(x: Tensor, name: str) -> None:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"{name} must be (B, 3, H, W), got {tuple(x.shape)}")
        if x.min() < -1e-6 or x.max() > 1 + 1e-6:
            raise ValueError(f"{name} values must lie in [0, 1]")

    def forward(self, recon: Tensor, target: Tensor):
        """(total scalar, per-layer weighted means, per-sample totals)."""
        self._check(recon, "reconstruction")
        self._check(target, "target")
        fa = self._features(recon)
        fb = self._features(target)
        per_sample = torch.zeros(recon.shape[0], dtype=recon.dtype, device=recon.device)
        layer_terms: dict[str, Tensor] = {}
        for name, weight in zip(self.spec.layers, self.spec.weights):
            sq = (fa[name] - fb[name]).square().mean(dim=(-3, -2, -1))  # (B,)
            per_sample = per_sample + weight * sq
            layer_terms[name] = weight * sq.mean()
        return per_sample.mean(), layer_terms, per_sample


# ---------------------------------------------------------------------------
# perturbed pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbedPair:
    """One training sample: the loss target plus the two perturbed views.

    ``target`` is consumed exclusively by the loss; forward passes only ever
    read ``cj`` (appearance-perturbed) and ``perturbed`` (pose-perturbed).
    """

    target: Tensor
    cj: Tensor
    perturbed: Tensor

    def __post_init__(self) -> None:
        if self.target.shape != self.cj.shape or self.target.shape != self.perturbed.shape:
            raise ValueError("target, cj, and perturbed must share one shape")


def build_pair(frames, t: int, config: TrainConfig, seed: int) -> PerturbedPair:
    """Construct the (target, jittered, pose-perturbed) triple for frame t.

    In temp mode the pose-perturbed view is another frame of the sequence;
    in tps mode it is a warped copy of the anchor; temp+tps flips a fair
    coin per sample. All child seeds derive from ``seed`` alone.
    """
    rng = np.random.default_rng(seed)
    jitter_seed, warp_seed, temporal_seed = (int(s) for s in rng.integers(0, 2**31, 3))
    x = frames[t]
    cj = color_jitter(x, config.jitter, jitter_seed)
    mode = config.perturbation_mode
    if mode == MODE_TEMP_TPS:
        mode = MODE_TEMP if rng.random() < 0.5 else MODE_TPS
    if mode == MODE_TEMP:
        perturbed = temporal_sample(frames, t, config.temporal, temporal_seed)
    else:
        perturbed, _ = tps_warp(x, config.tps, warp_seed)
    return PerturbedPair(target=x, cj=cj, perturbed=perturbed)


def collate_pairs(pairs: list[PerturbedPair]) -> PerturbedPair:
    return PerturbedPair(
        target=torch.stack([p.target for p in pairs]),
        cj=torch.stack([p.cj for p in pairs]),
        perturbed=torch.stack([p.perturbed for p in pairs]),
    )


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenderBundle:
    """Everything the forward pass produced for one batch."""

    pose_cj: PartActivationMap
    pose_perturbed: PartActivationMap
    parts_cj: GaussianParts
    parts_perturbed: GaussianParts
    codes: Tensor
    foreground: Tensor
    background: Tensor | None
    mask_cj: Tensor | None
    mask_perturbed: Tensor | None
    reconstruction: Tensor


def forward_factorized(
    model: LandmarkModel, cj: Tensor, perturbed: Tensor, variant: str = VARIANT_FACTORIZED
) -> RenderBundle:
    """Run the perturbed views through the five nets and compose x-tilde.

    The unperturbed target is deliberately absent from the signature: no
    encoder can see it. Variants share every stage up to the composition;
    they differ only in which renders exist and how they are blended.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    pose_cj = softmax_normalize(model.pose_encode(cj))
    pose_pt = softmax_normalize(model.pose_encode(perturbed))
    codes = model.appearance_encode(perturbed, pose_pt)
    parts_cj = model.fit_parts(pose_cj)
    parts_pt = model.fit_parts(pose_pt)
    foreground = model.fg_decode(parts_cj, codes)

    background = mask_cj = mask_pt = None
    if variant == VARIANT_FACTORIZED:
        mask_cj = model.mask_predict(parts_cj)
        mask_pt = model.mask_predict(parts_pt)
        background = model.bg_reconstruct(perturbed * (1.0 - mask_pt))
        reconstruction = composite(mask_cj, foreground, background)
    elif variant == VARIANT_NO_MASK:
        background = model.bg_reconstruct(perturbed)
        reconstruction = composite_no_mask(foreground, background)
    else:  # baseline: foreground decoder alone
        reconstruction = foreground

    return RenderBundle(
        pose_cj=pose_cj,
        pose_perturbed=pose_pt,
        parts_cj=parts_cj,
        parts_perturbed=parts_pt,
        codes=codes,
        foreground=foreground,
        background=background,
        mask_cj=mask_cj,
        mask_perturbed=mask_pt,
        reconstruction=reconstruction,
    )


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    model: LandmarkModel
    perceptual: PerceptualLoss
    optimizer: torch.optim.Optimizer
    step: int = 0


def init_state(config: TrainConfig) -> TrainState:
    """Seed-deterministic model init plus the Adam optimizer."""
    torch.manual_seed(config.seed)
    model = LandmarkModel(config.network())
    perceptual = PerceptualLoss(config.perceptual)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    return TrainState(config=config, model=model, perceptual=perceptual, optimizer=optimizer)


def train_step(state: TrainState, batch: PerturbedPair) -> tuple[TrainState, dict]:
    """One joint Adam update over all five sub-networks."""
    state.model.train()
    bundle = forward_factorized(state.model, batch.cj, batch.perturbed, state.config.variant)
    recon = bundle.reconstruction
    if state.config.variant == VARIANT_NO_MASK:
        # the mask-free sum of two bounded renders can exceed 1; the loss
        # contract wants [0, 1], so saturate only at the loss boundary
        recon = recon.clamp(0.0, 1.0)
    total, layer_terms, per_sample = state.perceptual(recon, batch.target)
    if not torch.isfinite(total):
        bad = torch.nonzero(~torch.isfinite(per_sample)).flatten().tolist()
        raise NonFiniteLossError(state.step, bad)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    # metrics are stamped with the step that produced the loss (0-based)
    metrics = {"step": state.step, "loss": float(total.detach())}
    for name, value in layer_terms.items():
        metrics[f"perceptual/{name}"] = float(value.detach())
    state.step += 1
    return state, metrics


def run_training(state: TrainState, batch_fn, steps: int, metrics_path=None) -> list[dict]:
    """Drive train_step for ``steps`` batches, appending JSONL metrics."""
    history = []
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for _ in range(steps):
            state, metrics = train_step(state, batch_fn(state.step))
            history.append(metrics)
            if sink is not None:
                sink.write(json.dumps(metrics) + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
    return history
