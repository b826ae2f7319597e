"""Keypoint-bottleneck video prediction.

An LSTM extrapolates the fitted landmark Gaussians through time; frames are
then rendered from the predicted parts with appearance codes taken once from
a seed frame and a background computed once, so only pose moves. Covariances
travel through a log-Cholesky parameterization, which keeps any predicted
update positive definite by construction.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .geometry import FITTED, GaussianParts, composite, softmax_normalize
from .networks import LandmarkModel
from .training import (
    DEFAULT_PERCEPTUAL_LAYERS,
    PerceptualLossSpec,
    _vgg19_prefix,
    VGG_TAPS,
)

POSE_DIMS_PER_PART = 5  # mu_x, mu_y, log l11, l21, log l22
LSTM_HIDDEN_SIZE = 256
LSTM_NUM_LAYERS = 2
LSTM_SCHEMA_VERSION = 1
DEFAULT_PSNR_CAP_DB = 100.0

_CHOL_EPS = 1e-12


# ---------------------------------------------------------------------------
# log-Cholesky pose vectors
# ---------------------------------------------------------------------------

def encode_parts(parts: GaussianParts) -> Tensor:
    """(B, K, 2) means + (B, K, 2, 2) covariances -> (B, K*5) vectors.

    Covariances are factored as Sigma = L L^T with the diagonal of L stored
    in log space, so decoding any real-valued vector yields a PD matrix.
    """
    chol = torch.linalg.cholesky(parts.covariances)  # (B, K, 2, 2)
    packed = torch.stack(
        [
            torch.log(chol[..., 0, 0].clamp_min(_CHOL_EPS)),
            chol[..., 1, 0],
            torch.log(chol[..., 1, 1].clamp_min(_CHOL_EPS)),
        ],
        dim=-1,
    )  # (B, K, 3)
    vec = torch.cat([parts.means, packed], dim=-1)  # (B, K, 5)
    return vec.flatten(start_dim=-2)


def decode_parts(vec: Tensor, covariance_mode: str = FITTED) -> GaussianParts:
    """Inverse of encode_parts; always yields positive-definite covariances."""
    if vec.shape[-1] % POSE_DIMS_PER_PART != 0:
        raise ValueError(
            f"pose vector length {vec.shape[-1]} is not a multiple of {POSE_DIMS_PER_PART}"
        )
    per_part = vec.reshape(*vec.shape[:-1], -1, POSE_DIMS_PER_PART)
    means = per_part[..., :2]
    l11 = torch.exp(per_part[..., 2])
    l21 = per_part[..., 3]
    l22 = torch.exp(per_part[..., 4])
    zero = torch.zeros_like(l11)
    chol = torch.stack(
        [
            torch.stack([l11, zero], dim=-1),
            torch.stack([l21, l22], dim=-1),
        ],
        dim=-2,
    )  # (..., K, 2, 2) lower triangular
    covs = chol @ chol.transpose(-1, -2)
    return GaussianParts(means, covs, covariance_mode=covariance_mode)


# ---------------------------------------------------------------------------
# pose dynamics model
# ---------------------------------------------------------------------------

class PoseDynamicsLstm(nn.Module):
    """Residual next-step predictor over flattened pose vectors."""

    def __init__(
        self,
        num_parts: int,
        hidden_size: int = LSTM_HIDDEN_SIZE,
        num_layers: int = LSTM_NUM_LAYERS,
    ):
        super().__init__()
        self.num_parts = num_parts
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        dims = num_parts * POSE_DIMS_PER_PART
        self.lstm = nn.LSTM(dims, hidden_size, num_layers, batch_first=True)
        self.head = nn.Linear(hidden_size, dims)

    def forward(self, sequence: Tensor, state=None):
        """(B, T, D) vectors -> next-step predictions (B, T, D) and state.

        Output t is the prediction for input t+1; the residual connection
        makes a zero head the identity (constant motion prior).
        """
        hidden, state = self.lstm(sequence, state)
        return sequence + self.head(hidden), state

    def warm_start(self, sequence: Tensor):
        """Consume seed vectors; return (state, first future prediction)."""
        pred, state = self.forward(sequence)
        return state, pred[:, -1]

    def step(self, state, vec: Tensor):
        """One autoregressive step on (B, D) vectors."""
        pred, state = self.forward(vec.unsqueeze(1), state)
        return state, pred[:, 0]


def pose_lstm_step(lstm, state, vec: Tensor):
    """Advance the dynamics model one step: (state, parts_t) -> (state, parts_t+1)."""
    return lstm.step(state, vec)


def encode_sequence(model: LandmarkModel, frames: Tensor) -> Tensor:
    """(T, 3, H, W) frames -> (T, D) pose vectors via the landmark encoder."""
    model.eval()
    with torch.no_grad():
        pose = softmax_normalize(model.pose_encode(frames))
        parts = model.fit_parts(pose)
    return encode_parts(parts)


def train_pose_lstm(
    lstm: PoseDynamicsLstm,
    sequences: Tensor,
    steps: int,
    batch_size: int = 8,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> list:
    """Teacher-forced next-step training on (N, T, D) pose vector sequences.

    Every step conditions on ground-truth history only (the model never sees
    its own outputs), predicting position t+1 from positions up to t.
    """
    if sequences.dim() != 3 or sequences.shape[1] < 2:
        raise ValueError("need (N, T >= 2, D) pose sequences")
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(lstm.parameters(), lr=learning_rate)
    losses = []
    lstm.train()
    for _ in range(steps):
        idx = rng.integers(0, sequences.shape[0], size=min(batch_size, sequences.shape[0]))
        batch = sequences[torch.from_numpy(idx)]
        pred, _ = lstm(batch[:, :-1])
        loss = F.mse_loss(pred, batch[:, 1:])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    lstm.eval()
    return losses


def lstm_save(lstm: PoseDynamicsLstm, path: str) -> None:
    payload = {
        "schema_version": LSTM_SCHEMA_VERSION,
        "num_parts": lstm.num_parts,
        "hidden_size": lstm.hidden_size,
        "num_layers": lstm.num_layers,
        "state": lstm.state_dict(),
    }
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def lstm_load(path: str) -> PoseDynamicsLstm:
    payload = torch.load(path, weights_only=True)
    if payload.get("schema_version") != LSTM_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported dynamics checkpoint schema {payload.get('schema_version')!r}"
        )
    lstm = PoseDynamicsLstm(
        payload["num_parts"], payload["hidden_size"], payload["num_layers"]
    )
    lstm.load_state_dict(payload["state"])
    lstm.eval()
    return lstm


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RolloutConfig:
    """Seed/horizon layout for autoregressive prediction.

    Appearance codes and the background render come from single seed frames
    (the last one by default) and are reused verbatim at every step.
    """

    seed_frames: int = 10
    horizon: int = 30
    appearance_frame: int = -1
    background_frame: int = -1

    def __post_init__(self) -> None:
        if self.seed_frames < 1:
            raise ValueError("need at least one seed frame")
        if self.horizon < 1:
            raise ValueError("rollout horizon must be at least 1")


@dataclass
class RolloutResult:
    frames: Tensor  # (H, 3, S, S)
    foregrounds: Tensor  # (H, 3, S, S)
    masks: Tensor  # (H, 1, S, S)
    background: Tensor  # (3, S, S), computed once
    appearance_codes: Tensor  # (K, C), reused at every step
    vectors: Tensor  # (H, D) predicted pose vectors


def rollout(model: LandmarkModel, lstm, seeds: Tensor, cfg: RolloutConfig) -> RolloutResult:
    """Extrapolate pose from seed frames and render the future.

    Per step: the LSTM advances the pose vector, the decoded Gaussians drive
    the foreground decoder and the mask net, and the frame is composited
    over the fixed background.
    """
    if seeds.dim() != 4 or seeds.shape[0] < cfg.seed_frames:
        raise ValueError(f"need at least {cfg.seed_frames} seed frames")
    seeds = seeds[: cfg.seed_frames]
    model.eval()
    if model.config.covariance_mode != FITTED:
        raise ValueError("rollout requires a model with fitted covariances")

    with torch.no_grad():
        pose = softmax_normalize(model.pose_encode(seeds))
        parts = model.fit_parts(pose)
        vectors = encode_parts(parts)  # (T, D)

        # appearance pooled once from its source seed frame
        app_frame = seeds[cfg.appearance_frame]
        app_pose = softmax_normalize(model.pose_encode(app_frame.unsqueeze(0)))
        codes = model.appearance_encode(app_frame.unsqueeze(0), app_pose)  # (1, K, C)

        # background repainted once from its (foreground-suppressed) source frame
        bg_frame = seeds[cfg.background_frame].unsqueeze(0)
        bg_parts = model.fit_parts(softmax_normalize(model.pose_encode(bg_frame)))
        bg_mask = model.mask_predict(bg_parts)
        background = model.bg_reconstruct((1.0 - bg_mask) * bg_frame)  # (1, 3, S, S)

        state, vec = lstm.warm_start(vectors.unsqueeze(0))  # vec: (1, D)
        frames, fgs, masks, vecs = [], [], [], []
        for _ in range(cfg.horizon):
            step_parts = decode_parts(vec, covariance_mode=FITTED)
            fg = model.fg_decode(step_parts, codes)
            mask = model.mask_predict(step_parts)
            frames.append(composite(mask, fg, background)[0])
            fgs.append(fg[0])
            masks.append(mask[0])
            vecs.append(vec[0])
            state, vec = pose_lstm_step(lstm, state, vec)

    return RolloutResult(
        frames=torch.stack(frames),
        foregrounds=torch.stack(fgs),
        masks=torch.stack(masks),
        background=background[0],
        appearance_codes=codes[0],
        vectors=torch.stack(vecs),
    )


# ---------------------------------------------------------------------------
# frame metrics
# ---------------------------------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> Tensor:
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=torch.float64) - half
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


def ssim(x: Tensor, y: Tensor, window_size: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-windowed SSIM on [0, 1] images (C, H, W), valid windows only.

    Standard constants K1=0.01, K2=0.03 at data range 1; statistics use the
    plain weighted moments (no sample-covariance correction).
    """
    if x.shape != y.shape or x.dim() != 3:
        raise ValueError("ssim expects two (C, H, W) images of equal shape")
    if min(x.shape[-2:]) < window_size:
        raise ValueError(f"image smaller than the {window_size}px ssim window")
    c = x.shape[0]
    kernel = _gaussian_window(window_size, sigma).to(torch.float64)
    kernel = kernel.expand(c, 1, window_size, window_size)
    xs = x.unsqueeze(0).double()
    ys = y.unsqueeze(0).double()

    def blur(t: Tensor) -> Tensor:
        return F.conv2d(t, kernel, groups=c)  # valid padding

    mu_x = blur(xs)
    mu_y = blur(ys)
    var_x = blur(xs * xs) - mu_x * mu_x
    var_y = blur(ys * ys) - mu_y * mu_y
    cov = blur(xs * ys) - mu_x * mu_y
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def psnr(x: Tensor, y: Tensor, cap_db: float = DEFAULT_PSNR_CAP_DB) -> float:
    """10 log10(1/MSE) on [0, 1] images; identical inputs report the cap."""
    if x.shape != y.shape:
        raise ValueError("psnr expects images of equal shape")
    mse = float(F.mse_loss(x.double(), y.double()))
    if mse <= 0.0:
        return cap_db
    return min(10.0 * math.log10(1.0 / mse), cap_db)


class LpipsDistance(nn.Module):
    """Perceptual distance over unit-normalized backbone features.

    Features are channel-normalized at each tapped layer; squared
    differences are averaged over channels and space with uniform layer
    weights. The backbone choice (random deterministic init vs pretrained)
    is a config, as the right variant is ambiguous.
    """

    IMAGENET_MEAN = (0.485, 0.456, 0.406)
    IMAGENET_STD = (0.229, 0.224, 0.225)

    def __init__(self, spec: PerceptualLossSpec | None = None):
        super().__init__()
        spec = spec or PerceptualLossSpec(
            layers=DEFAULT_PERCEPTUAL_LAYERS,
            weights=tuple(1.0 / len(DEFAULT_PERCEPTUAL_LAYERS) for _ in DEFAULT_PERCEPTUAL_LAYERS),
        )
        self.spec = spec
        self.taps = [VGG_TAPS[name] for name in spec.layers]
        self.backbone = _vgg19_prefix(max(self.taps), spec.pretrained, spec.init_seed)
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone.eval()
        mean = torch.tensor(self.IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(self.IMAGENET_STD).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        """Batched distance (B,) between [0, 1] image batches."""
        if x.shape != y.shape:
            raise ValueError("lpips expects batches of equal shape")
        x = (x - self.mean) / self.std
        y = (y - self.mean) / self.std
        total = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        hx, hy = x, y
        tap_set = set(self.taps)
        for index, layer in enumerate(self.backbone):
            hx = layer(hx)
            hy = layer(hy)
            if index in tap_set:
                nx = hx / hx.pow(2).sum(dim=1, keepdim=True).clamp_min(1e-10).sqrt()
                ny = hy / hy.pow(2).sum(dim=1, keepdim=True).clamp_min(1e-10).sqrt()
                total = total + (nx - ny).pow(2).mean(dim=(1, 2, 3)) / len(self.taps)
        return total


@dataclass
class VideoMetrics:
    """Per-timestep means and standard errors across sequences."""

    ssim_mean: np.ndarray
    ssim_stderr: np.ndarray
    psnr_mean: np.ndarray
    psnr_stderr: np.ndarray
    lpips_mean: np.ndarray
    lpips_stderr: np.ndarray

    def one_minus_lpips(self) -> np.ndarray:
        """Plot-friendly similarity orientation for the perceptual metric."""
        return 1.0 - self.lpips_mean

    def horizon(self) -> int:
        return len(self.ssim_mean)


def _mean_stderr(values: np.ndarray):
    mean = values.mean(axis=0)
    if values.shape[0] > 1:
        stderr = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
    else:
        stderr = np.zeros_like(mean)
    return mean, stderr


def eval_vpred(
    pred: Tensor,
    gt: Tensor,
    lpips_model: LpipsDistance | None = None,
    psnr_cap_db: float = DEFAULT_PSNR_CAP_DB,
) -> VideoMetrics:
    """Score (N, T, 3, H, W) predictions against ground truth per timestep."""
    if pred.shape != gt.shape or pred.dim() != 5:
        raise ValueError("eval_vpred expects matching (N, T, 3, H, W) stacks")
    lpips_model = lpips_model or LpipsDistance()
    n, t = pred.shape[:2]
    ssim_vals = np.zeros((n, t))
    psnr_vals = np.zeros((n, t))
    lpips_vals = np.zeros((n, t))
    with torch.no_grad():
        for step in range(t):
            lpips_vals[:, step] = lpips_model(pred[:, step], gt[:, step]).numpy()
            for i in range(n):
                ssim_vals[i, step] = ssim(pred[i, step], gt[i, step])
                psnr_vals[i, step] = psnr(pred[i, step], gt[i, step], psnr_cap_db)
    s_m, s_e = _mean_stderr(ssim_vals)
    p_m, p_e = _mean_stderr(psnr_vals)
    l_m, l_e = _mean_stderr(lpips_vals)
    return VideoMetrics(s_m, s_e, p_m, p_e, l_m, l_e)


def write_vpred_csv(metrics: VideoMetrics, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["t", "ssim_mean", "ssim_stderr", "psnr_mean", "psnr_stderr",
             "lpips_mean", "lpips_stderr"]
        )
        for t in range(metrics.horizon()):
            writer.writerow(
                [
                    t,
                    metrics.ssim_mean[t],
                    metrics.ssim_stderr[t],
                    metrics.psnr_mean[t],
                    metrics.psnr_stderr[t],
                    metrics.lpips_mean[t],
                    metrics.lpips_stderr[t],
                ]
            )
