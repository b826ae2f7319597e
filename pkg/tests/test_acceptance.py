"""Acceptance scorecard: ten end-to-end checks over the whole package.

Each test prints one `[ACCEPTANCE] criterion N: PASS/FAIL | detail` line on
the raw stdout (bypassing pytest capture) and then asserts, so a plain
`pytest` run always shows the scorecard. The brute-force oracles here are
written independently of the library (explicit Python loops, closed-form
2x2 inverses) on purpose.

The file trains real models on a shared synthetic sprite benchmark: one
overfit run, a 15-run ablation matrix, and a pose-dynamics model for
rollouts. Expect on the order of two hours on a single CPU core; the
session-scoped fixtures print `[acceptance] ...` progress lines while they
work.
"""

import json
import math
import sys
import time

import numpy as np
import pytest
import torch
from torch import Tensor

from fglandmarks.cli import main as cli_main
from fglandmarks.datasets import (
    SyntheticSceneSpec,
    make_batch_fn,
    split_dataset,
    synth_generate,
)
from fglandmarks.evaluation import (
    CoordinateConvention,
    containment_analysis,
    containment_percentages,
    eval_bbc_accuracy,
    eval_human36m_error,
    eval_mafl_error,
    fit_regressor,
    landmark_locations,
)
from fglandmarks.geometry import (
    COVARIANCE_EPS,
    GaussianParts,
    Grid,
    PartActivationMap,
    composite,
    fit_gaussians,
    pool_appearance,
    render_heatmaps,
    softmax_normalize,
)
from fglandmarks.networks import LandmarkModel
from fglandmarks.training import (
    VARIANT_BASELINE,
    VARIANT_FACTORIZED,
    VARIANT_NO_MASK,
    PerturbedPair,
    TrainConfig,
    forward_factorized,
    init_state,
    train_step,
)
from fglandmarks.videopred import (
    LpipsDistance,
    PoseDynamicsLstm,
    RolloutConfig,
    encode_sequence,
    psnr,
    rollout,
    ssim,
    train_pose_lstm,
)


# ---------------------------------------------------------------------------
# benchmark scale knobs
# ---------------------------------------------------------------------------

# One shared scene for every trained criterion: a 24px flat sprite bouncing
# over a static textured plate with one full-width colored band at a random
# per-sequence height. Both scene choices are load-bearing. The band is
# position-critical background that only landmark capacity can place for
# the unfactorized model (the factorized background net passes it through
# from the masked input for free), and the sprite must carry enough loss
# mass that tracking it stays worthwhile for the baseline; with a smaller
# sprite, a plain plate, or no band, the containment comparison degenerates
# into a coin flip.
BENCH_RESOLUTION = 64
BENCH_SEQUENCES = 20
BENCH_LENGTH = 60
BENCH_SPRITE = 24

OVERFIT_STEPS = 2000
MATRIX_STEPS = 1200
MATRIX_SEEDS = (0, 1, 2)
MATRIX_KS = (4, 8)

CONVENTION = CoordinateConvention(height=BENCH_RESOLUTION, width=BENCH_RESOLUTION)


# pytest captures at the file-descriptor level, so scorecard lines go through
# its own terminal reporter to reach the live console; plain stdout otherwise
_TERMINAL = None


@pytest.fixture(scope="session", autouse=True)
def _scorecard_terminal(request):
    global _TERMINAL
    _TERMINAL = request.config.pluginmanager.getplugin("terminalreporter")
    yield
    _TERMINAL = None


def _emit(line: str) -> None:
    if _TERMINAL is not None:
        _TERMINAL.write_line(line)
    else:
        print(line, file=sys.__stdout__, flush=True)


def report(criterion: int, passed: bool, detail: str) -> None:
    """One scorecard line per criterion on the live console, then assert."""
    verdict = "PASS" if passed else "FAIL"
    _emit(f"[ACCEPTANCE] criterion {criterion}: {verdict} | {detail}")
    assert passed, f"criterion {criterion}: {detail}"


def progress(message: str) -> None:
    _emit(f"[acceptance] {message}")


def max_rel_err(actual, expected) -> float:
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    return float(np.max(np.abs(a - e) / np.maximum(np.abs(e), 1e-9)))


# ---------------------------------------------------------------------------
# criterion 1: brute-force equation oracles
# ---------------------------------------------------------------------------

def _oracle_axes(h: int, w: int):
    # cell centers on the same [-1, 1] lattice the library uses
    xs = [-1.0 + 2.0 * j / (w - 1) for j in range(w)]
    ys = [-1.0 + 2.0 * i / (h - 1) for i in range(h)]
    return xs, ys


def oracle_pool(p: np.ndarray, f: np.ndarray) -> np.ndarray:
    k, h, w = p.shape
    c = f.shape[0]
    out = np.zeros((k, c))
    for kk in range(k):
        for cc in range(c):
            total = 0.0
            for i in range(h):
                for j in range(w):
                    total += p[kk, i, j] * f[cc, i, j]
            out[kk, cc] = total
    return out


def oracle_fit(p: np.ndarray, eps: float):
    k, h, w = p.shape
    xs, ys = _oracle_axes(h, w)
    means = np.zeros((k, 2))
    covs = np.zeros((k, 2, 2))
    for kk in range(k):
        mx = my = 0.0
        for i in range(h):
            for j in range(w):
                mx += p[kk, i, j] * xs[j]
                my += p[kk, i, j] * ys[i]
        means[kk] = (mx, my)
        cxx = cxy = cyy = 0.0
        for i in range(h):
            for j in range(w):
                dx, dy = xs[j] - mx, ys[i] - my
                cxx += p[kk, i, j] * dx * dx
                cxy += p[kk, i, j] * dx * dy
                cyy += p[kk, i, j] * dy * dy
        covs[kk] = [[cxx + eps, cxy], [cxy, cyy + eps]]
    return means, covs


def oracle_render(means: np.ndarray, covs: np.ndarray, h: int, w: int) -> np.ndarray:
    k = means.shape[0]
    xs, ys = _oracle_axes(h, w)
    out = np.zeros((k, h, w))
    for kk in range(k):
        a, b = covs[kk, 0, 0], covs[kk, 0, 1]
        c, d = covs[kk, 1, 0], covs[kk, 1, 1]
        det = a * d - b * c
        i00, i01, i10, i11 = d / det, -b / det, -c / det, a / det
        for i in range(h):
            for j in range(w):
                dx, dy = xs[j] - means[kk, 0], ys[i] - means[kk, 1]
                quad = dx * (i00 * dx + i01 * dy) + dy * (i10 * dx + i11 * dy)
                out[kk, i, j] = 1.0 / (1.0 + quad)
    return out


def oracle_composite(m: np.ndarray, fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    c, h, w = fg.shape
    out = np.zeros_like(fg)
    for cc in range(c):
        for i in range(h):
            for j in range(w):
                out[cc, i, j] = m[0, i, j] * fg[cc, i, j] + (1.0 - m[0, i, j]) * bg[cc, i, j]
    return out


def oracle_containment(p: np.ndarray, weights: np.ndarray) -> np.ndarray:
    k, h, w = p.shape
    out = np.zeros(k)
    for kk in range(k):
        total = 0.0
        for i in range(h):
            for j in range(w):
                total += p[kk, i, j] * weights[i, j]
        out[kk] = total * 100.0
    return out


def test_criterion_01_equation_oracles():
    rng = np.random.default_rng(101)
    start = time.time()
    worst = dict.fromkeys(
        ("pooling", "fitting", "rendering", "compositing", "containment"), 0.0
    )
    instances = 100
    for _ in range(instances):
        h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        k, c = int(rng.integers(1, 4)), int(rng.integers(1, 4))

        logits = torch.tensor(rng.normal(0.0, 2.0, (k, h, w)))
        probs = softmax_normalize(PartActivationMap(logits))
        p = probs.values.numpy()

        feats = torch.tensor(rng.uniform(-1.0, 1.0, (c, h, w)))
        got = pool_appearance(probs, feats).numpy()
        worst["pooling"] = max(worst["pooling"], max_rel_err(got, oracle_pool(p, feats.numpy())))

        parts = fit_gaussians(probs, Grid(h, w))
        want_mu, want_cov = oracle_fit(p, COVARIANCE_EPS)
        worst["fitting"] = max(
            worst["fitting"],
            max_rel_err(parts.means.numpy(), want_mu),
            max_rel_err(parts.covariances.numpy(), want_cov),
        )

        # fresh random positive-definite gaussians for the renderer
        chol = rng.normal(0.0, 0.5, (k, 2, 2))
        covs = chol @ chol.transpose(0, 2, 1) + 0.05 * np.eye(2)
        mus = rng.uniform(-0.8, 0.8, (k, 2))
        rendered = render_heatmaps(
            GaussianParts(torch.tensor(mus), torch.tensor(covs)), Grid(h, w)
        ).numpy()
        worst["rendering"] = max(
            worst["rendering"], max_rel_err(rendered, oracle_render(mus, covs, h, w))
        )

        mask = torch.tensor(rng.uniform(0.0, 1.0, (1, h, w)))
        fg = torch.tensor(rng.uniform(0.0, 1.0, (3, h, w)))
        bg = torch.tensor(rng.uniform(0.0, 1.0, (3, h, w)))
        blended = composite(mask, fg, bg).numpy()
        worst["compositing"] = max(
            worst["compositing"],
            max_rel_err(blended, oracle_composite(mask.numpy(), fg.numpy(), bg.numpy())),
        )

        weights = torch.tensor(rng.uniform(0.0, 1.0, (h, w)))
        contained = containment_percentages(probs.values, weights).numpy()
        worst["containment"] = max(
            worst["containment"], max_rel_err(contained, oracle_containment(p, weights.numpy())),
        )

    elapsed = time.time() - start
    overall = max(worst.values())
    detail = (
        ", ".join(f"{name} {err:.1e}" for name, err in worst.items())
        + f" max rel err over {instances} instances each; {elapsed:.1f}s"
    )
    report(1, overall <= 1e-5 and elapsed < 60.0, detail)


# ---------------------------------------------------------------------------
# criterion 2: analytic gradients vs central differences
# ---------------------------------------------------------------------------

def _grad_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(numeric)), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def test_criterion_02_gradient_checks():
    rng = np.random.default_rng(202)
    step = 1e-4
    worst_fit = 0.0
    worst_render = 0.0
    for instance in range(20):
        h, w = int(rng.integers(4, 7)), int(rng.integers(4, 7))
        k = int(rng.integers(1, 4))
        if instance % 2 == 0:
            # scalar functional of fitted means+covariances wrt raw logits
            logits = torch.tensor(rng.normal(0.0, 1.0, (k, h, w)), requires_grad=True)
            wm = torch.tensor(rng.normal(0.0, 1.0, (k, 2)))
            wc = torch.tensor(rng.normal(0.0, 1.0, (k, 2, 2)))

            def value(raw):
                parts = fit_gaussians(softmax_normalize(PartActivationMap(raw)), Grid(h, w))
                return (parts.means * wm).sum() + (parts.covariances * wc).sum()

            value(logits).backward()
            analytic = logits.grad.numpy().copy()
            numeric = np.zeros_like(analytic)
            with torch.no_grad():
                flat = logits.detach().clone()
                for idx in range(flat.numel()):
                    probe = flat.flatten()
                    probe[idx] += step
                    up = value(probe.reshape(flat.shape)).item()
                    probe[idx] -= 2 * step
                    down = value(probe.reshape(flat.shape)).item()
                    numeric.flat[idx] = (up - down) / (2 * step)
            worst_fit = max(worst_fit, _grad_rel_err(analytic, numeric))
        else:
            # scalar functional of rendered heatmaps wrt means and covariances
            chol = rng.normal(0.0, 0.4, (k, 2, 2))
            cov0 = chol @ chol.transpose(0, 2, 1) + 0.1 * np.eye(2)
            mu = torch.tensor(rng.uniform(-0.7, 0.7, (k, 2)), requires_grad=True)
            cov = torch.tensor(cov0, requires_grad=True)
            wt = torch.tensor(rng.normal(0.0, 1.0, (k, h, w)))

            def value(mu_, cov_):
                return (render_heatmaps(GaussianParts(mu_, cov_), Grid(h, w)) * wt).sum()

            value(mu, cov).backward()
            for param in (mu, cov):
                analytic = param.grad.numpy().copy()
                numeric = np.zeros_like(analytic)
                with torch.no_grad():
                    base = param.detach().clone()
                    for idx in range(base.numel()):
                        probe = base.flatten()
                        probe[idx] += step
                        args = (probe.reshape(base.shape), cov.detach()) if param is mu \
                            else (mu.detach(), probe.reshape(base.shape))
                        up = value(*args).item()
                        probe[idx] -= 2 * step
                        args = (probe.reshape(base.shape), cov.detach()) if param is mu \
                            else (mu.detach(), probe.reshape(base.shape))
                        down = value(*args).item()
                        numeric.flat[idx] = (up - down) / (2 * step)
                worst_render = max(worst_render, _grad_rel_err(analytic, numeric))
    ok = worst_fit <= 1e-3 and worst_render <= 1e-3
    report(
        2,
        ok,
        f"gaussian fitting {worst_fit:.2e}, heatmap rendering {worst_render:.2e} "
        f"max grad rel err (central differences, step {step:g}, 20 instances)",
    )


# ---------------------------------------------------------------------------
# criterion 3: loss target never reaches the forward pass
# ---------------------------------------------------------------------------

def _bundle_tensors(bundle) -> dict:
    out = {}
    for name, value in vars(bundle).items():
        if isinstance(value, Tensor):
            out[name] = value
        elif isinstance(value, PartActivationMap):
            out[name] = value.values
        elif isinstance(value, GaussianParts):
            out[f"{name}.means"] = value.means
            out[f"{name}.covariances"] = value.covariances
    return out


def test_criterion_03_information_firewall():
    torch.manual_seed(303)
    config = TrainConfig(
        num_parts=3, appearance_channels=8, image_size=32, width_mult=0.25
    )
    model = LandmarkModel(config.network())
    model.eval()
    cj = torch.rand(2, 3, 32, 32)
    perturbed = torch.rand(2, 3, 32, 32)
    substitutes = (
        torch.rand(2, 3, 32, 32),
        torch.zeros(2, 3, 32, 32),
        torch.ones(2, 3, 32, 32),
    )
    checked = 0
    identical = True
    for variant in (VARIANT_FACTORIZED, VARIANT_NO_MASK, VARIANT_BASELINE):
        with torch.no_grad():
            pairs = [PerturbedPair(target=t, cj=cj, perturbed=perturbed) for t in substitutes]
            bundles = [
                forward_factorized(model, pair.cj, pair.perturbed, variant) for pair in pairs
            ]
        reference = _bundle_tensors(bundles[0])
        for other in bundles[1:]:
            for name, tensor in _bundle_tensors(other).items():
                checked += 1
                identical = identical and torch.equal(reference[name], tensor)
    report(
        3,
        identical and checked > 0,
        f"{checked} forward tensors bitwise-identical under loss-target "
        "substitution across all 3 variants",
    )


# ---------------------------------------------------------------------------
# shared benchmark fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def benchmark():
    """The shared sprite-on-textured-plate scene, split by sequence."""
    spec = SyntheticSceneSpec(
        resolution=BENCH_RESOLUTION,
        length=BENCH_LENGTH,
        sprite_size=BENCH_SPRITE,
        motion="constant-velocity",
        velocity=(2, 1),
        bands=1,
    )
    records = []
    for i in range(BENCH_SEQUENCES):
        records.extend(synth_generate(spec, seed=i, sequence_id=f"seq-{i:04d}"))
    train, val, test = split_dataset(records)
    return {
        "spec": spec,
        "train": train,
        "val": val,
        "test": test,
        "fit": train[::8],
        "eval": val[::4],
    }


def _train_model(records, variant: str, num_parts: int, seed: int, steps: int):
    config = TrainConfig(
        num_parts=num_parts,
        appearance_channels=8,
        image_size=BENCH_RESOLUTION,
        width_mult=0.25,
        batch_size=4,
        seed=seed,
        perturbation_mode="temp",
        variant=variant,
    )
    state = init_state(config)
    batch_fn = make_batch_fn(records, config, seed=seed)
    step0 = None
    tail = []
    for s in range(steps):
        state, metrics = train_step(state, batch_fn(s))
        if s == 0:
            step0 = metrics["loss"]
        tail.append(metrics["loss"])
        if len(tail) > 25:
            tail.pop(0)
    return state, step0, float(np.mean(tail))


def _regression_stats(model, fit_records, eval_records):
    """(per-keypoint mean px error, 6px accuracy %, center-only px error)."""
    fit_land = landmark_locations(model, fit_records)
    eval_land = landmark_locations(model, eval_records)
    fit_keys = np.stack([r.keypoints for r in fit_records])
    eval_keys = np.stack([r.keypoints for r in eval_records])
    regressor = fit_regressor(fit_land, fit_keys, CONVENTION)
    pred = regressor.predict(eval_land)
    errors = np.linalg.norm(pred - eval_keys, axis=-1)
    accuracy = eval_bbc_accuracy(pred, eval_keys, radius=6.0)

    center_reg = fit_regressor(fit_land, fit_keys[:, :1], CONVENTION)
    center_pred = center_reg.predict(eval_land)
    center_err = float(np.linalg.norm(center_pred - eval_keys[:, :1], axis=-1).mean())
    return float(errors.mean()), float(accuracy), center_err


def _mask_iou(model, records) -> float:
    ious = []
    with torch.no_grad():
        for record in records:
            pose = softmax_normalize(model.pose_encode(record.image.unsqueeze(0)))
            parts = model.fit_parts(pose)
            pred = model.mask_predict(parts)[0, 0] > 0.5
            gt = record.mask[0] > 0.5
            union = (pred | gt).sum().item()
            inter = (pred & gt).sum().item()
            ious.append(inter / union if union else 1.0)
    return float(np.mean(ious))


@pytest.fixture(scope="session")
def overfit_run(benchmark):
    progress(
        f"training factorized K=4 for {OVERFIT_STEPS} steps on the shared benchmark..."
    )
    start = time.time()
    state, step0, tail_mean = _train_model(
        benchmark["train"], VARIANT_FACTORIZED, 4, 0, OVERFIT_STEPS
    )
    minutes = (time.time() - start) / 60.0
    progress(f"overfit run finished in {minutes:.1f} min")
    return {
        "state": state,
        "step0": step0,
        "tail_mean": tail_mean,
        "minutes": minutes,
    }


def test_criterion_04_synthetic_overfit(benchmark, overfit_run):
    ratio = overfit_run["tail_mean"] / overfit_run["step0"]
    model = overfit_run["state"].model
    _, _, center_err = _regression_stats(model, benchmark["fit"], benchmark["eval"])
    iou = _mask_iou(model, benchmark["eval"])
    ok = ratio <= 0.20 and center_err <= 3.0 and iou >= 0.5
    report(
        4,
        ok,
        f"loss ratio {ratio:.3f} (<= 0.20 within {OVERFIT_STEPS} steps, "
        f"{overfit_run['minutes']:.0f} min), held-out center err {center_err:.2f}px "
        f"(<= 3), mask IoU {iou:.2f} (>= 0.5)",
    )


# ---------------------------------------------------------------------------
# ablation matrix shared by the directional criteria
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def ablation_matrix(benchmark):
    rows = []
    plan = [(VARIANT_FACTORIZED, k) for k in MATRIX_KS]
    plan += [(VARIANT_BASELINE, k) for k in MATRIX_KS]
    plan += [(VARIANT_NO_MASK, 4)]
    total = len(plan) * len(MATRIX_SEEDS)
    done = 0
    for variant, k in plan:
        for seed in MATRIX_SEEDS:
            done += 1
            progress(
                f"ablation run {done}/{total}: {variant} K={k} seed={seed} "
                f"({MATRIX_STEPS} steps)..."
            )
            start = time.time()
            state, _, _ = _train_model(benchmark["train"], variant, k, seed, MATRIX_STEPS)
            model = state.model
            err, accuracy, _ = _regression_stats(model, benchmark["fit"], benchmark["eval"])
            contained = containment_analysis(model, benchmark["eval"], variant=variant)
            rows.append(
                {
                    "variant": variant,
                    "K": k,
                    "seed": seed,
                    "error": err,
                    "accuracy": accuracy,
                    "min_containment": contained.percentages[0],
                }
            )
            progress(
                f"  err {err:.2f}px acc {accuracy:.1f}% min-containment "
                f"{contained.percentages[0]:.2f}% ({time.time() - start:.0f}s)"
            )
    return rows


def _seed_stats(rows, variant, k, field):
    values = [r[field] for r in rows if r["variant"] == variant and r["K"] == k]
    arr = np.asarray(values, dtype=np.float64)
    stderr = arr.std(ddof=1) / math.sqrt(len(arr)) if len(arr) > 1 else 0.0
    return float(arr.mean()), float(stderr)


def test_criterion_05_containment_direction(ablation_matrix):
    details = []
    ok = True
    for k in MATRIX_KS:
        fac, _ = _seed_stats(ablation_matrix, VARIANT_FACTORIZED, k, "min_containment")
        base, _ = _seed_stats(ablation_matrix, VARIANT_BASELINE, k, "min_containment")
        ok = ok and fac > base
        details.append(f"K={k}: factorized {fac:.2f}% > baseline {base:.2f}%")
    report(5, ok, "min per-landmark containment, 3-seed means: " + "; ".join(details))


def test_criterion_06_accuracy_at_smallest_k(ablation_matrix):
    k = min(MATRIX_KS)
    fac, _ = _seed_stats(ablation_matrix, VARIANT_FACTORIZED, k, "accuracy")
    base, _ = _seed_stats(ablation_matrix, VARIANT_BASELINE, k, "accuracy")
    report(
        6,
        fac >= base,
        f"6px regression accuracy at K={k}, 3-seed means: "
        f"factorized {fac:.1f}% >= baseline {base:.1f}%",
    )


def test_criterion_07_ablation_ordering(ablation_matrix):
    fac, fac_se = _seed_stats(ablation_matrix, VARIANT_FACTORIZED, 4, "error")
    nom, nom_se = _seed_stats(ablation_matrix, VARIANT_NO_MASK, 4, "error")
    base, base_se = _seed_stats(ablation_matrix, VARIANT_BASELINE, 4, "error")
    # ties count as ordered when within one standard error of the difference
    first = fac <= nom + math.hypot(fac_se, nom_se)
    second = nom <= base + math.hypot(nom_se, base_se)
    report(
        7,
        first and second,
        f"regression error at K=4, 3-seed means: factorized {fac:.2f}px "
        f"<= no-mask {nom:.2f}px <= baseline {base:.2f}px",
    )


# ---------------------------------------------------------------------------
# criterion 8: constant-velocity rollouts
# ---------------------------------------------------------------------------

SEED_FRAMES = 10
HORIZON = 10


def _group_by_sequence(records):
    groups = {}
    for record in records:
        groups.setdefault(record.sequence_id, []).append(record)
    return {
        sid: sorted(group, key=lambda r: r.frame_index) for sid, group in groups.items()
    }


def _linear_window_start(records, length: int):
    """First frame index whose next `length` center keypoints are collinear."""
    centers = np.stack([r.keypoints[0] for r in records])
    for start in range(len(records) - length + 1):
        window = centers[start : start + length]
        if np.abs(np.diff(window, n=2, axis=0)).max() < 1e-9:
            return start
    return None


def _mask_centroid(mask: Tensor) -> np.ndarray:
    m = mask[0].double()
    total = float(m.sum())
    xs = torch.arange(m.shape[1], dtype=torch.float64)
    ys = torch.arange(m.shape[0], dtype=torch.float64)
    cx = float((m.sum(dim=0) * xs).sum() / total)
    cy = float((m.sum(dim=1) * ys).sum() / total)
    return np.array([cx, cy])


@pytest.fixture(scope="session")
def dynamics_suite(benchmark, overfit_run):
    model = overfit_run["state"].model
    progress("encoding training sequences into pose vectors...")
    sequences = []
    for _, records in sorted(_group_by_sequence(benchmark["train"]).items()):
        frames = torch.stack([r.image for r in records])
        sequences.append(encode_sequence(model, frames))
    vectors = torch.stack(sequences)  # (N, T, D)

    progress("training the pose dynamics model...")
    lstm = PoseDynamicsLstm(num_parts=4)
    for steps, lr, batch in ((1500, 1e-3, 8), (1000, 3e-4, 16), (600, 1e-4, 16)):
        train_pose_lstm(
            lstm, vectors, steps=steps, batch_size=batch, learning_rate=lr, seed=0
        )

    windows = []
    for _, records in sorted(_group_by_sequence(benchmark["test"]).items()):
        start = _linear_window_start(records, SEED_FRAMES + HORIZON)
        if start is None:
            continue
        chunk = records[start : start + SEED_FRAMES + HORIZON]
        windows.append(
            {
                "seeds": torch.stack([r.image for r in chunk[:SEED_FRAMES]]),
                "future": torch.stack([r.image for r in chunk[SEED_FRAMES:]]),
                "future_masks": [r.mask for r in chunk[SEED_FRAMES:]],
            }
        )
    return {"model": model, "lstm": lstm, "windows": windows}


def test_criterion_08_video_prediction_rollout(dynamics_suite):
    model = dynamics_suite["model"]
    lstm = dynamics_suite["lstm"]
    windows = dynamics_suite["windows"]
    assert windows, "no bounce-free constant-velocity windows in the test split"

    cfg = RolloutConfig(seed_frames=SEED_FRAMES, horizon=HORIZON)
    centroid_errors = np.zeros((len(windows), HORIZON))
    rollout_ssim = []
    copy_ssim = []
    background_exact = True
    for i, window in enumerate(windows):
        result = rollout(model, lstm, window["seeds"], cfg)
        for t in range(HORIZON):
            pred_c = _mask_centroid(result.masks[t])
            gt_c = _mask_centroid(window["future_masks"][t])
            centroid_errors[i, t] = float(np.linalg.norm(pred_c - gt_c))
            rollout_ssim.append(ssim(result.frames[t], window["future"][t]))
            copy_ssim.append(ssim(window["seeds"][-1], window["future"][t]))
            recomposed = composite(
                result.masks[t], result.foregrounds[t], result.background
            )
            background_exact = background_exact and torch.equal(
                result.frames[t], recomposed
            )

    # tracking error as a rate: worst accumulated drift per elapsed frame
    mean_per_step = centroid_errors.mean(axis=0)
    drift_rate = float(max(mean_per_step[t] / (t + 1) for t in range(HORIZON)))
    mean_rollout_ssim = float(np.mean(rollout_ssim))
    mean_copy_ssim = float(np.mean(copy_ssim))
    ok = (
        drift_rate <= 1.0
        and mean_rollout_ssim > mean_copy_ssim
        and background_exact
    )
    report(
        8,
        ok,
        f"centroid drift {drift_rate:.2f}px/frame (<= 1) over {HORIZON} steps on "
        f"{len(windows)} windows, ssim {mean_rollout_ssim:.3f} > copy-last "
        f"{mean_copy_ssim:.3f}, background bit-identical across timesteps: "
        f"{background_exact}",
    )


# ---------------------------------------------------------------------------
# criterion 9: exact metric identities
# ---------------------------------------------------------------------------

def test_criterion_09_metric_identities():
    torch.manual_seed(909)
    image = torch.rand(3, 32, 32, dtype=torch.float64)
    ssim_identity = ssim(image, image) == 1.0
    psnr_identity = psnr(image, image) == 100.0

    lpips = LpipsDistance()
    batch = torch.rand(1, 3, 32, 32)
    lpips_identity = float(lpips(batch, batch)[0]) == 0.0

    # uniform offset with dyadic values: closed form is exact, bit for bit
    gt = torch.full((3, 16, 16), 0.5, dtype=torch.float64)
    pred = torch.full((3, 16, 16), 0.75, dtype=torch.float64)
    closed_exact = psnr(pred, gt) == 10.0 * math.log10(16.0)
    near = abs(psnr(gt + 0.1, gt) - 20.0) <= 1e-6

    keypoints = np.array([[[10.0, 12.0], [30.0, 12.0], [20.0, 40.0]]])
    bbc_perfect = eval_bbc_accuracy(keypoints, keypoints) == 100.0
    mafl_perfect = eval_mafl_error(keypoints, keypoints, eye_indices=(0, 1)) == 0.0
    h36m_perfect = eval_human36m_error(keypoints, keypoints, 64) == 0.0

    checks = {
        "ssim(x,x)=1": ssim_identity,
        "psnr(x,x)=cap": psnr_identity,
        "lpips(x,x)=0": lpips_identity,
        "psnr closed form exact": closed_exact,
        "psnr 0.1 offset ~20dB": near,
        "6px accuracy 100%": bbc_perfect,
        "inter-ocular error 0": mafl_perfect,
        "dimension-normalized error 0": h36m_perfect,
    }
    failed = [name for name, good in checks.items() if not good]
    report(
        9,
        not failed,
        "all 8 identities exact" if not failed else "failed: " + ", ".join(failed),
    )


# ---------------------------------------------------------------------------
# criterion 10: replay from the run manifest
# ---------------------------------------------------------------------------

SCENE_CFG = """\
resolution = 32
length = 8
sprite_size = 8
motion = constant-velocity
velocity = 1,1
num_sequences = 5
seed = 0
"""

TRAIN_CFG = """\
num_parts = 2
appearance_channels = 8
image_size = 32
width_mult = 0.25
batch_size = 2
total_steps = 8
seed = 0
"""


def test_criterion_10_manifest_replay(tmp_path):
    scene = tmp_path / "scene.cfg"
    scene.write_text(SCENE_CFG)
    data = tmp_path / "data"
    assert cli_main(
        ["--runs-root", str(tmp_path / "runs"), "synth", "--spec", str(scene), "--out", str(data)]
    ) == 0

    config = tmp_path / "train.cfg"
    config.write_text(TRAIN_CFG + f"data_root = {data}\n")
    runs = tmp_path / "runs"
    assert cli_main(["--runs-root", str(runs), "train", "--config", str(config)]) == 0
    run_dir = next(d for d in runs.iterdir() if d.is_dir())

    replay_root = tmp_path / "replay"
    assert cli_main(
        ["--runs-root", str(replay_root), "train", "--manifest", str(run_dir / "manifest.json")]
    ) == 0
    replay_dir = replay_root / run_dir.name

    original = (run_dir / "metrics.jsonl").read_text().splitlines()
    replayed = (replay_dir / "metrics.jsonl").read_text().splitlines()
    step0_bitwise = original[0] == replayed[0]
    final_a = json.loads(original[-1])
    final_b = json.loads(replayed[-1])
    final_close = final_a.keys() == final_b.keys() and all(
        abs(final_a[key] - final_b[key]) <= 1e-6 for key in final_a
    )
    report(
        10,
        step0_bitwise and final_close and len(original) == len(replayed),
        f"step-0 metrics line bitwise-equal: {step0_bitwise}; "
        f"final metrics within 1e-6 over {len(original)} steps: {final_close}",
    )
