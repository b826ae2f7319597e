"""Command-line surface: train, eval, predict, synth, and sweep.

Configs are flat ``key = value`` files with ``--set key=value`` overrides;
nested blocks use dotted keys (``jitter.brightness``). Every command writes
its artifacts under ``runs/<manifest-hash>/`` next to a manifest that is
sufficient to re-execute the run. Exit codes: 0 success, 2 config error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np
import torch
from PIL import Image

from . import __version__
from .datasets import (
    SyntheticSceneSpec,
    load_records,
    make_batch_fn,
    save_records,
    split_dataset,
    synth_generate,
)
from .evaluation import (
    ORIGIN_CENTER,
    ORIGIN_TOP_LEFT,
    CoordinateConvention,
    containment_analysis,
    eval_bbc_accuracy,
    eval_human36m_error,
    eval_mafl_error,
    fit_regressor,
    keypoint_matrix,
    landmark_count_sweep,
    landmark_locations,
    regression_errors,
    write_sweep_csv,
)
from .networks import checkpoint_load, checkpoint_save
from .perturbations import JitterSpec, TemporalSpec, TpsSpec
from .training import (
    NonFiniteLossError,
    PerceptualLossSpec,
    TrainConfig,
    init_state,
    run_training,
)
from .videopred import (
    LpipsDistance,
    RolloutConfig,
    eval_vpred,
    lstm_load,
    rollout,
    write_vpred_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ENV_DATA_ROOT = "FGLANDMARKS_DATA_ROOT"
PROTOCOLS = ("bbc", "mafl", "h36m")

_NESTED_SPECS = {
    "jitter": JitterSpec,
    "tps": TpsSpec,
    "temporal": TemporalSpec,
    "perceptual": PerceptualLossSpec,
}
_TRAIN_DATA_KEYS = ("data_root", "split")


class ConfigError(Exception):
    """Bad config file, key, or value (exit code 2)."""


class DataError(Exception):
    """Missing or unusable dataset/checkpoint inputs (exit code 3)."""


# ---------------------------------------------------------------------------
# flat config files
# ---------------------------------------------------------------------------

def parse_config_file(path: str) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
            key, _, value = text.partition("=")
            mapping[key.strip()] = value.strip()
    return mapping


def apply_overrides(mapping: dict, sets) -> dict:
    out = dict(mapping)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


def _parse_scalar(token: str):
    token = token.strip()
    for cast in (int, float):
        try:
            return cast(token)
        except ValueError:
            continue
    return token


def _coerce_like(raw, example, key: str):
    """Cast a raw string (or manifest JSON value) to the type of ``example``."""
    if isinstance(raw, str):
        if isinstance(example, bool):
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        if isinstance(example, int) and not isinstance(example, bool):
            try:
                return int(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
        if isinstance(example, float):
            try:
                return float(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
        if isinstance(example, tuple):
            return tuple(_parse_scalar(tok) for tok in raw.split(","))
        return raw
    if isinstance(example, tuple) and isinstance(raw, list):
        return tuple(raw)
    if isinstance(example, float) and isinstance(raw, int):
        return float(raw)
    return raw


def _valid_train_keys() -> list:
    keys = []
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name in _NESTED_SPECS:
            for sub in dataclasses.fields(type(getattr(defaults, f.name))):
                keys.append(f"{f.name}.{sub.name}")
        else:
            keys.append(f.name)
    keys.extend(_TRAIN_DATA_KEYS)
    return sorted(keys)


def train_config_from_mapping(mapping: dict) -> TrainConfig:
    """Build a TrainConfig from flat keys, rejecting unknown ones."""
    defaults = TrainConfig()
    top_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    top_kwargs = {}
    nested_kwargs = {name: {} for name in _NESTED_SPECS}
    for key, raw in mapping.items():
        if "." in key:
            head, _, sub = key.partition(".")
            if head not in _NESTED_SPECS:
                raise ConfigError(
                    f"unknown config key {key!r}; valid keys: {', '.join(_valid_train_keys())}"
                )
            block = getattr(defaults, head)
            sub_fields = {f.name for f in dataclasses.fields(type(block))}
            if sub not in sub_fields:
                raise ConfigError(
                    f"unknown config key {key!r}; valid keys: {', '.join(_valid_train_keys())}"
                )
            nested_kwargs[head][sub] = _coerce_like(raw, getattr(block, sub), key)
        else:
            if key not in top_fields or key in _NESTED_SPECS:
                raise ConfigError(
                    f"unknown config key {key!r}; valid keys: {', '.join(_valid_train_keys())}"
                )
            top_kwargs[key] = _coerce_like(raw, getattr(defaults, key), key)
    try:
        for name, kwargs in nested_kwargs.items():
            if kwargs:
                top_kwargs[name] = dataclasses.replace(getattr(defaults, name), **kwargs)
        return dataclasses.replace(defaults, **top_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def flatten_config(config: TrainConfig) -> dict:
    """TrainConfig -> flat JSON-ready mapping with dotted nested keys."""
    out = {}
    for f in dataclasses.fields(TrainConfig):
        value = getattr(config, f.name)
        if f.name in _NESTED_SPECS:
            for sub in dataclasses.fields(type(value)):
                sub_value = getattr(value, sub.name)
                out[f"{f.name}.{sub.name}"] = (
                    list(sub_value) if isinstance(sub_value, tuple) else sub_value
                )
        else:
            out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class RunManifest:
    """Identity of a run: command + resolved config + data fingerprint."""

    command: str
    config: dict
    seed: int
    code_version: str
    dataset_hash: str

    def run_hash(self) -> str:
        payload = json.dumps(
            {
                "command": self.command,
                "config": self.config,
                "seed": self.seed,
                "code_version": self.code_version,
                "dataset_hash": self.dataset_hash,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def write(self, runs_root: str) -> str:
        run_dir = os.path.join(runs_root, self.run_hash())
        os.makedirs(run_dir, exist_ok=True)
        payload = dataclasses.asdict(self)
        payload["hash"] = self.run_hash()
        payload["output_dir"] = run_dir
        with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        return run_dir


def read_manifest(path: str) -> dict:
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def hash_dataset(root: str, split: str) -> str:
    """Fingerprint a split by its file names and sizes."""
    split_dir = os.path.join(root, split)
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(split_dir)):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, split_dir)
            digest.update(f"{rel}:{os.path.getsize(full)}\n".encode())
    return digest.hexdigest()[:16]


def _resolve_data_root(explicit) -> str:
    root = explicit or os.environ.get(ENV_DATA_ROOT)
    if not root:
        raise DataError(
            f"no dataset root: pass data_root or set ${ENV_DATA_ROOT}"
        )
    if not os.path.isdir(root):
        raise DataError(f"dataset root not found: {root}")
    return root


def _load_split(root: str, split: str):
    try:
        return load_records(root, split)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> str:
    if args.manifest:
        mapping = dict(read_manifest(args.manifest)["config"])
    else:
        if not args.config:
            raise ConfigError("train needs --config or --manifest")
        mapping = apply_overrides(parse_config_file(args.config), args.set)
    data_root = _resolve_data_root(mapping.pop("data_root", None))
    split = mapping.pop("split", "train")
    config = train_config_from_mapping(mapping)
    records = _load_split(data_root, split)

    snapshot = flatten_config(config)
    snapshot["data_root"] = data_root
    snapshot["split"] = split
    manifest = RunManifest(
        command="train",
        config=snapshot,
        seed=config.seed,
        code_version=__version__,
        dataset_hash=hash_dataset(data_root, split),
    )
    run_dir = manifest.write(args.runs_root)

    batch_fn = make_batch_fn(records, config, seed=config.seed)
    state = init_state(config)
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.unlink(metrics_path)  # re-executions replace, never append across runs
    run_training(state, batch_fn, config.total_steps, metrics_path=metrics_path)
    checkpoint_save(state.model, os.path.join(run_dir, "checkpoint.pt"))
    print(run_dir)
    return run_dir


def _load_model(path: str):
    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}")
    return checkpoint_load(path)


def cmd_eval(args) -> str:
    if args.protocol not in PROTOCOLS:
        raise ConfigError(
            f"unknown protocol {args.protocol!r}; available protocols: {', '.join(PROTOCOLS)}"
        )
    model = _load_model(args.checkpoint)
    data_root = _resolve_data_root(args.data_root)
    fit_records = _load_split(data_root, args.fit_split)
    eval_records = _load_split(data_root, args.eval_split)

    side = model.config.image_size
    fit_land = landmark_locations(model, fit_records)
    eval_land = landmark_locations(model, eval_records)
    fit_keys = keypoint_matrix(fit_records)
    eval_keys = keypoint_matrix(eval_records)

    eye_indices = tuple(int(tok) for tok in args.eye_indices.split(","))
    values = {}
    for origin in (ORIGIN_TOP_LEFT, ORIGIN_CENTER):
        convention = CoordinateConvention(origin=origin, height=side, width=side)
        regressor = fit_regressor(fit_land, fit_keys, convention)
        pred = regressor.predict(eval_land)
        if args.protocol == "bbc":
            values[origin] = eval_bbc_accuracy(pred, eval_keys, radius=args.radius)
        elif args.protocol == "mafl":
            values[origin] = eval_mafl_error(
                pred, eval_keys, eye_indices=eye_indices, as_percent=args.percent
            )
        else:
            values[origin] = eval_human36m_error(
                pred, eval_keys, side, normalizer=args.normalizer, as_percent=args.percent
            )

    manifest = RunManifest(
        command="eval",
        config={
            "checkpoint": os.path.abspath(args.checkpoint),
            "protocol": args.protocol,
            "fit_split": args.fit_split,
            "eval_split": args.eval_split,
            "radius": args.radius,
            "normalizer": args.normalizer,
            "eye_indices": list(eye_indices),
            "percent": args.percent,
            "variant": args.variant,
            "data_root": data_root,
        },
        seed=0,
        code_version=__version__,
        dataset_hash=hash_dataset(data_root, args.eval_split),
    )
    run_dir = manifest.write(args.runs_root)
    with open(os.path.join(run_dir, "metrics.json"), "w") as fh:
        json.dump({"protocol": args.protocol, "values": values}, fh, indent=2)

    if any(r.mask is not None and r.mask.sum() > 0 for r in eval_records):
        report = containment_analysis(model, eval_records, variant=args.variant)
        with open(os.path.join(run_dir, "containment.json"), "w") as fh:
            fh.write(report.to_json())
    print(run_dir)
    return run_dir


def _save_image(tensor: torch.Tensor, path: str) -> None:
    array = (tensor.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()
    if array.shape[0] == 1:
        Image.fromarray(array[0], mode="L").save(path)
    else:
        Image.fromarray(np.transpose(array, (1, 2, 0))).save(path)


def _sequences(records) -> dict:
    groups = {}
    for record in records:
        groups.setdefault(record.sequence_id, []).append(record)
    return {
        key: sorted(value, key=lambda r: r.frame_index)
        for key, value in sorted(groups.items())
    }


def cmd_predict(args) -> str:
    model = _load_model(args.checkpoint)
    if not os.path.isfile(args.lstm):
        raise DataError(f"dynamics checkpoint not found: {args.lstm}")
    lstm = lstm_load(args.lstm)
    data_root = _resolve_data_root(args.data_root)
    records = _load_split(data_root, args.split)

    manifest = RunManifest(
        command="predict",
        config={
            "checkpoint": os.path.abspath(args.checkpoint),
            "lstm": os.path.abspath(args.lstm),
            "split": args.split,
            "seed_frames": args.seed_frames,
            "horizon": args.horizon,
            "emit_intermediates": args.emit_intermediates,
            "data_root": data_root,
        },
        seed=0,
        code_version=__version__,
        dataset_hash=hash_dataset(data_root, args.split),
    )
    run_dir = manifest.write(args.runs_root)

    cfg = RolloutConfig(seed_frames=args.seed_frames, horizon=args.horizon)
    lpips_model = LpipsDistance()
    predicted = 0
    for seq_id, seq_records in _sequences(records).items():
        if len(seq_records) < cfg.seed_frames:
            continue
        frames = torch.stack([r.image for r in seq_records])
        result = rollout(model, lstm, frames[: cfg.seed_frames], cfg)
        seq_dir = os.path.join(run_dir, "sequences", seq_id)
        os.makedirs(seq_dir, exist_ok=True)
        for t in range(cfg.horizon):
            _save_image(result.frames[t], os.path.join(seq_dir, f"pred_{t:05d}.png"))
            if args.emit_intermediates:
                _save_image(result.foregrounds[t], os.path.join(seq_dir, f"fg_{t:05d}.png"))
                _save_image(result.masks[t], os.path.join(seq_dir, f"mask_{t:05d}.png"))
        if args.emit_intermediates:
            _save_image(result.background, os.path.join(seq_dir, "background.png"))
        gt = frames[cfg.seed_frames: cfg.seed_frames + cfg.horizon]
        if gt.shape[0] == cfg.horizon:
            metrics = eval_vpred(
                result.frames.unsqueeze(0), gt.unsqueeze(0), lpips_model=lpips_model
            )
            write_vpred_csv(metrics, os.path.join(seq_dir, "vpred.csv"))
        predicted += 1
    if predicted == 0:
        raise DataError(
            f"no sequence in split {args.split!r} has {cfg.seed_frames} seed frames"
        )
    print(run_dir)
    return run_dir


def scene_spec_from_mapping(mapping: dict) -> SyntheticSceneSpec:
    defaults = SyntheticSceneSpec()
    fields = {f.name for f in dataclasses.fields(SyntheticSceneSpec)}
    kwargs = {}
    for key, raw in mapping.items():
        if key not in fields:
            raise ConfigError(
                f"unknown scene key {key!r}; valid keys: {', '.join(sorted(fields))}"
            )
        kwargs[key] = _coerce_like(raw, getattr(defaults, key), key)
    try:
        return dataclasses.replace(defaults, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_synth(args) -> str:
    mapping = apply_overrides(parse_config_file(args.spec), args.set)
    num_sequences = int(mapping.pop("num_sequences", 20))
    base_seed = int(mapping.pop("seed", 0))
    spec = scene_spec_from_mapping(mapping)
    if num_sequences < 1:
        raise ConfigError("num_sequences must be at least 1")

    records = []
    try:
        for i in range(num_sequences):
            records.extend(
                synth_generate(spec, seed=base_seed + i, sequence_id=f"seq-{i:04d}")
            )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    train, val, test = split_dataset(
        records, manifest_path=os.path.join(args.out, "splits.jsonl")
    )
    for split_name, split_records in (("train", train), ("val", val), ("test", test)):
        save_records(split_records, args.out, split_name)

    snapshot = {f.name: getattr(spec, f.name) for f in dataclasses.fields(SyntheticSceneSpec)}
    snapshot = {
        k: (list(v) if isinstance(v, tuple) else v) for k, v in snapshot.items()
    }
    snapshot["num_sequences"] = num_sequences
    snapshot["seed"] = base_seed
    snapshot["out"] = os.path.abspath(args.out)
    manifest = RunManifest(
        command="synth",
        config=snapshot,
        seed=base_seed,
        code_version=__version__,
        dataset_hash=hash_dataset(args.out, "train"),
    )
    manifest.write(args.runs_root)
    print(args.out)
    return args.out


def cmd_sweep(args) -> str:
    if not args.config:
        raise ConfigError("sweep needs --config")
    mapping = apply_overrides(parse_config_file(args.config), args.set)
    data_root = _resolve_data_root(mapping.pop("data_root", None))
    split = mapping.pop("split", "train")
    base_config = train_config_from_mapping(mapping)
    train_records = _load_split(data_root, split)
    eval_records = _load_split(data_root, args.eval_split)

    k_values = [int(tok) for tok in args.k_values.split(",")]
    variants = tuple(tok.strip() for tok in args.variants.split(","))
    seeds = tuple(int(tok) for tok in args.seeds.split(","))

    snapshot = flatten_config(base_config)
    snapshot.update(
        {
            "data_root": data_root,
            "split": split,
            "eval_split": args.eval_split,
            "k_values": k_values,
            "variants": list(variants),
            "seeds": list(seeds),
        }
    )
    manifest = RunManifest(
        command="sweep",
        config=snapshot,
        seed=base_config.seed,
        code_version=__version__,
        dataset_hash=hash_dataset(data_root, split),
    )
    run_dir = manifest.write(args.runs_root)

    def train_fn(config):
        state = init_state(config)
        batch_fn = make_batch_fn(train_records, config, seed=config.seed)
        run_training(state, batch_fn, config.total_steps)
        return state.model

    def metric_fn(model):
        return regression_errors(model, train_records, eval_records).mean(axis=1)

    rows = landmark_count_sweep(
        base_config, k_values, train_fn, metric_fn, variants=variants, seeds=seeds
    )
    write_sweep_csv(rows, os.path.join(run_dir, "sweep.csv"))
    with open(os.path.join(run_dir, "sweep.json"), "w") as fh:
        json.dump(rows, fh, indent=2)
    print(run_dir)
    return run_dir


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fglandmarks",
        description="Factorized landmark learning: training, evaluation, prediction.",
    )
    parser.add_argument("--runs-root", default="runs", help="artifact directory root")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a landmark model")
    train.add_argument("--config", help="flat key = value config file")
    train.add_argument("--manifest", help="re-execute a previous run from its manifest")
    train.add_argument("--set", action="append", metavar="KEY=VALUE")

    evald = sub.add_parser("eval", help="regression metrics and containment")
    evald.add_argument("--checkpoint", required=True)
    evald.add_argument("--data-root")
    evald.add_argument("--protocol", required=True)
    evald.add_argument("--fit-split", default="train")
    evald.add_argument("--eval-split", default="test")
    evald.add_argument("--radius", type=float, default=6.0)
    evald.add_argument("--normalizer", default="width")
    evald.add_argument("--eye-indices", default="0,1")
    evald.add_argument("--percent", action="store_true")
    evald.add_argument("--variant", default="", help="label recorded in reports")

    pred = sub.add_parser("predict", help="roll out future frames")
    pred.add_argument("--checkpoint", required=True)
    pred.add_argument("--lstm", required=True, help="dynamics model checkpoint")
    pred.add_argument("--data-root")
    pred.add_argument("--split", default="test")
    pred.add_argument("--seed-frames", type=int, default=10)
    pred.add_argument("--horizon", type=int, default=30)
    pred.add_argument("--emit-intermediates", action="store_true")

    synth = sub.add_parser("synth", help="generate a synthetic sprite dataset")
    synth.add_argument("--spec", required=True, help="scene spec config file")
    synth.add_argument("--out", required=True, help="dataset output root")
    synth.add_argument("--set", action="append", metavar="KEY=VALUE")

    sweep = sub.add_parser("sweep", help="landmark-count ablation")
    sweep.add_argument("--config", help="base training config")
    sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    sweep.add_argument("--eval-split", default="val")
    sweep.add_argument("--k-values", default="2,4,8")
    sweep.add_argument("--variants", default="factorized")
    sweep.add_argument("--seeds", default="0")
    return parser


_DISPATCH = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "synth": cmd_synth,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _DISPATCH[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
