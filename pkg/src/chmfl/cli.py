"""Command-line entry point: synth, train, crossval, sweep, predict.

Every option can come from a JSON ``--config`` file or a ``--key value``
flag; flags win over the file, the file wins over the profile, and the
profile wins over built-in defaults. Exit codes: 0 success, 1 usage
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import evaluation as ev
from .imaging import (
    Modality,
    PatientRecord,
    Volume,
    load_manifest,
    preprocess_record,
    read_volume,
    restore_box,
    write_volume,
)
from .network import NetworkConfig, load_checkpoint, save_checkpoint
from .phantom import PhantomConfig, export, generate
from .training import TrainingConfig, train, write_history

DATA_DIR_ENV = "CHMFL_DATA_DIR"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("chmfl")

# Values that override the built-in defaults for a named profile.
PROFILES: Dict[str, Dict[str, object]] = {
    "paper": {},
    "desk": {
        "input_extents": (32, 32, 32),
        "base_channels": 4,
        "box_mm": (32.0, 32.0, 32.0),
        "max_epochs": 25,
        "learning_rate": 1e-3,
        "plateau_patience": 60,
    },
}

PIPELINE_DEFAULTS = {"spacing_mm": 1.0, "box_mm": (112.0, 112.0, 144.0)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _defaults_of(cls) -> Dict[str, object]:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


def _phantom_defaults():
    d = _defaults_of(PhantomConfig)
    d["n"] = d.pop("n_patients")
    return d


def _model_defaults():
    d = {**_defaults_of(NetworkConfig), **_defaults_of(TrainingConfig), **PIPELINE_DEFAULTS}
    d["data"] = ""
    return d


COMMAND_KEYS = {
    "synth": lambda: {**_phantom_defaults(), "out": ""},
    "train": lambda: {**_model_defaults(), "out": "run"},
    "crossval": lambda: {**_model_defaults(), "out": "crossval", "k": 6},
    "sweep": lambda: {**_model_defaults(), "out": "sweep", "k": 6, "w_values": ev.DEFAULT_WEIGHTS},
    "predict": lambda: {"checkpoint": "", "pet": "", "ct": "", "mask": "", "out": "prediction.vol",
                        **PIPELINE_DEFAULTS},
}


def _coerce(key: str, value, default):
    """Convert a config-file or command-line value to the type of ``default``."""
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            if isinstance(default, tuple):
                value = [v for v in text.replace(",", " ").split()]
            elif isinstance(default, bool):
                value = text.lower() in ("1", "true", "yes", "on")
            else:
                raise UsageError(f"cannot parse {key}={value!r}")
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, tuple):
            items = list(value) if isinstance(value, (list, tuple)) else [value]
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in items)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"invalid value for {key}: {value!r}") from None


def resolve_config(command: str, config_path: Optional[str], overrides: Dict[str, str],
                   profile: Optional[str]) -> Dict[str, object]:
    allowed = COMMAND_KEYS[command]()
    resolved = dict(allowed)
    if profile is not None:
        if profile not in PROFILES:
            raise UsageError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        resolved.update({k: v for k, v in PROFILES[profile].items() if k in allowed})
    layers = []
    if config_path:
        try:
            with open(config_path) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        layers.append(file_cfg)
    layers.append(overrides)
    for layer in layers:
        unknown = sorted(set(layer) - set(allowed))
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        for k, v in layer.items():
            resolved[k] = _coerce(k, v, allowed[k])
    resolved["command"] = command
    resolved["profile"] = profile or "paper"
    return resolved


def _pick(cls, cfg: Dict[str, object]):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in cfg.items() if k in names})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _jsonable(cfg):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())}


def echo_config(cfg) -> None:
    print("resolved config: " + json.dumps(_jsonable(cfg), sort_keys=True), file=sys.stderr)


def _data_manifest(cfg) -> Path:
    data = cfg.get("data") or os.environ.get(DATA_DIR_ENV, "")
    if not data:
        raise UsageError(f"no data given: pass --data or set {DATA_DIR_ENV}")
    path = Path(data)
    return path / "manifest.csv" if path.is_dir() else path


def _load_dataset(cfg, net_cfg: NetworkConfig) -> List[PatientRecord]:
    records = load_manifest(_data_manifest(cfg))
    if not records:
        raise ValueError("manifest lists no patients")
    dataset = [preprocess_record(r, cfg["spacing_mm"], cfg["box_mm"]) for r in records]
    got = dataset[0].pet.extents
    if got != net_cfg.input_extents:
        raise UsageError(f"preprocessed volumes are {got} but the network expects {net_cfg.input_extents}; "
                         "adjust box_mm / spacing_mm / input_extents")
    return dataset


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg) -> int:
    out = cfg["out"] or os.environ.get(DATA_DIR_ENV, "")
    if not out:
        raise UsageError(f"no output directory: pass --out or set {DATA_DIR_ENV}")
    phantom_cfg = _pick(PhantomConfig, {**cfg, "n_patients": cfg["n"]})
    if phantom_cfg.n_patients == 0:
        warnings.warn("n = 0: writing an empty manifest")
    manifest = export(generate(phantom_cfg), out)
    print(manifest)
    return EXIT_OK


def cmd_train(cfg) -> int:
    net_cfg = _pick(NetworkConfig, cfg)
    train_cfg = _pick(TrainingConfig, cfg)
    dataset = _load_dataset(cfg, net_cfg)
    out = Path(cfg["out"])
    params, history = train(dataset, net_cfg, train_cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, net_cfg, out / "checkpoint.chk")
    write_history(history, out / "history.csv")
    ev.write_json(_jsonable(cfg), out / "config.json")
    print(out / "checkpoint.chk")
    return EXIT_OK


def cmd_crossval(cfg) -> int:
    net_cfg = _pick(NetworkConfig, cfg)
    train_cfg = _pick(TrainingConfig, cfg)
    dataset = _load_dataset(cfg, net_cfg)
    result = ev.cross_validate(dataset, net_cfg, train_cfg, k=cfg["k"], seed=train_cfg.seed)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    table = ev.format_cv_table(result)
    (out / "report.txt").write_text(table)
    ev.write_json(ev.cv_summary(result), out / "metrics.json")
    ev.write_roc(result.pooled.roc_points, out / "roc_pooled.txt")
    for fr in result.folds:
        ev.write_roc(fr.report.roc_points, out / f"roc_fold{fr.fold}.txt")
    ev.write_json(_jsonable(cfg), out / "config.json")
    print(table, end="")
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    net_cfg = _pick(NetworkConfig, cfg)
    train_cfg = _pick(TrainingConfig, cfg)
    dataset = _load_dataset(cfg, net_cfg)
    rows = ev.weight_sweep(dataset, net_cfg, train_cfg, cfg["w_values"], k=cfg["k"], seed=train_cfg.seed)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    table = ev.format_sweep_table(rows)
    (out / "sweep.txt").write_text(table)
    ev.write_json({"rows": [vars(r) for r in rows]}, out / "sweep.json")
    ev.write_json(_jsonable(cfg), out / "config.json")
    print(table, end="")
    return EXIT_OK


def cmd_predict(cfg) -> int:
    for key in ("checkpoint", "pet", "ct"):
        if not cfg[key]:
            raise UsageError(f"predict needs --{key}")
    params, net_cfg = load_checkpoint(cfg["checkpoint"])
    pet, ct = read_volume(cfg["pet"]), read_volume(cfg["ct"])
    if cfg["mask"]:
        mask = read_volume(cfg["mask"])
    else:
        # without a tumor mask the crop is centred on the field of view
        voxels = np.zeros(pet.extents, dtype=np.float32)
        voxels[tuple(e // 2 for e in pet.extents)] = 1.0
        mask = Volume(voxels, pet.spacing, Modality.MASK)
    rec = preprocess_record(PatientRecord("input", pet, ct, mask, 0), cfg["spacing_mm"], cfg["box_mm"])
    if rec.pet.extents != net_cfg.input_extents:
        raise UsageError(f"preprocessed input {rec.pet.extents} does not match checkpoint {net_cfg.input_extents}")
    prob, seg = ev.predict(params, rec, net_cfg)
    seg = restore_box(seg.astype(np.float32), mask, cfg["spacing_mm"])
    write_volume(Volume(seg, pet.spacing, Modality.MASK), cfg["out"])
    print(f"{prob:.6f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "crossval": cmd_crossval,
            "sweep": cmd_sweep, "predict": cmd_predict}

HELP = {
    "synth": "generate a synthetic PET/CT phantom set",
    "train": "train a model and write a checkpoint",
    "crossval": "k-fold cross-validation with metric reports",
    "sweep": "cross-validate over a grid of CFL weights",
    "predict": "DM probability and tumor mask for one patient",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chmfl", description="Dual-branch PET/CT network experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--profile", help=f"named preset ({', '.join(sorted(PROFILES))})")
        for key, default in keys().items():
            flags = {f"--{key}", f"--{key.replace('_', '-')}"}
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            p.add_argument(*sorted(flags), dest=key, default=argparse.SUPPRESS, metavar="VALUE",
                           help=f"default: {shown!r}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    verbose = args.pop("verbose")
    config_path = args.pop("config", None)
    profile = args.pop("profile", None)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(command, config_path, args, profile)
        echo_config(cfg)
        return COMMANDS[command](cfg)
    except UsageError as exc:
        print(f"chmfl {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # every other failure is a runtime error
        print(f"chmfl {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
