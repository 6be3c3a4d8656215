"""Experiment configuration: line-oriented ``section.key = value`` files.

Sections: ``data``, ``model``, ``train``, ``quantizers``, ``output``.
Unknown keys are rejected; all problems in a file are reported at once.
``serialize_config`` dumps every effective value, so parse -> serialize ->
parse is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import DEFAULT_LAMBDA, DEFAULT_T_FINAL, DEFAULT_T_INITIAL, default_penalties
from .data import SYNTHETIC_KINDS
from .quantizers import QuantizerSpec, parse_spec

METHODS = ("fp", "fixed", "dqa", "br")

MAX_QUANTIZERS = 8


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    data_kind: str = "two_moons"
    data_n: int = 1000
    data_noise: float = 0.2
    data_train_images: str = ""
    data_train_labels: str = ""
    data_val_images: str = ""
    data_val_labels: str = ""
    data_path: str = ""
    data_label_column: str = "label"
    # model
    hidden: tuple = (12,)
    conv: tuple = ()                   # ((out_channels, kernel), ...)
    activation: str = "relu"
    # train
    method: str = "dqa"
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.05
    lr_drop_factor: float = 0.1
    lr_drop_period: int = 20
    momentum: float = 0.9
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    t_initial: float = DEFAULT_T_INITIAL
    t_final: float = DEFAULT_T_FINAL
    # quantizers
    quantizers: tuple = (QuantizerSpec("minmax", 2), QuantizerSpec("minmax", 4),
                         QuantizerSpec("minmax", 8))
    penalties: tuple = ()              # empty -> derived from len(quantizers)
    exempt_edges: bool = False
    # output
    out_dir: str = "runs"

    def effective_penalties(self):
        if self.penalties:
            return np.asarray(self.penalties, dtype=np.float64)
        return default_penalties(len(self.quantizers))


def _parse_int_list(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_float_list(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(float(part) for part in text.split(","))


def _parse_conv(text):
    text = text.strip()
    if not text:
        return ()
    pairs = []
    for part in text.split(","):
        channels, _, kernel = part.partition(":")
        pairs.append((int(channels), int(kernel)))
    return tuple(pairs)


def _parse_bool(text):
    value = text.strip().lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (config field, parser); quantizers.q1..qN handled separately
_KEYS = {
    "data.kind": ("data_kind", str.strip),
    "data.n": ("data_n", int),
    "data.noise": ("data_noise", float),
    "data.train_images": ("data_train_images", str.strip),
    "data.train_labels": ("data_train_labels", str.strip),
    "data.val_images": ("data_val_images", str.strip),
    "data.val_labels": ("data_val_labels", str.strip),
    "data.path": ("data_path", str.strip),
    "data.label_column": ("data_label_column", str.strip),
    "model.hidden": ("hidden", _parse_int_list),
    "model.conv": ("conv", _parse_conv),
    "model.activation": ("activation", str.strip),
    "train.method": ("method", str.strip),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.lr": ("lr", float),
    "train.lr_drop_factor": ("lr_drop_factor", float),
    "train.lr_drop_period": ("lr_drop_period", int),
    "train.momentum": ("momentum", float),
    "train.lambda": ("lam", float),
    "train.seed": ("seed", int),
    "train.t_initial": ("t_initial", float),
    "train.t_final": ("t_final", float),
    "quantizers.g": ("penalties", _parse_float_list),
    "quantizers.exempt_edges": ("exempt_edges", _parse_bool),
    "output.dir": ("out_dir", str.strip),
}


def _validate(cfg: ExperimentConfig, problems: list):
    if cfg.data_kind not in SYNTHETIC_KINDS + ("idx", "csv"):
        problems.append(f"data.kind: unknown dataset {cfg.data_kind!r}")
    if cfg.data_kind in SYNTHETIC_KINDS:
        if cfg.data_n < 4:
            problems.append(f"data.n: need at least 4 samples, got {cfg.data_n}")
        if cfg.data_noise < 0:
            problems.append(f"data.noise: must be non-negative, got {cfg.data_noise}")
    if cfg.data_kind == "idx" and not (cfg.data_train_images and cfg.data_train_labels
                                       and cfg.data_val_images and cfg.data_val_labels):
        problems.append("data.kind=idx needs data.train_images/train_labels/"
                        "val_images/val_labels")
    if cfg.data_kind == "csv" and not cfg.data_path:
        problems.append("data.kind=csv needs data.path")
    if cfg.activation not in ("relu", "none"):
        problems.append(f"model.activation: unknown activation {cfg.activation!r}")
    if any(h < 1 for h in cfg.hidden):
        problems.append(f"model.hidden: sizes must be positive, got {cfg.hidden}")
    if any(c < 1 or k < 1 for c, k in cfg.conv):
        problems.append(f"model.conv: channels and kernels must be positive, got {cfg.conv}")
    if cfg.conv and cfg.data_kind != "idx":
        problems.append("model.conv: conv layers need image data (data.kind=idx)")
    if cfg.method not in METHODS:
        problems.append(f"train.method: unknown method {cfg.method!r}")
    if cfg.epochs < 1:
        problems.append(f"train.epochs: must be positive, got {cfg.epochs}")
    if cfg.batch_size < 1:
        problems.append(f"train.batch_size: must be positive, got {cfg.batch_size}")
    if cfg.lr <= 0:
        problems.append(f"train.lr: must be positive, got {cfg.lr}")
    if not 0 < cfg.lr_drop_factor <= 1:
        problems.append(f"train.lr_drop_factor: must lie in (0, 1], got {cfg.lr_drop_factor}")
    if cfg.lr_drop_period < 1:
        problems.append(f"train.lr_drop_period: must be positive, got {cfg.lr_drop_period}")
    if not 0 <= cfg.momentum < 1:
        problems.append(f"train.momentum: must lie in [0, 1), got {cfg.momentum}")
    if cfg.lam < 0:
        problems.append(f"train.lambda: must be non-negative, got {cfg.lam}")
    if cfg.seed < 0 or cfg.seed > 2 ** 64 - 1:
        problems.append(f"train.seed: must be a 64-bit unsigned integer, got {cfg.seed}")
    if not (cfg.t_final > 0 and cfg.t_initial > cfg.t_final):
        problems.append(f"train.t_initial/t_final: need t_initial > t_final > 0, "
                        f"got ({cfg.t_initial}, {cfg.t_final})")
    bits = [s.bits for s in cfg.quantizers]
    if any(b2 <= b1 for b1, b2 in zip(bits, bits[1:])):
        problems.append(f"quantizers: bitwidths must be strictly ascending, got {bits}")
    if cfg.method == "fixed" and len(cfg.quantizers) != 1:
        problems.append(f"train.method=fixed takes exactly one quantizer, got {len(bits)}")
    if cfg.method == "br" and len(cfg.quantizers) != 3:
        problems.append(f"train.method=br takes exactly three quantizers, got {len(bits)}")
    if cfg.penalties:
        if len(cfg.penalties) != len(cfg.quantizers):
            problems.append(f"quantizers.g: {len(cfg.penalties)} penalties for "
                            f"{len(cfg.quantizers)} quantizers")
        if any(g < 0 for g in cfg.penalties):
            problems.append(f"quantizers.g: penalties must be non-negative, got {cfg.penalties}")


def parse_config_text(text: str) -> ExperimentConfig:
    problems = []
    values = {}
    quantizer_slots = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {line_number}: expected 'section.key = value', got {raw!r}")
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key.startswith("quantizers.q"):
            suffix = key[len("quantizers.q"):]
            if suffix.isdigit() and 1 <= int(suffix) <= MAX_QUANTIZERS:
                try:
                    quantizer_slots[int(suffix)] = parse_spec(value)
                except ValueError as exc:
                    problems.append(f"{key}: {exc}")
                continue
        if key not in _KEYS:
            problems.append(f"unknown key {key!r}")
            continue
        field_name, parser = _KEYS[key]
        try:
            values[field_name] = parser(value)
        except ValueError as exc:
            problems.append(f"{key}: cannot parse {value!r} ({exc})")
    if quantizer_slots:
        slots = sorted(quantizer_slots)
        if slots != list(range(1, len(slots) + 1)):
            problems.append(f"quantizers: slots must be q1..qK without gaps, got {slots}")
        values["quantizers"] = tuple(quantizer_slots[i] for i in sorted(quantizer_slots))
    # semantic validation runs on whatever parsed, so one pass reports
    # every problem in the file
    cfg = ExperimentConfig(**values)
    _validate(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [
        f"data.kind = {cfg.data_kind}",
        f"data.n = {cfg.data_n}",
        f"data.noise = {cfg.data_noise!r}",
    ]
    if cfg.data_kind == "idx":
        lines += [f"data.train_images = {cfg.data_train_images}",
                  f"data.train_labels = {cfg.data_train_labels}",
                  f"data.val_images = {cfg.data_val_images}",
                  f"data.val_labels = {cfg.data_val_labels}"]
    if cfg.data_kind == "csv":
        lines += [f"data.path = {cfg.data_path}",
                  f"data.label_column = {cfg.data_label_column}"]
    lines += [
        f"model.hidden = {','.join(str(h) for h in cfg.hidden)}",
        f"model.conv = {','.join(f'{c}:{k}' for c, k in cfg.conv)}",
        f"model.activation = {cfg.activation}",
        f"train.method = {cfg.method}",
        f"train.epochs = {cfg.epochs}",
        f"train.batch_size = {cfg.batch_size}",
        f"train.lr = {cfg.lr!r}",
        f"train.lr_drop_factor = {cfg.lr_drop_factor!r}",
        f"train.lr_drop_period = {cfg.lr_drop_period}",
        f"train.momentum = {cfg.momentum!r}",
        f"train.lambda = {cfg.lam!r}",
        f"train.seed = {cfg.seed}",
        f"train.t_initial = {cfg.t_initial!r}",
        f"train.t_final = {cfg.t_final!r}",
    ]
    for i, spec in enumerate(cfg.quantizers, start=1):
        lines.append(f"quantizers.q{i} = {spec.kind}:{spec.bits}")
    lines.append(f"quantizers.g = {','.join(repr(g) for g in cfg.penalties)}")
    lines.append(f"quantizers.exempt_edges = {'true' if cfg.exempt_edges else 'false'}")
    lines.append(f"output.dir = {cfg.out_dir}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, *, method=None, seed=None, out_dir=None):
    changes = {}
    if method is not None:
        changes["method"] = method
    if seed is not None:
        changes["seed"] = seed
    if out_dir is not None:
        changes["out_dir"] = out_dir
    if not changes:
        return cfg
    updated = replace(cfg, **changes)
    problems = []
    _validate(updated, problems)
    if problems:
        raise ConfigError(problems)
    return updated
