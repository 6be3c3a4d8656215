"""End-to-end training loop, baselines, metrics, and run orchestration.

Per batch: advance the temperature, forward every layer (collecting the
attention penalty terms), add them to the task loss, backpropagate, and
take one SGD step on weights, biases, and attention logits alike. The
learning rate drops by a fixed factor on an epoch schedule. Runs are
deterministic under (plan, seed, data): shuffles are derived per epoch
from the run seed, so resuming from a checkpoint replays the identical
stream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .attention import (TemperatureSchedule, derive_decay, temperature_at)
from .autodiff import Tape, ValidationError, add, softmax_cross_entropy
from .config import (ExperimentConfig, parse_config_text, serialize_config,
                     with_overrides)
from .data import Dataset, gen_synthetic, load_csv, load_idx, normalize_pair, split_train_val
from .layers import (Network, Sgd, br_mix, conv, dense, export_hard,
                     select_quantizer)

__all__ = [
    "TrainPlan", "MetricsRecord", "TrainAbort", "train", "evaluate",
    "derive_decay", "br_mix", "br_omega_update", "build_datasets",
    "build_network", "plan_from_config", "run_experiment", "compare_runs",
    "write_metrics_csv", "read_metrics_csv", "save_run_checkpoint",
    "load_run_checkpoint", "run_rng", "ExperimentResult", "CompareRow",
]

CKPT_MAGIC = b"DQACKPT1"

BR_OMEGA_GROWTH = 1.02


class TrainAbort(RuntimeError):
    """Raised when the loss leaves the finite range.

    Carries a diagnostic snapshot: last temperature, learning rate, and
    per-layer attention vectors.
    """

    def __init__(self, message, *, epoch, batch, temperature, lr, attention):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.temperature = temperature
        self.lr = lr
        self.attention = attention


@dataclass(frozen=True)
class TrainPlan:
    epochs: int
    batch_size: int
    lr: float
    lr_drop_factor: float = 0.1
    lr_drop_period: int = 20
    momentum: float = 0.9
    t_initial: float = 100.0
    t_final: float = 0.03
    seed: int = 0
    method: str = "dqa"

    def batches_per_epoch(self, n_train: int) -> int:
        return math.ceil(n_train / self.batch_size)

    def total_batches(self, n_train: int) -> int:
        return self.epochs * self.batches_per_epoch(n_train)


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    batch: int
    loss: float
    reg: float
    train_acc: float
    val_acc: float
    temperature: float
    layer: int
    attention: tuple | None = None
    argmax_k: int | None = None
    omega: float | None = None

    def __post_init__(self):
        if self.attention is not None:
            total = sum(self.attention)
            if abs(total - 1.0) > 1e-9:
                raise ValidationError(f"attention sums to {total}, expected 1")


def run_rng(seed: int, *key) -> np.random.Generator:
    """Deterministic generator for one purpose within a run."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def br_omega_update(omega: float) -> float:
    """Grow the relaxation weight by 2% (called once per epoch)."""
    return BR_OMEGA_GROWTH * omega


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.data_kind == "idx":
        train = load_idx(cfg.data_train_images, cfg.data_train_labels, split="train")
        val = load_idx(cfg.data_val_images, cfg.data_val_labels, split="val")
        return normalize_pair(train, val)
    if cfg.data_kind == "csv":
        whole = load_csv(cfg.data_path, cfg.data_label_column)
        train, val = split_train_val(whole.features, whole.labels, cfg.seed)
        return normalize_pair(train, val)
    return gen_synthetic(cfg.data_kind, cfg.data_n, cfg.data_noise, cfg.seed)


def build_network(cfg: ExperimentConfig, train_ds: Dataset, rng=None) -> Network:
    """Assemble the layer stack described by the config.

    Conv layers (image data only) come first, then the dense stack. Every
    weight layer gets the configured quantization mode unless
    ``exempt_edges`` keeps the first and last at full precision.
    """
    if rng is None:
        rng = run_rng(cfg.seed, 0)
    layer_plans = []
    if cfg.conv:
        channels = train_ds.features.shape[1]
        for out_channels, kernel in cfg.conv:
            layer_plans.append(("conv", channels, out_channels, kernel))
            channels = out_channels
    dims = list(cfg.hidden) + [train_ds.num_classes]

    layers = []
    activation = cfg.activation if cfg.activation != "none" else None
    n_weight_layers = len(layer_plans) + len(dims)

    def mode_for(index):
        if cfg.method == "fp":
            return "fp"
        if cfg.exempt_edges and index in (0, n_weight_layers - 1):
            return "fp"
        return cfg.method

    index = 0
    for _, in_ch, out_ch, kernel in layer_plans:
        layers.append(conv(rng, in_ch, out_ch, kernel, mode=mode_for(index),
                           specs=cfg.quantizers, activation=activation))
        index += 1
    if cfg.conv:
        h, w = train_ds.features.shape[2], train_ds.features.shape[3]
        ch = train_ds.features.shape[1]
        for out_ch, kernel in cfg.conv:
            h, w, ch = h - kernel + 1, w - kernel + 1, out_ch
            if h < 1 or w < 1:
                raise ValidationError("conv stack shrinks the image below 1x1")
        in_dim = ch * h * w
    else:
        in_dim = train_ds.feature_dim
    for pos, out_dim in enumerate(dims):
        act = activation if pos < len(dims) - 1 else None
        layers.append(dense(rng, in_dim, out_dim, mode=mode_for(index),
                            specs=cfg.quantizers, activation=act))
        in_dim = out_dim
        index += 1
    net = Network(layers)
    if cfg.method == "dqa":
        net.attach_attention(cfg.effective_penalties(), cfg.lam)
    net.last_temperature = cfg.t_initial
    return net


def plan_from_config(cfg: ExperimentConfig) -> TrainPlan:
    return TrainPlan(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                     lr_drop_factor=cfg.lr_drop_factor, lr_drop_period=cfg.lr_drop_period,
                     momentum=cfg.momentum, t_initial=cfg.t_initial, t_final=cfg.t_final,
                     seed=cfg.seed, method=cfg.method)


def evaluate(network: Network, dataset: Dataset, temperature=None):
    """Forward-only top-1 accuracy and mean task loss (no mutation)."""
    if dataset.n == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    if temperature is None:
        temperature = network.last_temperature or 1.0
    tape = Tape()
    logits, _ = network.forward(tape.leaf(dataset.features), temperature, training=False)
    loss = softmax_cross_entropy(logits, dataset.labels)
    accuracy = float(np.mean(logits.data.argmax(axis=1) == dataset.labels))
    return accuracy, loss.item()


def _attention_snapshots(network: Network):
    snaps = {}
    for i, layer in enumerate(network.layers, start=1):
        if layer.mode == "dqa" and layer.attention.last_attention is not None:
            snaps[i] = layer.attention.last_attention.copy()
    return snaps


def train(network: Network, train_ds: Dataset, val_ds: Dataset, plan: TrainPlan, *,
          sgd: Sgd | None = None, start_epoch: int = 0, global_batch: int = 0,
          stop_after: int | None = None, on_batch=None):
    """Run the batch-wise loop; returns (network, metrics records).

    One record per (epoch, layer). ``stop_after`` ends the loop early
    (for checkpoint-and-resume) while keeping the full-plan temperature
    schedule. ``on_batch(epoch, batch, temperature, task_loss, reg_total,
    total_loss)`` is called after every step.
    """
    n = train_ds.n
    if n == 0:
        raise ValidationError("cannot train on an empty dataset")
    schedule = TemperatureSchedule.from_endpoints(plan.t_initial, plan.t_final,
                                                  plan.total_batches(n))
    if sgd is None:
        sgd = Sgd(network.parameter_arrays(), plan.lr, plan.momentum)
    records = []
    b = global_batch
    temperature = network.last_temperature or plan.t_initial
    end_epoch = plan.epochs if stop_after is None else min(plan.epochs, stop_after)
    for epoch in range(start_epoch, end_epoch):
        sgd.lr = plan.lr * plan.lr_drop_factor ** (epoch // plan.lr_drop_period)
        perm = run_rng(plan.seed, 1, epoch).permutation(n)
        loss_sum = 0.0
        reg_sum = 0.0
        n_batches = 0
        omega_used = network.layers[0].omega if plan.method == "br" else None
        for start in range(0, n, plan.batch_size):
            idx = perm[start:start + plan.batch_size]
            b += 1
            temperature = temperature_at(schedule, b)
            tape = Tape()
            x = tape.leaf(train_ds.features[idx])
            logits, reg = network.forward(x, temperature, training=True)
            task = softmax_cross_entropy(logits, train_ds.labels[idx])
            loss = task if reg is None else add(task, reg)
            total_loss = loss.item()
            if not np.isfinite(total_loss):
                raise TrainAbort(
                    f"non-finite loss at epoch {epoch}, batch {b}",
                    epoch=epoch, batch=b, temperature=temperature, lr=sgd.lr,
                    attention=_attention_snapshots(network))
            tape.backward(loss)
            sgd.step([leaf.grad for leaf in network.last_leaves()])
            reg_value = 0.0 if reg is None else reg.item()
            loss_sum += total_loss
            reg_sum += reg_value
            n_batches += 1
            network.last_temperature = temperature
            if on_batch is not None:
                on_batch(epoch=epoch, batch=b, temperature=temperature,
                         task_loss=task.item(), reg_total=reg_value,
                         total_loss=total_loss)
        train_acc, _ = evaluate(network, train_ds, temperature)
        val_acc, _ = evaluate(network, val_ds, temperature)
        snaps = _attention_snapshots(network)
        for i, layer in enumerate(network.layers, start=1):
            a = snaps.get(i)
            records.append(MetricsRecord(
                epoch=epoch, batch=b, loss=loss_sum / n_batches,
                reg=reg_sum / n_batches, train_acc=train_acc, val_acc=val_acc,
                temperature=temperature, layer=i,
                attention=None if a is None else tuple(a),
                argmax_k=None if a is None else int(np.argmax(a)) + 1,
                omega=omega_used))
        if plan.method == "br":
            for layer in network.layers:
                layer.omega = br_omega_update(layer.omega)
    return network, records


def format_float(x: float) -> str:
    return f"{x:.9g}"


def write_metrics_csv(records, path):
    """Metrics table, one row per (epoch, layer), floats at 9 significant
    digits. Attention columns appear only when the run produced them;
    omega only for relaxation runs."""
    records = list(records)
    k = 0
    for record in records:
        if record.attention is not None:
            k = len(record.attention)
            break
    has_omega = any(r.omega is not None for r in records)
    header = ["epoch", "batch", "loss", "reg", "train_acc", "val_acc",
              "temperature", "layer"]
    header += [f"a_{i}" for i in range(1, k + 1)]
    if k:
        header.append("argmax_k")
    if has_omega:
        header.append("omega")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in records:
            row = [r.epoch, r.batch, format_float(r.loss), format_float(r.reg),
                   format_float(r.train_acc), format_float(r.val_acc),
                   format_float(r.temperature), r.layer]
            if k:
                a = r.attention or ()
                row += [format_float(v) for v in a] + [""] * (k - len(a))
                row.append("" if r.argmax_k is None else r.argmax_k)
            if has_omega:
                row.append("" if r.omega is None else format_float(r.omega))
            writer.writerow(row)


def read_metrics_csv(path):
    """Parse a metrics table back into a list of dicts (floats parsed,
    attention under key 'attention' as a tuple)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        a_cols = [i for i, name in enumerate(header) if name.startswith("a_")]
        rows = []
        for raw in reader:
            row = dict(zip(header, raw))
            parsed = {
                "epoch": int(row["epoch"]), "batch": int(row["batch"]),
                "loss": float(row["loss"]), "reg": float(row["reg"]),
                "train_acc": float(row["train_acc"]), "val_acc": float(row["val_acc"]),
                "temperature": float(row["temperature"]), "layer": int(row["layer"]),
            }
            if a_cols:
                parsed["attention"] = tuple(float(raw[i]) for i in a_cols if raw[i] != "")
                parsed["argmax_k"] = int(row["argmax_k"]) if row.get("argmax_k") else None
            if "omega" in row and row["omega"]:
                parsed["omega"] = float(row["omega"])
            rows.append(parsed)
    return header, rows


def save_run_checkpoint(path, network: Network, sgd: Sgd, config_text: str,
                        epoch: int, global_batch: int):
    header = {
        "config": config_text,
        "epoch": epoch,
        "global_batch": global_batch,
        "omega": [layer.omega for layer in network.layers],
        "n_params": len(sgd.params),
    }
    ckpt.write_container(path, CKPT_MAGIC, header, sgd.params + sgd.velocities)


def load_run_checkpoint(path):
    """Rebuild a run from a checkpoint.

    Returns (cfg, network, sgd, train_ds, val_ds, epoch, global_batch);
    training continues with ``train(..., sgd=sgd, start_epoch=epoch,
    global_batch=global_batch)``.
    """
    header, arrays = ckpt.read_container(path, CKPT_MAGIC)
    cfg = parse_config_text(header["config"])
    train_ds, val_ds = build_datasets(cfg)
    network = build_network(cfg, train_ds)
    params = network.parameter_arrays()
    n_params = header["n_params"]
    if n_params != len(params) or len(arrays) != 2 * n_params:
        raise ckpt.CheckpointError(
            f"{path}: expected {len(params)} parameters, found {n_params}")
    for p, stored in zip(params, arrays[:n_params]):
        if p.shape != stored.shape:
            raise ckpt.CheckpointError(f"{path}: parameter shape {stored.shape} "
                                       f"does not match model {p.shape}")
        p[...] = stored
    sgd = Sgd(params, cfg.lr, cfg.momentum)
    for v, stored in zip(sgd.velocities, arrays[n_params:]):
        v[...] = stored
    for layer, omega in zip(network.layers, header["omega"]):
        layer.omega = omega
    n = train_ds.n
    schedule = TemperatureSchedule.from_endpoints(cfg.t_initial, cfg.t_final,
                                                  plan_from_config(cfg).total_batches(n))
    gb = header["global_batch"]
    network.last_temperature = temperature_at(schedule, gb) if gb else cfg.t_initial
    return cfg, network, sgd, train_ds, val_ds, header["epoch"], gb


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    network: Network
    records: list
    summary: dict
    out_dir: Path | None = None


def _summarize(cfg, network, records, temperature):
    last = [r for r in records if r.epoch == records[-1].epoch] if records else []
    summary = {
        "method": cfg.method,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "final_train_acc": last[0].train_acc if last else float("nan"),
        "final_val_acc": last[0].val_acc if last else float("nan"),
        "final_temperature": temperature,
    }
    for i, layer in enumerate(network.layers, start=1):
        summary[f"layer_{i}_mode"] = layer.mode
        if layer.mode == "fp":
            summary[f"layer_{i}_bits"] = "fp"
        elif layer.mode == "dqa":
            k, a = select_quantizer(layer, temperature)
            summary[f"layer_{i}_bits"] = layer.specs[k].bits
            summary[f"layer_{i}_kind"] = layer.specs[k].kind
            summary[f"layer_{i}_argmax"] = k + 1
            summary[f"layer_{i}_max_attention"] = float(a.max())
        else:
            summary[f"layer_{i}_bits"] = layer.specs[0].bits
            summary[f"layer_{i}_kind"] = layer.specs[0].kind
    return summary


def write_summary(summary: dict, path):
    with open(path, "w") as fh:
        for key, value in summary.items():
            fh.write(f"{key} = {value!r}\n" if isinstance(value, float)
                     else f"{key} = {value}\n")


def read_summary(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def run_experiment(cfg: ExperimentConfig, out_dir) -> ExperimentResult:
    """Train one configuration and write the standard run outputs:
    effective.cfg, metrics.csv, final.ckpt, summary.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    effective = serialize_config(cfg)
    (out / "effective.cfg").write_text(effective)
    train_ds, val_ds = build_datasets(cfg)
    network = build_network(cfg, train_ds)
    plan = plan_from_config(cfg)
    sgd = Sgd(network.parameter_arrays(), plan.lr, plan.momentum)
    network, records = train(network, train_ds, val_ds, plan, sgd=sgd)
    write_metrics_csv(records, out / "metrics.csv")
    save_run_checkpoint(out / "final.ckpt", network, sgd, effective,
                        epoch=plan.epochs, global_batch=plan.total_batches(train_ds.n))
    summary = _summarize(cfg, network, records, network.last_temperature)
    write_summary(summary, out / "summary.txt")
    return ExperimentResult(cfg, network, records, summary, out)


@dataclass
class CompareRow:
    name: str
    method: str
    mean_val_acc: float
    sd_val_acc: float
    accuracies: tuple
    run_dirs: tuple


def _comparable_sections(cfg: ExperimentConfig):
    return (cfg.data_kind, cfg.data_n, cfg.data_noise, cfg.data_path,
            cfg.data_train_images, cfg.hidden, cfg.conv, cfg.activation)


def compare_runs(config_paths, seeds, out_dir) -> list[CompareRow]:
    """Train each config over the given seeds; aggregate final validation
    accuracy as mean +/- population sd. All configs must share the data
    and model sections."""
    from .config import parse_config  # local import to keep module load light

    paths = [Path(p) for p in config_paths]
    if len(paths) < 2:
        raise ValidationError(f"compare needs at least two configs, got {len(paths)}")
    configs = [parse_config(p) for p in paths]
    reference = _comparable_sections(configs[0])
    for path, cfg in zip(paths[1:], configs[1:]):
        if _comparable_sections(cfg) != reference:
            raise ValidationError(
                f"{path}: data/model sections differ from {paths[0]} "
                f"(compare needs a shared dataset and topology)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path, cfg in zip(paths, configs):
        name = path.stem
        accuracies = []
        run_dirs = []
        for seed in seeds:
            run_dir = out / name / f"seed_{seed}"
            result = run_experiment(with_overrides(cfg, seed=seed), run_dir)
            accuracies.append(result.summary["final_val_acc"])
            run_dirs.append(run_dir)
        accs = np.asarray(accuracies)
        rows.append(CompareRow(name, cfg.method, float(accs.mean()),
                               float(accs.std()), tuple(accuracies), tuple(run_dirs)))
    _write_comparison(rows, out)
    return rows


def _write_comparison(rows, out: Path):
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "method", "mean_val_acc", "sd_val_acc", "n_seeds"])
        for row in rows:
            writer.writerow([row.name, row.method, format_float(row.mean_val_acc),
                             format_float(row.sd_val_acc), len(row.accuracies)])
    name_width = max(len(r.name) for r in rows)
    lines = [f"{'config'.ljust(name_width)}  method  mean_val_acc  sd_val_acc"]
    for row in rows:
        lines.append(f"{row.name.ljust(name_width)}  {row.method:<6}  "
                     f"{row.mean_val_acc:>12.4f}  {row.sd_val_acc:>10.4f}")
    (out / "comparison.txt").write_text("\n".join(lines) + "\n")
