"""Quantized network building blocks: layers, the network container, SGD,
and hard export of a trained mixture to a single low-bit quantizer.

Weight handling modes per layer:

* ``fp``    -- weights used as-is.
* ``fixed`` -- one quantizer, straight-through gradients.
* ``dqa``   -- attention-mixed bank of quantizers (see ``attention``).
* ``br``    -- fixed three-way relaxation with an omega schedule.

Biases are never quantized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import (DimensionError, Tensor, ValidationError, bias_add,
                       conv2d, flatten_batch, matmul, relu, ste_node)
from .attention import (AttentionState, attention_weights, dqa_layer_forward,
                        init_alpha, normalize_alpha)
from .checkpoint import read_container, write_container
from .quantizers import Calibration, QuantizerSpec, freeze_calibration, quantize

MODES = ("fp", "fixed", "dqa", "br")

MODEL_MAGIC = b"DQAMODEL"

#: Export proceeds below this attention mass but warns that the mixture
#: has not collapsed.
EXPORT_ATTENTION_FLOOR = 0.9


def br_mix(q1: Tensor, q2: Tensor, q3: Tensor, omega: float) -> Tensor:
    """Relaxation mix (omega * q1 + q2 + q3) / (omega + 2)."""
    if not (q1.shape == q2.shape == q3.shape):
        raise DimensionError(
            f"br_mix: shapes differ ({q1.shape}, {q2.shape}, {q3.shape})")
    if omega <= 0:
        raise ValidationError(f"omega must be positive, got {omega}")
    denom = omega + 2.0
    out = (omega * q1.data + q2.data + q3.data) / denom
    w1, w23 = omega / denom, 1.0 / denom
    return q1.tape.record(out, [q1, q2, q3], lambda g: [w1 * g, w23 * g, w23 * g])


class QuantizedLayer:
    """One weight layer (dense or conv2d) with a quantization mode."""

    def __init__(self, kind, weights, bias=None, *, mode="fp", specs=(),
                 attention=None, omega=1.0, activation=None):
        if kind not in ("dense", "conv2d"):
            raise ValidationError(f"unknown layer kind {kind!r}")
        if mode not in MODES:
            raise ValidationError(f"unknown layer mode {mode!r}")
        specs = tuple(specs)
        if mode == "fixed" and len(specs) != 1:
            raise ValidationError(f"fixed mode takes exactly one quantizer, got {len(specs)}")
        if mode == "br" and len(specs) != 3:
            raise ValidationError(f"br mode takes exactly three quantizers, got {len(specs)}")
        if mode == "dqa":
            if not specs:
                raise ValidationError("dqa mode needs at least one quantizer")
            bits = [s.bits for s in specs]
            if any(b2 <= b1 for b1, b2 in zip(bits, bits[1:])):
                raise ValidationError(f"dqa quantizers must have ascending bitwidths, got {bits}")
        self.kind = kind
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        self.mode = mode
        self.specs = specs
        self.attention = attention
        self.omega = float(omega)
        self.activation = activation
        self.attention_override = None
        self._last_leaves = []

    @property
    def weight_count(self):
        return self.weights.size

    def parameter_arrays(self):
        arrays = [self.weights]
        if self.bias is not None:
            arrays.append(self.bias)
        if self.mode == "dqa":
            arrays.append(self.attention.alpha)
        return arrays

    def forward(self, x: Tensor, temperature: float, training=False):
        """Apply the layer; returns (output, penalty term or None)."""
        tape = x.tape
        w = tape.leaf(self.weights, requires_grad=True)
        leaves = [w]
        reg = None
        alpha_leaf = None
        if self.mode == "dqa":
            y, reg = dqa_layer_forward(
                x, w, self.specs, self.attention, temperature,
                kind=self.kind, training=training,
                attention_override=self.attention_override)
            alpha_leaf = self.attention._alpha_leaf
        else:
            if self.mode == "fp":
                q = w
            elif self.mode == "fixed":
                result = quantize(self.weights, self.specs[0])
                q = ste_node(w, result.values, result.pass_mask)
            else:  # br
                rows = []
                for spec in self.specs:
                    result = quantize(self.weights, spec)
                    rows.append(ste_node(w, result.values, result.pass_mask))
                q = br_mix(rows[0], rows[1], rows[2], self.omega)
            y = conv2d(x, q) if self.kind == "conv2d" else matmul(x, q)
        if self.bias is not None:
            b = tape.leaf(self.bias, requires_grad=True)
            leaves.append(b)
            y = bias_add(y, b)
        if alpha_leaf is not None:
            leaves.append(alpha_leaf)
        if self.activation == "relu":
            y = relu(y)
        self._last_leaves = leaves
        return y, reg


def dense(rng, in_dim, out_dim, *, mode="fp", specs=(), activation=None, bias=True):
    bound = np.sqrt(6.0 / in_dim)
    w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
    b = np.zeros(out_dim) if bias else None
    return QuantizedLayer("dense", w, b, mode=mode, specs=specs, activation=activation)


def conv(rng, in_channels, out_channels, kernel, *, mode="fp", specs=(),
         activation=None, bias=True):
    fan_in = in_channels * kernel * kernel
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel, kernel))
    b = np.zeros(out_channels) if bias else None
    return QuantizedLayer("conv2d", w, b, mode=mode, specs=specs, activation=activation)


class Network:
    """Ordered stack of quantized layers.

    4-D activations are flattened automatically in front of dense layers.
    """

    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ValidationError("network needs at least one layer")
        self.last_temperature = None

    @property
    def total_weights(self):
        return sum(layer.weight_count for layer in self.layers)

    def attach_attention(self, penalties, lam):
        """Create the per-layer attention state for every dqa layer.

        Deferred until the full stack exists because the penalty term is
        normalized by the whole-network weight count.
        """
        total = self.total_weights
        for layer in self.layers:
            if layer.mode == "dqa":
                bits = tuple(s.bits for s in layer.specs)
                layer.attention = AttentionState(
                    alpha=init_alpha(bits),
                    penalties=np.asarray(penalties, dtype=np.float64),
                    lam=lam, total_weights=total, bitwidths=bits)
        return self

    def forward(self, x: Tensor, temperature: float, training=False):
        h = x
        reg_total = None
        for layer in self.layers:
            if layer.kind == "dense" and h.data.ndim == 4:
                h = flatten_batch(h)
            h, reg = layer.forward(h, temperature, training=training)
            if reg is not None:
                reg_total = reg if reg_total is None else autodiff.add(reg_total, reg)
        return h, reg_total

    def parameter_arrays(self):
        return [a for layer in self.layers for a in layer.parameter_arrays()]

    def last_leaves(self):
        return [t for layer in self.layers for t in layer._last_leaves]

    def logits(self, features, temperature):
        """Forward a raw feature array on a throwaway tape."""
        tape = autodiff.Tape()
        out, _ = self.forward(tape.leaf(features), temperature, training=False)
        return out.data


class Sgd:
    """SGD with classical momentum: v <- mu*v + g; p <- p - lr*v.

    Attention logits are updated by the same rule as weights and biases.
    """

    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {momentum}")
        self.velocities = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValidationError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for p, v, g in zip(self.params, self.velocities, grads):
            if g.shape != p.shape:
                raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
            v *= self.momentum
            v += g
            p -= self.lr * v


def sgd_step(params, grads, state: Sgd):
    """Single optimizer step (thin wrapper around ``Sgd.step``)."""
    assert list(params) == state.params or all(a is b for a, b in zip(params, state.params))
    state.step(grads)
    return params


def select_quantizer(layer: QuantizedLayer, temperature: float):
    """Argmax attention entry of a dqa layer at the given temperature.

    Returns (index, attention vector); the logits are rescaled the same
    way the forward pass rescales them, without persisting.
    """
    a = attention_weights(normalize_alpha(layer.attention.alpha), temperature)
    return int(np.argmax(a)), a


@dataclass
class HardLayer:
    kind: str
    mode: str                    # "codes" (level table + codes) or "fp"
    bits: int | None
    levels: np.ndarray | None
    codes: np.ndarray | None
    weight_shape: tuple
    weights: np.ndarray | None   # fp layers only
    bias: np.ndarray | None
    activation: str | None

    def weight_matrix(self):
        if self.mode == "fp":
            return self.weights
        return self.levels[self.codes].reshape(self.weight_shape)


@dataclass
class HardModel:
    """Post-training artifact: every layer pinned to one quantizer."""

    layers: list
    config_text: str = ""

    def forward(self, features):
        h = np.asarray(features, dtype=np.float64)
        for layer in self.layers:
            w = layer.weight_matrix()
            if layer.kind == "conv2d":
                tape = autodiff.Tape()
                h = conv2d(tape.leaf(h), tape.leaf(w)).data
                if layer.bias is not None:
                    h = h + layer.bias[None, :, None, None]
            else:
                if h.ndim == 4:
                    h = h.reshape(h.shape[0], -1)
                h = h @ w
                if layer.bias is not None:
                    h = h + layer.bias
            if layer.activation == "relu":
                h = h * (h > 0)
        return h

    def achieved_bits(self):
        return [layer.bits for layer in self.layers]


def _codes_for(values, levels):
    codes = np.searchsorted(levels, values.reshape(-1))
    dtype = np.uint8 if levels.size <= 256 else np.uint16
    return codes.astype(dtype)


def export_hard(network: Network, temperature: float, config_text="") -> HardModel:
    """Collapse each layer to a single quantizer.

    dqa layers keep the attention argmax at the given (final) temperature
    with calibration frozen from the current weights; fixed layers keep
    their own quantizer; br layers keep their dominant first quantizer;
    fp layers pass through unquantized with a warning.
    """
    hard_layers = []
    any_quantized = False
    for i, layer in enumerate(network.layers):
        spec = None
        if layer.mode == "dqa":
            k, a = select_quantizer(layer, temperature)
            if float(a.max()) < EXPORT_ATTENTION_FLOOR:
                warnings.warn(
                    f"layer {i + 1}: attention still diffuse (max {a.max():.3f}); "
                    f"exporting argmax quantizer anyway", RuntimeWarning)
            spec = layer.specs[k]
        elif layer.mode == "fixed":
            spec = layer.specs[0]
        elif layer.mode == "br":
            spec = layer.specs[0]
        if spec is None:
            hard_layers.append(HardLayer(
                kind=layer.kind, mode="fp", bits=None, levels=None, codes=None,
                weight_shape=layer.weights.shape, weights=layer.weights.copy(),
                bias=None if layer.bias is None else layer.bias.copy(),
                activation=layer.activation))
            continue
        frozen = freeze_calibration(layer.weights, spec)
        result = quantize(layer.weights, frozen)
        hard_layers.append(HardLayer(
            kind=layer.kind, mode="codes", bits=spec.bits,
            levels=result.levels, codes=_codes_for(result.values, result.levels),
            weight_shape=layer.weights.shape, weights=None,
            bias=None if layer.bias is None else layer.bias.copy(),
            activation=layer.activation))
        any_quantized = True
    if not any_quantized:
        warnings.warn("no quantized layers: exporting a full-precision artifact",
                      RuntimeWarning)
    return HardModel(hard_layers, config_text)


def save_hard_model(model: HardModel, path):
    header = {"config": model.config_text, "layers": []}
    arrays = []
    for layer in model.layers:
        entry = {"kind": layer.kind, "mode": layer.mode, "bits": layer.bits,
                 "weight_shape": list(layer.weight_shape),
                 "activation": layer.activation,
                 "has_bias": layer.bias is not None}
        if layer.mode == "fp":
            arrays.append(layer.weights)
        else:
            arrays.append(layer.levels)
            arrays.append(layer.codes)
        if layer.bias is not None:
            arrays.append(layer.bias)
        header["layers"].append(entry)
    write_container(path, MODEL_MAGIC, header, arrays)


def load_hard_model(path) -> HardModel:
    header, arrays = read_container(path, MODEL_MAGIC)
    layers = []
    cursor = 0
    for entry in header["layers"]:
        shape = tuple(entry["weight_shape"])
        weights = levels = codes = None
        if entry["mode"] == "fp":
            weights = arrays[cursor]
            cursor += 1
        else:
            levels = arrays[cursor]
            codes = arrays[cursor + 1]
            cursor += 2
        bias = None
        if entry["has_bias"]:
            bias = arrays[cursor]
            cursor += 1
        layers.append(HardLayer(
            kind=entry["kind"], mode=entry["mode"], bits=entry["bits"],
            levels=levels, codes=codes, weight_shape=shape, weights=weights,
            bias=bias, activation=entry["activation"]))
    return HardModel(layers, header.get("config", ""))
