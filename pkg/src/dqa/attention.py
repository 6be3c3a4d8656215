"""Learnable soft attention over a bank of weight quantizers.

Each layer owns a soft attention vector ``alpha`` (one logit per
quantizer, quantizers sorted by strictly increasing bitwidth). Per batch
the vector is rescaled by its population standard deviation, pushed
through a temperature softmax, and the resulting convex weights mix the
quantized weight copies. An exponentially cooled temperature drives the
mixture toward a single quantizer by the end of training, and a penalty
term steers it toward the lowest bitwidth.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import ValidationError, Tensor, stable_softmax
from .quantizers import quantize

DEFAULT_T_INITIAL = 100.0
DEFAULT_T_FINAL = 0.03
DEFAULT_LAMBDA = 5.0

#: Below this population sd, rescaling alpha is skipped (division would
#: be meaningless for a constant vector).
SD_GUARD = 1e-12


def default_penalties(k: int) -> np.ndarray:
    """Bitwidth penalties 1, 4, 16, ... (quadrupling per rank)."""
    if k < 1:
        raise ValidationError(f"need at least one quantizer, got {k}")
    return 4.0 ** np.arange(k)


@dataclass
class AttentionState:
    """Per-layer attention over K quantizers.

    ``total_weights`` is the whole-network weight count, which normalizes
    the penalty term so its strength is independent of model size.
    """

    alpha: np.ndarray
    penalties: np.ndarray
    lam: float
    total_weights: int
    bitwidths: tuple[int, ...]
    last_attention: np.ndarray | None = field(default=None, repr=False, compare=False)
    _alpha_leaf: Tensor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.penalties = np.asarray(self.penalties, dtype=np.float64)
        k = len(self.bitwidths)
        if k < 1:
            raise ValidationError("attention needs at least one quantizer")
        if any(b2 <= b1 for b1, b2 in zip(self.bitwidths, self.bitwidths[1:])):
            raise ValidationError(f"bitwidths must be strictly increasing, got {self.bitwidths}")
        if self.alpha.shape != (k,) or self.penalties.shape != (k,):
            raise ValidationError(
                f"alpha {self.alpha.shape} / penalties {self.penalties.shape} "
                f"must both have length {k}")
        if np.any(self.penalties < 0):
            raise ValidationError("penalties must be non-negative")
        if self.lam < 0:
            raise ValidationError(f"penalty strength must be non-negative, got {self.lam}")
        if self.total_weights < 1:
            raise ValidationError(f"total_weights must be positive, got {self.total_weights}")


@dataclass(frozen=True)
class TemperatureSchedule:
    """Exponential cooling T(b) = t_initial * decay**b over total_batches."""

    t_initial: float
    t_final: float
    total_batches: int
    decay: float

    def __post_init__(self):
        if not 0 < self.t_final < self.t_initial:
            raise ValidationError(
                f"need 0 < t_final < t_initial, got ({self.t_initial}, {self.t_final})")
        if not 0 < self.decay < 1:
            raise ValidationError(f"decay must lie in (0, 1), got {self.decay}")
        end = self.t_initial * self.decay ** self.total_batches
        if abs(end - self.t_final) > 1e-9 * self.t_final:
            raise ValidationError(
                f"decay {self.decay} does not land on t_final: reaches {end}")

    @classmethod
    def from_endpoints(cls, t_initial, t_final, total_batches):
        return cls(t_initial, t_final, total_batches,
                   derive_decay(t_initial, t_final, total_batches))


def derive_decay(t_initial: float, t_final: float, total_batches: int) -> float:
    """Per-batch decay rate landing on t_final after total_batches steps."""
    if total_batches < 1:
        raise ValidationError(f"total_batches must be >= 1, got {total_batches}")
    if not 0 < t_final < t_initial:
        raise ValidationError(
            f"cooling requires 0 < t_final < t_initial, got ({t_initial}, {t_final})")
    decay = float(np.exp(np.log(t_final / t_initial) / total_batches))
    assert 0.0 < decay < 1.0
    return decay


def temperature_at(schedule: TemperatureSchedule, b: int) -> float:
    """Temperature at batch index b (0 = start of training)."""
    if b < 0:
        raise ValidationError(f"batch index must be non-negative, got {b}")
    if b > schedule.total_batches:
        warnings.warn(
            f"batch {b} beyond scheduled {schedule.total_batches}; holding final temperature",
            RuntimeWarning)
        return schedule.t_final
    return schedule.t_initial * schedule.decay ** b


def init_alpha(bitwidths) -> np.ndarray:
    """Initial attention logits favouring the smallest bitwidth.

    alpha_k is the share of the total bitwidth budget held by the other
    quantizers, so the lowest-bit entry starts with the highest logit.
    """
    bits = np.asarray(bitwidths, dtype=np.float64)
    if bits.ndim != 1 or bits.size < 1:
        raise ValidationError(f"bitwidths must be a non-empty vector, got {bitwidths!r}")
    if np.any(np.diff(bits) <= 0):
        raise ValidationError(f"bitwidths must be strictly increasing, got {bitwidths}")
    total = bits.sum()
    return (total - bits) / total


def normalize_alpha(alpha: np.ndarray) -> np.ndarray:
    """alpha divided by its population sd (unchanged when sd ~ 0).

    The caller assigns the result back: the rescaling is a persistent
    reparameterization applied before each softmax, outside the gradient
    path.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    sd = float(np.std(alpha))
    if sd < SD_GUARD:
        return alpha
    return alpha / sd


def attention_weights(alpha, temperature: float) -> np.ndarray:
    """Convex attention weights: temperature softmax of the logits."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    return stable_softmax(np.asarray(alpha, dtype=np.float64), temperature)


def regularizer(a, penalties, lam: float, total_weights: int) -> float:
    """Penalty value lam * <penalties, a> / total_weights."""
    if total_weights < 1:
        raise ValidationError(f"total_weights must be positive, got {total_weights}")
    a = np.asarray(a, dtype=np.float64)
    penalties = np.asarray(penalties, dtype=np.float64)
    if a.shape != penalties.shape:
        raise ValidationError(f"lengths disagree: {a.shape} vs {penalties.shape}")
    return lam * float(np.dot(penalties, a)) / total_weights


def mix_quantized(rows, attention: Tensor) -> Tensor:
    """Convex mix of quantized weight copies.

    ``rows`` are the quantized tensors (one per quantizer, equal shapes);
    ``attention`` must sum to 1 within 1e-9.
    """
    total = float(np.sum(attention.data))
    if abs(total - 1.0) > 1e-9:
        raise ValidationError(f"attention weights sum to {total}, expected 1")
    return autodiff.mix(rows, attention)


def dqa_layer_forward(x: Tensor, w: Tensor, specs, state: AttentionState,
                      temperature: float, *, kind: str = "dense",
                      training: bool = True, attention_override=None):
    """Mixed-quantizer layer transfer.

    Rescales the attention logits (persistently when training), softmaxes
    them at the given temperature, quantizes the weights once per
    quantizer (calibration recomputed from the live values and detached),
    mixes the copies, and applies the layer map. Returns
    ``(output, penalty_term)``; both live on the tape of ``x``.
    """
    if len(specs) != state.alpha.size:
        raise ValidationError(f"{len(specs)} quantizers vs alpha of length {state.alpha.size}")
    bits = tuple(s.bits for s in specs)
    if bits != tuple(state.bitwidths):
        raise ValidationError(f"spec bitwidths {bits} disagree with state {state.bitwidths}")
    tape = x.tape
    if training:
        state.alpha[:] = normalize_alpha(state.alpha)
        alpha_now = state.alpha
    else:
        alpha_now = normalize_alpha(state.alpha)
    alpha_leaf = tape.leaf(alpha_now, requires_grad=True)
    if attention_override is None:
        a = autodiff.softmax_with_temperature(alpha_leaf, temperature)
    else:
        a = tape.leaf(np.asarray(attention_override, dtype=np.float64))
    rows = []
    for spec in specs:
        result = quantize(w.data, spec)
        rows.append(autodiff.ste_node(w, result.values, result.pass_mask))
    q = mix_quantized(rows, a)
    y = autodiff.conv2d(x, q) if kind == "conv2d" else autodiff.matmul(x, q)
    penalty_leaf = tape.leaf(state.penalties)
    r = autodiff.scale(autodiff.tensor_sum(autodiff.mul(a, penalty_leaf)),
                       state.lam / state.total_weights)
    state.last_attention = a.data.copy()
    state._alpha_leaf = alpha_leaf
    return y, r


def effective_mixture_curve(specs, attention, sweep) -> np.ndarray:
    """Mixture response over a 1-D input sweep.

    Each quantizer is calibrated on the sweep itself, so the curve shows
    the shape of the frozen mixture independent of any trained weights.
    """
    sweep = np.asarray(sweep, dtype=np.float64)
    attention = np.asarray(attention, dtype=np.float64)
    if len(specs) != attention.size:
        raise ValidationError(f"{len(specs)} quantizers vs attention of length {attention.size}")
    out = np.zeros_like(sweep)
    for weight, spec in zip(attention, specs):
        out += weight * quantize(sweep, spec).values
    return out
