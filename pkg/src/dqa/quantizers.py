"""Weight quantizers and their calibration.

Four schemes are provided:

* ``minmax``  -- uniform grid spanning [min(w), max(w)] with 2**n levels.
* ``sawb``    -- symmetric uniform grid over [-clip, clip]; the clip is
  chosen by grid search to minimize mean squared quantization error.
* ``bwn``     -- binary levels {-beta, beta}, beta = mean |w|.
* ``twn``     -- ternary levels {-beta, 0, beta}; a dead zone of half
  width delta = 0.7 * mean |w| selects which weights calibrate beta.

Every quantizer assigns each element to the nearest realized level, with
midpoints rounding half away from zero (for the ternary scheme the
documented dead-zone rule and nearest-level assignment differ on a thin
band; nearest-level wins so that all kinds satisfy the same oracle).
``brute_force_quantize`` is the reference nearest-level oracle all closed
forms are tested against.

All functions are pure and recompute calibration from the tensor passed
in, unless the spec carries a frozen :class:`Calibration`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ValidationError

KINDS = ("minmax", "sawb", "bwn", "twn")

SAWB_GRID_POINTS = 100


class DegenerateRangeError(ValueError):
    """The tensor has zero spread, so a min-max grid cannot be built."""


@dataclass(frozen=True)
class Calibration:
    """Frozen statistics; only the fields a kind needs are set."""

    x_min: float | None = None   # minmax grid bounds
    x_max: float | None = None
    clip: float | None = None    # sawb symmetric limit
    beta: float | None = None    # bwn/twn level magnitude
    delta: float | None = None   # twn dead-zone half width


@dataclass(frozen=True)
class QuantizerSpec:
    """One quantizer: kind, storage bitwidth, optional frozen calibration."""

    kind: str
    bits: int
    calibration: Calibration | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown quantizer kind {self.kind!r}")
        if self.bits < 1:
            raise ValidationError(f"bitwidth must be >= 1, got {self.bits}")
        if self.kind == "bwn" and self.bits != 1:
            raise ValidationError(f"bwn is a 1-bit scheme, got bits={self.bits}")
        if self.kind == "twn" and self.bits != 2:
            raise ValidationError(f"twn is a 2-bit scheme, got bits={self.bits}")
        if self.calibration is not None:
            cal = self.calibration
            if cal.clip is not None and cal.clip <= 0:
                raise ValidationError(f"clip must be positive, got {cal.clip}")
            if cal.beta is not None and cal.beta < 0:
                raise ValidationError(f"beta must be non-negative, got {cal.beta}")
            if cal.delta is not None and cal.delta < 0:
                raise ValidationError(f"delta must be non-negative, got {cal.delta}")

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.bits}"


@dataclass
class QuantizationResult:
    """Quantized values, the STE pass mask, and the realized level set.

    Every entry of ``values`` is a member of ``levels`` (exact equality);
    ``levels`` is strictly increasing with at most 2**bits entries.
    """

    values: np.ndarray
    pass_mask: np.ndarray
    levels: np.ndarray


def _require_nonempty(w, name):
    if w.size == 0:
        raise ValidationError(f"{name}: empty tensor")


def _grid(q_low: float, q_high: float, count: int) -> np.ndarray:
    # symmetric ranges get a sign-symmetric grid so negating the input
    # negates the output exactly
    if q_low == -q_high:
        m = count - 1
        return q_high * ((2.0 * np.arange(count) - m) / m)
    return np.linspace(q_low, q_high, count)


def uniform_quantize(x, q_low: float, q_high: float, n: int) -> QuantizationResult:
    """Round onto the 2**n evenly spaced levels spanning [q_low, q_high].

    Values are clamped to the range first; midpoints round half away from
    zero. The pass mask is 1 exactly where q_low <= x <= q_high.
    """
    if n < 1:
        raise ValidationError(f"bitwidth must be >= 1, got {n}")
    if not q_low < q_high:
        raise ValidationError(f"need q_low < q_high, got [{q_low}, {q_high}]")
    x = np.asarray(x, dtype=np.float64)
    count = 2 ** n
    levels = _grid(q_low, q_high, count)
    step = (q_high - q_low) / (count - 1)
    clipped = np.clip(x, q_low, q_high)
    idx = (clipped - q_low) / step
    lo = np.floor(idx)
    frac = idx - lo
    up = (frac > 0.5) | ((frac == 0.5) & (clipped >= 0.0))
    codes = np.clip((lo + up).astype(np.int64), 0, count - 1)
    mask = ((x >= q_low) & (x <= q_high)).astype(np.float64)
    return QuantizationResult(levels[codes], mask, levels)


def minmax_levels(w, n: int) -> tuple[float, float]:
    """Grid bounds for min-max quantization: (min(w), max(w)).

    The n-bit level set is then the uniform grid over that range. A
    constant tensor raises :class:`DegenerateRangeError`; ``quantize``
    widens the range instead of failing.
    """
    w = np.asarray(w, dtype=np.float64)
    _require_nonempty(w, "minmax_levels")
    if n < 1:
        raise ValidationError(f"bitwidth must be >= 1, got {n}")
    lo, hi = float(w.min()), float(w.max())
    if lo == hi:
        raise DegenerateRangeError(f"constant tensor (all elements {lo}): zero range")
    return lo, hi


def _widened_range(w) -> tuple[float, float]:
    x = float(w.reshape(-1)[0])
    eps = max(1e-8, 1e-8 * abs(x))
    return x - eps, x + eps


def sawb_quantize(w, n: int, clip: float) -> QuantizationResult:
    """Uniform quantization over the symmetric range [-clip, clip]."""
    if clip <= 0:
        raise ValidationError(f"clip must be positive, got {clip}")
    return uniform_quantize(w, -clip, clip, n)


def sawb_calibrate(w, n: int, grid: int = SAWB_GRID_POINTS) -> float:
    """Clip limit minimizing mean squared quantization error.

    Candidates are the linear grid ``max|w| * j/grid`` for j = 1..grid;
    ties go to the smaller clip. An all-zero tensor yields a machine-eps
    sentinel and a warning.
    """
    w = np.asarray(w, dtype=np.float64)
    _require_nonempty(w, "sawb_calibrate")
    if grid < 2:
        raise ValidationError(f"grid must have at least 2 points, got {grid}")
    amax = float(np.max(np.abs(w)))
    if amax == 0.0:
        warnings.warn("sawb_calibrate: all-zero tensor, returning eps clip", RuntimeWarning)
        return float(np.finfo(np.float64).eps)
    best_clip, best_err = None, np.inf
    for fraction in np.arange(1, grid + 1) / grid:
        clip = amax * fraction
        err = float(np.mean((w - sawb_quantize(w, n, clip).values) ** 2))
        if err < best_err:
            best_clip, best_err = clip, err
    return best_clip


def bwn_quantize(w, beta: float | None = None) -> QuantizationResult:
    """Binary quantization: beta * sign(w) with sign(0) = +1.

    ``beta`` defaults to mean |w|; pass a frozen value to skip
    recalibration. The pass mask is all ones.
    """
    w = np.asarray(w, dtype=np.float64)
    _require_nonempty(w, "bwn_quantize")
    if beta is None:
        beta = float(np.mean(np.abs(w)))
    if beta == 0.0:
        values = np.zeros_like(w)
        levels = np.array([0.0])
    else:
        values = np.where(w >= 0.0, beta, -beta)
        levels = np.array([-beta, beta])
    return QuantizationResult(values, np.ones_like(w), levels)


def twn_quantize(w, beta: float | None = None, delta: float | None = None) -> QuantizationResult:
    """Ternary quantization onto {-beta, 0, beta}.

    Calibration: delta = 0.7 * mean |w| and beta = mean of |w| over the
    elements with |w| > delta (0 if none survive). Each element then maps
    to the nearest of the three levels, midpoints (|w| = beta/2) rounding
    away from zero. The pass mask is all ones.
    """
    w = np.asarray(w, dtype=np.float64)
    _require_nonempty(w, "twn_quantize")
    if delta is None:
        delta = 0.7 * float(np.mean(np.abs(w)))
    if beta is None:
        magnitudes = np.abs(w)
        above = magnitudes > delta
        beta = float(np.mean(magnitudes[above])) if above.any() else 0.0
    if beta == 0.0:
        values = np.zeros_like(w)
        levels = np.array([0.0])
    else:
        half = beta / 2.0
        values = np.where(w >= half, beta, np.where(w <= -half, -beta, 0.0))
        levels = np.array([-beta, 0.0, beta])
    return QuantizationResult(values, np.ones_like(w), levels)


def brute_force_quantize(x: float, levels) -> float:
    """Nearest level to ``x`` by scanning the level set.

    Ties go to the larger level when x >= 0 and to the smaller level
    otherwise (round half away from zero on symmetric grids).
    """
    levels = np.asarray(levels, dtype=np.float64)
    _require_nonempty(levels, "brute_force_quantize")
    best, best_d = None, np.inf
    for q in levels:  # levels scanned in increasing order
        d = abs(x - q)
        if d < best_d or (d == best_d and x >= 0):
            best, best_d = q, d
    return float(best)


def nearest_levels(x, levels) -> np.ndarray:
    """Vectorized ``brute_force_quantize`` over an array."""
    x = np.asarray(x, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    d = np.abs(x.reshape(-1, 1) - levels.reshape(1, -1))
    first = d.argmin(axis=1)
    last = levels.size - 1 - d[:, ::-1].argmin(axis=1)
    idx = np.where(x.reshape(-1) >= 0, last, first)
    return levels[idx].reshape(x.shape)


def calibrate(w, spec: QuantizerSpec) -> Calibration:
    """Compute calibration statistics for ``spec`` from the live weights."""
    w = np.asarray(w, dtype=np.float64)
    _require_nonempty(w, "calibrate")
    if spec.kind == "minmax":
        try:
            lo, hi = minmax_levels(w, spec.bits)
        except DegenerateRangeError:
            lo, hi = _widened_range(w)
        return Calibration(x_min=lo, x_max=hi)
    if spec.kind == "sawb":
        return Calibration(clip=sawb_calibrate(w, spec.bits))
    if spec.kind == "bwn":
        return Calibration(beta=float(np.mean(np.abs(w))))
    # twn
    delta = 0.7 * float(np.mean(np.abs(w)))
    above = np.abs(w) > delta
    beta = float(np.mean(np.abs(w)[above])) if above.any() else 0.0
    return Calibration(beta=beta, delta=delta)


def freeze_calibration(w, spec: QuantizerSpec) -> QuantizerSpec:
    """Spec with calibration frozen from the current weights."""
    return replace(spec, calibration=calibrate(w, spec))


def quantize(w, spec: QuantizerSpec) -> QuantizationResult:
    """Dispatch to the kind-specific quantizer.

    Calibration is recomputed from ``w`` on every call unless the spec
    carries a frozen record (weights drift during training; exported
    models freeze).
    """
    w = np.asarray(w, dtype=np.float64)
    _require_nonempty(w, "quantize")
    cal = spec.calibration
    if cal is None:
        cal = calibrate(w, spec)
    if spec.kind == "minmax":
        return uniform_quantize(w, cal.x_min, cal.x_max, spec.bits)
    if spec.kind == "sawb":
        return sawb_quantize(w, spec.bits, cal.clip)
    if spec.kind == "bwn":
        return bwn_quantize(w, beta=cal.beta)
    return twn_quantize(w, beta=cal.beta, delta=cal.delta)


def parse_spec(text: str) -> QuantizerSpec:
    """Parse ``kind:bits`` (bits optional for bwn/twn), e.g. ``minmax:2``."""
    text = text.strip().lower()
    if ":" in text:
        kind, _, bits_text = text.partition(":")
        kind = kind.strip()
        try:
            bits = int(bits_text)
        except ValueError:
            raise ValidationError(f"bad quantizer bitwidth in {text!r}") from None
    else:
        kind = text
        if kind == "bwn":
            bits = 1
        elif kind == "twn":
            bits = 2
        else:
            raise ValidationError(f"quantizer {text!r} needs an explicit bitwidth")
    return QuantizerSpec(kind, bits)
