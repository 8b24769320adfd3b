"""Uniform quantizers: grouped min-max (RTN) and clipped mid-rise.

Groups are formed along the last axis of a tensor. When ``group_size`` does
not divide that axis, the trailing group is shorter. ``group_size=None``
quantizes the whole tensor as one group.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInflation, InvalidSpec, ShapeError


class QuantMode(str, Enum):
    MINMAX = "minmax"
    MIDRISE = "midrise"


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    group_size: int | None = 128
    mode: QuantMode = QuantMode.MINMAX
    clip: float | tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", QuantMode(self.mode))
        if isinstance(self.bits, bool) or not isinstance(self.bits, (int, np.integer)):
            raise InvalidSpec(f"bits must be an integer, got {self.bits!r}")
        if not 2 <= self.bits <= 16:
            raise InvalidSpec(f"bits must lie in [2, 16], got {self.bits}")
        if self.group_size is not None and self.group_size < 1:
            raise InvalidSpec("group_size must be positive or None")
        if self.clip is not None:
            clip = np.asarray(self.clip, dtype=np.float64)
            if np.any(~(clip > 0)):
                raise InvalidSpec("clip values must be positive")
            if clip.ndim:
                object.__setattr__(self, "clip", tuple(clip.tolist()))
            else:
                object.__setattr__(self, "clip", float(clip))
        if self.mode is QuantMode.MIDRISE and self.clip is None:
            raise InvalidSpec("mid-rise quantization needs a clip range")

    @property
    def levels(self) -> int:
        return 2 ** self.bits - 1

    def to_dict(self) -> dict:
        clip = list(self.clip) if isinstance(self.clip, tuple) else self.clip
        return {"bits": int(self.bits), "group_size": self.group_size,
                "mode": self.mode.value, "clip": clip}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        extra = set(d) - {"bits", "group_size", "mode", "clip"}
        if extra:
            raise InvalidSpec(f"unknown quant keys {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Integer codes with per-group step and offset.

    ``scales`` and ``offsets`` have shape ``shape[:-1] + (n_groups,)`` for
    min-max tensors. Mid-rise tensors carry a step that broadcasts against the
    values and zero offsets.
    """

    codes: np.ndarray
    scales: np.ndarray
    offsets: np.ndarray
    mode: QuantMode
    bits: int
    group_size: int | None
    reconstructed: np.ndarray
    error: np.ndarray

    def dequantize(self) -> np.ndarray:
        if self.mode is QuantMode.MIDRISE:
            return (self.codes + 0.5) * self.scales
        return _expand(self.offsets, self.group_size, self.codes.shape) + \
            self.codes * _expand(self.scales, self.group_size, self.codes.shape)


@dataclass(frozen=True)
class ClipStats:
    p_clip: float
    mse: float
    mse_granular: float
    mse_overload: float

    @property
    def mse_model(self) -> float:
        """Granular-plus-overload prediction of the measured MSE."""
        return (1.0 - self.p_clip) * self.mse_granular + self.mse_overload


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _group_view(w: np.ndarray, group_size: int | None):
    """Reshape to ``(..., n_groups, g)``, padding a short tail group with its last value."""
    if group_size is None:
        return w.reshape(1, -1), w.size
    n = w.shape[-1]
    g = min(group_size, n)
    n_groups = -(-n // g)
    pad = n_groups * g - n
    if pad:
        w = np.concatenate([w, np.repeat(w[..., -1:], pad, axis=-1)], axis=-1)
    return w.reshape(w.shape[:-1] + (n_groups, g)), g


def _expand(per_group: np.ndarray, group_size: int | None, shape) -> np.ndarray:
    if group_size is None:
        return np.broadcast_to(per_group.reshape(()), shape)
    n = shape[-1]
    g = min(group_size, n)
    return np.repeat(per_group, g, axis=-1)[..., :n]


def _as_tensor(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ShapeError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(w)):
        raise ShapeError("tensor contains non-finite values")
    return np.atleast_1d(w)


def minmax_ranges(w, spec: QuantSpec):
    """Per-group ``(min, max)`` with shape ``w.shape[:-1] + (n_groups,)``."""
    w = _as_tensor(w)
    groups, _ = _group_view(w, spec.group_size)
    lo, hi = groups.min(axis=-1), groups.max(axis=-1)
    if spec.group_size is None:
        lo, hi = lo.reshape(()), hi.reshape(())
    return lo, hi


def quantize_with_ranges(w, lo, hi, spec: QuantSpec) -> QuantizedTensor:
    """Min-max quantization of ``w`` against given per-group ranges.

    Values outside ``[lo, hi]`` saturate at the end codes. A degenerate group
    (``hi == lo``) gets step 1 and offset ``lo`` so it reconstructs exactly.
    """
    w = _as_tensor(w)
    levels = spec.levels
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = hi - lo
    degenerate = span <= 0
    scales = np.where(degenerate, 1.0, span / levels)
    lo_e = _expand(lo, spec.group_size, w.shape)
    span_e = _expand(np.where(degenerate, 1.0, span), spec.group_size, w.shape)
    codes = round_half_away((w - lo_e) / span_e * levels)
    codes = np.clip(codes, 0, levels)
    codes[_expand(degenerate, spec.group_size, w.shape)] = 0
    codes = codes.astype(np.int32)
    qt_scales = np.array(scales)
    recon = lo_e + codes * _expand(qt_scales, spec.group_size, w.shape)
    return QuantizedTensor(codes=codes, scales=qt_scales, offsets=lo.copy(),
                           mode=QuantMode.MINMAX, bits=spec.bits,
                           group_size=spec.group_size, reconstructed=recon,
                           error=recon - w)


def quantize_minmax(w, spec: QuantSpec, prescale=None) -> QuantizedTensor:
    """Grouped min-max RTN: ``round((w - min) / (max - min) * (2^b - 1))``.

    ``prescale`` is an optional per-column vector (last axis) applied before
    quantization and divided out of the reconstruction, so externally computed
    activation-aware scales can be ingested.
    """
    w = _as_tensor(w)
    if prescale is not None:
        prescale = np.asarray(prescale, dtype=np.float64)
        if prescale.shape != w.shape[-1:] or np.any(~(prescale > 0)):
            raise ShapeError("prescale must be a positive vector over the last axis")
        qt = quantize_minmax(w * prescale, spec)
        recon = qt.reconstructed / prescale
        return QuantizedTensor(qt.codes, qt.scales, qt.offsets, qt.mode, qt.bits,
                               qt.group_size, recon, recon - w)
    lo, hi = minmax_ranges(w, spec)
    return quantize_with_ranges(w, lo, hi, spec)


def midrise_step(clip, bits: int):
    """Step such that the outermost reconstruction levels sit at ``+-clip``."""
    return 2.0 * np.asarray(clip, dtype=np.float64) / (2 ** bits - 1)


def quantize_midrise(x, delta, clip, bits: int):
    """Clip to ``[-clip, clip]`` and quantize to levels ``(k + 1/2) * delta``.

    ``delta=None`` uses :func:`midrise_step`. ``clip`` and ``delta`` broadcast
    against ``x`` (per-channel along the last axis).

    Returns
    -------
    qt : QuantizedTensor
    stats : ClipStats
        Empirical clipping probability and the decomposed mean squared error.
    """
    x = _as_tensor(x)
    clip = np.asarray(clip, dtype=np.float64)
    if np.any(~(clip > 0)):
        raise InvalidSpec("clip must be positive")
    delta = midrise_step(clip, bits) if delta is None else np.asarray(delta, dtype=np.float64)
    if np.any(~(delta > 0)):
        raise InvalidSpec("step must be positive")
    half = 2 ** (bits - 1)
    clipped = np.clip(x, -clip, clip)
    codes = np.clip(np.floor(clipped / delta), -half, half - 1).astype(np.int32)
    recon = (codes + 0.5) * delta
    err = recon - x
    over = np.abs(x) > clip
    overload = np.where(over, np.abs(x) - clip, 0.0)
    stats = ClipStats(
        p_clip=float(over.mean()),
        mse=float(np.mean(err ** 2)),
        mse_granular=float(np.mean(np.broadcast_to(delta, x.shape) ** 2) / 12.0),
        mse_overload=float(np.mean(overload ** 2)),
    )
    qt = QuantizedTensor(codes=codes, scales=np.array(delta), offsets=np.zeros_like(delta),
                         mode=QuantMode.MIDRISE, bits=bits, group_size=None,
                         reconstructed=recon, error=err)
    return qt, stats


def rescale_clips(clip0, rho, bits: int):
    """Scale clip ranges by tail inflation and recompute the mid-rise step."""
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(~(rho > 0)):
        raise InvalidInflation("inflation factors must be positive")
    clip_new = rho * np.asarray(clip0, dtype=np.float64)
    return clip_new, midrise_step(clip_new, bits)


def spectral_norm(a, tol: float = 1e-6, max_iter: int = 200, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``a^T a``."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("spectral_norm expects a matrix")
    if not np.any(a):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = a.T @ (a @ v)
        lam = float(np.linalg.norm(u))
        if lam == 0.0:
            return 0.0
        v = u / lam
        new_sigma = float(np.sqrt(lam))
        # per-step change understates the remaining error when the gap is small
        if abs(new_sigma - sigma) <= 1e-3 * tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(np.linalg.norm(a @ v))


def weight_error(w, spec: QuantSpec):
    """Quantization error ``E = dequant(quant(W)) - W`` and its spectral norm."""
    qt = quantize_minmax(w, spec)
    err = qt.error
    mat = err.reshape(-1, err.shape[-1]) if err.ndim != 2 else err
    return err, spectral_norm(mat)


class RTNQuantizer(TransformerMixin, BaseEstimator):
    """Round-to-nearest min-max quantizer with an estimator interface.

    ``fit`` records the per-group ranges of the calibration tensor;
    ``transform`` quantizes a tensor of the same shape against those ranges
    and returns the reconstruction. ``fit_transform`` on a weight matrix is
    plain RTN.

    Parameters
    ----------
    bits : int, default=4
    group_size : int or None, default=128
        Group length along the last axis; None for one group per tensor.
    """

    def __init__(self, bits=4, group_size=128):
        self.bits = bits
        self.group_size = group_size

    def _spec(self):
        return QuantSpec(bits=self.bits, group_size=self.group_size)

    def fit(self, X, y=None):
        X = _as_tensor(X)
        self.spec_ = self._spec()
        self.range_min_, self.range_max_ = minmax_ranges(X, self.spec_)
        self.shape_ = X.shape
        return self

    def quantize(self, X) -> QuantizedTensor:
        check_is_fitted(self, "spec_")
        X = _as_tensor(X)
        if X.shape != self.shape_:
            raise ShapeError(f"fitted on shape {self.shape_}, got {X.shape}")
        return quantize_with_ranges(X, self.range_min_, self.range_max_, self.spec_)

    def transform(self, X):
        return self.quantize(X).reconstructed
