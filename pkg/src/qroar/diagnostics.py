"""Phase, tail-inflation and logit-error diagnostics for interpolated RoPE models."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateQuantile, InvalidSpec, SampleSizeError, ShapeError
from .quant import QuantMode, QuantSpec, midrise_step, quantize_midrise
from .rope import apply_rotation
from .schemes import PIScheme

DEFAULT_EPS = 1e-3
N_POSITION_BUCKETS = 16


def tail_quantile(x, q: float, axis=0):
    """Nearest-rank (type 1) quantile."""
    return np.quantile(x, q, axis=axis, method="inverted_cdf")


def nearest_rank_median(x, axis=0):
    """Median taking the lower of the two middle values for even counts."""
    return tail_quantile(x, 0.5, axis=axis)


def min_samples(eps: float) -> int:
    return int(math.ceil(round(10.0 / eps, 6)))


def _check_eps(eps):
    if not 0.0 < eps < 0.5:
        raise InvalidSpec(f"eps must lie in (0, 0.5), got {eps}")


def _check_count(n, eps, what):
    need = min_samples(eps)
    if n < need:
        raise SampleSizeError(
            f"{what} has {n} samples; eps={eps:g} needs at least {need}. "
            "Generate more calibration samples or raise eps.")


def _pair_index(sched, i):
    if i is None:
        return slice(None)
    if not 0 <= i < sched.n_pairs:
        raise ShapeError(f"pair index {i} out of range for dim {sched.dim}")
    return i


def phase_deviation(scheme: PIScheme, sched, i, D, D0):
    """Phase offset from the training regime, ``theta_i * (f(D) / s_i - D0)``.

    ``i=None`` returns the vector over all pairs.
    """
    if D < 0 or D0 < 0:
        raise ShapeError("displacements must be non-negative")
    idx = _pair_index(sched, i)
    theta = sched.freqs[idx]
    s = scheme.scales(sched.n_pairs)[idx]
    return theta * (scheme.warp(D) / s - D0)


def interpolation_pressure(scheme: PIScheme, sched, i, D, method: str = "analytic",
                           rel_step: float = 1e-5, D0: float = 0.0):
    """Sensitivity ``|d eps_i / d s_i| = theta_i * f(D) / s_i**2``.

    ``method="fd"`` differentiates the phase deviation numerically with a
    central difference of step ``rel_step * s_i``.
    """
    if D < 0:
        raise ShapeError("displacement must be non-negative")
    idx = _pair_index(sched, i)
    theta = sched.freqs[idx]
    s = scheme.scales(sched.n_pairs)[idx]
    fD = scheme.warp(D)
    if method == "analytic":
        return theta * fD / s ** 2
    if method == "fd":
        h = rel_step * s
        upper = theta * (fD / (s + h) - D0)
        lower = theta * (fD / (s - h) - D0)
        return np.abs((upper - lower) / (2 * h))
    raise ValueError(f"unknown method {method!r}")


@dataclass
class TailInflationReport:
    quantile_eps: float
    rho_w: np.ndarray
    rho_w_band: np.ndarray | None
    sample_counts: tuple
    rho_a: np.ndarray | None = None


def tail_inflation_weight(w_cols, h_short, h_long, eps: float = DEFAULT_EPS,
                          channel_band=None) -> TailInflationReport:
    """Pre-activation tail growth per output channel.

    Parameters
    ----------
    w_cols : ndarray of shape (d_model, n_channels)
        Projection matrix; channel ``j`` is ``h @ w_cols[:, j]``.
    h_short, h_long : ndarray of shape (n, d_model)
    channel_band : ndarray of int, optional
        Band id per channel. When given, per-band medians are reported.
    """
    _check_eps(eps)
    w = np.asarray(w_cols, dtype=np.float64)
    h_short = np.asarray(h_short, dtype=np.float64)
    h_long = np.asarray(h_long, dtype=np.float64)
    if h_short.shape[-1] != w.shape[0] or h_long.shape[-1] != w.shape[0]:
        raise ShapeError("hidden-state width does not match weight rows")
    _check_count(len(h_short), eps, "short-context sample set")
    _check_count(len(h_long), eps, "long-context sample set")
    q_short = tail_quantile(np.abs(h_short @ w), 1 - eps)
    q_long = tail_quantile(np.abs(h_long @ w), 1 - eps)
    if np.any(q_short <= 0):
        raise DegenerateQuantile("short-context tail quantile is zero for some channel")
    rho = q_long / q_short
    band_rho = None
    if channel_band is not None:
        channel_band = np.asarray(channel_band)
        band_rho = np.array([nearest_rank_median(rho[channel_band == b])
                             for b in range(int(channel_band.max()) + 1)])
    return TailInflationReport(eps, rho, band_rho, (len(h_short), len(h_long)))


def _pair_inf_norm_quantile(u, phases, eps):
    # u: (n, P, 2); phases: (n_pos, P) -> (P, n_pos)
    flat = u.reshape(u.shape[0], -1)
    out = np.empty((u.shape[1], len(phases)))
    for j, ph in enumerate(phases):
        z = apply_rotation(flat, ph).reshape(u.shape)
        out[:, j] = tail_quantile(np.abs(z).max(axis=-1), 1 - eps)
    return out


def tail_inflation_activation(u_pairs, scheme: PIScheme, sched, positions,
                              eps: float = DEFAULT_EPS, u_long=None,
                              pairing: str = "same") -> np.ndarray:
    """Axis-aligned amplitude growth of rotated pairs, shape ``(n_pairs, n_positions)``.

    The numerator rotates ``u_long`` (default ``u_pairs``) by the scaled phase
    at ``m``; the denominator rotates ``u_pairs`` by the unscaled phase. With
    ``pairing="warped"`` the denominator uses the warped position instead of
    ``m``.
    """
    _check_eps(eps)
    u = np.asarray(u_pairs, dtype=np.float64)
    ul = u if u_long is None else np.asarray(u_long, dtype=np.float64)
    for arr in (u, ul):
        if arr.ndim != 3 or arr.shape[1:] != (sched.n_pairs, 2):
            raise ShapeError(f"pair samples must have shape (n, {sched.n_pairs}, 2)")
    _check_count(len(u), eps, "short-branch pair samples")
    _check_count(len(ul), eps, "long-branch pair samples")
    m = np.atleast_1d(np.asarray(positions, dtype=np.float64))
    scaled = scheme.apply(sched)
    if pairing == "same":
        base_pos = m
    elif pairing == "warped":
        base_pos = scheme.warp(m)
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    num = _pair_inf_norm_quantile(ul, scaled.phases(m), eps)
    den = _pair_inf_norm_quantile(u, sched.phases(base_pos), eps)
    if np.any(den <= 0):
        raise DegenerateQuantile("unscaled tail quantile is zero")
    return num / den


@dataclass
class LogitErrorReport:
    bound: np.ndarray
    actual: np.ndarray
    components: tuple = field(default=())
    eta: np.ndarray | None = None


def logit_error_bound(q, k, e_q, e_k) -> LogitErrorReport:
    """Compare the actual logit perturbation with its triangle-inequality bound.

    Inputs broadcast over leading axes; the last axis is the head dimension.
    """
    q, k, e_q, e_k = (np.asarray(a, dtype=np.float64) for a in (q, k, e_q, e_k))
    if not (q.shape[-1] == k.shape[-1] == e_q.shape[-1] == e_k.shape[-1]):
        raise ShapeError("q, k and their errors must share the last dimension")
    if q.shape != e_q.shape or k.shape != e_k.shape:
        raise ShapeError("error vectors must match their signals")
    nq, nk = np.linalg.norm(q, axis=-1), np.linalg.norm(k, axis=-1)
    neq, nek = np.linalg.norm(e_q, axis=-1), np.linalg.norm(e_k, axis=-1)
    comps = (neq * nk, nek * nq, neq * nek)
    actual = np.abs(np.sum((q + e_q) * (k + e_k), axis=-1) - np.sum(q * k, axis=-1))
    return LogitErrorReport(bound=comps[0] + comps[1] + comps[2], actual=actual,
                            components=comps)


def eta_factor(pair_samples, scheme: PIScheme, sched, positions, quant: QuantSpec) -> np.ndarray:
    """Measured rotated-pair quantization MSE over ``delta**2 / 6``.

    ``quant`` must be a mid-rise spec; its ``clip`` is a scalar or one value
    per pair. Returns shape ``(n_pairs, n_positions)``.
    """
    if quant is None or quant.mode is not QuantMode.MIDRISE:
        raise InvalidSpec("eta needs a mid-rise activation quantizer")
    clip = np.broadcast_to(np.asarray(quant.clip, dtype=np.float64), (sched.n_pairs,))
    delta = midrise_step(clip, quant.bits)
    if np.any(delta <= 0):
        raise InvalidSpec("zero quantization step")
    u = np.asarray(pair_samples, dtype=np.float64)
    if u.ndim != 3 or u.shape[1:] != (sched.n_pairs, 2):
        raise ShapeError(f"pair samples must have shape (n, {sched.n_pairs}, 2)")
    m = np.atleast_1d(np.asarray(positions, dtype=np.float64))
    phases = scheme.apply(sched).phases(m)
    flat = u.reshape(len(u), -1)
    clip_c = np.repeat(clip, 2)
    delta_c = np.repeat(delta, 2)
    eta = np.empty((sched.n_pairs, len(m)))
    for j, ph in enumerate(phases):
        z = apply_rotation(flat, ph)
        qt, _ = quantize_midrise(z, delta_c, clip_c, quant.bits)
        pair_mse = (qt.error ** 2).reshape(u.shape).sum(axis=-1).mean(axis=0)
        eta[:, j] = pair_mse / (delta ** 2 / 6.0)
    return eta


def position_buckets(positions, n_buckets: int = N_POSITION_BUCKETS) -> np.ndarray:
    """Bucket index per position over log-spaced ranges of ``1 + m``."""
    m = np.asarray(positions, dtype=np.float64)
    hi = max(float(m.max()), 1.0)
    edges = np.geomspace(1.0, hi + 1.0, n_buckets + 1)
    return np.clip(np.searchsorted(edges, m + 1.0, side="right") - 1, 0, n_buckets - 1)


def bucket_mean(values, buckets, n_buckets: int = N_POSITION_BUCKETS) -> np.ndarray:
    """Average the last axis of ``values`` within each bucket (NaN for empty)."""
    values = np.asarray(values, dtype=np.float64)
    out = np.full(values.shape[:-1] + (n_buckets,), np.nan)
    for b in range(n_buckets):
        sel = buckets == b
        if sel.any():
            out[..., b] = values[..., sel].mean(axis=-1)
    return out
