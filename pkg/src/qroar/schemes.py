"""Position-interpolation schemes in a single (warp, per-dimension scale) form.

Every scheme reduces to a linear position warp ``f(m) = warp_slope * m`` and a
per-pair scale ``s_i``, so the phase of pair ``i`` at position ``m`` is
``theta_i * f(m) / s_i``. The constructors below translate the usual
parameterisations (linear interpolation, NTK base stretch, YaRN ramp,
LongRoPE explicit scales) into that form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .exceptions import (InvalidDimension, InvalidRamp, InvalidScale,
                         InvalidStretch, InvalidWindow, ShapeError,
                         UnknownScheme)
from .rope import FrequencySchedule

YARN_RAMP_LOW = 1.0 / 32.0
YARN_RAMP_HIGH = 1.0


class SchemeKind(str, Enum):
    NONE = "none"
    LINEAR = "linear"
    NTK = "ntk"
    YARN = "yarn"
    LONGROPE = "longrope"


@dataclass(frozen=True, eq=False)
class PIScheme:
    """A position-interpolation scheme.

    ``per_dim_scale`` is either a scalar (same scale on every pair) or a
    vector with one entry per rotation pair.
    """

    kind: SchemeKind
    L0: int | None = None
    L: int | None = None
    per_dim_scale: np.ndarray = field(default_factory=lambda: np.array(1.0))
    warp_slope: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.array(self.per_dim_scale, dtype=np.float64)
        if s.ndim > 1:
            raise ShapeError("per_dim_scale must be a scalar or a vector")
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise InvalidScale("per-dimension scales must be positive")
        if not (self.warp_slope > 0 and math.isfinite(self.warp_slope)):
            raise InvalidScale("warp_slope must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "per_dim_scale", s)
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        object.__setattr__(self, "warp_slope", float(self.warp_slope))

    @property
    def stretch(self) -> float:
        if self.L0 is None or self.L is None:
            return 1.0
        return self.L / self.L0

    def scales(self, n_pairs: int) -> np.ndarray:
        s = self.per_dim_scale
        if s.ndim == 1 and s.size != n_pairs:
            raise ShapeError(f"scheme has {s.size} scales, schedule has {n_pairs} pairs")
        return np.broadcast_to(s, (n_pairs,))

    def warp(self, m):
        return self.warp_slope * np.asarray(m, dtype=np.float64)

    def apply(self, sched: FrequencySchedule) -> "ScaledSchedule":
        return ScaledSchedule(sched, self)

    def to_dict(self) -> dict:
        """Constructor parameters; :func:`scheme_from_dict` inverts this."""
        d = {"kind": self.kind.value}
        if self.kind in (SchemeKind.LINEAR, SchemeKind.YARN):
            d.update(L0=self.L0, L=self.L)
        d.update(self.params)
        return d


class ScaledSchedule:
    """A frequency schedule with a PI scheme applied.

    Duck-types :class:`~qroar.rope.FrequencySchedule` for rotation purposes.
    """

    def __init__(self, base_schedule: FrequencySchedule, scheme: PIScheme):
        self.base_schedule = base_schedule
        self.scheme = scheme
        eff = base_schedule.freqs / scheme.scales(base_schedule.n_pairs)
        eff.setflags(write=False)
        self.effective_freqs = eff

    @property
    def dim(self) -> int:
        return self.base_schedule.dim

    @property
    def n_pairs(self) -> int:
        return self.base_schedule.n_pairs

    def phases(self, positions) -> np.ndarray:
        return self.scheme.warp(positions)[..., None] * self.effective_freqs

    def __repr__(self):
        return f"ScaledSchedule(dim={self.dim}, kind={self.scheme.kind.value})"


def identity_scheme() -> PIScheme:
    return PIScheme(SchemeKind.NONE)


def _check_window(L0, L):
    if L0 is None or L is None or L0 < 1 or L < L0:
        raise InvalidWindow(f"need L >= L0 >= 1, got L0={L0}, L={L}")
    return int(L0), int(L)


def linear_interpolation(L0: int, L: int, representation: str = "warp") -> PIScheme:
    """Uniform position compression ``m -> m * L0 / L``.

    ``representation="frequency"`` expresses the same phases as
    ``warp_slope=1, s_i = L / L0``.
    """
    L0, L = _check_window(L0, L)
    if representation == "warp":
        return PIScheme(SchemeKind.LINEAR, L0, L, 1.0, L0 / L)
    if representation == "frequency":
        return PIScheme(SchemeKind.LINEAR, L0, L, L / L0, 1.0,
                        {"representation": "frequency"})
    raise UnknownScheme(f"unknown linear representation {representation!r}")


def ntk_scheme(sched: FrequencySchedule, alpha: float) -> PIScheme:
    """NTK-aware base stretch ``b' = b * alpha ** (d / (d - 2))``.

    With 0-based pair index ``i`` this is ``s_i = alpha ** (2 i / (d - 2))``:
    pair 0 is untouched and the lowest frequency is slowed by ``alpha``.
    """
    d = sched.dim
    if d < 4:
        raise InvalidDimension("NTK scaling needs dim >= 4")
    alpha = float(alpha)
    if not alpha > 1.0:
        raise InvalidStretch(f"alpha must be > 1, got {alpha}")
    i = np.arange(sched.n_pairs, dtype=np.float64)
    return PIScheme(SchemeKind.NTK, per_dim_scale=alpha ** (2.0 * i / (d - 2)),
                    params={"alpha": alpha})


def ntk_base(base: float, dim: int, alpha: float) -> float:
    return base * alpha ** (dim / (dim - 2))


def yarn_ramp(sched: FrequencySchedule, L0: int, ramp_low: float = YARN_RAMP_LOW,
              ramp_high: float = YARN_RAMP_HIGH) -> np.ndarray:
    """Slowdown exponents ``g_i`` in [0, 1] from wavelength ratios ``lambda_i / L0``.

    Zero up to ``ramp_low``, one from ``ramp_high``, linear in ``log lambda_i``
    in between.
    """
    if not (0 < ramp_low < ramp_high):
        raise InvalidRamp(f"need 0 < ramp_low < ramp_high, got {ramp_low}, {ramp_high}")
    ratio = sched.wavelengths / L0
    g = (np.log(ratio) - math.log(ramp_low)) / (math.log(ramp_high) - math.log(ramp_low))
    g = np.clip(g, 0.0, 1.0)
    g[ratio <= ramp_low] = 0.0
    g[ratio >= ramp_high] = 1.0
    return g


def yarn_scheme(sched: FrequencySchedule, L0: int, L: int,
                ramp_low: float = YARN_RAMP_LOW,
                ramp_high: float = YARN_RAMP_HIGH) -> PIScheme:
    """YaRN band segmentation: ``s_i = S ** g_i`` with ``S = L / L0``."""
    L0, L = _check_window(L0, L)
    g = yarn_ramp(sched, L0, ramp_low, ramp_high)
    # g == 0 must leave the frequency bit-identical, so avoid S ** 0.0 surprises
    s = np.where(g == 0.0, 1.0, (L / L0) ** g)
    return PIScheme(SchemeKind.YARN, L0, L, s,
                    params={"ramp_low": float(ramp_low), "ramp_high": float(ramp_high)})


def longrope_scheme(s) -> PIScheme:
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    if s.ndim != 1:
        raise ShapeError("LongRoPE scales must be a vector")
    if np.any(~np.isfinite(s)) or np.any(s < 1.0):
        raise InvalidScale("LongRoPE scales must all be >= 1")
    return PIScheme(SchemeKind.LONGROPE, per_dim_scale=s,
                    params={"scales": s.tolist()})


def scaled_phase(scheme: PIScheme, sched: FrequencySchedule, i: int, m) -> float:
    """Phase ``theta_i * f(m) / s_i`` of pair ``i`` at position ``m``."""
    if not 0 <= i < sched.n_pairs:
        raise ShapeError(f"pair index {i} out of range for dim {sched.dim}")
    return float(scheme.warp(m) * sched.freqs[i] / scheme.scales(sched.n_pairs)[i])


def scheme_from_dict(d: dict, sched: FrequencySchedule) -> PIScheme:
    d = dict(d)
    kind = d.pop("kind", None)
    try:
        kind = SchemeKind(kind)
    except ValueError:
        raise UnknownScheme(f"unknown scheme kind {kind!r}") from None

    def take(*required, **optional):
        missing = [k for k in required if k not in d]
        if missing:
            raise UnknownScheme(f"{kind.value} scheme missing {missing}")
        extra = set(d) - set(required) - set(optional)
        if extra:
            raise UnknownScheme(f"{kind.value} scheme has unknown keys {sorted(extra)}")
        return [d[k] for k in required] + [d.get(k, v) for k, v in optional.items()]

    if kind is SchemeKind.NONE:
        take()
        return identity_scheme()
    if kind is SchemeKind.LINEAR:
        L0, L, rep = take("L0", "L", representation="warp")
        return linear_interpolation(L0, L, rep)
    if kind is SchemeKind.NTK:
        (alpha,) = take("alpha")
        return ntk_scheme(sched, alpha)
    if kind is SchemeKind.YARN:
        L0, L, lo, hi = take("L0", "L", ramp_low=YARN_RAMP_LOW, ramp_high=YARN_RAMP_HIGH)
        return yarn_scheme(sched, L0, L, lo, hi)
    (scales,) = take("scales")
    return longrope_scheme(scales)
