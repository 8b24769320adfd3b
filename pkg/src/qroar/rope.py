"""Rotary position embeddings: frequency schedules and pairwise rotations.

Vectors are laid out with adjacent coordinates ``(x[2i], x[2i+1])`` forming
the i-th rotation pair. All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidBase, InvalidDimension, ShapeError

DEFAULT_BASE = 10000.0


@dataclass(frozen=True, eq=False)
class FrequencySchedule:
    """Per-pair rotation frequencies for a head of dimension ``dim``.

    Parameters
    ----------
    dim : int
        Even head dimension.
    base : float or None
        RoPE base. ``None`` when the frequencies were injected directly
        (see :meth:`from_freqs`).
    freqs : ndarray of shape (dim // 2,)
        Strictly decreasing positive frequencies.
    """

    dim: int
    base: float | None
    freqs: np.ndarray = field(repr=False)

    def __post_init__(self):
        freqs = np.array(self.freqs, dtype=np.float64)
        freqs.setflags(write=False)
        object.__setattr__(self, "freqs", freqs)

    @classmethod
    def from_freqs(cls, freqs) -> "FrequencySchedule":
        freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
        if freqs.ndim != 1 or freqs.size == 0:
            raise InvalidDimension("freqs must be a non-empty vector")
        if np.any(freqs <= 0) or not np.all(np.isfinite(freqs)):
            raise InvalidBase("frequencies must be finite and positive")
        if freqs.size > 1 and np.any(np.diff(freqs) >= 0):
            raise InvalidBase("frequencies must be strictly decreasing")
        return cls(dim=2 * freqs.size, base=None, freqs=freqs)

    @property
    def n_pairs(self) -> int:
        return self.dim // 2

    @property
    def wavelengths(self) -> np.ndarray:
        return 2.0 * np.pi / self.freqs

    def phases(self, positions) -> np.ndarray:
        """Rotation angles ``positions * freqs`` with shape ``positions.shape + (dim/2,)``."""
        p = np.asarray(positions, dtype=np.float64)
        return p[..., None] * self.freqs

    def __eq__(self, other):
        if not isinstance(other, FrequencySchedule):
            return NotImplemented
        return (self.dim == other.dim and self.base == other.base
                and np.array_equal(self.freqs, other.freqs))

    __hash__ = None


def make_schedule(dim: int, base: float = DEFAULT_BASE) -> FrequencySchedule:
    """Standard schedule ``freqs[i] = base ** (-2 i / dim)``."""
    if isinstance(dim, bool) or not isinstance(dim, (int, np.integer)):
        raise InvalidDimension(f"dim must be an integer, got {dim!r}")
    if dim < 2 or dim % 2:
        raise InvalidDimension(f"dim must be even and >= 2, got {dim}")
    base = float(base)
    if not np.isfinite(base) or base <= 1.0:
        raise InvalidBase(f"base must be > 1, got {base}")
    i = np.arange(dim // 2, dtype=np.float64)
    return FrequencySchedule(dim=int(dim), base=base, freqs=base ** (-2.0 * i / dim))


def _check_positions(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ShapeError("positions must be finite and non-negative")
    return p


def apply_rotation(x, angles) -> np.ndarray:
    """Rotate every pair of ``x`` by the matching entry of ``angles``.

    ``angles`` has shape ``(..., dim/2)`` and broadcasts against the pair view
    of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    if x.shape[-1] % 2 or angles.shape[-1] != x.shape[-1] // 2:
        raise ShapeError(f"cannot rotate vector of length {x.shape[-1]} "
                         f"with {angles.shape[-1]} angles")
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, angles.shape[:-1] + (x.shape[-1],)))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rotate(x, p, sched) -> np.ndarray:
    """Apply ``R(p) x``.

    Parameters
    ----------
    x : array_like of shape (..., dim)
    p : float or array_like broadcastable to ``x.shape[:-1]``
    sched : FrequencySchedule or ScaledSchedule
        Anything exposing ``dim`` and ``phases(positions)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (sched.dim,):
        raise ShapeError(f"expected trailing dimension {sched.dim}, got {x.shape}")
    return apply_rotation(x, sched.phases(_check_positions(p)))


def relative_rotation(p, p_prime, sched) -> np.ndarray:
    """Per-pair angles of ``R(p)^T R(p')``, i.e. ``(p' - p) * freqs``."""
    p = _check_positions(p)
    p_prime = _check_positions(p_prime)
    return sched.phases(p_prime) - sched.phases(p)


def rotation_matrix(p, sched) -> np.ndarray:
    """Dense block-diagonal ``R(p)``; meant for tests and small dims."""
    return rotate(np.eye(sched.dim), p, sched).T
