"""Band-limited rescaling of W_Q / W_K searched by coordinate descent.

RoPE pairs are grouped into log-spaced frequency bands. Each band gets one
multiplicative scale ``g_b`` on its W_Q columns, and either the same scale
(shared mode) or its inverse (symmetric mode) on its W_K columns. The scales
are picked band by band from small log-spaced grids whose width shrinks for
high-frequency bands and is capped by the measured pre-activation tail
inflation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .attention import AttentionWeights, DevSet, Objective, score
from .diagnostics import DEFAULT_EPS, nearest_rank_median, tail_inflation_weight
from .exceptions import ConfigError, ShapeError
from .quant import QuantSpec
from .rope import FrequencySchedule
from .schemes import PIScheme, identity_scheme

log = logging.getLogger(__name__)

G_FLOOR = 0.5


class ScaleMode(str, Enum):
    SHARED = "shared"
    SYMMETRIC = "symmetric"


@dataclass(frozen=True)
class BandPartition:
    """Disjoint bands of pair indices, highest frequency first."""

    bands: tuple
    omega_med: tuple
    omega_min: float
    n_pairs: int

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    def band_of_pair(self) -> np.ndarray:
        out = np.empty(self.n_pairs, dtype=np.int64)
        for b, idx in enumerate(self.bands):
            out[list(idx)] = b
        return out

    def to_dict(self) -> dict:
        return {"bands": [list(map(int, b)) for b in self.bands],
                "omega_med": list(self.omega_med), "omega_min": self.omega_min}


def partition_bands(sched: FrequencySchedule, B: int) -> BandPartition:
    """Cut the frequency range into ``B`` log-equispaced bands.

    Bands left empty by an irregular schedule are dropped, which merges their
    (empty) range into the next lower-frequency band.
    """
    n = sched.n_pairs
    if isinstance(B, bool) or not isinstance(B, (int, np.integer)) or not 1 <= B <= n:
        raise ConfigError(f"number of bands must lie in [1, {n}], got {B}")
    log_f = np.log(sched.freqs)
    span = log_f[0] - log_f[-1]
    if span == 0:
        pos = np.zeros(n)
    else:
        pos = (log_f[0] - log_f) / span * B
    # a tiny nudge keeps cuts that land exactly on a pair on the lower side
    band = np.minimum(np.floor(pos + 1e-9).astype(np.int64), B - 1)
    bands = tuple(tuple(int(i) for i in np.flatnonzero(band == b))
                  for b in range(B) if np.any(band == b))
    omega_med = tuple(float(nearest_rank_median(sched.freqs[list(idx)])) for idx in bands)
    return BandPartition(bands, omega_med, float(sched.freqs.min()), n)


def gamma_bound(omega_med: float, omega_min: float, tau: float) -> float:
    """Band window half-width ``1 + tau / (1 + ln(omega_med / omega_min))``."""
    if not omega_med >= omega_min > 0:
        raise ConfigError("need omega_med >= omega_min > 0")
    if not tau > 0:
        raise ConfigError("tau must be positive")
    return 1.0 + tau / (1.0 + math.log(omega_med / omega_min))


def band_bounds(gamma: float, rho_w: float, kappa: float, g_floor: float = G_FLOOR):
    """Search interval ``[1/gamma, min(gamma, kappa/rho)]``.

    Returns ``(lo, hi, degenerate)``. When the cap falls below ``1/gamma`` the
    interval collapses to the single point ``max(kappa/rho, g_floor)``.
    """
    lo = 1.0 / gamma
    hi = min(gamma, kappa / rho_w)
    if hi < lo:
        point = max(hi, g_floor)
        return point, point, True
    return lo, hi, False


def make_grid(lo: float, hi: float, K: int) -> list:
    """``K`` log-spaced candidates over ``[lo, hi]`` with endpoints.

    If 1.0 lies inside the interval it is always a candidate: it replaces the
    interior point nearest to it in log space, so the grid keeps ``K`` points.
    """
    if lo == hi:
        return [float(lo)]
    if K < 2:
        raise ConfigError("grid needs at least two points")
    pts = [float(p) for p in np.geomspace(lo, hi, K)]
    pts[0], pts[-1] = float(lo), float(hi)
    if lo <= 1.0 <= hi:
        near = [j for j, p in enumerate(pts) if abs(math.log(p)) <= 1e-12]
        if near:
            pts[near[0]] = 1.0
        elif K > 2:
            j = 1 + int(np.argmin([abs(math.log(p)) for p in pts[1:-1]]))
            pts[j] = 1.0
        else:
            pts = sorted(pts + [1.0])
    return pts


@dataclass
class SearchConfig:
    B: int = 8
    K: int = 7
    tau: float = 0.1
    kappa: float = 1.2
    eps: float = DEFAULT_EPS
    mode: ScaleMode = ScaleMode.SYMMETRIC
    reverse_pass: bool = True
    reestimate_rho: bool = False
    seed: int = 0

    def __post_init__(self):
        self.mode = ScaleMode(self.mode)
        if self.B < 1:
            raise ConfigError("B must be >= 1")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not 1.0 <= self.kappa <= 1.3:
            raise ConfigError(f"kappa must lie in [1.0, 1.3], got {self.kappa}")
        if not 0 < self.eps < 0.5:
            raise ConfigError("eps must lie in (0, 0.5)")

    @property
    def passes(self) -> int:
        return 2 if self.reverse_pass else 1

    def to_dict(self) -> dict:
        return {"B": self.B, "K": self.K, "tau": self.tau, "kappa": self.kappa,
                "eps": self.eps, "mode": self.mode.value, "reverse_pass": self.reverse_pass,
                "reestimate_rho": self.reestimate_rho, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        extra = set(d) - set(cls().to_dict())
        if extra:
            raise ConfigError(f"unknown search keys {sorted(extra)}")
        return cls(**d)


@dataclass
class BandScales:
    g: np.ndarray
    mode: ScaleMode
    bounds: list
    grid: list
    flagged: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)
    commits: list = field(default_factory=list)
    J_baseline: float | None = None
    J_final: float | None = None
    rho_w_band: list | None = None

    def to_dict(self) -> dict:
        return {"g": [float(v) for v in self.g], "mode": ScaleMode(self.mode).value,
                "bounds": [[float(a), float(b)] for a, b in self.bounds],
                "grid": [[float(v) for v in c] for c in self.grid],
                "flagged": [int(b) for b in self.flagged],
                "J_baseline": self.J_baseline, "J_final": self.J_final,
                "rho_w_band": self.rho_w_band,
                "audit": {"evaluations": self.evaluations, "commits": self.commits}}

    @classmethod
    def from_dict(cls, d: dict) -> "BandScales":
        audit = d.get("audit", {})
        return cls(g=np.array(d["g"], dtype=np.float64), mode=ScaleMode(d["mode"]),
                   bounds=[tuple(b) for b in d["bounds"]], grid=[list(c) for c in d["grid"]],
                   flagged=list(d.get("flagged", [])),
                   evaluations=list(audit.get("evaluations", [])),
                   commits=list(audit.get("commits", [])),
                   J_baseline=d.get("J_baseline"), J_final=d.get("J_final"),
                   rho_w_band=d.get("rho_w_band"))


def column_factors(weights: AttentionWeights, partition: BandPartition, g, mode):
    if partition.n_pairs != weights.d_h // 2:
        raise ShapeError(f"partition covers {partition.n_pairs} pairs, "
                         f"weights have {weights.d_h // 2}")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (partition.n_bands,):
        raise ShapeError(f"need {partition.n_bands} band scales, got {g.shape}")
    per_col = g[partition.band_of_pair()[weights.column_pairs]]
    if ScaleMode(mode) is ScaleMode.SYMMETRIC:
        return per_col, 1.0 / per_col
    return per_col, per_col


def apply_band_scales(weights: AttentionWeights, partition: BandPartition, g,
                      mode=ScaleMode.SYMMETRIC) -> AttentionWeights:
    """Return new weights with band ``b`` columns of W_Q scaled by ``g[b]``.

    W_K columns get ``g[b]`` in shared mode and ``1 / g[b]`` in symmetric mode.
    """
    if isinstance(g, BandScales):
        g, mode = g.g, g.mode
    fq, fk = column_factors(weights, partition, g, mode)
    return weights.with_matrices(weights.w_q * fq, weights.w_k * fk)


def grid_search(evaluate, grids, reverse_pass: bool = True, start=None,
                regrid=None):
    """Coordinate descent over per-band candidate grids.

    ``evaluate(g)`` scores a full scale vector. Each band visit scores every
    candidate of its grid with the other bands held at their committed values
    and commits the best; the current value wins ties. ``regrid(b, g)`` may
    replace band ``b``'s grid right before its first visit.

    Returns ``(g, J_baseline, evaluations, commits, grids)``.
    """
    grids = [list(c) for c in grids]
    g = np.ones(len(grids)) if start is None else np.array(start, dtype=np.float64)
    J = float(evaluate(g.copy()))
    J_baseline = J
    evaluations, commits = [], []
    order = [list(range(len(grids)))]
    if reverse_pass:
        order.append(order[0][::-1])
    for p, bands in enumerate(order):
        for b in bands:
            if p == 0 and regrid is not None:
                grids[b] = list(regrid(b, g.copy()))
            trial = g.copy()
            scores = []
            for cand in grids[b]:
                trial[b] = cand
                value = float(evaluate(trial.copy()))
                scores.append(value)
                evaluations.append({"pass": p, "band": b, "g": float(cand), "J": value})
            best = int(np.argmin(scores))
            current = [j for j, c in enumerate(grids[b]) if c == g[b]]
            if current and scores[current[0]] == scores[best]:
                best = current[0]
            J_before = J
            g[b] = grids[b][best]
            J = scores[best]
            commits.append({"pass": p, "band": b, "g": float(g[b]),
                            "J_before": J_before, "J_after": J})
            log.debug("pass %d band %d -> g=%.6g J=%.6g", p, b, g[b], J)
    return g, J_baseline, evaluations, commits, grids


def band_tail_inflation(weights: AttentionWeights, partition: BandPartition,
                        h_short, h_long, eps: float) -> np.ndarray:
    """Median pre-activation tail inflation per band over W_Q and W_K columns."""
    band_of_col = partition.band_of_pair()[weights.column_pairs]
    report = tail_inflation_weight(np.hstack([weights.w_q, weights.w_k]), h_short, h_long,
                                   eps, np.concatenate([band_of_col, band_of_col]))
    return report.rho_w_band


def _bounds_and_grid(partition, b, rho_b, cfg):
    gamma = gamma_bound(partition.omega_med[b], partition.omega_min, cfg.tau)
    lo, hi, degenerate = band_bounds(gamma, rho_b, cfg.kappa)
    return (lo, hi), make_grid(lo, hi, cfg.K), degenerate


def coordinate_search(weights: AttentionWeights, partition: BandPartition,
                      quant: QuantSpec | None, scheme: PIScheme, objective: Objective,
                      devset: DevSet, cfg: SearchConfig | None = None,
                      threads: int = 1) -> BandScales:
    """Search per-band scales minimizing the length-weighted objective.

    Every candidate is applied to the full-precision weights, then quantized
    with ``quant`` and scored.
    """
    cfg = cfg or SearchConfig()
    if devset is None or len(devset) == 0:
        raise ConfigError("empty dev set")
    L0 = scheme.L0 if scheme.L0 is not None else min(devset.lengths)
    h_short, h_long = devset.tail_samples(L0)
    rho = band_tail_inflation(weights, partition, h_short, h_long, cfg.eps)

    bounds, grids, flagged = [], [], []
    for b in range(partition.n_bands):
        bnd, grid, degenerate = _bounds_and_grid(partition, b, rho[b], cfg)
        bounds.append(bnd)
        grids.append(grid)
        if degenerate:
            flagged.append(b)
            log.warning("band %d: tail inflation %.4g exceeds the cap; forcing g=%.4g",
                        b, rho[b], grid[0])

    def evaluate(g):
        scaled = apply_band_scales(weights, partition, g, cfg.mode)
        return score(objective, scaled, scheme, quant, devset, threads=threads)[0]

    regrid = None
    if cfg.reestimate_rho:
        def regrid(b, g):
            scaled = apply_band_scales(weights, partition, g, cfg.mode)
            rho[b] = band_tail_inflation(scaled, partition, h_short, h_long, cfg.eps)[b]
            bounds[b], grid, degenerate = _bounds_and_grid(partition, b, rho[b], cfg)
            if degenerate and b not in flagged:
                flagged.append(b)
            return grid

    g, J0, evaluations, commits, grids = grid_search(evaluate, grids, cfg.reverse_pass,
                                                     regrid=regrid)
    return BandScales(g=g, mode=cfg.mode, bounds=bounds, grid=grids, flagged=sorted(flagged),
                      evaluations=evaluations, commits=commits, J_baseline=J0,
                      J_final=commits[-1]["J_after"] if commits else J0,
                      rho_w_band=[float(r) for r in rho])


class BandRescaler(BaseEstimator):
    """Estimator wrapper around :func:`coordinate_search`.

    ``fit(weights, devset)`` searches band scales for the quantized model;
    ``transform(weights)`` returns the rescaled full-precision weights, ready
    to be quantized and deployed.

    Parameters
    ----------
    scheme : PIScheme
        Position interpolation applied at inference.
    bits, group_size : quantizer settings for the weights.
    n_bands, grid_size, tau, kappa, eps, mode, reverse_pass, reestimate_rho :
        Search settings, see :class:`SearchConfig`.
    objective : {"logit_mse", "attn_kl"}
    threads : int
        Worker cap for per-length scoring; results do not depend on it.
    """

    def __init__(self, scheme=None, bits=4, group_size=128, n_bands=8, grid_size=7,
                 tau=0.1, kappa=1.2, eps=DEFAULT_EPS, mode="symmetric", reverse_pass=True,
                 reestimate_rho=False, objective="logit_mse", threads=1):
        self.scheme = scheme
        self.bits = bits
        self.group_size = group_size
        self.n_bands = n_bands
        self.grid_size = grid_size
        self.tau = tau
        self.kappa = kappa
        self.eps = eps
        self.mode = mode
        self.reverse_pass = reverse_pass
        self.reestimate_rho = reestimate_rho
        self.objective = objective
        self.threads = threads

    def _config(self):
        return SearchConfig(B=self.n_bands, K=self.grid_size, tau=self.tau, kappa=self.kappa,
                            eps=self.eps, mode=self.mode, reverse_pass=self.reverse_pass,
                            reestimate_rho=self.reestimate_rho)

    def fit(self, X: AttentionWeights, y: DevSet = None):
        if not isinstance(X, AttentionWeights):
            raise ShapeError("BandRescaler.fit expects AttentionWeights")
        if y is None:
            raise ConfigError("BandRescaler.fit needs a dev set")
        scheme = self.scheme if self.scheme is not None else identity_scheme()
        self.quant_ = QuantSpec(bits=self.bits, group_size=self.group_size)
        self.partition_ = partition_bands(X.schedule(), self.n_bands)
        self.objective_ = Objective(self.objective, X, scheme, y)
        self.scales_ = coordinate_search(X, self.partition_, self.quant_, scheme,
                                         self.objective_, y, self._config(), self.threads)
        self.g_ = self.scales_.g
        return self

    def transform(self, X: AttentionWeights) -> AttentionWeights:
        check_is_fitted(self, "scales_")
        return apply_band_scales(X, self.partition_, self.scales_)

    def fit_transform(self, X, y=None):
        return self.fit(X, y).transform(X)
