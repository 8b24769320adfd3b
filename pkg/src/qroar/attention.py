"""Toy multi-head attention used to score quantized, interpolated RoPE models.

Projection matrices are stored as ``(d_model, n_heads * d_h)`` so that
``q = h @ W_Q``. Column ``j`` belongs to head ``j // d_h`` and feeds rotation
pair ``(j % d_h) // 2``. Quantization groups run along the column axis.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.special import log_softmax

from .exceptions import ConfigError, ReferenceMismatch, ShapeError
from .quant import QuantSpec, quantize_minmax
from .rope import DEFAULT_BASE, make_schedule, rotate
from .schemes import PIScheme

N_QUERIES = 32


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    n_heads: int
    d_h: int
    rope_base: float = DEFAULT_BASE

    def __post_init__(self):
        w_q, w_k = _frozen(self.w_q), _frozen(self.w_k)
        if self.d_h % 2 or self.d_h < 2:
            raise ShapeError(f"head dimension must be even, got {self.d_h}")
        width = self.n_heads * self.d_h
        if w_q.ndim != 2 or w_q.shape != w_k.shape or w_q.shape[1] != width:
            raise ShapeError(f"W_Q and W_K must both be (d_model, {width}), "
                             f"got {w_q.shape} and {w_k.shape}")
        object.__setattr__(self, "w_q", w_q)
        object.__setattr__(self, "w_k", w_k)

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def column_pairs(self) -> np.ndarray:
        """Rotation-pair index of every projection column."""
        return (np.arange(self.n_heads * self.d_h) % self.d_h) // 2

    def schedule(self):
        return make_schedule(self.d_h, self.rope_base)

    def with_matrices(self, w_q, w_k) -> "AttentionWeights":
        return replace(self, w_q=w_q, w_k=w_k)

    def quantized(self, quant: QuantSpec | None) -> "AttentionWeights":
        if quant is None:
            return self
        return self.with_matrices(quantize_minmax(self.w_q, quant).reconstructed,
                                  quantize_minmax(self.w_k, quant).reconstructed)


def random_weights(d_model: int = 256, n_heads: int = 4, d_h: int = 64,
                   rope_base: float = DEFAULT_BASE, seed: int = 0,
                   column_spread: float = 0.5) -> AttentionWeights:
    """Gaussian projections with log-normal per-column gains.

    The gains give different rotation pairs different magnitudes, which is
    what makes shared quantization groups interact with band rescaling.
    """
    rng = np.random.default_rng(seed)
    width = n_heads * d_h
    mats = []
    for _ in range(2):
        w = rng.standard_normal((d_model, width)) / math.sqrt(d_model)
        mats.append(w * np.exp(column_spread * rng.standard_normal(width)))
    return AttentionWeights(mats[0], mats[1], n_heads, d_h, rope_base)


@dataclass(frozen=True, eq=False)
class HiddenStates:
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2 or len(v) < 1:
            raise ShapeError("hidden states must be a non-empty (length, d_model) array")
        if not np.all(np.isfinite(v)):
            raise ShapeError("hidden states contain non-finite values")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


def outlier_channels(d_model: int, outlier_frac: float, channel_seed: int) -> np.ndarray:
    n_out = int(math.floor(outlier_frac * d_model))
    rng = np.random.default_rng([channel_seed, 1])
    return np.sort(rng.choice(d_model, size=n_out, replace=False))


def gen_hidden_states(length: int, d_model: int, outlier_frac: float = 0.05,
                      outlier_gain: float = 5.0, tail_df: float = 3.0, seed: int = 0,
                      channel_seed: int | None = None) -> HiddenStates:
    """Synthetic hidden states: Gaussian channels plus heavy-tailed outlier channels.

    The outlier channel subset depends only on ``channel_seed`` (default
    ``seed``), so sequences of different lengths can share the same outliers.
    """
    if length < 1 or d_model < 1:
        raise ConfigError("length and d_model must be positive")
    if not 0.0 <= outlier_frac < 1.0:
        raise ConfigError(f"outlier_frac must lie in [0, 1), got {outlier_frac}")
    if outlier_gain < 1.0:
        raise ConfigError(f"outlier_gain must be >= 1, got {outlier_gain}")
    if tail_df <= 0:
        raise ConfigError("tail_df must be positive")
    channel_seed = seed if channel_seed is None else channel_seed
    cols = outlier_channels(d_model, outlier_frac, channel_seed)
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((length, d_model))
    if cols.size:
        h[:, cols] = outlier_gain * rng.standard_t(tail_df, size=(length, cols.size))
    meta = {"seed": seed, "channel_seed": channel_seed, "outlier_frac": outlier_frac,
            "outlier_gain": outlier_gain, "tail_df": tail_df}
    return HiddenStates(h, meta)


class DevSet:
    """Scoring sequences grouped by length, with normalized length weights.

    Parameters
    ----------
    items : list of (HiddenStates, int)
        Each sequence with its evaluation length (``len(states) >= length``).
    weights : dict or None
        Unnormalized weight per length; ``None`` weights proportionally to
        length.
    short, long : ndarray, optional
        Hidden-state samples used for tail-inflation estimates.
    """

    def __init__(self, items, weights=None, short=None, long=None):
        self.items = [(h, int(ell)) for h, ell in items]
        for h, ell in self.items:
            if ell < 1 or len(h) < ell:
                raise ConfigError(f"sequence of {len(h)} states cannot cover length {ell}")
        self.lengths = sorted({ell for _, ell in self.items})
        if weights is None:
            raw = {ell: float(ell) for ell in self.lengths}
        else:
            raw = {int(k): float(v) for k, v in dict(weights).items()}
            if set(raw) != set(self.lengths):
                raise ConfigError("length weights must cover exactly the dev-set lengths")
        if any(v <= 0 for v in raw.values()):
            raise ConfigError("length weights must be positive")
        total = math.fsum(raw[ell] for ell in self.lengths)
        self.weights = {ell: raw[ell] / total for ell in self.lengths}
        self.short = None if short is None else _frozen(short)
        self.long = None if long is None else _frozen(long)
        self._fingerprint = None

    def __len__(self):
        return len(self.items)

    def by_length(self, ell):
        return [h for h, e in self.items if e == ell]

    def tail_samples(self, L0: int):
        """Short and long hidden-state samples for tail-inflation estimates.

        Explicit samples win; otherwise positions before ``L0`` form the
        short set and positions from ``L0`` on the long set.
        """
        if self.short is not None and self.long is not None:
            return self.short, self.long
        short = [h.values[:min(ell, L0)] for h, ell in self.items]
        long = [h.values[L0:ell] for h, ell in self.items if ell > L0]
        width = self.items[0][0].values.shape[1]
        return (np.concatenate(short) if short else np.empty((0, width)),
                np.concatenate(long) if long else np.empty((0, width)))

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = self._digest()
        return self._fingerprint

    def _digest(self) -> str:
        digest = hashlib.sha256()
        for h, ell in self.items:
            digest.update(f"{ell}:{self.weights[ell]!r};".encode())
            digest.update(np.ascontiguousarray(h.values[:ell]).tobytes())
        return digest.hexdigest()


def make_devset(lengths, d_model: int, seed: int = 0, outlier_frac: float = 0.05,
                outlier_gain: float = 5.0, tail_df: float = 3.0, weights=None,
                docs_per_length: int = 1, calibration_samples: int | None = None) -> DevSet:
    """Generate a synthetic dev set; every sequence shares the outlier channels."""
    gen = dict(d_model=d_model, outlier_frac=outlier_frac, outlier_gain=outlier_gain,
               tail_df=tail_df, channel_seed=seed)
    items = []
    for ell in sorted(int(e) for e in lengths):
        for doc in range(docs_per_length):
            items.append((gen_hidden_states(ell, seed=_item_seed(seed, ell, doc), **gen), ell))
    short = long = None
    if calibration_samples:
        short = gen_hidden_states(calibration_samples, seed=_item_seed(seed, 0, 1), **gen).values
        long = gen_hidden_states(calibration_samples, seed=_item_seed(seed, 0, 2), **gen).values
    return DevSet(items, weights, short, long)


def _item_seed(seed: int, length: int, doc: int) -> int:
    return int(np.random.SeedSequence([seed, length, doc]).generate_state(1)[0])


def query_positions(length: int, n: int = N_QUERIES) -> np.ndarray:
    """Query positions whose distance from the sequence end is log-spaced.

    Most queries therefore attend over nearly the whole sequence.
    """
    n = min(n, length)
    offsets = np.round(np.exp(np.linspace(0.0, math.log(length), n))).astype(np.int64) - 1
    for j in range(1, n):
        offsets[j] = max(offsets[j], offsets[j - 1] + 1)
    return np.sort(length - 1 - offsets)


def forward_logits(weights: AttentionWeights, H, scheme: PIScheme,
                   quant: QuantSpec | None = None, query_pos=None, key_pos=None) -> np.ndarray:
    """Attention logits ``q(m) . k(n)`` per head, shape ``(n_heads, n_q, n_k)``.

    With ``quant`` the projections use min-max quantized weights; the RoPE
    path is identical either way. Positions default to every position in
    ``H``.
    """
    h = H.values if isinstance(H, HiddenStates) else np.asarray(H, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != weights.d_model:
        raise ShapeError(f"hidden states must be (length, {weights.d_model})")
    if not isinstance(scheme, PIScheme):
        raise ConfigError(f"expected a PIScheme, got {type(scheme).__name__}")
    n = len(h)
    qp = np.arange(n) if query_pos is None else np.asarray(query_pos, dtype=np.int64)
    kp = np.arange(n) if key_pos is None else np.asarray(key_pos, dtype=np.int64)
    if qp.size and (qp.min() < 0 or qp.max() >= n) or kp.size and (kp.min() < 0 or kp.max() >= n):
        raise ShapeError("positions outside the hidden-state sequence")
    w = weights.quantized(quant)
    sched = scheme.apply(weights.schedule())
    nh, dh = w.n_heads, w.d_h
    q = (h[qp] @ w.w_q).reshape(len(qp), nh, dh)
    k = (h[kp] @ w.w_k).reshape(len(kp), nh, dh)
    q = rotate(q, qp[:, None], sched)
    k = rotate(k, kp[:, None], sched)
    return np.einsum("qhd,khd->hqk", q, k)


class ObjectiveKind(str, Enum):
    LOGIT_MSE = "logit_mse"
    ATTN_KL = "attn_kl"
    EXTERNAL = "external"


def _causal_mask(qp, kp):
    return kp[None, :] <= qp[:, None]


class Objective:
    """Length-weighted discrepancy against a full-precision reference.

    The reference logits are computed once from ``weights`` under ``scheme``
    on ``devset``; scoring checks that the same dev set and scheme are used.
    ``external_scores`` (length -> score) backs the ``external`` kind, whose
    score does not depend on the weights.
    """

    def __init__(self, kind, weights: AttentionWeights, scheme: PIScheme, devset: DevSet,
                 n_queries: int = N_QUERIES, external_scores=None):
        self.kind = ObjectiveKind(kind)
        self.scheme = scheme
        self.n_queries = n_queries
        self.fingerprint = devset.fingerprint()
        self.d_h = weights.d_h
        if self.kind is ObjectiveKind.EXTERNAL:
            if external_scores is None:
                raise ConfigError("external objective needs per-length scores")
            scores = {int(k): float(v) for k, v in dict(external_scores).items()}
            missing = set(devset.lengths) - set(scores)
            if missing:
                raise ConfigError(f"external scores missing lengths {sorted(missing)}")
            self.external_scores = scores
            self.reference = None
            return
        self.reference = {}
        for ell in devset.lengths:
            qp = query_positions(ell, n_queries)
            self.reference[ell] = [
                forward_logits(weights, h.values[:ell], scheme, None, qp, np.arange(ell))
                for h in devset.by_length(ell)]

    def _pair_score(self, ref, cand, mask):
        if self.kind is ObjectiveKind.LOGIT_MSE:
            diff = (cand - ref)[:, mask]
            return float(np.mean(diff ** 2))
        scale = 1.0 / math.sqrt(self.d_h)
        neg = np.where(mask, 0.0, -np.inf)
        lp = log_softmax(ref * scale + neg, axis=-1)
        lq = log_softmax(cand * scale + neg, axis=-1)
        p = np.exp(lp)
        lp, lq = np.where(mask, lp, 0.0), np.where(mask, lq, 0.0)
        kl = (p * (lp - lq)).sum(axis=-1)
        return float(np.mean(kl))

    def length_score(self, weights: AttentionWeights, quant, devset: DevSet, ell: int) -> float:
        if self.kind is ObjectiveKind.EXTERNAL:
            return self.external_scores[ell]
        qp = query_positions(ell, self.n_queries)
        kp = np.arange(ell)
        mask = _causal_mask(qp, kp)
        scores = [self._pair_score(ref, forward_logits(weights, h.values[:ell], self.scheme,
                                                       quant, qp, kp), mask)
                  for ref, h in zip(self.reference[ell], devset.by_length(ell))]
        return math.fsum(scores) / len(scores)


def score(objective: Objective, weights: AttentionWeights, scheme: PIScheme,
          quant: QuantSpec | None, devset: DevSet, threads: int = 1):
    """Weighted objective ``J = sum_l w_l * score_l`` and the per-length scores.

    When ``quant`` is given, ``weights`` are quantized before scoring.
    Lengths are scored concurrently on up to ``threads`` workers; the sum is
    always taken in increasing length order.
    """
    if devset.fingerprint() != objective.fingerprint:
        raise ReferenceMismatch("objective reference was built from a different dev set")
    if scheme.to_dict() != objective.scheme.to_dict():
        raise ReferenceMismatch("objective reference was built under a different scheme")
    if len(devset) == 0:
        raise ConfigError("empty dev set")
    wq = weights.quantized(quant)

    def one(ell):
        return objective.length_score(wq, None, devset, ell)

    if threads > 1 and len(devset.lengths) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(one, devset.lengths))
    else:
        values = [one(ell) for ell in devset.lengths]
    per_length = dict(zip(devset.lengths, values))
    J = math.fsum(devset.weights[ell] * per_length[ell] for ell in devset.lengths)
    return J, per_length


def softmax_rows(logits, mask=None) -> np.ndarray:
    neg = 0.0 if mask is None else np.where(mask, 0.0, -np.inf)
    return np.exp(log_softmax(logits + neg, axis=-1))
