"""Run configuration: parsing, defaults, validation and canonical form.

Unknown keys are rejected everywhere. ``RunConfig.to_dict`` is the canonical
form; parsing it again yields the same dictionary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigError
from .io import FORMAT_VERSION, read_json
from .quant import QuantSpec
from .schemes import YARN_RAMP_HIGH, YARN_RAMP_LOW
from .search import SearchConfig


def _strict(section: str, d, cls):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")
    return _build(section, cls, **d)


def _build(section: str, factory, *args, **kwargs):
    try:
        return factory(*args, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section!r} section: {exc}") from None


@dataclass
class ModelConfig:
    source: str = "synthetic"
    d_model: int = 256
    n_heads: int = 4
    d_h: int = 64
    rope_base: float = 10000.0
    column_spread: float = 0.5
    w_q: str | None = None
    w_k: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "files"):
            raise ConfigError(f"model.source must be 'synthetic' or 'files', got {self.source!r}")
        if self.source == "files" and not (self.w_q and self.w_k):
            raise ConfigError("model.source='files' needs w_q and w_k paths")
        if self.d_h % 2 or self.d_h < 2:
            raise ConfigError("model.d_h must be even")
        self.rope_base = float(self.rope_base)
        self.column_spread = float(self.column_spread)


@dataclass
class DevsetConfig:
    lengths: list = field(default_factory=lambda: [512, 1024, 2048, 4096])
    weights: dict | None = None
    docs_per_length: int = 1
    calibration_samples: int = 10000
    outlier_frac: float = 0.05
    outlier_gain: float = 5.0
    tail_df: float = 3.0
    manifest: str | None = None

    def __post_init__(self):
        if not self.lengths:
            raise ConfigError("devset.lengths is empty")
        if any(int(x) < 1 for x in self.lengths):
            raise ConfigError("devset lengths must be positive")
        self.lengths = sorted(int(x) for x in self.lengths)
        if self.weights is not None:
            self.weights = {str(int(k)): float(v) for k, v in self.weights.items()}
        if self.docs_per_length < 1:
            raise ConfigError("devset.docs_per_length must be >= 1")
        for name in ("outlier_frac", "outlier_gain", "tail_df"):
            setattr(self, name, float(getattr(self, name)))


@dataclass
class ObjectiveConfig:
    kind: str = "logit_mse"
    external_scores: str | None = None
    n_queries: int = 32

    def __post_init__(self):
        if self.kind not in ("logit_mse", "attn_kl", "external"):
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.kind == "external" and not self.external_scores:
            raise ConfigError("external objective needs objective.external_scores")


@dataclass
class DiagnoseConfig:
    activation_bits: int = 8
    n_positions: int = 16
    head: int = 0
    logit_trials: int = 2000


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    scheme: dict = field(default_factory=lambda: {"kind": "yarn", "L0": 512, "L": 4096,
                                                  "ramp_low": YARN_RAMP_LOW,
                                                  "ramp_high": YARN_RAMP_HIGH})
    quant: QuantSpec | None = field(default_factory=QuantSpec)
    search: SearchConfig = field(default_factory=SearchConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    devset: DevsetConfig = field(default_factory=DevsetConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)
    output_dir: str = "out"
    seed: int = 0
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        version = d.pop("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported config format_version {version}")
        allowed = {"model", "scheme", "quant", "search", "objective", "devset",
                   "diagnose", "output_dir", "seed"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"unknown top-level keys {sorted(extra)}")
        cfg = cls(base_dir=Path(base_dir))
        if "model" in d:
            cfg.model = _strict("model", d["model"], ModelConfig)
        if "scheme" in d:
            if not isinstance(d["scheme"], dict) or "kind" not in d["scheme"]:
                raise ConfigError("scheme must be an object with a 'kind'")
            cfg.scheme = dict(d["scheme"])
        if "quant" in d:
            q = d["quant"]
            if q is None:
                cfg.quant = None
            else:
                cfg.quant = _build("quant", QuantSpec.from_dict, q)
        if "search" in d:
            cfg.search = _build("search", SearchConfig.from_dict, d["search"])
        if "objective" in d:
            cfg.objective = _strict("objective", d["objective"], ObjectiveConfig)
        if "devset" in d:
            cfg.devset = _strict("devset", d["devset"], DevsetConfig)
        if "diagnose" in d:
            cfg.diagnose = _strict("diagnose", d["diagnose"], DiagnoseConfig)
        cfg.output_dir = str(d.get("output_dir", cfg.output_dir))
        cfg.seed = _build("seed", int, d.get("seed", cfg.seed))
        cfg.scheme = cfg.build_scheme().to_dict()
        return cfg

    def to_dict(self) -> dict:
        def plain(obj):
            return {f.name: getattr(obj, f.name) for f in fields(obj)}
        return {
            "format_version": FORMAT_VERSION,
            "model": plain(self.model),
            "scheme": dict(self.scheme),
            "quant": None if self.quant is None else self.quant.to_dict(),
            "search": self.search.to_dict(),
            "objective": plain(self.objective),
            "devset": plain(self.devset),
            "diagnose": plain(self.diagnose),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def build_scheme(self):
        from .rope import make_schedule
        from .schemes import scheme_from_dict
        return scheme_from_dict(self.scheme, make_schedule(self.model.d_h, self.model.rope_base))

    def validate_files(self):
        paths = []
        if self.model.source == "files":
            paths += [self.model.w_q, self.model.w_k]
        if self.devset.manifest:
            paths.append(self.devset.manifest)
        if self.objective.external_scores:
            paths.append(self.objective.external_scores)
        missing = [p for p in paths if not self.resolve(p).is_file()]
        if missing:
            raise ConfigError(f"referenced files do not exist: {missing}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = read_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data, base_dir=path.parent)
