"""Pipeline configuration: one JSON document, validated on load.

Unknown keys are rejected. The CLI reads the path from --config or the
FLOWCAST_CONFIG environment variable; individual flags override file values.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .synth import SynthParams

ENV_VAR = "FLOWCAST_CONFIG"


@dataclass
class PartitionConfig:
    epsilon: float = 70.0
    min_pts: int = 30
    assign_radius: Optional[float] = None   # defaults to epsilon
    include_members: bool = False


@dataclass
class SscConfig:
    tau: Optional[float] = None             # None: data-driven default
    mu: Optional[float] = None
    max_iter: int = 2000
    tol: float = 1e-5
    recon_tol: float = 0.15
    normalize: bool = False


@dataclass
class PatternsConfig:
    n_bases: int = 9
    restarts: int = 50
    hist_bin_m: float = 500.0


@dataclass
class ReconConfig:
    lam: float = 0.4
    gamma: float = 1e-5
    sigma: float = 1.0
    eta: float = 2.0
    theta: float = 1.0
    eps_pos: float = 1e-8
    include_zero_cells: bool = False
    loss: str = "poisson"
    max_sweeps: int = 500
    rel_tol: float = 1e-6
    alt_max_iter: int = 100
    alt_rel_tol: float = 1e-5
    basis_steps: int = 25


@dataclass
class ForecastConfig:
    p: int = 5
    q: int = 8
    horizon: int = 24


@dataclass
class EvalConfig:
    nonzero_only: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    ssc: SscConfig = field(default_factory=SscConfig)
    patterns: PatternsConfig = field(default_factory=PatternsConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthParams = field(default_factory=SynthParams)

    def fingerprint(self) -> str:
        canonical = json.dumps(to_json_dict(self), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# JSON spelling of attributes that cannot or should not be Python identifiers
_KEY_TO_ATTR = {"lambda": "lam"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}

_SECTIONS = {
    "partition": PartitionConfig,
    "ssc": SscConfig,
    "patterns": PatternsConfig,
    "recon": ReconConfig,
    "forecast": ForecastConfig,
    "eval": EvalConfig,
    "synth": SynthParams,
}


def _coerce(value, target_type, where: str):
    if value is None:
        return None
    if target_type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target_type is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if target_type is bool and isinstance(value, bool):
        return value
    if target_type is str and isinstance(value, str):
        return value
    raise ConfigError(f"{where}: expected {target_type.__name__}, got {value!r}")


def _load_section(cls, doc: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        attr = _KEY_TO_ATTR.get(key, key)
        if attr not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        f = known[attr]
        base = {"float": float, "int": int, "bool": bool, "str": str,
                "Optional[float]": float, "Optional[int]": int}.get(str(f.type))
        if base is None:
            raise ConfigError(f"{where}.{key}: unsupported field type {f.type}")
        kwargs[attr] = _coerce(value, base, f"{where}.{key}")
    return cls(**kwargs)


def load_config(path: Optional[str | Path] = None) -> PipelineConfig:
    """Build the configuration from a JSON file (or defaults when absent).

    With no explicit path, FLOWCAST_CONFIG is consulted.
    """
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top-level config must be an object")

    cfg = PipelineConfig()
    for key, value in doc.items():
        if key == "seed":
            cfg.seed = _coerce(value, int, "seed")
        elif key == "threads":
            cfg.threads = _coerce(value, int, "threads")
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            setattr(cfg, key, _load_section(_SECTIONS[key], value, key))
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    return cfg


def to_json_dict(cfg: PipelineConfig) -> dict:
    doc = {"seed": cfg.seed, "threads": cfg.threads}
    for name in _SECTIONS:
        section = asdict(getattr(cfg, name))
        doc[name] = {_ATTR_TO_KEY.get(k, k): v for k, v in section.items()}
    return doc


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_json_dict(cfg), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
