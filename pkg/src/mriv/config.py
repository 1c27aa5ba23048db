"""Experiment configuration: line-based ``key = value`` files with dotted keys.

Example::

    generator = gp-sim
    sim.alpha_u = 1.0
    experiment.methods = mriv, wald
    experiment.n_values = 3000
    nuisance.variant = mlp
    stage2.variant = kernel-ridge
    clip.delta_floor = 0.05

Unknown keys, duplicates and malformed values raise :class:`ConfigError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

from mriv.estimators import KINDS, ClipConfig
from mriv.netlearn import MrivNetConfig
from mriv.regress import VARIANTS, RegressorSpec
from mriv.simgen import SimConfig

__all__ = ["ConfigError", "ExperimentConfig", "GENERATORS", "parse_config", "load_config", "config_keys"]

GENERATORS = ("gp-sim", "semi-synthetic", "file")
NUISANCE_SOURCES = ("separate", "mrivnet")
SPEC_ROLES = ("nuisance", "stage2", "wald", "tlearner")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    generator: str = "gp-sim"
    sim: SimConfig = SimConfig()
    semi_p: int = 5
    data_path: Optional[str] = None
    methods: Tuple[str, ...] = ("mriv", "wald")
    n_values: Tuple[int, ...] = (1000, 3000)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    test_fraction: float = 0.2
    workers: int = 1
    record_wall_time: bool = True
    nuisance: RegressorSpec = RegressorSpec(variant="mlp")
    stage2: RegressorSpec = RegressorSpec(variant="kernel-ridge")
    # None: reuse the nuisance spec
    wald: Optional[RegressorSpec] = None
    tlearner: Optional[RegressorSpec] = None
    wald_oracle: bool = False
    clip: ClipConfig = ClipConfig()
    mriv_nuisances: str = "separate"
    mrivnet: MrivNetConfig = MrivNetConfig()

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.generator == "file" and not self.data_path:
            raise ConfigError("generator = file needs data.path")
        if not self.methods or not self.n_values or not self.seeds:
            raise ConfigError("methods, n_values and seeds must be non-empty")
        bad = [m for m in self.methods if m not in KINDS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {KINDS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate method")
        if any(n < 2 for n in self.n_values):
            raise ConfigError("n_values must be at least 2")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.mriv_nuisances not in NUISANCE_SOURCES:
            raise ConfigError(f"mriv.nuisances must be one of {NUISANCE_SOURCES}")
        if self.semi_p < 1:
            raise ConfigError("semi.p must be positive")

    @property
    def wald_spec(self) -> RegressorSpec:
        return self.nuisance if self.wald is None else self.wald

    @property
    def tlearner_spec(self) -> RegressorSpec:
        return self.nuisance if self.tlearner is None else self.tlearner


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _float(v: str) -> float:
    x = float(v)
    if not math.isfinite(x):
        raise ValueError(f"not a finite number: {v!r}")
    return x


def _int(v: str) -> int:
    return int(v)


def _optional(conv):
    def parse(v: str):
        return None if v.lower() in ("none", "") else conv(v)

    return parse


def _list(conv):
    def parse(v: str):
        items = [s for s in v.replace(",", " ").split() if s]
        if not items:
            raise ValueError("empty list")
        return tuple(conv(s) for s in items)

    return parse


def _choice(options):
    def parse(v: str):
        if v not in options:
            raise ValueError(f"expected one of {tuple(options)}, got {v!r}")
        return v

    return parse


def _lengthscale(v: str):
    return v if v == "median-heuristic" else _float(v)


_SPEC_KEYS: Dict[str, Callable] = {
    "variant": _choice(VARIANTS),
    "ridge_penalty": _optional(_float),
    "kernel_lengthscale": _lengthscale,
    "k_neighbors": _int,
    "mlp_hidden": _optional(_list(_int)),
    "mlp_learning_rate": _float,
    "mlp_epochs": _int,
    "mlp_batch_size": _int,
}
_SPEC_FIELD = {"mlp_hidden": "mlp_hidden_sizes"}

_SIM_KEYS: Dict[str, Callable] = {
    "n": _int,
    "p": _int,
    "nu_delta_y": _float,
    "nu_mu0_y": _float,
    "nu_treatment": _float,
    "nu_propensity": _optional(_float),
    "lengthscale": _float,
    "alpha_u": _float,
    "u_sd": _float,
    "eps_a_sd": _float,
    "eps_y_sd": _float,
    "seed": _int,
}

_TOP_KEYS: Dict[str, Tuple[str, Callable]] = {
    "generator": ("generator", _choice(GENERATORS)),
    "data.path": ("data_path", str),
    "semi.p": ("semi_p", _int),
    "experiment.methods": ("methods", _list(_choice(KINDS))),
    "experiment.n_values": ("n_values", _list(_int)),
    "experiment.seeds": ("seeds", _list(_int)),
    "experiment.test_fraction": ("test_fraction", _float),
    "experiment.workers": ("workers", _int),
    "experiment.wall_time": ("record_wall_time", _bool),
    "wald.oracle": ("wald_oracle", _bool),
    "mriv.nuisances": ("mriv_nuisances", _choice(NUISANCE_SOURCES)),
}

_CLIP_KEYS = {"delta_floor": _float, "propensity_eps": _float, "tau_cap": _optional(_float)}
_NET_KEYS = {"hidden": _int, "epochs": _int, "learning_rate": _float, "batch_size": _int}


def config_keys() -> Tuple[str, ...]:
    """Every accepted key, for documentation and error messages."""
    keys = list(_TOP_KEYS)
    keys += [f"sim.{k}" for k in _SIM_KEYS]
    keys += [f"{role}.{k}" for role in SPEC_ROLES for k in _SPEC_KEYS]
    keys += [f"clip.{k}" for k in _CLIP_KEYS]
    keys += [f"mrivnet.{k}" for k in _NET_KEYS]
    return tuple(keys)


def _lookup(key: str) -> Callable:
    if key in _TOP_KEYS:
        return _TOP_KEYS[key][1]
    section, _, name = key.partition(".")
    table = {"sim": _SIM_KEYS, "clip": _CLIP_KEYS, "mrivnet": _NET_KEYS}.get(section)
    if section in SPEC_ROLES:
        table = _SPEC_KEYS
    if table is None or name not in table:
        raise ConfigError(f"unknown key {key!r}")
    return table[name]


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected `key = value`, got {raw.strip()!r}")
        key, _, value = (s.strip() for s in line.partition("="))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        conv = _lookup(key) if key in config_keys() else None
        if conv is None:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return _build(values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _section(values, prefix) -> Dict[str, object]:
    return {k[len(prefix) + 1 :]: v for k, v in values.items() if k.startswith(prefix + ".")}


def _spec(values, role, base: RegressorSpec) -> RegressorSpec:
    items = {_SPEC_FIELD.get(k, k): v for k, v in _section(values, role).items() if k in _SPEC_KEYS}
    return replace(base, **items)


def _build(values: Dict[str, object]) -> ExperimentConfig:
    kw = {attr: values[key] for key, (attr, _) in _TOP_KEYS.items() if key in values}
    defaults = ExperimentConfig()
    kw["sim"] = replace(defaults.sim, **_section(values, "sim"))
    kw["clip"] = replace(defaults.clip, **_section(values, "clip"))
    kw["mrivnet"] = replace(defaults.mrivnet, **_section(values, "mrivnet"))
    kw["nuisance"] = _spec(values, "nuisance", defaults.nuisance)
    kw["stage2"] = _spec(values, "stage2", defaults.stage2)
    for role in ("wald", "tlearner"):
        if any(k in _SPEC_KEYS for k in _section(values, role)):
            kw[role] = _spec(values, role, kw["nuisance"])
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
