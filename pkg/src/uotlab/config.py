"""YAML run configuration with strict key checking.

Every section maps onto a dataclass; unknown keys are rejected with
their dotted path, missing keys take the dataclass defaults, and
:func:`dump_config` writes the fully resolved configuration back out so
that ``parse_config(dump_config(c)) == c``. Seeds are never read from
sections: each consumer derives its own from the master seed.
"""

from __future__ import annotations

import copy
import dataclasses
import re
from dataclasses import dataclass, field

import yaml

from .baselines import METHODS, BaselineConfig
from .cost import CostConfig, EntropyFn, FeatureConfig
from .data import GmmSpec, default_spec, derive_seed
from .flowmap import PretrainConfig
from .metrics import EvalConfig
from .unlearn import UnlearnConfig

# fields owned by the master seed or by runtime state, never by the file
_SKIP = {"seed", "clamp_count", "method", "log_every"}

# field name -> file key, for fields named around Python keywords
_KEYS = {"lam": "lambda"}
_FIELDS = {v: k for k, v in _KEYS.items()}

_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class ConfigError(ValueError):
    pass


@dataclass
class ForgetSettings:
    distance: str = "cosine"
    calibration: str = "gap"
    margin_scale: float = 1.0
    n_anchor: int = 512
    n_heldout: int = 512

    def __post_init__(self):
        if self.calibration not in ("gap", "quantile"):
            raise ValueError(f"unknown calibration rule {self.calibration!r}")
        if self.margin_scale <= 0:
            raise ValueError("margin_scale must be positive")
        if self.n_anchor < 1 or self.n_heldout < 1:
            raise ValueError("anchor and held-out counts must be >= 1")


@dataclass
class OracleSettings:
    n_instances: int = 50
    max_rows: int = 3
    max_cols: int = 4
    epsilon: float = 1e-3
    tol: float = 1e-4

    def __post_init__(self):
        if self.max_rows * self.max_cols > 16:
            raise ValueError("the brute-force oracle handles at most 16 plan entries")


@dataclass
class SweepSpec:
    param: str
    values: list

    def __post_init__(self):
        if not self.values:
            raise ValueError("sweep values must be non-empty")


def _unlearn_default():
    return UnlearnConfig(cost=CostConfig(margin=None))


def _baselines_default():
    return {m: BaselineConfig(method=m) for m in METHODS}


@dataclass
class RunConfig:
    experiment: str = "default"
    seed: int = 0
    forget_index: int = 0
    output_dir: str = "runs"
    data: GmmSpec = field(default_factory=default_spec)
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(log_every=0))
    features: FeatureConfig = field(default_factory=FeatureConfig)
    forget: ForgetSettings = field(default_factory=ForgetSettings)
    unlearn: UnlearnConfig = field(default_factory=_unlearn_default)
    baselines: dict = field(default_factory=_baselines_default)
    eval: EvalConfig = field(default_factory=EvalConfig)
    oracle: OracleSettings = field(default_factory=OracleSettings)
    sweep: SweepSpec | None = None

    def __post_init__(self):
        if not _NAME_RE.match(self.experiment):
            raise ConfigError(f"experiment: {self.experiment!r} is not a filesystem-safe name")
        if not 0 <= self.forget_index < self.data.n_modes:
            raise ConfigError(f"forget_index: {self.forget_index} out of range")
        if self.unlearn.cost.distance != self.forget.distance:
            raise ConfigError("unlearn.cost.distance must match forget.distance")

    def sub_seed(self, purpose):
        return derive_seed(self.seed, purpose)

    def pretrain_config(self):
        return dataclasses.replace(self.pretrain, seed=self.sub_seed("pretrain"))

    def feature_config(self):
        return dataclasses.replace(self.features, seed=self.sub_seed("features"))

    def unlearn_config(self, margin):
        """Unlearning config with a fresh copy of the entropy functions and a concrete margin."""
        u = copy.deepcopy(self.unlearn)
        if u.cost.margin is None:
            u.cost = dataclasses.replace(u.cost, margin=margin * self.forget.margin_scale)
        u.seed = self.sub_seed("unlearn")
        return u

    def baseline_config(self, method):
        if method not in self.baselines:
            raise ConfigError(f"baselines: no settings for method {method!r}")
        return dataclasses.replace(self.baselines[method], seed=self.sub_seed(f"baseline:{method}"))


# --- (de)serialisation ---------------------------------------------------------

def _to_plain(obj):
    if isinstance(obj, GmmSpec):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        # the master seed is the one seed the file does own
        skip = _SKIP - {"seed"} if isinstance(obj, RunConfig) else _SKIP
        return {_KEYS.get(f.name, f.name): _to_plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj) if f.name not in skip}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    if default is None and value is not None and not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number or null, got {value!r}")
    return float(value) if default is None and isinstance(value, int) else value


def _build(default_obj, data, path, **fixed):
    """Overlay mapping ``data`` on the dataclass instance ``default_obj``."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    keys = {_KEYS.get(f.name, f.name) for f in dataclasses.fields(default_obj)} - _SKIP
    for key in data:
        if key not in keys:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key {where!r}")
    data = {_FIELDS.get(k, k): v for k, v in data.items()}
    kwargs = {}
    for f in dataclasses.fields(default_obj):
        cur = getattr(default_obj, f.name)
        where = f"{path}.{_KEYS.get(f.name, f.name)}" if path else f.name
        if f.name in _SKIP or f.name not in data:
            kwargs[f.name] = copy.deepcopy(cur)
            continue
        val = data[f.name]
        if dataclasses.is_dataclass(cur):
            kwargs[f.name] = _build(cur, val, where)
        else:
            kwargs[f.name] = _coerce(val, cur, where)
    kwargs.update(fixed)
    if isinstance(default_obj, EntropyFn):
        # a stale clamp would silently survive a scale change
        if "scale" in data and "clamp" not in data:
            kwargs["clamp"] = None
        kwargs["clamp_count"] = 0
    try:
        return type(default_obj)(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    base = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
    kw = {}
    for name in ("experiment", "seed", "forget_index", "output_dir"):
        if name in data:
            kw[name] = _coerce(data[name], getattr(base, name), name)
    if "data" in data:
        d = data["data"]
        extra = set(d) - {"centers", "weights", "sigmas"} if isinstance(d, dict) else set()
        if extra:
            raise ConfigError(f"unknown key 'data.{sorted(extra)[0]}'")
        try:
            kw["data"] = GmmSpec.from_dict(d)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"data: {exc}") from exc
    for name in ("pretrain", "features", "forget", "unlearn", "eval", "oracle"):
        if name in data:
            kw[name] = _build(getattr(base, name), data[name], name)
    if "baselines" in data:
        b = data["baselines"] or {}
        if not isinstance(b, dict):
            raise ConfigError("baselines: expected a mapping of method -> settings")
        out = _baselines_default()
        for method, settings in b.items():
            if method not in METHODS:
                raise ConfigError(f"unknown key 'baselines.{method}'")
            out[method] = _build(out[method], settings, f"baselines.{method}", method=method)
        kw["baselines"] = out
    if data.get("sweep") is not None:
        s = data["sweep"]
        if not isinstance(s, dict) or set(s) - {"param", "values"} or "param" not in s:
            raise ConfigError("sweep: expected exactly 'param' and 'values'")
        try:
            kw["sweep"] = SweepSpec(s["param"], list(s.get("values") or []))
        except ValueError as exc:
            raise ConfigError(f"sweep: {exc}") from exc
    try:
        cfg = RunConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.sweep is not None:
        sweep_variants(cfg)     # validates the parameter path
    return cfg


def parse_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return config_from_dict(data or {})


def dump_config(cfg):
    """Resolved configuration as YAML text."""
    return yaml.safe_dump(_to_plain(cfg), sort_keys=False, default_flow_style=None)


def config_to_dict(cfg):
    return _to_plain(cfg)


def sweep_path(param):
    """Dotted key path of a sweep parameter; ``cost.*`` is shorthand for ``unlearn.cost.*``."""
    path = param.split(".")
    return ["unlearn"] + path if path[0] == "cost" else path


def sweep_variants(cfg):
    """``[(value, RunConfig)]`` differing from ``cfg`` only at ``cfg.sweep.param``."""
    if cfg.sweep is None:
        raise ConfigError("config has no sweep section")
    path = sweep_path(cfg.sweep.param)
    out = []
    for value in cfg.sweep.values:
        d = _to_plain(cfg)
        d.pop("sweep")
        node = d
        for key in path[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"sweep.param: {cfg.sweep.param!r} does not resolve")
            node = node[key]
        if not isinstance(node, dict) or path[-1] not in node:
            raise ConfigError(f"sweep.param: {cfg.sweep.param!r} does not resolve")
        node[path[-1]] = value
        out.append((value, config_from_dict(d)))
    return out
