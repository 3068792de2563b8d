"""Loading and validation of multiverse run configurations.

A run configuration is a YAML file with five sections (``axes``,
``exclusions``, ``data``, ``sampler``, ``filter``) plus a mandatory
``schema_version``. Axis declaration order is meaningful: it fixes the
enumeration order of the expanded model grid and hence the human-readable
model ordinals.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

SCHEMA_VERSION = 1

AXIS_KINDS = ("family", "prior", "formula", "group")
FAMILIES = ("poisson", "negative_binomial", "normal")
PRIOR_SCHEMES = ("default", "rhs")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


@dataclass(frozen=True)
class AxisSpec:
    """One declared choice axis: a named, ordered list of options.

    Options are (name, value) pairs. For plain scalar options the name is
    the value itself; mapping options ``{name: ..., value: ...}`` allow a
    short label for a long bundle.
    """

    name: str
    kind: str
    options: tuple[tuple[str, str], ...]

    def option_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.options)

    def value_of(self, option_name: str) -> str:
        for name, value in self.options:
            if name == option_name:
                return value
        raise KeyError(option_name)


@dataclass(frozen=True)
class DataSettings:
    path: str
    response: str
    grouping_factors: tuple[str, ...] = ()
    standardise: tuple[str, ...] = ()
    separator: str = ","


@dataclass(frozen=True)
class SamplerSettings:
    chains: int = 4
    warmup_iters: int = 1000
    sampling_iters: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 1
    init_jitter: float = 2.0
    divergence_cap: float = 1000.0

    def validate(self) -> None:
        if not (0.0 < self.target_accept < 1.0):
            raise ConfigError(f"sampler.target_accept must be in (0, 1), got {self.target_accept}")
        for key in ("chains", "warmup_iters", "sampling_iters", "max_tree_depth"):
            if getattr(self, key) < 1:
                raise ConfigError(f"sampler.{key} must be positive")


@dataclass(frozen=True)
class FilterSettings:
    k_se: float = 2.0
    khat_cutoff: float = 0.7
    max_refits: int = 20
    small_diff: float = 4.0
    quadrature_nodes: int = 30
    ppc_replicates: int = 100
    ppc_alpha: float = 0.05
    ppc_band_sims: int = 10_000
    # drop a model when its elpd estimate stays unreliable and its PPC fails
    drop_unreliable_ppc_fail: bool = True
    # gate order: elpd filtering before PPC (the default) or PPC first
    order: str = "elpd_first"
    rhat_ok: float = 1.01
    rhat_suspect: float = 1.05
    ess_min: float = 400.0
    divergence_suspect_fraction: float = 0.001
    accept_ladder: tuple[float, ...] = (0.95, 0.99)

    def validate(self) -> None:
        if self.order not in ("elpd_first", "ppc_first"):
            raise ConfigError(f"filter.order must be 'elpd_first' or 'ppc_first', got {self.order!r}")
        if not (0.0 < self.ppc_alpha < 0.5):
            raise ConfigError(f"filter.ppc_alpha must be in (0, 0.5), got {self.ppc_alpha}")
        if self.k_se <= 0:
            raise ConfigError("filter.k_se must be positive")


@dataclass(frozen=True)
class RunConfig:
    schema_version: int
    axes: tuple[AxisSpec, ...]
    exclusions: tuple[dict, ...]
    data: DataSettings | None
    sampler: SamplerSettings
    filter: FilterSettings
    base_dir: Path = Path(".")

    def axis(self, name: str) -> AxisSpec:
        for ax in self.axes:
            if ax.name == name:
                return ax
        raise ConfigError(f"axes.{name}: no such axis")

    def data_path(self) -> Path:
        if self.data is None:
            raise ConfigError("data: section is required for this command")
        return (self.base_dir / self.data.path).resolve()


def _parse_options(axis_name: str, raw_options) -> tuple[tuple[str, str], ...]:
    if not isinstance(raw_options, list) or not raw_options:
        raise ConfigError(f"axes.{axis_name}.options must be a non-empty list")
    options = []
    for item in raw_options:
        if isinstance(item, dict):
            try:
                name, value = str(item["name"]), str(item["value"])
            except KeyError as err:
                raise ConfigError(f"axes.{axis_name}: mapping options need 'name' and 'value' ({err})")
        else:
            name = value = "" if item is None else str(item)
        options.append((name, value))
    names = [n for n, _ in options]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ConfigError(f"axes.{axis_name}: duplicate option name(s) {dup}")
    return tuple(options)


def _parse_axes(raw_axes) -> tuple[AxisSpec, ...]:
    if not isinstance(raw_axes, dict) or not raw_axes:
        raise ConfigError("axes: must be a non-empty mapping of axis name -> {kind, options}")
    axes = []
    for name, body in raw_axes.items():
        if not isinstance(body, dict):
            raise ConfigError(f"axes.{name}: must be a mapping with 'kind' and 'options'")
        kind = body.get("kind")
        if kind not in AXIS_KINDS:
            raise ConfigError(f"axes.{name}.kind: expected one of {AXIS_KINDS}, got {kind!r}")
        axes.append(AxisSpec(name=str(name), kind=kind, options=_parse_options(name, body.get("options"))))
    kinds = [ax.kind for ax in axes]
    for kind in ("family", "prior", "formula"):
        if kinds.count(kind) > 1:
            raise ConfigError(f"axes: more than one axis of kind {kind!r}")
    if kinds.count("group") > 1:
        raise ConfigError("axes: more than one axis of kind 'group'")
    for ax in axes:
        if ax.kind == "family":
            for name, value in ax.options:
                if value not in FAMILIES:
                    raise ConfigError(f"axes.{ax.name}: unknown family {value!r} (known: {FAMILIES})")
        if ax.kind == "prior":
            for name, value in ax.options:
                if value not in PRIOR_SCHEMES:
                    raise ConfigError(f"axes.{ax.name}: unknown prior scheme {value!r} (known: {PRIOR_SCHEMES})")
    return tuple(axes)


def _parse_exclusions(raw, axes: tuple[AxisSpec, ...]) -> tuple[dict, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise ConfigError("exclusions: must be a list of {axis: option} mappings")
    by_name = {ax.name: ax for ax in axes}
    rules = []
    for i, rule in enumerate(raw):
        if not isinstance(rule, dict) or not rule:
            raise ConfigError(f"exclusions[{i}]: must be a non-empty mapping of axis name -> option name")
        clean = {}
        for axis_name, option_name in rule.items():
            if axis_name not in by_name:
                raise ConfigError(f"exclusions[{i}].{axis_name}: no such axis")
            option_name = "" if option_name is None else str(option_name)
            if option_name not in by_name[axis_name].option_names():
                raise ConfigError(
                    f"exclusions[{i}].{axis_name}: option {option_name!r} not declared on that axis"
                )
            clean[str(axis_name)] = option_name
        rules.append(clean)
    return tuple(rules)


def _build(section_cls, raw: dict, section: str):
    known = {f.name for f in fields(section_cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}: unknown key")
    coerced = {}
    for f in fields(section_cls):
        if f.name in raw:
            value = raw[f.name]
            if isinstance(value, list):
                value = tuple(value)
            coerced[f.name] = value
    return section_cls(**coerced)


def parse_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Build a validated :class:`RunConfig` from a parsed YAML mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    unknown = set(raw) - {"schema_version", "axes", "exclusions", "data", "sampler", "filter"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown top-level section")

    axes = _parse_axes(raw.get("axes"))
    exclusions = _parse_exclusions(raw.get("exclusions"), axes)

    data = None
    if raw.get("data") is not None:
        draw = dict(raw["data"])
        if "path" not in draw or "response" not in draw:
            raise ConfigError("data: 'path' and 'response' are required")
        data = _build(DataSettings, draw, "data")

    sampler = _build(SamplerSettings, dict(raw.get("sampler") or {}), "sampler")
    sampler.validate()
    filt = _build(FilterSettings, dict(raw.get("filter") or {}), "filter")
    filt.validate()

    return RunConfig(
        schema_version=version,
        axes=axes,
        exclusions=exclusions,
        data=data,
        sampler=sampler,
        filter=filt,
        base_dir=base_dir,
    )


def load_config(path: str | Path) -> RunConfig:
    """Load and validate a YAML run configuration from disk."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}")
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML ({err})")
    return parse_config(raw, base_dir=path.parent)


def parse_config_delta(raw: dict) -> tuple[tuple[AxisSpec, ...], tuple[dict, ...]]:
    """Parse an extension delta: new axes and/or new options for existing axes.

    The delta uses the same ``axes`` syntax as a full configuration; merge
    semantics live in :func:`mvfilter.multiverse.extend`.
    """
    if not isinstance(raw, dict):
        raise ConfigError("extension delta must be a mapping")
    unknown = set(raw) - {"axes", "exclusions", "schema_version"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown extension section")
    axes = _parse_axes(raw["axes"]) if raw.get("axes") else ()
    exclusions = raw.get("exclusions")
    if exclusions is not None and not isinstance(exclusions, list):
        raise ConfigError("exclusions: must be a list")
    return axes, tuple(exclusions or ())


def canonical_json(obj) -> str:
    """Deterministic JSON used for hashing and serialised artefacts."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stable_hash(obj, n_hex: int = 16) -> str:
    """Stable hex digest of a JSON-serialisable object."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:n_hex]


def sampler_settings_dict(cfg: SamplerSettings) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(SamplerSettings)}
