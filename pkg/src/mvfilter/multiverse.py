"""Model grid expansion: from declared choice axes to a set of model specs.

A multiverse is the Cartesian product of the declared axes minus excluded
combinations, deduplicated by content identity. Model identities are
content hashes of the canonicalised spec, so re-expanding an equal
configuration (or extending it) reproduces the same ids.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import re
from dataclasses import dataclass, field, replace

from .config import AxisSpec, ConfigError, FAMILIES, PRIOR_SCHEMES, RunConfig, canonical_json

_TERM_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


class MultiverseError(ValueError):
    """Raised when expansion or extension cannot produce a valid multiverse."""


def parse_formula(bundle: str) -> tuple[bool, tuple[str, ...]]:
    """Parse a right-hand-side formula bundle into (intercept, canonical terms).

    Supports ``+`` separated terms, ``a*b`` (both main effects plus the
    ``a:b`` interaction), explicit ``a:b`` interactions, ``1`` (intercept
    only) and a leading ``0`` to suppress the intercept. Terms are
    canonicalised: interaction parents sorted, main effects before
    interactions, each group sorted.
    """
    intercept = True
    mains: set[str] = set()
    interactions: set[tuple[str, str]] = set()
    text = bundle.strip()
    if text in ("", "1"):
        return True, ()
    for piece in text.split("+"):
        piece = piece.strip()
        if piece == "":
            raise MultiverseError(f"formula bundle {bundle!r}: empty term")
        if piece == "1":
            continue
        if piece == "0":
            intercept = False
            continue
        if "*" in piece:
            parts = [p.strip() for p in piece.split("*")]
            if len(parts) != 2:
                raise MultiverseError(f"formula bundle {bundle!r}: only pairwise '*' is supported")
            a, b = parts
            _check_name(bundle, a)
            _check_name(bundle, b)
            mains.update((a, b))
            interactions.add(tuple(sorted((a, b))))
        elif ":" in piece:
            parts = [p.strip() for p in piece.split(":")]
            if len(parts) != 2:
                raise MultiverseError(f"formula bundle {bundle!r}: only pairwise ':' is supported")
            a, b = parts
            _check_name(bundle, a)
            _check_name(bundle, b)
            interactions.add(tuple(sorted((a, b))))
        else:
            _check_name(bundle, piece)
            mains.add(piece)
    for a, b in interactions:
        for parent in (a, b):
            if parent not in mains:
                raise MultiverseError(
                    f"formula bundle {bundle!r}: interaction references {parent!r} "
                    "which is not a declared main effect"
                )
    terms = tuple(sorted(mains)) + tuple(f"{a}:{b}" for a, b in sorted(interactions))
    return intercept, terms


def _check_name(bundle: str, name: str) -> None:
    if not _TERM_RE.match(name):
        raise MultiverseError(f"formula bundle {bundle!r}: invalid term name {name!r}")


def parse_group_bundle(bundle: str) -> tuple[str, ...]:
    """Parse a group-effect bundle like ``patient+visit`` into sorted factor names."""
    text = bundle.strip()
    if text in ("", "none"):
        return ()
    factors = []
    for piece in text.split("+"):
        piece = piece.strip()
        _check_name(bundle, piece)
        factors.append(piece)
    if len(set(factors)) != len(factors):
        raise MultiverseError(f"group bundle {bundle!r}: duplicate factor")
    return tuple(sorted(factors))


@dataclass(frozen=True)
class ModelSpec:
    """One point in the multiverse.

    ``parameterisation`` maps each group term to a value in [0, 1]
    (1 = centred, 0 = non-centred). It changes sampling geometry, not the
    posterior, and is therefore excluded from the content identity.
    """

    family: str
    fixed_terms: tuple[str, ...]
    group_terms: tuple[str, ...]
    prior_scheme: str
    intercept: bool = True
    parameterisation: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise MultiverseError(f"unknown family {self.family!r}")
        if self.prior_scheme not in PRIOR_SCHEMES:
            raise MultiverseError(f"unknown prior scheme {self.prior_scheme!r}")
        canon_fixed = _canonical_terms(self.fixed_terms)
        canon_group = tuple(sorted(self.group_terms))
        if len(set(canon_group)) != len(canon_group):
            raise MultiverseError(f"duplicate group term in {self.group_terms}")
        mains = {t for t in canon_fixed if ":" not in t}
        for t in canon_fixed:
            if ":" in t:
                for parent in t.split(":"):
                    if parent not in mains:
                        raise MultiverseError(f"interaction {t!r} references undeclared covariate {parent!r}")
        object.__setattr__(self, "fixed_terms", canon_fixed)
        object.__setattr__(self, "group_terms", canon_group)
        lam = dict(self.parameterisation)
        for g in lam:
            if g not in canon_group:
                raise MultiverseError(f"parameterisation names unknown group term {g!r}")
            if not (0.0 <= lam[g] <= 1.0):
                raise MultiverseError(f"parameterisation for {g!r} must be in [0, 1]")
        full = tuple((g, float(lam.get(g, 1.0))) for g in canon_group)
        object.__setattr__(self, "parameterisation", full)

    @property
    def model_id(self) -> str:
        return model_id(self)

    def lambda_for(self, group: str) -> float:
        return dict(self.parameterisation)[group]

    def with_parameterisation(self, lam: dict[str, float]) -> "ModelSpec":
        merged = dict(self.parameterisation)
        merged.update(lam)
        return replace(self, parameterisation=tuple(merged.items()))

    def describe(self) -> str:
        rhs = " + ".join(self.fixed_terms) if self.fixed_terms else "1"
        if not self.intercept:
            rhs = "0 + " + rhs
        groups = "".join(f" + (1 | {g})" for g in self.group_terms)
        return f"{self.family}[{self.prior_scheme}]: ~ {rhs}{groups}"

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "fixed_terms": list(self.fixed_terms),
            "group_terms": list(self.group_terms),
            "prior_scheme": self.prior_scheme,
            "intercept": self.intercept,
            "parameterisation": {g: lam for g, lam in self.parameterisation},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            family=d["family"],
            fixed_terms=tuple(d["fixed_terms"]),
            group_terms=tuple(d["group_terms"]),
            prior_scheme=d["prior_scheme"],
            intercept=d.get("intercept", True),
            parameterisation=tuple(d.get("parameterisation", {}).items()),
        )


def _canonical_terms(terms: tuple[str, ...]) -> tuple[str, ...]:
    mains, inters = [], []
    for t in terms:
        if ":" in t:
            a, b = sorted(t.split(":"))
            inters.append(f"{a}:{b}")
        else:
            mains.append(t)
    return tuple(sorted(set(mains))) + tuple(sorted(set(inters)))


def model_id(spec: ModelSpec) -> str:
    """Stable 128-bit content hash of the canonicalised spec.

    Equal specs up to term order hash equal; the parameterisation is
    deliberately not part of the identity (it does not change the model's
    posterior, only the sampler's coordinates).
    """
    payload = canonical_json(
        {
            "family": spec.family,
            "fixed_terms": list(spec.fixed_terms),
            "group_terms": list(spec.group_terms),
            "prior_scheme": spec.prior_scheme,
            "intercept": spec.intercept,
        }
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:32]


@dataclass(frozen=True)
class Multiverse:
    """An ordered, deduplicated set of model specs with stable identities.

    ``ordinals`` gives each model a 1-based human label in declaration
    order ("Model 7"); the canonical ``models`` ordering is lexicographic
    by model_id for reproducible reports.
    """

    models: tuple[ModelSpec, ...]
    generation: int = 1
    parent_ids: tuple[str, ...] = ()
    ordinals: tuple[tuple[str, int], ...] = ()
    axes: tuple[AxisSpec, ...] = ()
    exclusions: tuple[dict, ...] = ()

    def __post_init__(self):
        ids = [m.model_id for m in self.models]
        if len(set(ids)) != len(ids):
            raise MultiverseError("duplicate model_id in multiverse")
        if sorted(ids) != ids:
            ordered = tuple(sorted(self.models, key=lambda m: m.model_id))
            object.__setattr__(self, "models", ordered)
        if not set(self.parent_ids) <= set(ids):
            raise MultiverseError("parent_ids must be a subset of current model ids")

    @property
    def model_ids(self) -> tuple[str, ...]:
        return tuple(m.model_id for m in self.models)

    def ordinal(self, mid: str) -> int:
        return dict(self.ordinals)[mid]

    def label(self, mid: str) -> str:
        return f"Model {self.ordinal(mid)}"

    def by_id(self, mid: str) -> ModelSpec:
        for m in self.models:
            if m.model_id == mid:
                return m
        raise KeyError(mid)

    def to_json(self) -> str:
        return json.dumps(
            {
                "generation": self.generation,
                "parent_ids": sorted(self.parent_ids),
                "ordinals": {mid: i for mid, i in sorted(self.ordinals)},
                "models": [m.to_dict() for m in self.models],
                "axes": [
                    {"name": ax.name, "kind": ax.kind, "options": [list(o) for o in ax.options]}
                    for ax in self.axes
                ],
                "exclusions": [dict(sorted(r.items())) for r in self.exclusions],
            },
            sort_keys=True,
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "Multiverse":
        d = json.loads(text)
        return cls(
            models=tuple(ModelSpec.from_dict(m) for m in d["models"]),
            generation=d["generation"],
            parent_ids=tuple(d["parent_ids"]),
            ordinals=tuple(sorted(d["ordinals"].items(), key=lambda kv: kv[1])),
            axes=tuple(
                AxisSpec(a["name"], a["kind"], tuple(tuple(o) for o in a["options"]))
                for a in d.get("axes", ())
            ),
            exclusions=tuple(d.get("exclusions", ())),
        )


def _spec_from_combo(axes: tuple[AxisSpec, ...], combo: tuple[str, ...]) -> ModelSpec:
    family = prior = None
    intercept, fixed_terms = True, ()
    group_terms: tuple[str, ...] = ()
    for axis, option_name in zip(axes, combo):
        value = axis.value_of(option_name)
        if axis.kind == "family":
            family = value
        elif axis.kind == "prior":
            prior = value
        elif axis.kind == "formula":
            intercept, fixed_terms = parse_formula(value)
        elif axis.kind == "group":
            group_terms = parse_group_bundle(value)
    if family is None:
        raise ConfigError("axes: an axis of kind 'family' is required")
    if prior is None:
        prior = "default"
    return ModelSpec(
        family=family,
        fixed_terms=fixed_terms,
        group_terms=group_terms,
        prior_scheme=prior,
        intercept=intercept,
    )


def _expand_product(
    axes: tuple[AxisSpec, ...], exclusions: tuple[dict, ...]
) -> list[tuple[ModelSpec, tuple[str, ...]]]:
    names = [ax.name for ax in axes]
    out = []
    for combo in itertools.product(*[ax.option_names() for ax in axes]):
        choice = dict(zip(names, combo))
        if any(all(choice.get(k) == v for k, v in rule.items()) for rule in exclusions):
            continue
        out.append((_spec_from_combo(axes, combo), combo))
    return out


def expand(config: RunConfig) -> Multiverse:
    """Expand a configuration into its multiverse of models.

    The result is the Cartesian product of the axes minus excluded
    combinations, deduplicated by model_id and ordered canonically.
    """
    combos = _expand_product(config.axes, config.exclusions)
    if not combos:
        raise MultiverseError("empty multiverse: all combinations excluded")
    seen: dict[str, int] = {}
    specs: list[ModelSpec] = []
    for ordinal, (spec, _combo) in enumerate(combos, start=1):
        mid = spec.model_id
        if mid not in seen:
            seen[mid] = ordinal
            specs.append(spec)
    return Multiverse(
        models=tuple(specs),
        generation=1,
        parent_ids=(),
        ordinals=tuple(seen.items()),
        axes=config.axes,
        exclusions=config.exclusions,
    )


def merge_axes(
    base_axes: tuple[AxisSpec, ...], delta_axes: tuple[AxisSpec, ...]
) -> tuple[AxisSpec, ...]:
    """Merge extension axes into the base axes.

    New options are appended to an existing axis of the same name;
    redefining an existing option name with different content is a
    conflict. Entirely new axes are appended after the base axes.
    """
    merged = {ax.name: ax for ax in base_axes}
    for delta in delta_axes:
        if delta.name in merged:
            current = merged[delta.name]
            if delta.kind != current.kind:
                raise MultiverseError(
                    f"extension redefines axis {delta.name!r} with kind {delta.kind!r} != {current.kind!r}"
                )
            options = list(current.options)
            existing = dict(current.options)
            for name, value in delta.options:
                if name in existing:
                    if existing[name] != value:
                        raise MultiverseError(
                            f"extension redefines option {name!r} on axis {delta.name!r}: "
                            f"{existing[name]!r} != {value!r}"
                        )
                    continue
                options.append((name, value))
            merged[delta.name] = AxisSpec(current.name, current.kind, tuple(options))
        else:
            kinds = {ax.kind for ax in merged.values()}
            if delta.kind in kinds and delta.kind != "group":
                raise MultiverseError(f"extension adds a second axis of kind {delta.kind!r}")
            if delta.kind == "group" and "group" in kinds:
                raise MultiverseError("extension adds a second axis of kind 'group'")
            merged[delta.name] = delta
    return tuple(merged.values())


def _apply_option(spec: ModelSpec, kind: str, value: str) -> ModelSpec:
    """A copy of ``spec`` with the field of one choice dimension replaced."""
    if kind == "family":
        return replace(spec, family=value)
    if kind == "prior":
        return replace(spec, prior_scheme=value)
    if kind == "formula":
        intercept, terms = parse_formula(value)
        return replace(spec, fixed_terms=terms, intercept=intercept)
    if kind == "group":
        groups = parse_group_bundle(value)
        return replace(spec, group_terms=groups, parameterisation=())
    raise MultiverseError(f"unknown axis kind {kind!r}")


def extend(
    base: Multiverse,
    delta_axes: tuple[AxisSpec, ...],
    delta_exclusions: tuple[dict, ...] = (),
) -> Multiverse:
    """Extend a multiverse with new axis options and/or new axes.

    New choices are applied to the base models directly (the base may be a
    filtered set, which is not a full product), so the result is the base
    plus every combination of base model and new-option assignment. Every
    base model is carried over with an unchanged id; the generation
    counter increments by exactly one and the base ids become parent_ids.
    """
    axes = merge_axes(base.axes, delta_axes)
    exclusions = base.exclusions + tuple(delta_exclusions)
    by_name = {ax.name: ax for ax in axes}
    for rule in exclusions:
        for axis_name, option_name in rule.items():
            if axis_name not in by_name:
                raise ConfigError(f"exclusions.{axis_name}: no such axis after merge")
            if option_name not in by_name[axis_name].option_names():
                raise ConfigError(f"exclusions.{axis_name}: option {option_name!r} not declared")

    # per delta axis: keep-as-is (None) plus each newly introduced option
    new_choices: list[tuple[str, str, list[str | None]]] = []
    for delta in delta_axes:
        axis_name, kind = delta.name, delta.kind
        options: list[str | None] = [None]
        options.extend(name for name, _ in delta.options)
        new_choices.append((axis_name, kind, options))

    ordinals = dict(base.ordinals)
    next_ordinal = max(ordinals.values(), default=0) + 1
    specs = {m.model_id: m for m in base.models}
    ordered_base = sorted(base.models, key=lambda m: ordinals[m.model_id])
    for parent in ordered_base:
        for assignment in itertools.product(*[opts for _, _, opts in new_choices]):
            spec = parent
            choice: dict[str, str] = {}
            for (axis_name, kind, _opts), option_name in zip(new_choices, assignment):
                if option_name is None:
                    continue
                choice[axis_name] = option_name
                spec = _apply_option(spec, kind, by_name[axis_name].value_of(option_name))
            if any(all(choice.get(k) == v for k, v in rule.items()) for rule in exclusions if set(rule) <= set(choice)):
                continue
            mid = spec.model_id
            if mid not in specs:
                specs[mid] = spec
                ordinals[mid] = next_ordinal
                next_ordinal += 1
    return Multiverse(
        models=tuple(specs.values()),
        generation=base.generation + 1,
        parent_ids=base.model_ids,
        ordinals=tuple(ordinals.items()),
        axes=axes,
        exclusions=exclusions,
    )
