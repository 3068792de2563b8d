import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvfilter.config import AxisSpec, ConfigError, parse_config
from mvfilter.multiverse import (
    ModelSpec,
    Multiverse,
    MultiverseError,
    expand,
    extend,
    model_id,
    parse_formula,
    parse_group_bundle,
)

TABLE3_ROWS = {
    ("poisson", "default", "zBase*Trt"),
    ("negative_binomial", "default", "zBase*Trt"),
    ("poisson", "rhs", "zBase*Trt"),
    ("negative_binomial", "rhs", "zBase*Trt"),
    ("poisson", "default", "Trt"),
    ("negative_binomial", "default", "Trt"),
    ("poisson", "rhs", "Trt"),
    ("negative_binomial", "rhs", "Trt"),
    ("poisson", "default", "Trt+zBase"),
    ("negative_binomial", "default", "Trt+zBase"),
    ("poisson", "rhs", "Trt+zBase"),
    ("negative_binomial", "rhs", "Trt+zBase"),
    ("poisson", "default", "zBase*Trt+zAge"),
    ("negative_binomial", "default", "zBase*Trt+zAge"),
    ("poisson", "rhs", "zBase*Trt+zAge"),
    ("negative_binomial", "rhs", "zBase*Trt+zAge"),
    ("poisson", "default", "Trt+zAge"),
    ("negative_binomial", "default", "Trt+zAge"),
    ("poisson", "rhs", "Trt+zAge"),
    ("negative_binomial", "rhs", "Trt+zAge"),
    ("poisson", "default", "Trt+zBase+zAge"),
    ("negative_binomial", "default", "Trt+zBase+zAge"),
    ("poisson", "rhs", "Trt+zBase+zAge"),
    ("negative_binomial", "rhs", "Trt+zBase+zAge"),
}


def spec_row(spec: ModelSpec) -> tuple:
    return (spec.family, spec.prior_scheme, spec.fixed_terms)


def canonical_bundle(bundle: str) -> tuple:
    return parse_formula(bundle)[1]


def test_part1_expansion_matches_table(part1_config):
    mv = expand(part1_config)
    assert len(mv.models) == 24
    got = {spec_row(m) for m in mv.models}
    want = {(fam, prior, canonical_bundle(f)) for fam, prior, f in TABLE3_ROWS}
    assert got == want


def test_part1_ordinals_follow_declaration_order(part1_config):
    mv = expand(part1_config)
    by_ordinal = {mv.ordinal(m.model_id): m for m in mv.models}
    assert by_ordinal[1].family == "poisson" and by_ordinal[1].prior_scheme == "default"
    assert by_ordinal[2].family == "negative_binomial" and by_ordinal[2].prior_scheme == "default"
    assert by_ordinal[3].prior_scheme == "rhs"
    assert by_ordinal[5].fixed_terms == ("Trt",)
    assert by_ordinal[24].fixed_terms == ("Trt", "zAge", "zBase")


def _config(axes, exclusions=()):
    raw = {
        "schema_version": 1,
        "axes": axes,
        "exclusions": list(exclusions),
    }
    return parse_config(raw)


def test_degenerate_product_single_model():
    cfg = _config({"family": {"kind": "family", "options": ["poisson"]}})
    mv = expand(cfg)
    assert len(mv.models) == 1


def test_exclusions_counted_by_independent_enumeration():
    axes = {
        "formula": {"kind": "formula", "options": ["zBase*Trt", "Trt", "Trt+zBase",
                                                   "zBase*Trt+zAge", "Trt+zAge", "Trt+zBase+zAge"]},
        "prior": {"kind": "prior", "options": ["default", "rhs"]},
        "family": {"kind": "family", "options": ["poisson", "negative_binomial"]},
    }
    rule = {"family": "poisson", "prior": "rhs"}
    cfg = _config(axes, [rule])
    mv = expand(cfg)
    # oracle: enumerate the raw product and subtract matching combinations
    names = ["formula", "prior", "family"]
    options = [axes[n]["options"] for n in names]
    surviving = [
        dict(zip(names, combo))
        for combo in itertools.product(*options)
        if not all(combo[names.index(k)] == v for k, v in rule.items())
    ]
    assert len(mv.models) == len(surviving) == 18


def test_empty_multiverse_is_an_error():
    cfg = _config(
        {"family": {"kind": "family", "options": ["poisson"]}},
        [{"family": "poisson"}],
    )
    with pytest.raises(MultiverseError, match="empty multiverse"):
        expand(cfg)


def test_unknown_axis_reference_names_the_key():
    with pytest.raises(ConfigError, match="nosuch"):
        _config(
            {"family": {"kind": "family", "options": ["poisson"]}},
            [{"nosuch": "poisson"}],
        )


def test_model_id_invariant_under_term_order():
    a = ModelSpec("poisson", ("zBase", "Trt", "Trt:zBase"), (), "default")
    b = ModelSpec("poisson", ("Trt", "zBase", "zBase:Trt"), (), "default")
    assert model_id(a) == model_id(b)


def test_model_id_distinguishes_family_and_prior():
    a = ModelSpec("poisson", ("Trt",), (), "default")
    b = ModelSpec("negative_binomial", ("Trt",), (), "default")
    c = ModelSpec("poisson", ("Trt",), (), "rhs")
    assert len({model_id(a), model_id(b), model_id(c)}) == 3


def test_part1_ids_all_distinct(part1_config):
    mv = expand(part1_config)
    ids = [m.model_id for m in mv.models]
    assert len(set(ids)) == 24


def test_expand_deterministic_serialisation(part1_config):
    a = expand(part1_config).to_json()
    b = expand(part1_config).to_json()
    assert a == b


@st.composite
def small_configs(draw):
    n_formula = draw(st.integers(1, 4))
    formulas = draw(
        st.lists(st.sampled_from(["x1", "x2", "x1+x2", "x1*x2", "1"]),
                 min_size=n_formula, max_size=n_formula, unique=True)
    )
    families = draw(st.lists(st.sampled_from(["poisson", "negative_binomial", "normal"]),
                             min_size=1, max_size=3, unique=True))
    priors = draw(st.lists(st.sampled_from(["default", "rhs"]), min_size=1, max_size=2, unique=True))
    axes = {
        "formula": {"kind": "formula", "options": formulas},
        "prior": {"kind": "prior", "options": priors},
        "family": {"kind": "family", "options": families},
    }
    exclude = []
    if draw(st.booleans()):
        exclude.append({"family": families[0], "prior": priors[0]})
    return axes, exclude


@given(small_configs())
@settings(max_examples=40, deadline=None)
def test_expansion_size_matches_enumeration(config):
    axes, exclusions = config
    cfg = _config(axes, exclusions)
    names = list(axes)
    options = [axes[n]["options"] for n in names]
    combos = [
        dict(zip(names, c))
        for c in itertools.product(*options)
        if not any(all(c[names.index(k)] == v for k, v in rule.items()) for rule in exclusions)
    ]
    # distinct canonicalised specs, since e.g. "1" bundles may collide
    distinct = {
        (c["family"], c["prior"], canonical_bundle(c["formula"]))
        for c in combos
    }
    if not combos:
        with pytest.raises(MultiverseError):
            expand(cfg)
        return
    assert len(expand(cfg).models) == len(distinct)


def _three_model_base():
    cfg = _config({
        "formula": {"kind": "formula", "options": ["x1", "x2", "x1+x2"]},
        "family": {"kind": "family", "options": ["poisson"]},
    })
    return expand(cfg)


def test_extend_identity():
    base = _three_model_base()
    out = extend(base, ())
    assert out.model_ids == base.model_ids
    assert out.generation == base.generation + 1
    assert set(out.parent_ids) == set(base.model_ids)


def test_extend_binary_axis_doubles_with_shared_parents():
    base = _three_model_base()
    axis = AxisSpec("group", "group", (("none", "none"), ("g", "g")))
    out = extend(base, (axis,))
    assert len(out.models) == 6
    shared = set(out.model_ids) & set(base.model_ids)
    assert len(shared) == 3
    assert set(out.parent_ids) == set(base.model_ids)


def test_extend_conflicting_option_content_rejected():
    base = _three_model_base()
    axis = AxisSpec("formula", "formula", (("x1", "x1+x2"),))  # same name, different content
    with pytest.raises(MultiverseError, match="redefines option"):
        extend(base, (axis,))


def test_extend_composes_like_merged_delta():
    base = _three_model_base()
    a1 = AxisSpec("group", "group", (("none", "none"), ("g", "g")))
    a2 = AxisSpec("prior2", "prior", (("rhs", "rhs"),))
    split = extend(extend(base, (a1,)), (a2,))
    merged = extend(base, (a1, a2))
    assert set(split.model_ids) == set(merged.model_ids)
    assert split.generation == 3 and merged.generation == 2


def test_formula_parsing_canonicalises():
    assert parse_formula("zBase*Trt") == (True, ("Trt", "zBase", "Trt:zBase"))
    assert parse_formula("Trt:zBase + zBase + Trt") == (True, ("Trt", "zBase", "Trt:zBase"))
    assert parse_formula("1") == (True, ())
    assert parse_formula("0 + x1") == (False, ("x1",))
    with pytest.raises(MultiverseError):
        parse_formula("a:b")  # interaction without declared main effects


def test_group_bundle_parsing():
    assert parse_group_bundle("patient+visit") == ("patient", "visit")
    assert parse_group_bundle("none") == ()
    assert parse_group_bundle("") == ()
    with pytest.raises(MultiverseError):
        parse_group_bundle("patient+patient")


def test_multiverse_roundtrip_json(part1_config):
    mv = expand(part1_config)
    again = Multiverse.from_json(mv.to_json())
    assert again.model_ids == mv.model_ids
    assert again.to_json() == mv.to_json()
