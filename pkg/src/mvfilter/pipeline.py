"""End-to-end iterative filtering over a multiverse of models.

For each model: fit (cache-aware), diagnose, escalate computation problems
(reparameterise, then raise the acceptance target), estimate predictive
ability by PSIS-LOO with integrated and brute-force repair of unreliable
observations, and posterior-predictive-check. Globally: compare elpd
against the best model, apply the indistinguishable-set rule gated by the
normal-approximation validity check, and assemble a reproducible report.

Model-level work fans out over a bounded process pool; per-model seeds are
derived from (run seed, model id), so results do not depend on scheduling.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np

from . import cv as cvmod
from . import ppc as ppcmod
from .config import FilterSettings, RunConfig, SamplerSettings, canonical_json, sampler_settings_dict
from .data import Dataset
from .diagnostics import ConvergenceReport, diagnose
from .drawsio import read_draws, write_draws
from .model import Model
from .multiverse import ModelSpec, Multiverse
from .sampler import Draws, UnfittableError, estimate_parameterisation, sample_model

log = logging.getLogger(__name__)

PACKAGE_VERSION = "0.1.0"
REPORT_SCHEMA_VERSION = 1

STATUS_RETAINED = "retained"
STATUS_DROPPED_ELPD = "dropped_elpd"
STATUS_DROPPED_PPC = "dropped_ppc"
STATUS_UNFITTABLE = "unfittable"
STATUS_UNRELIABLE = "computation_unreliable"


def derive_model_seed(base_seed: int, model_id: str, *tags: str) -> int:
    payload = ":".join([str(base_seed), model_id, *tags])
    return int.from_bytes(hashlib.sha256(payload.encode()).digest()[:6], "big")


class FitCache:
    """Append-only content-addressed store of fits and their derived results."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def key(self, model_id: str, data_hash: str, fit_options: dict) -> str:
        opt_hash = hashlib.sha256(canonical_json(fit_options).encode()).hexdigest()[:12]
        return f"{model_id[:16]}-{data_hash[:8]}-{opt_hash}"

    def entry_dir(self, key: str) -> Path:
        return self.root / key

    def has(self, key: str) -> bool:
        return (self.entry_dir(key) / "manifest.json").exists()

    def load_draws(self, key: str) -> Draws:
        return read_draws(self.entry_dir(key) / "draws.csv")

    def store(self, key: str, draws: Draws, manifest: dict) -> None:
        """Store a fit under its key; existing entries are never rewritten."""
        final = self.entry_dir(key)
        if self.has(key):
            return
        tmp = self.root / f".tmp-{key}-{os.getpid()}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        write_draws(tmp / "draws.csv", draws)
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
        try:
            tmp.rename(final)
        except OSError:
            shutil.rmtree(tmp, ignore_errors=True)  # concurrent writer won the race

    def fetch_or_fit(self, spec: ModelSpec, data: Dataset, cfg: SamplerSettings,
                     extra: dict | None = None) -> tuple[Draws, str, bool]:
        """Return (draws, key, from_cache) for one fit."""
        fit_options = {"sampler": sampler_settings_dict(cfg),
                       "parameterisation": {g: lam for g, lam in spec.parameterisation}}
        if extra:
            fit_options.update(extra)
        key = self.key(spec.model_id, data.content_hash(), fit_options)
        if self.has(key):
            self.hits += 1
            return self.load_draws(key), key, True
        self.misses += 1
        draws = sample_model(Model(spec, data), cfg)
        manifest = {
            "key": key,
            "model_id": spec.model_id,
            "data_hash": data.content_hash(),
            "fit_options": fit_options,
            "seed": cfg.seed,
            "package_version": PACKAGE_VERSION,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        self.store(key, draws, manifest)
        return draws, key, False


@dataclass
class ModelOutcome:
    """Everything the report records about one model."""

    model_id: str
    ordinal: int
    description: str
    family: str
    prior_scheme: str
    status: str = ""
    drop_reason: str = ""
    verdict: str = ""
    escalations: list[str] = field(default_factory=list)
    target_accept_used: float = math.nan
    parameterisation: dict = field(default_factory=dict)
    divergences: int = 0
    divergence_fraction: float = math.nan
    max_rhat: float = math.nan
    min_ess: float = math.nan
    elpd: float = math.nan
    delta: float = math.nan
    se_delta: float = math.nan
    diff_khat: float = math.nan
    diff_min_ss: float = math.nan
    normal_approx_valid: bool | None = None
    small_diff: bool | None = None
    n_high_khat_direct: int = 0
    n_high_khat_final: int = 0
    elpd_reliable: bool | None = None
    per_obs_method_counts: dict = field(default_factory=dict)
    ppc_verdict: str = ""
    ppc_violation: float = math.nan
    cache_key: str = ""
    from_cache: bool = False
    seed: int = 0
    error: str = ""


@dataclass
class _ModelBundle:
    """Worker product: outcome skeleton plus in-memory arrays for global steps."""

    outcome: ModelOutcome
    elpd: cvmod.ElpdResult | None = None
    pit: np.ndarray | None = None
    ecdf: np.ndarray | None = None
    band_grid: np.ndarray | None = None
    band_lower: np.ndarray | None = None
    band_upper: np.ndarray | None = None
    diag_rows: list[dict] = field(default_factory=list)
    cache_hits: int = 0
    cache_misses: int = 0


@dataclass
class FilterReport:
    generation: int
    outcomes: dict[str, ModelOutcome]
    filtered_set: list[str]
    best_model_id: str | None
    comparison: cvmod.ElpdComparison | None
    extreme_observations: list
    provenance: dict
    cv_detail: dict[str, dict] = field(default_factory=dict)
    ppc_detail: dict[str, dict] = field(default_factory=dict)
    diagnostics_rows: list[dict] = field(default_factory=list)

    def status_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for o in self.outcomes.values():
            counts[o.status] = counts.get(o.status, 0) + 1
        return counts

    def canonical_dict(self) -> dict:
        """Deterministic content view.

        Excludes wall-clock fields and cache accounting: a cache-served
        model must yield the identical content as a fresh fit.
        """
        prov = {
            k: v
            for k, v in self.provenance.items()
            if k not in ("created_at", "runtime_s", "cache_hits", "fresh_fits")
        }
        outcomes = {}
        for mid, o in sorted(self.outcomes.items()):
            d = _round_floats(dataclasses.asdict(o))
            d.pop("from_cache", None)
            outcomes[mid] = d
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "generation": self.generation,
            "filtered_set": sorted(self.filtered_set),
            "best_model_id": self.best_model_id,
            "outcomes": outcomes,
            "provenance": prov,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_dict(), sort_keys=True, indent=1)


def _round_floats(obj, ndigits: int = 10):
    if isinstance(obj, float):
        return None if math.isnan(obj) else round(obj, ndigits)
    if isinstance(obj, dict):
        return {k: _round_floats(v, ndigits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, ndigits) for v in obj]
    return obj


# ------------------------------------------------------------- model worker


def _escalation_ladder(spec: ModelSpec, data: Dataset, cfg: SamplerSettings,
                       cache: FitCache, key: str, draws: Draws,
                       report: ConvergenceReport, settings: FilterSettings):
    """Check-and-change loop: reparameterise, then raise target acceptance.

    At most 1 + len(accept_ladder) refit attempts; returns the final state
    plus a trail of what was tried.
    """
    escalations: list[str] = []
    current_spec, current_cfg, current_key = spec, cfg, key
    model = Model(current_spec, data)

    if report.verdict in ("suspect", "failed") and spec.group_terms and draws.n_draws >= 200:
        lam_hat, warnings = estimate_parameterisation(model, draws)
        for w in warnings:
            escalations.append(f"warning: {w}")
        if lam_hat != {g: lam for g, lam in current_spec.parameterisation}:
            current_spec = current_spec.with_parameterisation(lam_hat)
            escalations.append(f"reparameterise: {lam_hat}")
            draws, current_key, _ = cache.fetch_or_fit(current_spec, data, current_cfg)
            report = diagnose(draws, settings)
            escalations.append(f"verdict after reparameterise: {report.verdict}")

    for accept in settings.accept_ladder:
        if report.verdict not in ("suspect", "failed"):
            break
        if accept <= current_cfg.target_accept:
            continue
        current_cfg = dc_replace(current_cfg, target_accept=accept)
        escalations.append(f"raise target_accept to {accept}")
        draws, current_key, _ = cache.fetch_or_fit(current_spec, data, current_cfg)
        report = diagnose(draws, settings)
        escalations.append(f"verdict at target_accept {accept}: {report.verdict}")

    return current_spec, current_cfg, current_key, draws, report, escalations


def _merge_by_preference(direct: cvmod.ElpdResult, integrated: cvmod.ElpdResult,
                         cutoff: float) -> cvmod.ElpdResult:
    """Keep, per observation, the first estimate whose khat clears the cutoff
    (direct PSIS preferred), falling back to the smaller khat."""
    pointwise = direct.pointwise.copy()
    khat = direct.khat.copy()
    mc_se = direct.mc_se.copy()
    methods = list(direct.per_obs_method)
    for i in range(direct.n_obs):
        if khat[i] <= cutoff:
            continue
        if integrated.khat[i] <= cutoff or integrated.khat[i] < khat[i]:
            pointwise[i] = integrated.pointwise[i]
            khat[i] = integrated.khat[i]
            mc_se[i] = integrated.mc_se[i]
            methods[i] = "integrated_psis"
    return cvmod.ElpdResult(pointwise=pointwise, khat=khat, per_obs_method=methods, mc_se=mc_se)


def _process_model(spec: ModelSpec, ordinal: int, data: Dataset, run_cfg: RunConfig,
                   cache_root: str, base_seed: int) -> _ModelBundle:
    """Fit, diagnose, escalate, cross-validate and check one model."""
    settings = run_cfg.filter
    cache = FitCache(cache_root)
    seed = derive_model_seed(base_seed, spec.model_id)
    cfg = dc_replace(run_cfg.sampler, seed=seed)
    outcome = ModelOutcome(
        model_id=spec.model_id,
        ordinal=ordinal,
        description=spec.describe(),
        family=spec.family,
        prior_scheme=spec.prior_scheme,
        seed=seed,
    )
    bundle = _ModelBundle(outcome=outcome)
    try:
        draws, key, cached = cache.fetch_or_fit(spec, data, cfg)
    except UnfittableError as err:
        outcome.status = STATUS_UNFITTABLE
        outcome.drop_reason = f"unfittable: {err}"
        outcome.error = str(err)
        bundle.cache_hits, bundle.cache_misses = cache.hits, cache.misses
        return bundle
    except Exception as err:  # any model-level failure is data, not a crash
        log.exception("model %s failed to fit", spec.model_id)
        outcome.status = STATUS_UNFITTABLE
        outcome.drop_reason = f"fit error: {err}"
        outcome.error = str(err)
        bundle.cache_hits, bundle.cache_misses = cache.hits, cache.misses
        return bundle
    outcome.cache_key, outcome.from_cache = key, cached

    report = diagnose(draws, settings)
    spec_f, cfg_f, key, draws, report, escalations = _escalation_ladder(
        spec, data, cfg, cache, key, draws, report, settings
    )
    outcome.cache_key = key
    outcome.escalations = escalations
    outcome.verdict = report.verdict
    outcome.target_accept_used = cfg_f.target_accept
    outcome.parameterisation = {g: lam for g, lam in spec_f.parameterisation}
    outcome.divergences = report.divergence_count
    outcome.divergence_fraction = report.divergence_fraction
    outcome.max_rhat = report.max_rhat
    outcome.min_ess = report.min_ess
    bundle.diag_rows = [dict(r, model_id=spec.model_id) for r in report.rows()]

    if report.verdict == "failed":
        outcome.status = STATUS_UNRELIABLE
        outcome.drop_reason = "computation unreliable after escalation"
        bundle.cache_hits, bundle.cache_misses = cache.hits, cache.misses
        return bundle

    model = Model(spec_f, data)
    loglik = cvmod.loglik_matrix(model, draws)
    direct = cvmod.psis_loo(loglik)
    outcome.n_high_khat_direct = int(np.sum(direct.khat > settings.khat_cutoff))
    result = direct

    if outcome.n_high_khat_direct and cvmod.observation_group(model) is not None:
        integrated = cvmod.psis_loo(
            cvmod.integrated_loglik(model, draws, nodes=settings.quadrature_nodes)
        )
        result = _merge_by_preference(direct, integrated, settings.khat_cutoff)

    flagged = result.high_khat(settings.khat_cutoff)
    if len(flagged):
        todo = [int(i) for i in flagged[np.argsort(-result.khat[flagged])][: settings.max_refits]]
        entries = cvmod.brute_force_loo(
            spec_f, data, dc_replace(cfg_f, seed=seed), todo,
            nodes=settings.quadrature_nodes,
            fit_fn=lambda sp, sub, c: cache.fetch_or_fit(sp, sub, c)[0],
        )
        result = cvmod.apply_brute_force(result, entries)

    outcome.n_high_khat_final = int(np.sum(result.khat > settings.khat_cutoff))
    outcome.elpd_reliable = outcome.n_high_khat_final == 0
    outcome.elpd = result.elpd_total
    counts: dict[str, int] = {}
    for m in result.per_obs_method:
        counts[m] = counts.get(m, 0) + 1
    outcome.per_obs_method_counts = counts
    bundle.elpd = result

    ppc_res = ppcmod.check_model(
        model, draws, n_rep=settings.ppc_replicates, alpha=settings.ppc_alpha,
        n_sim=settings.ppc_band_sims, seed=derive_model_seed(base_seed, spec.model_id, "ppc"),
    )
    outcome.ppc_verdict = ppc_res.verdict
    outcome.ppc_violation = ppc_res.violation_fraction
    bundle.pit = ppc_res.pit
    bundle.ecdf = ppc_res.ecdf
    bundle.band_grid = ppc_res.band.grid
    bundle.band_lower = ppc_res.band.lower
    bundle.band_upper = ppc_res.band.upper
    bundle.cache_hits, bundle.cache_misses = cache.hits, cache.misses
    return bundle


def _process_model_payload(payload):
    spec_dict, ordinal, data, run_cfg, cache_root, base_seed = payload
    spec = ModelSpec.from_dict(spec_dict)
    return _process_model(spec, ordinal, data, run_cfg, cache_root, base_seed)


# ----------------------------------------------------------------- run_filter


def run_filter(mv: Multiverse, data: Dataset, run_cfg: RunConfig,
               cache_dir: str | Path, jobs: int = 1) -> FilterReport:
    """Execute the full filtering workflow over a multiverse.

    Model-level failures are recorded in the report and never abort the
    run; configuration errors surface before any fitting starts.
    """
    t_start = time.time()
    settings = run_cfg.filter
    base_seed = run_cfg.sampler.seed
    cache = FitCache(cache_dir)

    # fail fast on specs that cannot bind to the data at all
    for spec in mv.models:
        Model(spec, data)

    payloads = [
        (spec.to_dict(), mv.ordinal(spec.model_id), data, run_cfg, str(cache.root), base_seed)
        for spec in mv.models
    ]
    bundles: dict[str, _ModelBundle] = {}
    if jobs > 1 and len(payloads) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            for bundle in pool.map(_process_model_payload, payloads):
                bundles[bundle.outcome.model_id] = bundle
    else:
        for payload in payloads:
            bundle = _process_model_payload(payload)
            bundles[bundle.outcome.model_id] = bundle

    outcomes = {mid: b.outcome for mid, b in bundles.items()}
    results = {mid: b.elpd for mid, b in bundles.items() if b.elpd is not None}

    comparison = None
    retained: set[str] = set()
    extreme = []
    if results:
        comparison = cvmod.compare(results, settings)
        retained = cvmod.indistinguishable_set(comparison, settings.k_se)

        if not retained:
            # never conclude from unreliable estimates: repair every
            # interval-passing model by brute force before giving up
            log.warning("indistinguishable set empty; escalating interval-passers to brute-force LOO")
            changed = False
            for mid, row in comparison.rows.items():
                if row.delta + settings.k_se * row.se_delta < 0 or row.normal_approx_valid:
                    continue
                spec = mv.by_id(mid)
                spec_f = spec.with_parameterisation(outcomes[mid].parameterisation)
                d = results[mid].pointwise - results[comparison.best_model_id].pointwise
                worst = np.argsort(-np.abs(d))
                already = [i for i, m in enumerate(results[mid].per_obs_method) if m == "brute_force"]
                todo = [int(i) for i in worst if i not in already][: settings.max_refits]
                if not todo:
                    continue
                cfg_m = dc_replace(run_cfg.sampler, seed=derive_model_seed(base_seed, mid),
                                   target_accept=outcomes[mid].target_accept_used)
                entries = cvmod.brute_force_loo(
                    spec_f, data, cfg_m, todo, nodes=settings.quadrature_nodes,
                    fit_fn=lambda sp, sub, c: cache.fetch_or_fit(sp, sub, c)[0],
                )
                results[mid] = cvmod.apply_brute_force(results[mid], entries)
                outcomes[mid].escalations.append(f"brute-force repair of {len(todo)} difference outliers")
                changed = True
            if changed:
                comparison = cvmod.compare(results, settings)
                retained = cvmod.indistinguishable_set(comparison, settings.k_se)

        for mid, row in comparison.rows.items():
            o = outcomes[mid]
            o.delta = row.delta
            o.se_delta = row.se_delta
            o.diff_khat = row.diff_khat
            o.diff_min_ss = row.diff_min_ss
            o.normal_approx_valid = row.normal_approx_valid
            o.small_diff = row.small_diff
            o.elpd = row.elpd
        extreme = cvmod.extreme_observation_report(results, comparison, data)

    # final status assignment
    for mid, o in outcomes.items():
        if o.status in (STATUS_UNFITTABLE, STATUS_UNRELIABLE):
            continue
        ppc_fail = o.ppc_verdict == "fail"
        unreliable = o.elpd_reliable is False
        if settings.drop_unreliable_ppc_fail and ppc_fail and unreliable:
            o.status = STATUS_DROPPED_PPC
            o.drop_reason = "predictive check failed and elpd estimate unreliable"
        elif mid in retained:
            o.status = STATUS_RETAINED
        else:
            o.status = STATUS_DROPPED_ELPD
            row = comparison.rows[mid] if comparison else None
            if row is not None and row.delta + settings.k_se * row.se_delta < 0:
                o.drop_reason = "elpd difference interval excludes zero"
            elif row is not None and not row.normal_approx_valid:
                o.drop_reason = "normal approximation for elpd difference not trustworthy"
            else:
                o.drop_reason = "excluded from comparison"

    filtered = sorted(mid for mid, o in outcomes.items() if o.status == STATUS_RETAINED)

    provenance = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "package_version": PACKAGE_VERSION,
        "seed": base_seed,
        "data_hash": data.content_hash(),
        "multiverse_hash": hashlib.sha256(mv.to_json().encode()).hexdigest()[:16],
        "sampler": sampler_settings_dict(run_cfg.sampler),
        "filter": {f.name: getattr(settings, f.name) for f in dataclasses.fields(settings)},
        "cache_hits": cache.hits + sum(b.cache_hits for b in bundles.values()),
        "fresh_fits": cache.misses + sum(b.cache_misses for b in bundles.values()),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "runtime_s": round(time.time() - t_start, 3),
    }

    cv_detail = {}
    ppc_detail = {}
    diagnostics_rows = []
    for mid, b in bundles.items():
        diagnostics_rows.extend(b.diag_rows)
        if b.elpd is not None:
            cv_detail[mid] = {
                "pointwise": b.elpd.pointwise,
                "khat": b.elpd.khat,
                "method": list(b.elpd.per_obs_method),
                "mc_se": b.elpd.mc_se,
            }
        if b.pit is not None:
            ppc_detail[mid] = {
                "pit": b.pit,
                "ecdf": b.ecdf,
                "grid": b.band_grid,
                "lower": b.band_lower,
                "upper": b.band_upper,
            }

    return FilterReport(
        generation=mv.generation,
        outcomes=outcomes,
        filtered_set=filtered,
        best_model_id=comparison.best_model_id if comparison else None,
        comparison=comparison,
        extreme_observations=extreme,
        provenance=provenance,
        cv_detail=cv_detail,
        ppc_detail=ppc_detail,
        diagnostics_rows=diagnostics_rows,
    )


def refilter(previous: FilterReport, mv2: Multiverse, data: Dataset,
             run_cfg: RunConfig, cache_dir: str | Path, jobs: int = 1) -> FilterReport:
    """Filter an extended multiverse, reusing every cached fit.

    A changed dataset invalidates all previous comparisons and is a hard
    error; the comparison is recomputed over the full extended set.
    """
    if previous.provenance.get("data_hash") != data.content_hash():
        raise ValueError(
            "refilter requires the same dataset as the previous report "
            f"({previous.provenance.get('data_hash')} != {data.content_hash()})"
        )
    prev_ids = set(previous.outcomes)
    if not prev_ids <= set(mv2.model_ids):
        raise ValueError("extended multiverse must contain every model of the previous report")
    return run_filter(mv2, data, run_cfg, cache_dir, jobs=jobs)


# ------------------------------------------------------------- qoi summaries


@dataclass
class QoiRow:
    model_id: str
    ordinal: int
    present: bool
    status: str
    quantiles: dict[str, float] = field(default_factory=dict)


def summarise_qoi(report: FilterReport, mv: Multiverse, data: Dataset,
                  cache_dir: str | Path, qoi: str) -> list[QoiRow]:
    """Posterior quantile summaries of one parameter across the multiverse.

    Models without the parameter are reported as absent; rows are ordered
    by posterior median for display.
    """
    cache = FitCache(cache_dir)
    probs = (0.025, 0.25, 0.5, 0.75, 0.975)
    rows = []
    for mid, outcome in report.outcomes.items():
        if not outcome.cache_key or not cache.has(outcome.cache_key):
            rows.append(QoiRow(model_id=mid, ordinal=outcome.ordinal, present=False, status=outcome.status))
            continue
        draws = cache.load_draws(outcome.cache_key)
        if qoi not in draws.param_names:
            rows.append(QoiRow(model_id=mid, ordinal=outcome.ordinal, present=False, status=outcome.status))
            continue
        q = np.quantile(draws.flat(qoi), probs)
        rows.append(
            QoiRow(
                model_id=mid,
                ordinal=outcome.ordinal,
                present=True,
                status=outcome.status,
                quantiles={f"q{int(p * 1000) / 10:g}": float(v) for p, v in zip(probs, q)},
            )
        )
    rows.sort(key=lambda r: (not r.present, r.quantiles.get("q50", math.inf)))
    return rows
