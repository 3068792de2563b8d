"""Leave-one-out cross-validation: PSIS, integrated and brute-force routes.

The direct route importance-weights full-posterior draws; the integrated
route first marginalises an observation-level intercept by adaptive
Gauss-Hermite quadrature (recentred at the integrand mode, rescaled by its
curvature) so the proposal no longer carries a per-observation marginal;
the brute-force route refits without the observation. Comparison between
models uses pointwise elpd differences, their standard error, and a
tail-shape check on the differences that guards the normal approximation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .config import FilterSettings, SamplerSettings
from .data import Dataset
from .diagnostics import ess_bulk
from .model import LOG_2PI, Model
from .multiverse import ModelSpec
from .psis import khat_threshold, min_sample_size, pareto_khat, psis_smooth
from .sampler import Draws, chain_rng, run_chain

log = logging.getLogger(__name__)


@dataclass
class PointwiseLogLik:
    """S x N matrix of log p(y_i | theta_s)."""

    values: np.ndarray
    method: str = "direct"  # direct | integrated
    n_chains: int = 1

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("pointwise log likelihood must be an S x N matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("pointwise log likelihood contains non-finite entries")

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    @property
    def n_obs(self) -> int:
        return self.values.shape[1]


@dataclass
class ElpdResult:
    """Pointwise elpd estimates with reliability diagnostics."""

    pointwise: np.ndarray
    khat: np.ndarray
    per_obs_method: list[str]  # psis | integrated_psis | brute_force per observation
    mc_se: np.ndarray

    @property
    def elpd_total(self) -> float:
        return float(np.sum(self.pointwise))

    @property
    def se(self) -> float:
        n = len(self.pointwise)
        return float(math.sqrt(n * np.var(self.pointwise, ddof=1)))

    @property
    def n_obs(self) -> int:
        return len(self.pointwise)

    def high_khat(self, cutoff: float = 0.7) -> np.ndarray:
        """Indices of observations whose khat exceeds the cutoff."""
        return np.flatnonzero(self.khat > cutoff)


def loglik_matrix(model: Model, draws: Draws) -> PointwiseLogLik:
    """Direct pointwise log likelihood for every retained draw."""
    eta = eta_from_draws(model, draws)
    disp = dispersion_from_draws(model, draws)
    ll, _, _ = _loglik_terms(model.spec.family, model.y[None, :], eta,
                             None if disp is None else disp[:, None])
    return PointwiseLogLik(values=ll, method="direct", n_chains=draws.n_chains)


def eta_from_draws(model: Model, draws: Draws, exclude_group: str | None = None) -> np.ndarray:
    """Linear predictor matrix (S, N) rebuilt from constrained draws."""
    S = draws.n_draws
    eta = np.zeros((S, model.data.n_obs))
    if model.spec.intercept:
        eta += draws.flat("intercept")[:, None]
    for j, t in enumerate(model.design.colnames):
        eta += np.outer(draws.flat(f"b_{t}"), model.design.X[:, j])
    for g in model.spec.group_terms:
        if g == exclude_group:
            continue
        offsets = np.stack([draws.flat(f"r_{g}[{lvl}]") for lvl in model.data.group_levels[g]], axis=1)
        eta += offsets[:, model.design.group_maps[g]]
    return eta


def dispersion_from_draws(model: Model, draws: Draws) -> np.ndarray | None:
    if model.spec.family == "negative_binomial":
        return draws.flat("shape")
    if model.spec.family == "normal":
        return draws.flat("sigma")
    return None


# ------------------------------------------------------------------ psis loo


def _mcse_weighted(log_weights: np.ndarray, loglik: np.ndarray, r_eff: float) -> float:
    """Delta-method MC standard error of a self-normalised log estimate."""
    v = np.exp(log_weights - logsumexp(log_weights))
    shift = loglik.max()
    f = np.exp(loglik - shift)
    mu = float(np.sum(v * f))
    if mu <= 0:
        return math.inf
    var = float(np.sum(v * v * (f - mu) ** 2)) / max(r_eff, 1e-3)
    return math.sqrt(var) / mu


def _r_eff(column: np.ndarray, n_chains: int) -> float:
    """Relative efficiency of exp(loglik) draws for one observation."""
    if n_chains < 1 or len(column) % max(n_chains, 1) != 0:
        return 1.0
    shaped = column.reshape(n_chains, -1)
    if shaped.shape[1] < 8:
        return 1.0
    dens = np.exp(shaped - shaped.max())
    ess = ess_bulk(dens)
    if not math.isfinite(ess):
        return 1.0
    return min(ess / column.size, 1.0)


def psis_loo(loglik: PointwiseLogLik) -> ElpdResult:
    """PSIS-LOO elpd per observation.

    Importance ratios are the negated pointwise log likelihoods; smoothed
    weights combine with the likelihood values through log-sum-exp, so no
    intermediate overflow occurs. Unreliability is reported through khat,
    never as an error.
    """
    if loglik.n_draws < 100:
        raise ValueError("psis_loo needs at least 100 draws")
    S, N = loglik.values.shape
    method_tag = "integrated_psis" if loglik.method == "integrated" else "psis"
    pointwise = np.empty(N)
    khat = np.empty(N)
    mc_se = np.empty(N)
    methods = []
    for i in range(N):
        ll = loglik.values[:, i]
        sw = psis_smooth(-ll)
        lw = sw.log_weights
        pointwise[i] = float(logsumexp(lw + ll) - logsumexp(lw))
        if sw.degenerate:
            khat[i] = 0.0  # zero-variance ratios: the estimate is exact
        else:
            khat[i] = sw.khat
        mc_se[i] = _mcse_weighted(lw, ll, _r_eff(ll, loglik.n_chains))
        methods.append(method_tag)
    return ElpdResult(pointwise=pointwise, khat=khat, per_obs_method=methods, mc_se=mc_se)


# ------------------------------------------------- integrated log likelihood


def _loglik_terms(family: str, y: float | np.ndarray, eta: np.ndarray, disp):
    """Pointwise log likelihood plus first and second derivatives in eta."""
    if family == "poisson":
        mu = np.exp(eta)
        ll = y * eta - mu - gammaln(y + 1.0)
        return ll, y - mu, -mu
    if family == "negative_binomial":
        phi = disp
        mu = np.exp(eta)
        ll = (
            gammaln(y + phi) - gammaln(phi) - gammaln(y + 1.0)
            + phi * (np.log(phi) - np.log(phi + mu))
            + y * (eta - np.log(phi + mu))
        )
        d1 = y - (y + phi) * mu / (phi + mu)
        d2 = -(y + phi) * phi * mu / (phi + mu) ** 2
        return ll, d1, d2
    sigma = disp
    ll = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * ((y - eta) / sigma) ** 2
    return ll, (y - eta) / sigma**2, -1.0 / sigma**2 * np.ones_like(eta)


def _gauss_hermite_marginal(family, y, eta, disp, sd, nodes: int):
    """log of the 1-D integral of p(y | eta + r) N(r | 0, sd) dr.

    Vectorised over arbitrarily shaped ``eta`` arrays: the integrand mode
    is found by damped Newton (the integrand is log-concave for every
    supported family), nodes are recentred there and rescaled by the
    curvature. Entries where mode finding fails fall back to a wide
    trapezoid grid.
    """
    eta = np.asarray(eta, dtype=np.float64)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), eta.shape)
    sd = np.broadcast_to(np.asarray(sd, dtype=np.float64), eta.shape)
    disp = None if disp is None else np.broadcast_to(np.asarray(disp, dtype=np.float64), eta.shape)
    var = sd**2
    r = np.zeros_like(eta)
    converged = np.zeros(eta.shape, dtype=bool)
    for _ in range(100):
        _, d1, d2 = _loglik_terms(family, y, eta + r, disp)
        grad = d1 - r / var
        hess = d2 - 1.0 / var
        step = np.clip(grad / hess, -10.0 * sd, 10.0 * sd)
        r = r - step
        converged = np.abs(step) < 1e-10 * np.maximum(sd, 1.0)
        if np.all(converged):
            break

    _, _, d2 = _loglik_terms(family, y, eta + r, disp)
    h = 1.0 / var - d2
    bad = ~converged | ~np.isfinite(r) | ~(h > 0)

    x, w = np.polynomial.hermite.hermgauss(nodes)
    scale = np.sqrt(2.0 / np.where(bad, 1.0, h))
    rk = r[..., None] + scale[..., None] * x  # (shape..., nodes)
    llk, _, _ = _loglik_terms(
        family, y[..., None], rk + eta[..., None], None if disp is None else disp[..., None]
    )
    g = llk - 0.5 * rk**2 / var[..., None] - 0.5 * LOG_2PI - np.log(sd[..., None])
    out = np.log(scale) + logsumexp(np.log(w) + x * x + g, axis=-1)

    if np.any(bad):
        log.warning("integrated loglik: %d entries fell back to trapezoid quadrature", int(bad.sum()))
        for where in map(tuple, np.argwhere(bad)):
            out[where] = _trapezoid_marginal(
                family, y[where], eta[where], None if disp is None else disp[where], sd[where]
            )
    return out


def _trapezoid_marginal(family, y, eta, disp, sd, n_grid: int = 2001):
    """Wide fixed-grid trapezoid fallback over r in +-12 sd (scalar entry)."""
    r = np.linspace(-12.0, 12.0, n_grid) * sd
    ll, _, _ = _loglik_terms(family, y, eta + r, disp)
    g = ll - 0.5 * (r / sd) ** 2 - 0.5 * LOG_2PI - math.log(sd)
    return float(logsumexp(g) + math.log(r[1] - r[0]))


def observation_group(model: Model) -> str | None:
    """The per-observation group term of a model, if it has one."""
    for g in model.spec.group_terms:
        if model.data.is_observation_factor(g):
            return g
    return None


def integrated_loglik(model: Model, draws: Draws, nodes: int = 30,
                      chunk: int = 256) -> PointwiseLogLik:
    """Pointwise log likelihood with the observation-level intercept
    marginalised by quadrature, draw by draw."""
    g = observation_group(model)
    if g is None:
        raise ValueError("integrated_loglik requires a per-observation group term")
    eta = eta_from_draws(model, draws, exclude_group=g)
    sd = draws.flat(f"sd_{g}")
    disp = dispersion_from_draws(model, draws)
    S, N = eta.shape
    out = np.empty((S, N))
    y = model.y
    for s0 in range(0, S, chunk):
        s1 = min(s0 + chunk, S)
        d = None if disp is None else disp[s0:s1, None]
        out[s0:s1] = _gauss_hermite_marginal(
            model.spec.family, y[None, :], eta[s0:s1], d, sd[s0:s1, None], nodes
        )
    return PointwiseLogLik(values=out, method="integrated", n_chains=draws.n_chains)


# ------------------------------------------------------------ brute force loo


@dataclass
class BruteForceEntry:
    obs_index: int
    elpd: float
    mc_se: float
    ok: bool = True
    note: str = ""


def _held_out_loglik(model_train: Model, draws: Draws, data_full: Dataset, i: int,
                     nodes: int) -> np.ndarray:
    """Log predictive density of held-out row ``i`` under refit draws.

    Group levels absent from the training data (always the case for a
    per-observation factor) are marginalised: their offsets enter the
    linear predictor additively, so a single quadrature over the combined
    normal handles them jointly.
    """
    spec = model_train.spec
    S = draws.n_draws
    eta = np.zeros(S)
    if spec.intercept:
        eta += draws.flat("intercept")
    for t in model_train.design.colnames:
        if ":" in t:
            a, b = t.split(":")
            x_val = float(data_full.column(a)[i] * data_full.column(b)[i])
        else:
            x_val = float(data_full.column(t)[i])
        eta += draws.flat(f"b_{t}") * x_val
    extra_var = np.zeros(S)
    for g in spec.group_terms:
        level = data_full.group_levels[g][data_full.group_codes[g][i]]
        if level in model_train.data.group_levels[g]:
            eta += draws.flat(f"r_{g}[{level}]")
        else:
            extra_var += draws.flat(f"sd_{g}") ** 2
    y_i = float(data_full.y[i])
    disp = dispersion_from_draws(model_train, draws)
    if np.any(extra_var > 0):
        sd = np.sqrt(np.maximum(extra_var, 1e-300))
        return _gauss_hermite_marginal(spec.family, y_i, eta, disp, sd, nodes)
    ll, _, _ = _loglik_terms(spec.family, y_i, eta, disp)
    return ll


def brute_force_loo(
    spec: ModelSpec,
    data: Dataset,
    cfg: SamplerSettings,
    obs_indices,
    nodes: int = 30,
    fit_fn=None,
) -> dict[int, BruteForceEntry]:
    """Exact leave-one-out elpd for the flagged observations.

    Each flagged observation is refit on the remaining rows with a seed
    derived from (cfg.seed, observation); a failed refit leaves the PSIS
    estimate in place and marks the entry unresolved. ``fit_fn`` may
    substitute the sampling routine (used by the cache layer).
    """
    obs_indices = list(obs_indices)
    if not obs_indices:
        raise ValueError("brute_force_loo requires a non-empty set of observations")
    from .sampler import sample_model  # local import to avoid cycle at module load

    out: dict[int, BruteForceEntry] = {}
    for i in obs_indices:
        i = int(i)
        sub = data.drop_row(i)
        cfg_i = dc_replace(cfg, seed=int(cfg.seed) + 1_000_003 * (i + 1))
        try:
            model_i = Model(spec, sub)
            draws_i = fit_fn(spec, sub, cfg_i) if fit_fn is not None else sample_model(model_i, cfg_i)
            ll = _held_out_loglik(model_i, draws_i, data, i, nodes)
            shift = ll.max()
            dens = np.exp(ll - shift)
            mean = float(dens.mean())
            elpd = shift + math.log(mean)
            r_eff = _r_eff(ll, draws_i.n_chains)
            mc_se = float(np.std(dens, ddof=1) / (mean * math.sqrt(len(ll) * max(r_eff, 1e-3))))
            out[i] = BruteForceEntry(obs_index=i, elpd=elpd, mc_se=mc_se)
        except Exception as err:  # refit failure is data, not a crash
            log.warning("brute-force refit failed for observation %d: %s", i, err)
            out[i] = BruteForceEntry(obs_index=i, elpd=math.nan, mc_se=math.inf, ok=False, note=str(err))
    return out


def apply_brute_force(result: ElpdResult, entries: dict[int, BruteForceEntry]) -> ElpdResult:
    """Overwrite PSIS entries with exact recomputations where they succeeded."""
    pointwise = result.pointwise.copy()
    khat = result.khat.copy()
    mc_se = result.mc_se.copy()
    methods = list(result.per_obs_method)
    for i, entry in entries.items():
        if not entry.ok:
            methods[i] = methods[i] + "+unresolved"
            continue
        pointwise[i] = entry.elpd
        khat[i] = 0.0  # exact computation sentinel
        mc_se[i] = entry.mc_se
        methods[i] = "brute_force"
    return ElpdResult(pointwise=pointwise, khat=khat, per_obs_method=methods, mc_se=mc_se)


# ------------------------------------------------------------------ compare


@dataclass
class ComparisonRow:
    model_id: str
    elpd: float
    delta: float
    se_delta: float
    n_pairs: int
    diff_khat: float
    diff_min_ss: float
    normal_approx_valid: bool
    small_diff: bool
    any_high_khat: bool


@dataclass
class ElpdComparison:
    best_model_id: str
    n_obs: int
    rows: dict[str, ComparisonRow]
    ties: list[str] = field(default_factory=list)

    def row(self, mid: str) -> ComparisonRow:
        return self.rows[mid]


def compare(results: dict[str, ElpdResult], settings: FilterSettings | None = None) -> ElpdComparison:
    """Pairwise elpd differences against the best model.

    ``se_delta`` is sqrt(N * var(d_i)) over the pointwise paired
    differences; the tail shape of those differences gates the normal
    approximation via the sample-size-specific khat threshold and the
    implied minimum sample size.
    """
    if not results:
        raise ValueError("compare needs at least one model")
    s = settings or FilterSettings()
    sizes = {r.n_obs for r in results.values()}
    if len(sizes) != 1:
        raise ValueError(f"models disagree on observation count: {sorted(sizes)}")
    n = sizes.pop()

    totals = {mid: r.elpd_total for mid, r in results.items()}
    best_total = max(totals.values())
    tied = sorted(mid for mid, t in totals.items() if t == best_total)
    best = tied[0]
    best_pointwise = results[best].pointwise

    rows = {}
    for mid, r in results.items():
        d = r.pointwise - best_pointwise
        delta = float(np.sum(d))
        se = 0.0 if mid == best else float(math.sqrt(n * np.var(d, ddof=1)))
        if mid == best:
            dk = 0.0
        else:
            dk = pareto_khat(d, tails="both")
            if not math.isfinite(dk):
                dk = 0.0  # degenerate differences carry no tail evidence
        mss = min_sample_size(dk)
        valid = bool(dk <= khat_threshold(n) and mss <= n)
        rows[mid] = ComparisonRow(
            model_id=mid,
            elpd=totals[mid],
            delta=delta,
            se_delta=se,
            n_pairs=n,
            diff_khat=dk,
            diff_min_ss=mss,
            normal_approx_valid=valid,
            small_diff=bool(abs(delta) < s.small_diff),
            any_high_khat=bool(np.any(r.khat > s.khat_cutoff)),
        )
    return ElpdComparison(best_model_id=best, n_obs=n, rows=rows, ties=tied[1:])


def indistinguishable_set(cmp: ElpdComparison, k_se: float = 2.0) -> set[str]:
    """Models whose elpd-difference interval contains zero and whose
    normal approximation is trustworthy."""
    out = set()
    for mid, row in cmp.rows.items():
        if row.delta + k_se * row.se_delta >= 0.0 and row.normal_approx_valid:
            out.add(mid)
    return out


@dataclass
class ExtremeObservation:
    obs_index: int  # 0-based row
    response: float
    response_outlier: bool
    max_abs_diff: float
    deficits: dict[str, float]  # model_id -> pointwise elpd difference vs best


def extreme_observation_report(
    results: dict[str, ElpdResult], cmp: ElpdComparison, data: Dataset, sd_factor: float = 4.0
) -> list[ExtremeObservation]:
    """Observations that drive large comparison uncertainty.

    Flags rows whose pointwise elpd difference magnitude exceeds
    ``sd_factor`` standard deviations of the differences for some model,
    plus rows whose response exceeds ``sd_factor`` standard deviations of
    the response. Ranked by worst difference magnitude.
    """
    y = data.y
    y_sd = float(np.std(y, ddof=1))
    response_flags = set(np.flatnonzero(np.abs(y) > sd_factor * y_sd))
    best = cmp.best_model_id
    best_pointwise = results[best].pointwise

    flagged: dict[int, dict[str, float]] = {}
    for mid, r in results.items():
        if mid == best:
            continue
        d = r.pointwise - best_pointwise
        sd = float(np.std(d, ddof=1))
        if sd == 0:
            continue
        for i in np.flatnonzero(np.abs(d) > sd_factor * sd):
            flagged.setdefault(int(i), {})[mid] = float(d[i])
    for i in response_flags:
        flagged.setdefault(int(i), {})

    out = []
    for i, deficits in flagged.items():
        out.append(
            ExtremeObservation(
                obs_index=i,
                response=float(y[i]),
                response_outlier=i in response_flags,
                max_abs_diff=max((abs(v) for v in deficits.values()), default=0.0),
                deficits=deficits,
            )
        )
    out.sort(key=lambda e: (-e.max_abs_diff, e.obs_index))
    return out
