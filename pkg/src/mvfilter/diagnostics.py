"""Convergence and efficiency diagnostics over posterior draws.

Implements the rank-normalised split potential-scale-reduction statistic
(max of bulk and folded variants), bulk/tail effective sample sizes via
Geyer's initial monotone sequence on rank-normalised draws, and a per-model
computation verdict aggregating R-hat, ESS and divergence evidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from .config import FilterSettings
from .sampler import Draws

# anti-overestimate guard: ESS may exceed the draw count for antithetic
# chains, but not by more than this factor
ESS_CAP_FACTOR = 1.5


@dataclass
class ParameterDiagnostics:
    name: str
    rhat: float
    ess_bulk: float
    ess_tail: float
    degenerate: bool = False


@dataclass
class ConvergenceReport:
    parameters: list[ParameterDiagnostics]
    divergence_count: int
    divergence_fraction: float
    max_treedepth_hits: int
    verdict: str  # ok | suspect | failed
    max_rhat: float = math.nan
    min_ess: float = math.nan

    def rows(self) -> list[dict]:
        return [
            {
                "parameter": p.name,
                "rhat": p.rhat,
                "ess_bulk": p.ess_bulk,
                "ess_tail": p.ess_tail,
                "degenerate": p.degenerate,
            }
            for p in self.parameters
        ]


def _split_chains(x: np.ndarray) -> np.ndarray:
    """Split each chain in half, doubling the chain count."""
    x = np.atleast_2d(x)
    half = x.shape[1] // 2
    return np.vstack([x[:, :half], x[:, x.shape[1] - half:]])


def _rank_normalise(x: np.ndarray) -> np.ndarray:
    """Inverse-normal transform of fractional ranks (Blom offset 3/8)."""
    ranks = sstats.rankdata(x, method="average").reshape(x.shape)
    return sstats.norm.ppf((ranks - 0.375) / (x.size + 0.25))

def _is_degenerate(x: np.ndarray) -> bool:
    return bool(np.max(x) - np.min(x) < 1e-14 * max(1.0, abs(float(np.max(x))))) or not np.all(np.isfinite(x))


def _rhat_basic(x: np.ndarray) -> float:
    """Classic between/within variance ratio statistic on split chains."""
    m, n = x.shape
    chain_means = x.mean(axis=1)
    chain_vars = x.var(axis=1, ddof=1)
    w = chain_vars.mean()
    b = n * chain_means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    if w <= 0:
        return math.nan
    return math.sqrt(var_plus / w)


def rhat(x: np.ndarray) -> float:
    """Rank-normalised split R-hat: max of the bulk and folded variants.

    ``x`` has shape (chains, iters) with at least 2 chains and 4 iterations.
    Constant draws yield NaN (degenerate).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("rhat needs at least 2 chains and 4 iterations")
    if _is_degenerate(x):
        return math.nan
    split = _split_chains(x)
    bulk = _rhat_basic(_rank_normalise(split))
    folded = _rhat_basic(_rank_normalise(np.abs(split - np.median(split))))
    return max(bulk, folded)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Per-chain autocovariance via FFT, shape (chains, iters)."""
    m, n = x.shape
    centred = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centred, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real
    return acov / n


def _ess_core(x: np.ndarray) -> float:
    """ESS by Geyer's initial monotone sequence over combined chains."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    m, n = x.shape
    if _is_degenerate(x):
        return math.nan
    acov = _autocovariance(x)
    chain_means = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chain_means.var(ddof=1)
    if var_plus <= 0:
        return math.nan

    rho = np.zeros(n)
    rho[0] = 1.0
    rho[1] = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho_even, rho_odd = rho[0], rho[1]
    t = 1
    while t < n - 4 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    # enforce monotone decrease of paired sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    total = m * n
    tau = -1.0 + 2.0 * float(np.sum(rho[: max_t + 2]))
    tau = max(tau, 1.0 / math.log10(total))
    ess = total / tau
    return min(ess, ESS_CAP_FACTOR * total)


def ess_bulk(x: np.ndarray) -> float:
    """Bulk effective sample size on rank-normalised split chains."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] < 4:
        raise ValueError("ess_bulk needs at least 4 iterations")
    if _is_degenerate(x):
        return math.nan
    return _ess_core(_rank_normalise(_split_chains(x)))


def ess_tail(x: np.ndarray) -> float:
    """Tail ESS: minimum of the 5% and 95% exceedance-indicator ESS values."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] < 4:
        raise ValueError("ess_tail needs at least 4 iterations")
    if _is_degenerate(x):
        return math.nan
    out = []
    for prob in (0.05, 0.95):
        q = np.quantile(x, prob)
        indicator = (x <= q).astype(np.float64)
        if _is_degenerate(indicator):
            return math.nan
        out.append(_ess_core(_rank_normalise(_split_chains(indicator))))
    return min(out)


def computation_verdict(
    max_rhat: float,
    min_ess: float,
    divergence_fraction: float,
    divergence_count: int,
    settings: FilterSettings | None = None,
) -> str:
    """Aggregate diagnostics into ok / suspect / failed.

    ok requires clean R-hat, sufficient ESS and zero divergences; failed
    marks runs whose draws should not be trusted at all (heavy divergence
    or badly unmixed chains); everything in between is suspect and enters
    the escalation ladder. The rule is monotone: worsening any input never
    improves the verdict.
    """
    s = settings or FilterSettings()
    if not math.isfinite(max_rhat) or not math.isfinite(min_ess):
        return "failed"
    if divergence_fraction > s.divergence_suspect_fraction or max_rhat >= s.rhat_suspect:
        return "failed"
    if max_rhat < s.rhat_ok and min_ess >= s.ess_min and divergence_count == 0:
        return "ok"
    return "suspect"


def diagnose(draws: Draws, settings: FilterSettings | None = None,
             parameters: list[str] | None = None) -> ConvergenceReport:
    """Per-parameter diagnostics plus the aggregated computation verdict.

    Single-chain draws are split in half so the two-chain contracts of the
    underlying statistics still apply.
    """
    names = parameters if parameters is not None else draws.param_names
    rows = []
    for name in names:
        x = draws.get(name)
        if x.shape[0] < 2:
            x = _split_chains(x)
        degenerate = _is_degenerate(x)
        rows.append(
            ParameterDiagnostics(
                name=name,
                rhat=rhat(x) if not degenerate else math.nan,
                ess_bulk=ess_bulk(x) if not degenerate else math.nan,
                ess_tail=ess_tail(x) if not degenerate else math.nan,
                degenerate=degenerate,
            )
        )
    usable = [r for r in rows if not r.degenerate]
    if usable:
        max_rhat = max(r.rhat for r in usable)
        min_ess = min(min(r.ess_bulk, r.ess_tail) for r in usable)
    else:
        max_rhat = math.nan
        min_ess = math.nan
    verdict = computation_verdict(
        max_rhat, min_ess, draws.divergence_fraction, draws.divergence_count, settings
    )
    return ConvergenceReport(
        parameters=rows,
        divergence_count=draws.divergence_count,
        divergence_fraction=draws.divergence_fraction,
        max_treedepth_hits=draws.max_treedepth_hits,
        verdict=verdict,
        max_rhat=max_rhat,
        min_ess=min_ess,
    )
