"""Posterior predictive checking with PIT values and simultaneous ECDF bands.

PIT values are computed exactly for continuous outcomes and by the
randomised construction for counts, so a well-calibrated predictive yields
uniform PIT either way. The simultaneous confidence band is calibrated by
simulation: the pointwise binomial quantile level is tuned until the
requested fraction of simulated uniform ECDFs stays fully inside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import stats as sstats

from .cv import dispersion_from_draws, eta_from_draws
from .model import Model
from .sampler import Draws


@dataclass(frozen=True)
class EcdfBand:
    grid: np.ndarray  # evaluation points in (0, 1)
    lower: np.ndarray  # lower envelope counts / N
    upper: np.ndarray  # upper envelope counts / N
    n: int
    alpha: float
    gamma: float  # calibrated pointwise level


@dataclass
class PpcResult:
    n_replicates: int
    pit: np.ndarray
    band: EcdfBand
    ecdf: np.ndarray  # empirical ECDF of the PIT values on the band grid
    violation_fraction: float
    verdict: str  # pass | fail


def replicate(model: Model, draws: Draws, n_rep: int, seed: int) -> np.ndarray:
    """Posterior replicates of the response, shape (n_rep, n_obs).

    Uses ``n_rep`` evenly thinned draws (group offsets included) and a
    dedicated generator, so results are deterministic given the seed.
    """
    S = draws.n_draws
    if n_rep > S:
        raise ValueError(f"n_rep {n_rep} exceeds retained draws {S}")
    idx = np.unique(np.linspace(0, S - 1, n_rep).round().astype(int))
    eta = eta_from_draws(model, draws)[idx]
    disp = dispersion_from_draws(model, draws)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x9CC,)))
    fam = model.spec.family
    if fam == "poisson":
        return rng.poisson(np.exp(eta)).astype(np.float64)
    if fam == "negative_binomial":
        phi = disp[idx][:, None]
        lam = rng.gamma(shape=phi, scale=np.exp(eta) / phi)
        return rng.poisson(lam).astype(np.float64)
    sigma = disp[idx][:, None]
    return rng.normal(eta, sigma)


def pit(model: Model, draws: Draws, seed: int) -> np.ndarray:
    """Probability integral transform of the observed responses.

    Continuous families: mean predictive CDF at y. Count families:
    randomised PIT, F(y-1) + u * f(y) averaged over draws with one uniform
    per observation from the seed stream.
    """
    eta = eta_from_draws(model, draws)
    disp = dispersion_from_draws(model, draws)
    y = model.y[None, :]
    fam = model.spec.family
    if fam == "normal":
        return sstats.norm.cdf(y, eta, disp[:, None]).mean(axis=0)
    if fam == "poisson":
        mu = np.exp(eta)
        cdf_below = sstats.poisson.cdf(y - 1, mu).mean(axis=0)
        pmf = sstats.poisson.pmf(y, mu).mean(axis=0)
    else:
        phi = disp[:, None]
        mu = np.exp(eta)
        p = phi / (phi + mu)
        cdf_below = sstats.nbinom.cdf(y - 1, phi, p).mean(axis=0)
        pmf = sstats.nbinom.pmf(y, phi, p).mean(axis=0)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x917,)))
    u = rng.uniform(size=model.data.n_obs)
    return np.clip(cdf_below + u * pmf, 0.0, 1.0)


@lru_cache(maxsize=32)
def _band_cached(n: int, alpha: float, n_sim: int, seed: int, grid_size: int):
    grid = np.arange(1.0, grid_size + 1.0) / (grid_size + 1.0)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xECDF,)))
    sims = rng.uniform(size=(n_sim, n))
    sims.sort(axis=1)
    counts = np.apply_along_axis(np.searchsorted, 1, sims, grid, side="right")

    def coverage(gamma: float) -> float:
        lo = sstats.binom.ppf(gamma / 2.0, n, grid)
        hi = sstats.binom.ppf(1.0 - gamma / 2.0, n, grid)
        inside = np.all((counts >= lo) & (counts <= hi), axis=1)
        return float(inside.mean())

    # largest pointwise level whose simultaneous coverage still reaches 1 - alpha
    lo_g, hi_g = 1e-12, alpha
    for _ in range(60):
        mid = math.sqrt(lo_g * hi_g)
        if coverage(mid) >= 1.0 - alpha:
            lo_g = mid
        else:
            hi_g = mid
    gamma = lo_g
    lower = sstats.binom.ppf(gamma / 2.0, n, grid) / n
    upper = sstats.binom.ppf(1.0 - gamma / 2.0, n, grid) / n
    return grid, lower, upper, gamma


def ecdf_band(n: int, alpha: float, n_sim: int = 10_000, seed: int = 0,
              grid_size: int | None = None) -> EcdfBand:
    """Simultaneous confidence band for the ECDF of uniform samples of size n."""
    if n < 10:
        raise ValueError("ecdf band needs n >= 10")
    if not (0.0 < alpha < 0.5):
        raise ValueError("alpha must be in (0, 0.5)")
    if grid_size is None:
        grid_size = min(n, 100)
    grid, lower, upper, gamma = _band_cached(n, float(alpha), int(n_sim), int(seed), int(grid_size))
    return EcdfBand(grid=grid, lower=lower, upper=upper, n=n, alpha=alpha, gamma=gamma)


def ecdf_on_grid(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.sort(values), grid, side="right") / len(values)


def ppc_verdict(pit_values: np.ndarray, band: EcdfBand) -> tuple[str, float, np.ndarray]:
    """Pass/fail plus the violated-grid fraction and the PIT ECDF polyline."""
    ecdf = ecdf_on_grid(pit_values, band.grid)
    outside = (ecdf < band.lower - 1e-12) | (ecdf > band.upper + 1e-12)
    frac = float(outside.mean())
    return ("fail" if np.any(outside) else "pass"), frac, ecdf


def check_model(model: Model, draws: Draws, n_rep: int, alpha: float,
                n_sim: int, seed: int) -> PpcResult:
    """Full posterior predictive check for one fitted model."""
    pit_values = pit(model, draws, seed)
    band = ecdf_band(model.data.n_obs, alpha, n_sim=n_sim, seed=seed)
    verdict, frac, ecdf = ppc_verdict(pit_values, band)
    return PpcResult(
        n_replicates=n_rep,
        pit=pit_values,
        band=band,
        ecdf=ecdf,
        violation_fraction=frac,
        verdict=verdict,
    )
