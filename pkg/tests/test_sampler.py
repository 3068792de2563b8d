import math

import numpy as np
import pytest

from mvfilter.config import SamplerSettings
from mvfilter.model import Model
from mvfilter.multiverse import ModelSpec
from mvfilter.sampler import (
    UnfittableError,
    chain_rng,
    estimate_parameterisation,
    refit_with_parameterisation,
    run_chain,
    sample,
    sample_model,
)

from conftest import make_dataset


def gaussian_target(dim):
    def f(q):
        return -0.5 * float(q @ q), -q
    return f


def test_standard_normal_50d_means_and_acceptance():
    dim = 50
    cfg = SamplerSettings(chains=4, warmup_iters=1000, sampling_iters=1000, seed=42)
    means, accs = [], []
    for c in range(cfg.chains):
        draws, stats = run_chain(gaussian_target(dim), dim, cfg, chain_rng(cfg.seed, c))
        means.append(draws.mean(axis=0))
        accs.append(stats["accept_stat__"].mean())
    mean_abs_err = float(np.abs(np.mean(means, axis=0)).mean())
    assert mean_abs_err < 0.1
    assert abs(float(np.mean(accs)) - cfg.target_accept) < 0.1


def test_same_seed_identical_draws():
    dim = 5
    cfg = SamplerSettings(chains=1, warmup_iters=200, sampling_iters=200, seed=7)
    d1, s1 = run_chain(gaussian_target(dim), dim, cfg, chain_rng(cfg.seed, 0))
    d2, s2 = run_chain(gaussian_target(dim), dim, cfg, chain_rng(cfg.seed, 0))
    np.testing.assert_array_equal(d1, d2)
    np.testing.assert_array_equal(s1["n_leapfrog__"], s2["n_leapfrog__"])


def test_model_sampling_same_seed_byte_identical(epilepsy):
    spec = ModelSpec("poisson", ("Trt",), (), "default")
    cfg = SamplerSettings(chains=2, warmup_iters=150, sampling_iters=150, seed=3)
    a = sample(spec, epilepsy, cfg)
    b = sample(spec, epilepsy, cfg)
    np.testing.assert_array_equal(a.params, b.params)
    assert a.params.tobytes() == b.params.tobytes()


def test_conjugate_normal_normal_engine_oracle():
    # y ~ N(mu, sigma^2) with sigma known, mu ~ N(mu0, tau0^2): posterior is
    # exactly normal, so sampled mean/sd must match within MC error
    rng = np.random.default_rng(0)
    sigma, mu0, tau0, n = 1.5, 0.3, 2.0, 80
    y = rng.normal(1.0, sigma, size=n)
    prec = 1 / tau0**2 + n / sigma**2
    post_mean = (mu0 / tau0**2 + y.sum() / sigma**2) / prec
    post_sd = math.sqrt(1 / prec)

    def target(q):
        mu = q[0]
        lp = -0.5 * np.sum((y - mu) ** 2) / sigma**2 - 0.5 * (mu - mu0) ** 2 / tau0**2
        g = np.array([np.sum(y - mu) / sigma**2 - (mu - mu0) / tau0**2])
        return float(lp), g

    cfg = SamplerSettings(chains=4, warmup_iters=500, sampling_iters=500, seed=11)
    chains = [run_chain(target, 1, cfg, chain_rng(cfg.seed, c))[0][:, 0] for c in range(4)]
    draws = np.concatenate(chains)
    ess_floor = len(draws) / 10  # very conservative for a 1-d gaussian
    mc_se_mean = post_sd / math.sqrt(ess_floor)
    assert abs(draws.mean() - post_mean) < 3 * mc_se_mean
    assert abs(draws.std(ddof=1) - post_sd) < 3 * post_sd / math.sqrt(ess_floor)


def test_unfittable_initialisation_raises():
    def bad(q):
        return -math.inf, np.zeros_like(q)

    cfg = SamplerSettings(chains=1, warmup_iters=50, sampling_iters=50, seed=1)
    with pytest.raises(UnfittableError):
        run_chain(bad, 3, cfg, chain_rng(1, 0))


class TestFunnelGeometry:
    """Centred fits of an uninformative-group hierarchy diverge; the
    non-centred parameterisation samples the same posterior cleanly."""

    def _spec(self, lam):
        return ModelSpec("normal", (), ("school",), "default",
                         parameterisation=(("school", lam),))

    def _fit(self, data, lam, seed, ta=0.8):
        cfg = SamplerSettings(chains=4, warmup_iters=400, sampling_iters=600,
                              seed=seed, target_accept=ta)
        return sample_model(Model(self._spec(lam), data), cfg)

    @pytest.mark.slow
    def test_centred_diverges_noncentred_does_not(self, funnel_dataset):
        centred_pos = 0
        noncentred_zero = 0
        for seed in range(10):
            if self._fit(funnel_dataset, 1.0, seed).divergence_count > 0:
                centred_pos += 1
            if self._fit(funnel_dataset, 0.0, seed, ta=0.95).divergence_count == 0:
                noncentred_zero += 1
        assert centred_pos >= 6  # majority criterion
        assert noncentred_zero >= 8


def test_estimate_parameterisation_funnel_prefers_noncentred(funnel_dataset):
    spec = ModelSpec("normal", (), ("school",), "default")
    model = Model(spec, funnel_dataset)
    pilot = sample_model(model, SamplerSettings(chains=2, warmup_iters=300,
                                                sampling_iters=400, seed=0))
    lam, warnings = estimate_parameterisation(model, pilot)
    assert lam["school"] == 0.0
    assert not warnings


def test_estimate_parameterisation_informative_groups_prefer_centred():
    # large informative groups: offsets pinned by data, independent of sd
    rng = np.random.default_rng(4)
    G, per = 6, 60
    codes = np.repeat(np.arange(G), per)
    theta = rng.normal(0, 2.0, size=G)
    y = theta[codes] + rng.normal(size=G * per)
    data = make_dataset(y, groups={"g": codes})
    spec = ModelSpec("normal", (), ("g",), "default")
    model = Model(spec, data)
    pilot = sample_model(model, SamplerSettings(chains=2, warmup_iters=300,
                                                sampling_iters=400, seed=1))
    lam, _ = estimate_parameterisation(model, pilot)
    assert lam["g"] == 1.0


def test_estimate_parameterisation_degenerate_pilot_flags():
    from mvfilter.sampler import Draws, STAT_NAMES

    spec = ModelSpec("normal", (), ("g",), "default")
    data = make_dataset(np.zeros(4), groups={"g": [0, 0, 1, 1]})
    model = Model(spec, data)
    names = model.constrained_names()
    params = np.zeros((2, 150, len(names)))
    params[:, :, names.index("sd_g")] = 1.0  # constant sd draws
    rng = np.random.default_rng(0)
    for lvl in (1, 2):
        params[:, :, names.index(f"r_g[{lvl}]")] = rng.normal(size=(2, 150))
    stats = {n: np.zeros((2, 150)) for n in STAT_NAMES}
    pilot = Draws(param_names=names, params=params, stats=stats, seed=0)
    lam, warnings = estimate_parameterisation(model, pilot)
    assert lam["g"] == 0.0
    assert warnings and "degenerate" in warnings[0]


def test_estimate_parameterisation_tie_breaks_centred():
    from mvfilter.sampler import Draws, STAT_NAMES

    spec = ModelSpec("normal", (), ("g",), "default")
    data = make_dataset(np.zeros(4), groups={"g": [0, 0, 1, 1]})
    model = Model(spec, data)
    names = model.constrained_names()
    rng = np.random.default_rng(0)
    params = np.zeros((2, 150, len(names)))
    params[:, :, names.index("sd_g")] = np.exp(rng.normal(size=(2, 150)))
    # offsets identically zero: every candidate weight scores the same
    stats = {n: np.zeros((2, 150)) for n in STAT_NAMES}
    pilot = Draws(param_names=names, params=params, stats=stats, seed=0)
    lam, _ = estimate_parameterisation(model, pilot)
    assert lam["g"] == 1.0


def test_refit_without_group_terms_identical(epilepsy):
    spec = ModelSpec("poisson", ("Trt",), (), "default")
    cfg = SamplerSettings(chains=2, warmup_iters=150, sampling_iters=150, seed=9)
    a = sample(spec, epilepsy, cfg)
    b = refit_with_parameterisation(spec, epilepsy, cfg, {})
    np.testing.assert_array_equal(a.params, b.params)


def test_posterior_agrees_across_parameterisations():
    # changing the parameterisation changes geometry, not the target
    rng = np.random.default_rng(12)
    G, per = 6, 20
    codes = np.repeat(np.arange(G), per)
    y = rng.normal(0, 1, size=G * per) + np.repeat(rng.normal(0, 0.8, G), per)
    data = make_dataset(y, groups={"g": codes})
    cfg = SamplerSettings(chains=4, warmup_iters=400, sampling_iters=500, seed=5)
    fits = {}
    for lam in (0.0, 1.0):
        spec = ModelSpec("normal", (), ("g",), "default", parameterisation=(("g", lam),))
        fits[lam] = sample_model(Model(spec, data), cfg)
    for name in ("intercept", "sd_g", "sigma"):
        a, b = fits[0.0].flat(name), fits[1.0].flat(name)
        se = math.sqrt(np.var(a) / (len(a) / 10) + np.var(b) / (len(b) / 10))
        assert abs(a.mean() - b.mean()) < 3 * se, name


def test_divergence_count_reproducible(funnel_dataset):
    spec = ModelSpec("normal", (), ("school",), "default")
    cfg = SamplerSettings(chains=2, warmup_iters=200, sampling_iters=300, seed=123)
    a = sample_model(Model(spec, funnel_dataset), cfg)
    b = sample_model(Model(spec, funnel_dataset), cfg)
    assert a.divergence_count == b.divergence_count
    np.testing.assert_array_equal(a.stats["divergent__"], b.stats["divergent__"])
