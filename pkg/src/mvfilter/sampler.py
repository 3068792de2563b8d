"""Dynamic HMC sampling with multinomial trajectory sampling.

The sampler builds no-U-turn trajectories by recursive doubling, samples
proposals multinomially by trajectory weight, adapts its step size by dual
averaging towards a target acceptance statistic, and adapts a diagonal
inverse mass matrix over expanding warmup windows. A transition is flagged
divergent exactly when the Hamiltonian error along its trajectory exceeds
the divergence cap.

Chains are driven by independent generators derived from (seed, chain), so
serial and parallel execution produce bit-identical draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import SamplerSettings
from .data import Dataset
from .model import Model
from .multiverse import ModelSpec

STAT_NAMES = ("lp__", "accept_stat__", "stepsize__", "treedepth__", "n_leapfrog__", "divergent__", "energy__")

PARAMETERISATION_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


class UnfittableError(RuntimeError):
    """No finite starting point found; the model is flagged, not fatal."""


@dataclass
class Draws:
    """Posterior draws on the constrained scale plus per-iteration sampler stats."""

    param_names: list[str]
    params: np.ndarray  # (chains, iters, n_params)
    stats: dict[str, np.ndarray]  # each (chains, iters)
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c, i, p = self.params.shape
        if p != len(self.param_names):
            raise ValueError("param_names do not match params")
        for name, arr in self.stats.items():
            if arr.shape != (c, i):
                raise ValueError(f"stat {name!r} misaligned with draws")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("non-finite values in retained draws")
        self._index = {n: j for j, n in enumerate(self.param_names)}

    @property
    def n_chains(self) -> int:
        return self.params.shape[0]

    @property
    def n_iters(self) -> int:
        return self.params.shape[1]

    @property
    def n_draws(self) -> int:
        return self.params.shape[0] * self.params.shape[1]

    def get(self, name: str) -> np.ndarray:
        """Per-chain draws of one parameter, shape (chains, iters)."""
        if name not in self._index:
            raise KeyError(f"no parameter {name!r} in draws")
        return self.params[:, :, self._index[name]]

    def flat(self, name: str) -> np.ndarray:
        return self.get(name).reshape(-1)

    def matrix(self) -> np.ndarray:
        """All draws pooled over chains, shape (n_draws, n_params)."""
        return self.params.reshape(-1, len(self.param_names))

    @property
    def divergence_count(self) -> int:
        return int(self.stats["divergent__"].sum())

    @property
    def divergence_fraction(self) -> float:
        return self.divergence_count / self.n_draws

    @property
    def max_treedepth_hits(self) -> int:
        depth_cap = self.meta.get("max_tree_depth", np.inf)
        return int((self.stats["treedepth__"] >= depth_cap).sum())

    @property
    def mean_leapfrog(self) -> float:
        return float(self.stats["n_leapfrog__"].mean())


# ------------------------------------------------------------------ engine


class _Tree:
    """A built trajectory segment in absolute orientation.

    ``minus`` is the backward-most point of the segment, ``plus`` the
    forward-most; ``p_sum`` the summed momenta; the proposal is the
    multinomially selected candidate inside the segment.
    """

    __slots__ = (
        "q_minus", "p_minus", "g_minus", "q_plus", "p_plus", "g_plus", "p_sum",
        "q_prop", "p_prop", "lp_prop", "g_prop", "logw",
        "ok", "divergent", "sum_accept", "n_leapfrog",
    )

    def __init__(self, q, p, grad, lp, logw, ok, divergent, accept):
        self.q_minus = self.q_plus = self.q_prop = q
        self.p_minus = self.p_plus = self.p_prop = p
        self.g_minus = self.g_plus = self.g_prop = grad
        self.p_sum = p.copy()
        self.lp_prop = lp
        self.logw = logw
        self.ok = ok
        self.divergent = divergent
        self.sum_accept = accept
        self.n_leapfrog = 1


class _NutsChain:
    def __init__(self, logp_and_grad, q0, rng, cfg: SamplerSettings):
        self.f = logp_and_grad
        self.rng = rng
        self.cfg = cfg
        self.q = np.array(q0, dtype=np.float64)
        self.lp, self.grad = self.f(self.q)
        if not math.isfinite(self.lp):
            raise UnfittableError("non-finite density at the initial point")
        self.inv_mass = np.ones(len(self.q))
        self.eps = 1.0
        self.n_grad_evals = 0

    def _kinetic(self, p):
        return 0.5 * float(np.dot(p, self.inv_mass * p))

    def _leapfrog(self, q, p, grad, eps):
        p1 = p + 0.5 * eps * grad
        q1 = q + eps * self.inv_mass * p1
        lp1, grad1 = self.f(q1)
        self.n_grad_evals += 1
        p1 = p1 + 0.5 * eps * grad1
        return q1, p1, lp1, grad1

    def _sample_momentum(self):
        return self.rng.standard_normal(len(self.q)) / np.sqrt(self.inv_mass)

    def _uturn(self, p_sum, p_begin, p_end) -> bool:
        return (
            np.dot(p_sum, self.inv_mass * p_begin) <= 0.0
            or np.dot(p_sum, self.inv_mass * p_end) <= 0.0
        )

    def find_reasonable_epsilon(self):
        """Double or halve the step size until acceptance crosses 1/2."""
        eps = 1.0
        p = self._sample_momentum()
        h0 = self.lp - self._kinetic(p)

        def delta_h(eps):
            _, p1, lp1, _ = self._leapfrog(self.q, p, self.grad, eps)
            h1 = lp1 - self._kinetic(p1)
            return h1 - h0 if math.isfinite(h1) else -np.inf

        delta = delta_h(eps)
        direction = 1 if delta > math.log(0.5) else -1
        for _ in range(100):
            if direction * delta <= direction * math.log(0.5):
                break
            eps *= 2.0**direction
            if not (1e-10 < eps < 1e7):
                break
            delta = delta_h(eps)
        self.eps = eps

    def _leaf(self, q, p, grad, direction, h0) -> _Tree:
        """One leapfrog step in ``direction``; weight relative to h0."""
        q1, p1, lp1, grad1 = self._leapfrog(q, p, grad, direction * self.eps)
        h1 = lp1 - self._kinetic(p1) if math.isfinite(lp1) else -np.inf
        logw = h1 - h0 if math.isfinite(h1) else -np.inf
        divergent = (not math.isfinite(h1)) or (logw < -self.cfg.divergence_cap)
        accept = math.exp(min(logw, 0.0)) if math.isfinite(logw) else 0.0
        return _Tree(q1, p1, grad1, lp1, logw, not divergent, divergent, accept)

    def _combine(self, left: _Tree, right: _Tree) -> _Tree:
        """Merge two adjacent segments (``left`` backward of ``right``)."""
        logw = np.logaddexp(left.logw, right.logw)
        if math.isfinite(logw) and self.rng.uniform() < math.exp(right.logw - logw):
            chosen = right
        else:
            chosen = left
        tree = _Tree(chosen.q_prop, chosen.p_prop, chosen.g_prop, chosen.lp_prop,
                     logw, True, left.divergent or right.divergent,
                     left.sum_accept + right.sum_accept)
        tree.q_minus, tree.p_minus, tree.g_minus = left.q_minus, left.p_minus, left.g_minus
        tree.q_plus, tree.p_plus, tree.g_plus = right.q_plus, right.p_plus, right.g_plus
        tree.p_sum = left.p_sum + right.p_sum
        tree.n_leapfrog = left.n_leapfrog + right.n_leapfrog
        tree.ok = (
            not self._uturn(tree.p_sum, tree.p_minus, tree.p_plus)
            and not self._uturn(left.p_sum + right.p_minus, left.p_minus, right.p_minus)
            and not self._uturn(left.p_plus + right.p_sum, left.p_plus, right.p_plus)
        )
        return tree

    def _build_tree(self, q, p, grad, depth, direction, h0) -> _Tree:
        """Build a segment of 2^depth new points starting beyond (q, p)."""
        if depth == 0:
            return self._leaf(q, p, grad, direction, h0)
        first = self._build_tree(q, p, grad, depth - 1, direction, h0)
        if not first.ok:
            return first
        if direction == 1:
            second = self._build_tree(first.q_plus, first.p_plus, first.g_plus, depth - 1, direction, h0)
            left, right = first, second
        else:
            second = self._build_tree(first.q_minus, first.p_minus, first.g_minus, depth - 1, direction, h0)
            left, right = second, first
        if not second.ok:
            second.sum_accept += first.sum_accept
            second.n_leapfrog += first.n_leapfrog
            second.divergent = second.divergent or first.divergent
            return second
        return self._combine(left, right)

    def step(self) -> dict:
        """One NUTS transition from the current point; returns an info dict."""
        p0 = self._sample_momentum()
        h0 = self.lp - self._kinetic(p0)
        tree = _Tree(self.q, p0, self.grad, self.lp, 0.0, True, False, 0.0)
        tree.n_leapfrog = 0
        depth = 0
        divergent = False
        while depth < self.cfg.max_tree_depth:
            direction = 1 if self.rng.uniform() < 0.5 else -1
            if direction == 1:
                sub = self._build_tree(tree.q_plus, tree.p_plus, tree.g_plus, depth, direction, h0)
            else:
                sub = self._build_tree(tree.q_minus, tree.p_minus, tree.g_minus, depth, direction, h0)
            divergent = divergent or sub.divergent
            tree.sum_accept += sub.sum_accept
            tree.n_leapfrog += sub.n_leapfrog
            if not sub.ok:
                break
            # biased progressive sampling favours the fresh half
            if self.rng.uniform() < math.exp(min(0.0, sub.logw - tree.logw)):
                tree.q_prop, tree.p_prop = sub.q_prop, sub.p_prop
                tree.lp_prop, tree.g_prop = sub.lp_prop, sub.g_prop
            left, right = (tree, sub) if direction == 1 else (sub, tree)
            whole_ok = (
                not self._uturn(left.p_sum + right.p_sum, left.p_minus, right.p_plus)
                and not self._uturn(left.p_sum + right.p_minus, left.p_minus, right.p_minus)
                and not self._uturn(left.p_plus + right.p_sum, left.p_plus, right.p_plus)
            )
            tree.logw = np.logaddexp(tree.logw, sub.logw)
            tree.q_minus, tree.p_minus, tree.g_minus = left.q_minus, left.p_minus, left.g_minus
            tree.q_plus, tree.p_plus, tree.g_plus = right.q_plus, right.p_plus, right.g_plus
            tree.p_sum = left.p_sum + right.p_sum
            depth += 1
            if not whole_ok:
                break
        self.q, self.lp, self.grad = tree.q_prop, tree.lp_prop, tree.g_prop
        accept_stat = tree.sum_accept / max(tree.n_leapfrog, 1)
        energy = self._kinetic(tree.p_prop) - tree.lp_prop
        return {
            "lp__": tree.lp_prop,
            "accept_stat__": accept_stat,
            "stepsize__": self.eps,
            "treedepth__": depth,
            "n_leapfrog__": tree.n_leapfrog,
            "divergent__": float(divergent),
            "energy__": energy,
        }


def _mass_windows(n_warmup: int, init_buffer=75, term_buffer=50, base_window=25):
    """Expanding variance-adaptation windows inside warmup (Stan-style)."""
    if n_warmup < 20:
        return []
    if init_buffer + term_buffer + base_window > n_warmup:
        init_buffer = max(1, int(0.15 * n_warmup))
        term_buffer = max(1, int(0.10 * n_warmup))
        base_window = n_warmup - init_buffer - term_buffer
        if base_window <= 0:
            return []
    windows = []
    start, size = init_buffer, base_window
    while start < n_warmup - term_buffer:
        end = start + size
        if end + 2 * size > n_warmup - term_buffer:
            end = n_warmup - term_buffer
        windows.append((start, end))
        start, size = end, size * 2
    return windows


@dataclass
class _DualAveraging:
    target: float
    mu: float = 0.0
    log_eps_bar: float = 0.0
    h_bar: float = 0.0
    count: int = 0
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75

    def restart(self, eps: float):
        self.mu = math.log(10.0 * eps)
        self.log_eps_bar = math.log(eps)
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_stat: float) -> float:
        self.count += 1
        m = self.count
        eta = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat)
        log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        w = m**-self.kappa
        self.log_eps_bar = w * log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(log_eps)

    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def run_chain(logp_and_grad, dim: int, cfg: SamplerSettings, rng: np.random.Generator,
              init: np.ndarray | None = None):
    """Run one warmup+sampling chain against a raw log-density.

    Returns (draws, stats): post-warmup unconstrained points of shape
    (sampling_iters, dim) and aligned per-iteration sampler statistics.
    """
    if init is None:
        q0 = None
        for _ in range(100):
            cand = rng.uniform(-cfg.init_jitter, cfg.init_jitter, dim)
            lp, _ = logp_and_grad(cand)
            if math.isfinite(lp):
                q0 = cand
                break
        if q0 is None:
            raise UnfittableError("no finite-density starting point in 100 attempts")
    else:
        q0 = np.asarray(init, dtype=np.float64)

    chain = _NutsChain(logp_and_grad, q0, rng, cfg)
    chain.find_reasonable_epsilon()
    averager = _DualAveraging(target=cfg.target_accept)
    averager.restart(chain.eps)

    windows = _mass_windows(cfg.warmup_iters)
    window_idx = 0
    window_buffer: list[np.ndarray] = []

    for it in range(cfg.warmup_iters):
        info = chain.step()
        chain.eps = averager.update(info["accept_stat__"])
        if window_idx < len(windows):
            start, end = windows[window_idx]
            if start <= it < end:
                window_buffer.append(chain.q.copy())
            if it == end - 1:
                n = len(window_buffer)
                if n >= 2:
                    var = np.var(np.asarray(window_buffer), axis=0, ddof=1)
                    chain.inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                window_buffer = []
                window_idx += 1
                chain.find_reasonable_epsilon()
                averager.restart(chain.eps)

    chain.eps = averager.final()

    draws = np.empty((cfg.sampling_iters, dim))
    stats = {name: np.empty(cfg.sampling_iters) for name in STAT_NAMES}
    for it in range(cfg.sampling_iters):
        info = chain.step()
        draws[it] = chain.q
        for name in STAT_NAMES:
            stats[name][it] = info[name]
    return draws, stats


def chain_rng(seed: int, chain: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(chain, *extra)))


def sample_model(model: Model, cfg: SamplerSettings) -> Draws:
    """Fit a bound model with NUTS; returns constrained draws plus stats."""
    dim = model.dim
    all_draws = []
    all_stats = {name: [] for name in STAT_NAMES}
    for c in range(cfg.chains):
        rng = chain_rng(cfg.seed, c)
        draws, stats = run_chain(model.log_joint_and_grad, dim, cfg, rng)
        all_draws.append(draws)
        for name in STAT_NAMES:
            all_stats[name].append(stats[name])
    values = np.asarray(all_draws)  # (chains, iters, dim)
    views = model.constrain(values)
    names = model.constrained_names()
    params = np.stack([views[n] for n in names], axis=-1)
    return Draws(
        param_names=names,
        params=params,
        stats={k: np.asarray(v) for k, v in all_stats.items()},
        seed=cfg.seed,
        meta={
            "model_id": model.spec.model_id,
            "target_accept": cfg.target_accept,
            "max_tree_depth": cfg.max_tree_depth,
            "parameterisation": {g: lam for g, lam in model.spec.parameterisation},
            "chains": cfg.chains,
            "warmup_iters": cfg.warmup_iters,
            "sampling_iters": cfg.sampling_iters,
        },
    )


def sample(spec: ModelSpec, data: Dataset, cfg: SamplerSettings) -> Draws:
    return sample_model(Model(spec, data), cfg)


def estimate_parameterisation(model: Model, pilot: Draws) -> tuple[dict[str, float], list[str]]:
    """Pick a centred/non-centred weight per group term from pilot draws.

    For each group term the candidate weight ``lam`` implies stored
    parameters ``w = r / sd^(1-lam)``; the chosen weight minimises the mean
    absolute posterior correlation between log sd and those parameters.
    Ties break towards the centred end. Returns (weights, warnings).
    """
    if pilot.n_draws < 200:
        raise ValueError("parameterisation estimation needs at least 200 post-warmup draws")
    out: dict[str, float] = {}
    warnings: list[str] = []
    for g in model.spec.group_terms:
        sd = pilot.flat(f"sd_{g}")
        log_sd = np.log(np.maximum(sd, 1e-300))
        if np.std(log_sd) < 1e-10:
            out[g] = 0.0
            warnings.append(f"group {g!r}: degenerate pilot (constant sd draws); defaulting to non-centred")
            continue
        levels = model.data.group_levels[g]
        offsets = np.stack([pilot.flat(f"r_{g}[{lvl}]") for lvl in levels], axis=1)
        zl = log_sd - log_sd.mean()
        denom_l = math.sqrt(float(np.sum(zl * zl)))
        best_lam, best_val = None, None
        for lam in PARAMETERISATION_GRID:
            w = offsets / (sd ** (1.0 - lam))[:, None]
            wc = w - w.mean(axis=0, keepdims=True)
            denom_w = np.sqrt(np.sum(wc * wc, axis=0))
            with np.errstate(invalid="ignore", divide="ignore"):
                corr = (zl @ wc) / (denom_l * denom_w)
            corr = np.where(np.isfinite(corr), corr, 0.0)
            val = float(np.mean(np.abs(corr)))
            better = best_val is None or val < best_val - 1e-12
            tie = best_val is not None and abs(val - best_val) <= 1e-12 and lam > best_lam
            if better or tie:
                best_lam, best_val = lam, val
        out[g] = best_lam
    return out, warnings


def refit_with_parameterisation(
    spec: ModelSpec, data: Dataset, cfg: SamplerSettings, lam: dict[str, float]
) -> Draws:
    """Refit with the group-term parameterisation overridden by ``lam``."""
    return sample(spec.with_parameterisation(lam), data, cfg)
