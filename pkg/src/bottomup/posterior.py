"""Posterior of the density model as a blocked sampler target, and fitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np

from .data import ClusterRecord
from .density import (
    FIXED,
    RANDOM,
    ClusterData,
    ModelLayout,
    ModelParams,
    PriorScales,
    halfnormal_logpdf,
    log_likelihood,
    log_prior,
    normal_logpdf,
    resolve_effect_modes,
    uniform_logpdf,
)
from .mcmc import Block, ChainConfig, PosteriorDraws, gelman_rubin, run_chains

log = logging.getLogger(__name__)

# overdispersed starts: location jitter sd = prior sd / OVERDISPERSION
OVERDISPERSION = 1000.0


class DensityPosterior:
    """Joint posterior over model parameters and latent log densities.

    The state vector stores latent densities on the log scale, so the target
    is ``log_likelihood + log_prior + sum(log D_i)`` (change of variables).
    """

    def __init__(self, layout: ModelLayout, data: ClusterData):
        self.layout = layout
        self.data = data
        self.names = layout.names()
        sl = layout.slices
        self._sqrt_v = np.sqrt(data.weight)
        self._x_random = data.covariates[:, layout.random_k]
        self._x_fixed = data.covariates[:, layout.fixed_k]
        self._T = len(layout.types)
        self._S = len(layout.strata)
        self._A = len(layout.alpha_cells)

        def idx(name):
            return np.arange(sl[name].start, sl[name].stop)

        self.blocks = [
            Block("log_density", idx("log_density"), self._ld_latent),
            Block("alpha", idx("alpha"), self._ld_alpha),
            Block("xi_tp", idx("xi_tp"), self._ld_xi_tp),
            Block("nu_tp", idx("nu_tp"), self._ld_nu_tp, positive=True),
            Block("xi_t", idx("xi_t"), self._ld_xi_t),
            Block("nu_t", idx("nu_t"), self._ld_nu_t, positive=True),
            Block("tau_tp", idx("tau_tp"), self._ld_tau_tp, positive=True),
            Block("mu_tp", idx("mu_tp"), self._ld_mu_tp, positive=True),
            Block("sigma_tp", idx("sigma_tp"), self._ld_sigma_tp, positive=True),
            Block("mu_t", idx("mu_t"), self._ld_mu_t),
            Block("sigma_t", idx("sigma_t"), self._ld_sigma_t, positive=True),
        ]
        base = sl["beta_random"].start
        for j in range(len(layout.random_k)):
            self.blocks.append(
                Block(f"beta_random[{j}]", np.arange(base + j * self._T, base + (j + 1) * self._T), _BetaRandom(self, j))
            )
        if layout.random_k:
            self.blocks.append(Block("rho", idx("rho"), self._ld_rho))
            self.blocks.append(Block("omega", idx("omega"), self._ld_omega, positive=True))
        for j, pos in enumerate(idx("beta_fixed")):
            self.blocks.append(Block(f"beta_fixed[{j}]", np.array([pos]), _BetaFixed(self, j)))

    # pieces ---------------------------------------------------------------
    def _get(self, state, name):
        return state[self.layout.slices[name]]

    def _beta_random(self, state):
        return self._get(state, "beta_random").reshape(len(self.layout.random_k), self._T)

    def _mean(self, state):
        d = self.data
        out = self._get(state, "alpha")[d.alpha_idx]
        if self.layout.random_k:
            out = out + np.einsum("ij,ji->i", self._x_random, self._beta_random(state)[:, d.type_idx])
        if self.layout.fixed_k:
            out = out + self._x_fixed @ self._get(state, "beta_fixed")
        return out

    def _resid(self, state):
        sd = 1.0 / (self._get(state, "tau_tp")[self.data.stratum_idx] * self._sqrt_v)
        return normal_logpdf(self._get(state, "log_density"), self._mean(state), sd)

    def _alpha_terms(self, state):
        s = self.layout.stratum_of_alpha
        return normal_logpdf(self._get(state, "alpha"), self._get(state, "xi_tp")[s], self._get(state, "nu_tp")[s])

    def _xi_tp_terms(self, state):
        t = self.layout.type_of_stratum
        return normal_logpdf(self._get(state, "xi_tp"), self._get(state, "xi_t")[t], self._get(state, "nu_t")[t])

    def _tau_terms(self, state):
        return halfnormal_logpdf(self._get(state, "tau_tp"), self._get(state, "mu_tp"), self._get(state, "sigma_tp"))

    def _mu_tp_terms(self, state):
        t = self.layout.type_of_stratum
        return halfnormal_logpdf(self._get(state, "mu_tp"), self._get(state, "mu_t")[t], self._get(state, "sigma_t")[t])

    def _beta_terms(self, state):
        return normal_logpdf(self._beta_random(state), self._get(state, "rho")[:, None], self._get(state, "omega")[:, None])

    # block conditionals -----------------------------------------------------
    def _ld_latent(self, state):
        theta = self._get(state, "log_density")
        d = self.data
        return d.population * theta - d.area * np.exp(theta) + self._resid(state)

    def _ld_alpha(self, state):
        return self._alpha_terms(state) + np.bincount(self.data.alpha_idx, self._resid(state), self._A)

    def _ld_xi_tp(self, state):
        return self._xi_tp_terms(state) + np.bincount(self.layout.stratum_of_alpha, self._alpha_terms(state), self._S)

    def _ld_nu_tp(self, state):
        t = self.layout.type_of_stratum
        prior = uniform_logpdf(self._get(state, "nu_tp"), self._get(state, "nu_t")[t])
        return prior + np.bincount(self.layout.stratum_of_alpha, self._alpha_terms(state), self._S)

    def _ld_xi_t(self, state):
        prior = normal_logpdf(self._get(state, "xi_t"), 0.0, self.layout.priors.location_sd)
        return prior + np.bincount(self.layout.type_of_stratum, self._xi_tp_terms(state), self._T)

    def _ld_nu_t(self, state):
        t = self.layout.type_of_stratum
        prior = uniform_logpdf(self._get(state, "nu_t"), self.layout.priors.scale_upper)
        below = self._xi_tp_terms(state) + uniform_logpdf(self._get(state, "nu_tp"), self._get(state, "nu_t")[t])
        return prior + np.bincount(t, below, self._T)

    def _ld_tau_tp(self, state):
        return self._tau_terms(state) + np.bincount(self.data.stratum_idx, self._resid(state), self._S)

    def _ld_mu_tp(self, state):
        return self._mu_tp_terms(state) + self._tau_terms(state)

    def _ld_sigma_tp(self, state):
        t = self.layout.type_of_stratum
        return uniform_logpdf(self._get(state, "sigma_tp"), self._get(state, "sigma_t")[t]) + self._tau_terms(state)

    def _ld_mu_t(self, state):
        prior = normal_logpdf(self._get(state, "mu_t"), 0.0, self.layout.priors.location_sd)
        return prior + np.bincount(self.layout.type_of_stratum, self._mu_tp_terms(state), self._T)

    def _ld_sigma_t(self, state):
        t = self.layout.type_of_stratum
        prior = uniform_logpdf(self._get(state, "sigma_t"), self.layout.priors.scale_upper)
        below = self._mu_tp_terms(state) + uniform_logpdf(self._get(state, "sigma_tp"), self._get(state, "sigma_t")[t])
        return prior + np.bincount(t, below, self._T)

    def _ld_rho(self, state):
        prior = normal_logpdf(self._get(state, "rho"), 0.0, self.layout.priors.location_sd)
        return prior + self._beta_terms(state).sum(axis=1)

    def _ld_omega(self, state):
        prior = uniform_logpdf(self._get(state, "omega"), self.layout.priors.scale_upper)
        return prior + self._beta_terms(state).sum(axis=1)

    # target interface ---------------------------------------------------------
    def log_posterior(self, state):
        params = ModelParams.from_vector(self.layout, state)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lp = log_likelihood(params, self.data) + log_prior(params)
        return lp + float(np.sum(self._get(state, "log_density")))

    def initial_state(self, rng, chain):
        L, d = self.layout, self.data
        jitter = L.priors.location_sd / OVERDISPERSION
        state = np.empty(L.size)
        theta = np.log((d.population + 0.5) / d.area)
        alpha = np.array([theta[d.alpha_idx == a].mean() for a in range(self._A)])
        alpha = alpha + rng.normal(0, jitter, self._A)
        s_of_a = L.stratum_of_alpha
        xi_tp = np.array([alpha[s_of_a == s].mean() for s in range(self._S)]) + rng.normal(0, jitter, self._S)
        spread = np.array([alpha[s_of_a == s].std() for s in range(self._S)])
        nu_tp = np.maximum(spread, 0.2) * np.exp(rng.uniform(-0.5, 0.5, self._S))
        t_of_s = L.type_of_stratum
        xi_t = np.array([xi_tp[t_of_s == t].mean() for t in range(self._T)]) + rng.normal(0, jitter, self._T)
        nu_t = np.array([nu_tp[t_of_s == t].max() for t in range(self._T)]) * 2.0 + np.abs(
            np.array([np.ptp(xi_tp[t_of_s == t]) for t in range(self._T)])
        )
        resid = theta - alpha[d.alpha_idx]
        tau = np.empty(self._S)
        for s in range(self._S):
            members = d.stratum_idx == s
            sd = resid[members].std() if members.sum() > 1 else 0.5
            tau[s] = 1.0 / (max(sd, 0.1) * np.sqrt(d.weight[members].mean()))
        tau *= np.exp(rng.uniform(-0.5, 0.5, self._S))
        sigma_t = np.array([tau[t_of_s == t].max() for t in range(self._T)]) * 2.0
        Kr = len(L.random_k)
        beta_r = rng.normal(0, 0.1 * jitter, (Kr, self._T))
        state[L.slices["alpha"]] = alpha
        state[L.slices["xi_tp"]] = xi_tp
        state[L.slices["nu_tp"]] = nu_tp
        state[L.slices["xi_t"]] = xi_t
        state[L.slices["nu_t"]] = np.minimum(nu_t, 0.5 * L.priors.scale_upper)
        state[L.slices["tau_tp"]] = tau
        state[L.slices["mu_tp"]] = tau
        state[L.slices["sigma_tp"]] = tau
        state[L.slices["mu_t"]] = np.array([tau[t_of_s == t].mean() for t in range(self._T)])
        state[L.slices["sigma_t"]] = np.minimum(sigma_t, 0.5 * L.priors.scale_upper)
        state[L.slices["beta_random"]] = beta_r.ravel()
        state[L.slices["rho"]] = beta_r.mean(axis=1) if self._T else 0.0
        state[L.slices["omega"]] = np.abs(beta_r).max(axis=1) + 0.5 if Kr else []
        state[L.slices["beta_fixed"]] = rng.normal(0, 0.1 * jitter, len(L.fixed_k))
        state[L.slices["log_density"]] = theta + rng.normal(0, 0.05, d.n)
        return state

    def initial_steps(self):
        L = self.layout
        steps = np.full(L.size, 0.1)
        for name in L.positive_blocks():
            steps[L.slices[name]] = 0.3
        return steps


class _BetaRandom:
    def __init__(self, post: DensityPosterior, j: int):
        self.post, self.j = post, j

    def __call__(self, state):
        p = self.post
        return p._beta_terms(state)[self.j] + np.bincount(p.data.type_idx, p._resid(state), p._T)


class _BetaFixed:
    def __init__(self, post: DensityPosterior, j: int):
        self.post, self.j = post, j

    def __call__(self, state):
        p = self.post
        beta = p._get(state, "beta_fixed")[self.j]
        prior = normal_logpdf(beta, 0.0, p.layout.priors.location_sd)
        return np.atleast_1d(prior + p._resid(state).sum())


# --------------------------------------------------------------------------
# fitting


@dataclass
class DensityFit:
    layout: ModelLayout
    data: ClusterData
    draws: PosteriorDraws
    pilot_modes: Union[list, None] = None

    def rhat(self):
        return gelman_rubin(self.draws) if self.draws.n_chains > 1 else np.full(len(self.draws.names), np.nan)

    def converged(self, threshold=1.1):
        r = self.rhat()
        return bool(np.all(r < threshold))

    def params(self, state):
        return ModelParams.from_vector(self.layout, state)


def fit_density(
    clusters: Sequence[ClusterRecord],
    covariates: Sequence[str],
    modes: Union[str, Sequence[str]] = "auto",
    config: ChainConfig = ChainConfig(),
    priors: PriorScales = PriorScales(),
    pilot_config: ChainConfig = None,
) -> DensityFit:
    """Fit the density model by MCMC.

    ``modes="auto"`` first runs a pilot with every covariate random and
    converts covariates whose urban/rural slopes are indistinguishable into
    fixed effects.
    """
    clusters = list(clusters)
    pilot_modes = None
    if isinstance(modes, str):
        if modes != "auto":
            raise ValueError(f"modes must be 'auto' or a list, got {modes!r}")
        all_random = [RANDOM] * len(covariates)
        pilot_layout = ModelLayout.from_clusters(clusters, covariates, all_random, priors)
        if pilot_config is None:
            n_iter = max(400, config.n_iterations // 2)
            pilot_config = replace(config, n_iterations=n_iter, burn_in=n_iter // 2, thin=1)
        pilot_target = DensityPosterior(pilot_layout, ClusterData.build(pilot_layout, clusters))
        pilot = run_chains(pilot_target, pilot_config)
        modes = resolve_effect_modes(pilot, pilot_layout)
        pilot_modes = list(modes)
        log.info("effect modes resolved: %s", dict(zip(covariates, modes)))
    layout = ModelLayout.from_clusters(clusters, covariates, list(modes), priors)
    data = ClusterData.build(layout, clusters)
    draws = run_chains(DensityPosterior(layout, data), config)
    return DensityFit(layout, data, draws, pilot_modes)


__all__ = ["DensityPosterior", "DensityFit", "fit_density", "FIXED", "RANDOM"]
