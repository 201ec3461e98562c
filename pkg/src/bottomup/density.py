"""Hierarchical Poisson-LogNormal population density model.

Cluster population counts are Poisson with mean ``D_i * A_i``; log density is
Normal around a linear predictor with a settlement-type x province x region
intercept and per-covariate slopes that are either shared (fixed) or
estimated per settlement type (random). The log-density standard deviation of
cluster ``i`` is ``1 / (tau_tp * sqrt(v_i))`` where ``v_i`` is the cluster's
normalized inverse sampling weight.

Conventions: every Normal and Half-Normal second argument is a standard
deviation; Half-Normal(m, s) is Normal(m, s) truncated to ``[0, inf)`` with
its normalizing constant; Uniform(0, u) bounds apply on the sd scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.special import gammaln, log_ndtr

from .data import SETTLEMENT_TYPES, ClusterRecord

RANDOM = "random"
FIXED = "fixed"
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class PriorScales:
    location_sd: float = 1000.0
    scale_upper: float = 1000.0


# --------------------------------------------------------------------------
# elementary log densities (vectorised, -inf outside support)


def normal_logpdf(x, loc, sd):
    z = (x - loc) / sd
    return -0.5 * z * z - np.log(sd) - _LOG_SQRT_2PI


def halfnormal_logpdf(x, loc, sd):
    x = np.asarray(x, dtype=float)
    out = normal_logpdf(x, loc, sd) - log_ndtr(loc / sd)
    return np.where(x >= 0, out, -np.inf)


def uniform_logpdf(x, upper):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where((x > 0) & (x < upper), -np.log(upper), -np.inf)


def poisson_logpmf(n, mean):
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(n > 0, n * np.log(mean), 0.0) - mean - gammaln(n + 1)


def lognormal_logpdf(d, log_loc, sd):
    with np.errstate(divide="ignore", invalid="ignore"):
        logd = np.log(d)
        return np.where(np.asarray(d) > 0, normal_logpdf(logd, log_loc, sd) - logd, -np.inf)


# --------------------------------------------------------------------------
# structure


class ModelLayout:
    """Hierarchy indices and flat-vector layout for a fitted cluster set.

    ``types`` holds the settlement types present, ``strata`` the observed
    ``(type, province)`` pairs and ``alpha_cells`` the observed
    ``(type, province, region)`` triples. Pooling weights for the prediction
    scale (``pool_stratum``, ``pool_weight``) are the training clusters'
    stratum indices and model weights.
    """

    def __init__(
        self,
        types: Sequence[str],
        strata: Sequence[tuple],
        alpha_cells: Sequence[tuple],
        covariates: Sequence[str],
        modes: Sequence[str],
        priors: PriorScales = PriorScales(),
        pool_stratum=(),
        pool_weight=(),
        cluster_ids: Sequence[str] = (),
    ):
        if len(covariates) != len(modes):
            raise ModelError("one effect mode is required per covariate")
        bad = [m for m in modes if m not in (RANDOM, FIXED)]
        if bad:
            raise ModelError(f"unknown effect mode(s): {bad}")
        self.types = tuple(types)
        self.strata = [tuple(s) for s in strata]
        self.alpha_cells = [tuple(a) for a in alpha_cells]
        self.covariates = list(covariates)
        self.modes = list(modes)
        self.priors = priors
        self.pool_stratum = np.asarray(pool_stratum, dtype=int)
        self.pool_weight = np.asarray(pool_weight, dtype=float)
        self.cluster_ids = list(cluster_ids)

        self.type_index = {t: i for i, t in enumerate(self.types)}
        self.stratum_index = {s: i for i, s in enumerate(self.strata)}
        self.alpha_index = {a: i for i, a in enumerate(self.alpha_cells)}
        self.type_of_stratum = np.array([self.type_index[s[0]] for s in self.strata], dtype=int)
        self.stratum_of_alpha = np.array([self.stratum_index[a[:2]] for a in self.alpha_cells], dtype=int)
        self.random_k = [k for k, m in enumerate(self.modes) if m == RANDOM]
        self.fixed_k = [k for k, m in enumerate(self.modes) if m == FIXED]

        T, S, A = len(self.types), len(self.strata), len(self.alpha_cells)
        Kr, Kf = len(self.random_k), len(self.fixed_k)
        sizes = [
            ("alpha", A), ("xi_tp", S), ("nu_tp", S), ("xi_t", T), ("nu_t", T),
            ("tau_tp", S), ("mu_tp", S), ("sigma_tp", S), ("mu_t", T), ("sigma_t", T),
            ("beta_random", Kr * T), ("rho", Kr), ("omega", Kr), ("beta_fixed", Kf),
            ("log_density", len(self.cluster_ids)),
        ]
        self.slices = {}
        pos = 0
        for name, n in sizes:
            self.slices[name] = slice(pos, pos + n)
            pos += n
        self.size = pos

    @classmethod
    def from_clusters(cls, clusters: Sequence[ClusterRecord], covariates, modes, priors=PriorScales()):
        if not clusters:
            raise ModelError("no clusters to fit")
        types = [t for t in SETTLEMENT_TYPES if any(c.settlement_type == t for c in clusters)]
        strata = sorted({(c.settlement_type, c.province_id) for c in clusters}, key=lambda s: (SETTLEMENT_TYPES.index(s[0]), s[1]))
        alpha = sorted(
            {(c.settlement_type, c.province_id, c.region_id) for c in clusters},
            key=lambda a: (SETTLEMENT_TYPES.index(a[0]), a[1], a[2]),
        )
        s_index = {s: i for i, s in enumerate(strata)}
        weights = [c.model_weight for c in clusters]
        if any(w is None for w in weights):
            raise ModelError("clusters need model weights; run compute_model_weights first")
        widths = {len(c.covariates) for c in clusters}
        if widths != {len(covariates)}:
            raise ModelError(f"clusters carry {sorted(widths)} covariates, expected {len(covariates)}")
        return cls(
            types, strata, alpha, covariates, modes, priors,
            pool_stratum=[s_index[(c.settlement_type, c.province_id)] for c in clusters],
            pool_weight=weights,
            cluster_ids=[c.cluster_id for c in clusters],
        )

    # names -------------------------------------------------------------
    def names(self):
        out = []
        out += [f"alpha[{t}:{p}:{l}]" for t, p, l in self.alpha_cells]
        out += [f"xi[{t}:{p}]" for t, p in self.strata]
        out += [f"nu[{t}:{p}]" for t, p in self.strata]
        out += [f"xi[{t}]" for t in self.types]
        out += [f"nu[{t}]" for t in self.types]
        out += [f"tau[{t}:{p}]" for t, p in self.strata]
        out += [f"mu[{t}:{p}]" for t, p in self.strata]
        out += [f"sigma[{t}:{p}]" for t, p in self.strata]
        out += [f"mu[{t}]" for t in self.types]
        out += [f"sigma[{t}]" for t in self.types]
        out += [f"beta[{self.covariates[k]}:{t}]" for k in self.random_k for t in self.types]
        out += [f"rho[{self.covariates[k]}]" for k in self.random_k]
        out += [f"omega[{self.covariates[k]}]" for k in self.random_k]
        out += [f"beta[{self.covariates[k]}]" for k in self.fixed_k]
        out += [f"logD[{cid}]" for cid in self.cluster_ids]
        return out

    def positive_blocks(self):
        return ("nu_tp", "nu_t", "tau_tp", "mu_tp", "sigma_tp", "sigma_t", "omega")

    # serialisation -------------------------------------------------------
    def to_dict(self):
        return {
            "types": list(self.types),
            "strata": [list(s) for s in self.strata],
            "alpha_cells": [list(a) for a in self.alpha_cells],
            "covariates": self.covariates,
            "modes": self.modes,
            "priors": {"location_sd": self.priors.location_sd, "scale_upper": self.priors.scale_upper},
            "pool_stratum": self.pool_stratum.tolist(),
            "pool_weight": [repr(float(w)) for w in self.pool_weight],
            "cluster_ids": self.cluster_ids,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["types"],
            [tuple(s) for s in d["strata"]],
            [tuple(a) for a in d["alpha_cells"]],
            d["covariates"],
            d["modes"],
            PriorScales(**d["priors"]),
            d["pool_stratum"],
            [float(w) for w in d["pool_weight"]],
            d["cluster_ids"],
        )


@dataclass
class ClusterData:
    """Array view of clusters aligned with a :class:`ModelLayout`."""

    population: np.ndarray
    area: np.ndarray
    covariates: np.ndarray  # (I, K)
    weight: np.ndarray
    type_idx: np.ndarray
    stratum_idx: np.ndarray
    alpha_idx: np.ndarray

    @classmethod
    def build(cls, layout: ModelLayout, clusters: Sequence[ClusterRecord]):
        try:
            alpha_idx = [layout.alpha_index[(c.settlement_type, c.province_id, c.region_id)] for c in clusters]
        except KeyError as exc:
            raise ModelError(f"cluster hierarchy cell {exc.args[0]} not in model layout") from None
        return cls(
            population=np.array([c.population for c in clusters], dtype=float),
            area=np.array([c.footprint_area for c in clusters], dtype=float),
            covariates=np.array([c.covariates for c in clusters], dtype=float).reshape(len(clusters), len(layout.covariates)),
            weight=np.array([c.model_weight for c in clusters], dtype=float),
            type_idx=np.array([layout.type_index[c.settlement_type] for c in clusters], dtype=int),
            stratum_idx=np.array([layout.stratum_index[(c.settlement_type, c.province_id)] for c in clusters], dtype=int),
            alpha_idx=np.array(alpha_idx, dtype=int),
        )

    @property
    def n(self):
        return self.population.size


@dataclass
class ModelParams:
    """One point in parameter space (plus latent cluster densities)."""

    layout: ModelLayout = field(repr=False)
    alpha: np.ndarray
    xi_tp: np.ndarray
    nu_tp: np.ndarray
    xi_t: np.ndarray
    nu_t: np.ndarray
    tau_tp: np.ndarray
    mu_tp: np.ndarray
    sigma_tp: np.ndarray
    mu_t: np.ndarray
    sigma_t: np.ndarray
    beta_random: np.ndarray  # (Kr, T)
    rho: np.ndarray
    omega: np.ndarray
    beta_fixed: np.ndarray
    density: np.ndarray  # latent D_i

    @classmethod
    def from_vector(cls, layout: ModelLayout, vec):
        vec = np.asarray(vec, dtype=float)
        parts = {name: vec[s].copy() for name, s in layout.slices.items()}
        parts["beta_random"] = parts["beta_random"].reshape(len(layout.random_k), len(layout.types))
        parts["density"] = np.exp(parts.pop("log_density"))
        return cls(layout=layout, **parts)

    def to_vector(self):
        vec = np.empty(self.layout.size)
        for f in fields(self):
            if f.name == "layout":
                continue
            value = getattr(self, f.name)
            if f.name == "density":
                vec[self.layout.slices["log_density"]] = np.log(value)
            else:
                vec[self.layout.slices[f.name]] = np.ravel(value)
        return vec

    def slopes(self):
        """Slope matrix ``(K, T)``: per-type slopes with fixed ones broadcast."""
        L = self.layout
        out = np.zeros((len(L.covariates), len(L.types)))
        for j, k in enumerate(L.random_k):
            out[k] = self.beta_random[j]
        for j, k in enumerate(L.fixed_k):
            out[k] = self.beta_fixed[j]
        return out


# --------------------------------------------------------------------------
# model operations


def linear_predictor(params: ModelParams, cluster: ClusterRecord) -> float:
    """Expected log density of a single cluster."""
    L = params.layout
    key = (cluster.settlement_type, cluster.province_id, cluster.region_id)
    if key not in L.alpha_index:
        raise ModelError(f"hierarchy cell {key} not in model layout")
    if len(cluster.covariates) != len(L.covariates):
        raise ModelError("covariate count does not match model")
    t = L.type_index[cluster.settlement_type]
    slopes = params.slopes()[:, t]
    return float(params.alpha[L.alpha_index[key]] + np.dot(slopes, cluster.covariates))


def mean_log_density(params: ModelParams, data: ClusterData):
    slopes = params.slopes()  # (K, T)
    return params.alpha[data.alpha_idx] + np.einsum("ik,ki->i", data.covariates, slopes[:, data.type_idx])


def cluster_sd(v, tau):
    """Log-density sd of a cluster with model weight ``v`` in a stratum with scale ``tau``."""
    v = np.asarray(v, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(v <= 0) or np.any(tau <= 0):
        raise ModelError("model weight and tau must be positive")
    out = np.sqrt(1.0 / (v * tau**2))
    return float(out) if out.ndim == 0 else out


def pooled_sd(cluster_sds, weights):
    """Weighted mean of cluster sds with weights ``sqrt(v_i)``."""
    sds = np.asarray(cluster_sds, dtype=float)
    w = np.sqrt(np.asarray(weights, dtype=float))
    if sds.size == 0:
        raise ModelError("empty stratum")
    return float(np.sum(sds * w) / np.sum(w))


def log_likelihood(params: ModelParams, data: ClusterData) -> float:
    d = params.density
    if np.any(~(d > 0)):
        return -math.inf
    sd = 1.0 / (params.tau_tp[data.stratum_idx] * np.sqrt(data.weight))
    pois = poisson_logpmf(data.population, d * data.area)
    logn = lognormal_logpdf(d, mean_log_density(params, data), sd)
    total = float(np.sum(pois) + np.sum(logn))
    return total if not math.isnan(total) else -math.inf


def log_prior(params: ModelParams) -> float:
    L = params.layout
    P = L.priors
    s_of_a = L.stratum_of_alpha
    t_of_s = L.type_of_stratum
    # scales must be positive before the Normal/Half-Normal terms are defined
    for scales in (params.nu_tp, params.nu_t, params.sigma_tp, params.sigma_t, params.omega, params.tau_tp, params.mu_tp):
        if np.any(~(np.asarray(scales) > 0)):
            return -math.inf
    terms = [
        normal_logpdf(params.alpha, params.xi_tp[s_of_a], params.nu_tp[s_of_a]),
        normal_logpdf(params.xi_tp, params.xi_t[t_of_s], params.nu_t[t_of_s]),
        uniform_logpdf(params.nu_tp, params.nu_t[t_of_s]),
        normal_logpdf(params.xi_t, 0.0, P.location_sd),
        uniform_logpdf(params.nu_t, P.scale_upper),
        halfnormal_logpdf(params.tau_tp, params.mu_tp, params.sigma_tp),
        halfnormal_logpdf(params.mu_tp, params.mu_t[t_of_s], params.sigma_t[t_of_s]),
        uniform_logpdf(params.sigma_tp, params.sigma_t[t_of_s]),
        normal_logpdf(params.mu_t, 0.0, P.location_sd),
        uniform_logpdf(params.sigma_t, P.scale_upper),
        normal_logpdf(params.beta_random, params.rho[:, None], params.omega[:, None]),
        normal_logpdf(params.rho, 0.0, P.location_sd),
        uniform_logpdf(params.omega, P.scale_upper),
        normal_logpdf(params.beta_fixed, 0.0, P.location_sd),
    ]
    with np.errstate(invalid="ignore", divide="ignore"):
        total = float(sum(np.sum(t) for t in terms))
    return total if not math.isnan(total) else -math.inf


def resolve_effect_modes(draws, layout: ModelLayout, level=0.95, min_draws=100):
    """Decide fixed vs random per covariate from a pilot run (all random).

    A covariate becomes fixed when the equal-tailed interval of the
    urban-minus-rural slope difference contains zero.
    """
    pooled = draws.pooled()
    if pooled.shape[0] < min_draws:
        raise ModelError(f"pilot run has {pooled.shape[0]} draws, need at least {min_draws}")
    tail = (1 - level) / 2
    modes = []
    for k, name in enumerate(layout.covariates):
        if layout.modes[k] != RANDOM or len(layout.types) < 2:
            modes.append(FIXED if len(layout.types) < 2 else layout.modes[k])
            continue
        cols = [draws.index(f"beta[{name}:{t}]") for t in layout.types]
        diff = pooled[:, cols[0]] - pooled[:, cols[1]]
        lo, hi = np.quantile(diff, [tail, 1 - tail])
        modes.append(FIXED if lo <= 0 <= hi else RANDOM)
    return modes
