"""Adaptive random-walk Metropolis-within-Gibbs sampler and chain diagnostics.

A target exposes a flat state vector split into *blocks*. Within a block the
elements must be conditionally independent given everything outside the
block, so each element gets its own scalar Metropolis accept/reject while the
block's conditional log density is evaluated once, vectorised. Positive
parameters use a log-scale random walk (multiplicative proposal with the
matching Hastings term).

Step sizes follow a Robbins-Monro recursion on the log scale toward the target
acceptance rate, updated every ``adapt_window`` iterations during burn-in and
frozen afterwards.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .stats import quantile

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 3
    n_iterations: int = 10000
    burn_in: Optional[int] = None  # None -> n_iterations // 2
    thin: int = 1
    seed: int = 0
    adapt_window: int = 50
    target_accept: float = 0.44
    workers: int = 1
    audit: bool = False

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 <= self.resolved_burn_in < self.n_iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_iterations")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    @property
    def resolved_burn_in(self):
        return self.n_iterations // 2 if self.burn_in is None else self.burn_in

    @property
    def n_retained(self):
        return len(range(self.resolved_burn_in, self.n_iterations, self.thin))

    def as_dict(self):
        d = asdict(self)
        d["burn_in"] = self.resolved_burn_in
        return d


@dataclass
class Block:
    """A set of state elements updated together.

    ``logdens(state)`` returns one conditional log density per element of
    ``index`` (terms that do not involve the element may be dropped).
    """

    name: str
    index: np.ndarray
    logdens: Callable[[np.ndarray], np.ndarray]
    positive: bool = False


@dataclass
class PosteriorDraws:
    names: list
    samples: np.ndarray  # (chains, retained, dim)
    log_posterior: np.ndarray  # (chains, retained)
    acceptance: np.ndarray  # (chains, dim), post burn-in
    step_sizes: np.ndarray  # (chains, dim), frozen values
    config: Optional[ChainConfig] = None
    audit: list = field(default_factory=list)

    @classmethod
    def from_samples(cls, names, samples):
        """Draws without sampler bookkeeping (e.g. read back from disk)."""
        samples = np.asarray(samples, dtype=float)
        c, _, d = samples.shape
        return cls(
            names=list(names),
            samples=samples,
            log_posterior=np.full(samples.shape[:2], np.nan),
            acceptance=np.full((c, d), np.nan),
            step_sizes=np.full((c, d), np.nan),
        )

    @property
    def n_chains(self):
        return self.samples.shape[0]

    def index(self, name):
        return self.names.index(name)

    def column(self, name):
        """Draws of one parameter, shape ``(chains, retained)``."""
        return self.samples[:, :, self.index(name)]

    def pooled(self):
        return self.samples.reshape(-1, self.samples.shape[-1])


def _chain_rng(seed, chain):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chain])))


def _initial_state(target, rng, chain):
    for _ in range(1000):
        state = np.asarray(target.initial_state(rng, chain), dtype=float)
        if np.isfinite(target.log_posterior(state)):
            return state
    raise SamplerError("no finite-density initial state after 1000 draws")


def run_chain(target, config: ChainConfig, chain: int):
    """Run a single chain; returns a dict of per-chain arrays."""
    rng = _chain_rng(config.seed, chain)
    state = _initial_state(target, rng, chain)
    dim = state.size
    log_step = np.log(np.asarray(target.initial_steps(), dtype=float)).copy()
    burn_in = config.resolved_burn_in
    window_accept = np.zeros(dim)
    kept_accept = np.zeros(dim)
    retained = np.empty((config.n_retained, dim))
    retained_lp = np.empty(config.n_retained)
    audit = []
    n_batch = 0
    r = 0
    for it in range(config.n_iterations):
        step = np.exp(log_step)
        for block in target.blocks:
            idx = block.index
            current = state[idx]
            cur_ld = block.logdens(state)
            z = rng.standard_normal(idx.size) * step[idx]
            if block.positive:
                proposal = current * np.exp(z)
                hastings = z
            else:
                proposal = current + z
                hastings = 0.0
            state[idx] = proposal
            new_ld = block.logdens(state)
            log_u = np.log(rng.random(idx.size))
            with np.errstate(invalid="ignore"):
                accept = log_u < new_ld - cur_ld + hastings
            state[idx] = np.where(accept, proposal, current)
            if it < burn_in:
                window_accept[idx] += accept
            else:
                kept_accept[idx] += accept
            if config.audit and accept.any():
                threshold = log_u - hastings
                for j in np.flatnonzero(accept):
                    audit.append((chain, it, block.name, int(idx[j]), float(new_ld[j] - cur_ld[j]), float(np.broadcast_to(threshold, accept.shape)[j])))
        if it < burn_in and (it + 1) % config.adapt_window == 0:
            n_batch += 1
            rate = window_accept / config.adapt_window
            log_step += min(1.0, 2.0 / math.sqrt(n_batch)) * (rate - config.target_accept)
            window_accept[:] = 0.0
        if it >= burn_in and (it - burn_in) % config.thin == 0:
            retained[r] = state
            retained_lp[r] = target.log_posterior(state)
            if not np.isfinite(retained_lp[r]):
                raise SamplerError(f"chain {chain} stored a state with non-finite log posterior at iteration {it}")
            r += 1
    n_post = config.n_iterations - burn_in
    return {
        "samples": retained,
        "log_posterior": retained_lp,
        "acceptance": kept_accept / max(n_post, 1),
        "step_sizes": np.exp(log_step),
        "audit": audit,
    }


def _run_chain_star(args):
    return run_chain(*args)


def run_chains(target, config: ChainConfig = ChainConfig()) -> PosteriorDraws:
    """Run ``config.n_chains`` independent chains on ``target``.

    Each chain owns a Philox substream keyed by ``(seed, chain)``; results do
    not depend on whether chains run serially or in worker processes.
    """
    jobs = [(target, config, c) for c in range(config.n_chains)]
    if config.workers > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, config.n_chains)) as pool:
            results = list(pool.map(_run_chain_star, jobs))
    else:
        results = [_run_chain_star(j) for j in jobs]
    return PosteriorDraws(
        names=list(target.names),
        samples=np.stack([r["samples"] for r in results]),
        log_posterior=np.stack([r["log_posterior"] for r in results]),
        acceptance=np.stack([r["acceptance"] for r in results]),
        step_sizes=np.stack([r["step_sizes"] for r in results]),
        config=config,
        audit=[a for r in results for a in r["audit"]],
    )


# --------------------------------------------------------------------------
# diagnostics


def gelman_rubin(draws):
    """Potential scale reduction factor per parameter.

    ``draws`` is a :class:`PosteriorDraws` or an array shaped
    ``(chains, n)`` or ``(chains, n, dim)``. Uses
    ``R = sqrt(((n-1)/n W + B/n) / W)`` with ``B = n var(chain means)`` and
    ``W`` the mean within-chain variance (both with ``ddof=1``). Parameters
    with ``W == 0`` are reported as 1.
    """
    x = draws.samples if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    m, n = x.shape[:2]
    if m < 2 or n < 2:
        raise ValueError("need at least 2 chains with 2 draws each")
    if n < 10:
        log.warning("R-hat from only %d draws per chain is unreliable", n)
    chain_means = x.mean(axis=1)
    b = n * chain_means.var(axis=0, ddof=1)
    w = x.var(axis=1, ddof=1).mean(axis=0)
    rhat = np.ones_like(w)
    ok = w > 0
    if not ok.all():
        log.info("%d parameter(s) constant within chains; R-hat set to 1", int((~ok).sum()))
    rhat[ok] = np.sqrt(((n - 1) / n * w[ok] + b[ok] / n) / w[ok])
    return rhat[0] if squeeze else rhat


def summarize_draws(draws: PosteriorDraws):
    """Per-parameter pooled summaries (post burn-in, all chains)."""
    pooled = draws.pooled()
    q = quantile(pooled, [0.025, 0.5, 0.975], axis=0)
    return {
        "name": list(draws.names),
        "mean": pooled.mean(axis=0),
        "sd": pooled.std(axis=0, ddof=1) if pooled.shape[0] > 1 else np.zeros(pooled.shape[1]),
        "q2.5": q[0],
        "q50": q[1],
        "q97.5": q[2],
        "acceptance": draws.acceptance.mean(axis=0),
    }


def write_summary(path, summary, rhat=None):
    cols = ["mean", "sd", "q2.5", "q50", "q97.5", "acceptance"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["parameter"] + cols + (["rhat"] if rhat is not None else []))
        for i, name in enumerate(summary["name"]):
            row = [name] + [f"{summary[c][i]:.10g}" for c in cols]
            if rhat is not None:
                row.append(f"{rhat[i]:.10g}")
            writer.writerow(row)


def write_rhat(path, names: Sequence[str], rhat):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["parameter", "rhat"])
        for n, r in zip(names, rhat):
            writer.writerow([n, f"{r:.10g}"])


def write_draws(directory, draws: PosteriorDraws):
    """One CSV per chain: header of parameter names, one row per retained draw."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(draws.n_chains):
        path = directory / f"draws_chain{c + 1}.csv"
        np.savetxt(path, draws.samples[c], fmt="%.17g", delimiter=",", header=",".join(draws.names), comments="")
        paths.append(path)
    return paths


def read_draws(directory) -> PosteriorDraws:
    directory = Path(directory)
    paths = sorted(directory.glob("draws_chain*.csv"), key=lambda p: int(p.stem.removeprefix("draws_chain")))
    if not paths:
        raise FileNotFoundError(f"no draws_chain*.csv files in {directory}")
    names = None
    chains = []
    for p in paths:
        with p.open() as fh:
            header = fh.readline().strip().split(",")
        if names is None:
            names = header
        elif header != names:
            raise ValueError(f"{p}: parameter names differ from first chain")
        chains.append(np.atleast_2d(np.loadtxt(p, delimiter=",", skiprows=1)).reshape(-1, len(names)))
    return PosteriorDraws.from_samples(names, np.stack(chains))
