"""Run configuration: a flat ``key = value`` file plus command-line overrides.

Recognised keys::

    covariates = cov_1, cov_2        # cluster CSV / grid layer names
    effect_modes = auto              # or one of random|fixed per covariate
    prior_sd = 1000                  # sd of Normal location priors
    prior_upper = 1000               # upper bound of Uniform scale priors
    weight_percentile = 0.9          # sampling-weight truncation; "none" disables
    chains = 3
    iterations = 10000
    burnin = 5000                    # default: iterations // 2
    thin = 1
    seed = 0
    pilot_iterations = 2000          # effect-mode pilot; default: iterations // 2
    pred_draws = 1000

Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .density import FIXED, RANDOM, PriorScales
from .mcmc import ChainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    covariates: tuple = ()
    effect_modes: object = "auto"  # "auto" or tuple of modes
    prior_sd: float = 1000.0
    prior_upper: float = 1000.0
    weight_percentile: Optional[float] = 0.9
    chains: int = 3
    iterations: int = 10000
    burnin: Optional[int] = None
    thin: int = 1
    seed: int = 0
    pilot_iterations: Optional[int] = None
    pred_draws: int = 1000

    def chain_config(self, workers=1) -> ChainConfig:
        return ChainConfig(
            n_chains=self.chains,
            n_iterations=self.iterations,
            burn_in=self.burnin,
            thin=self.thin,
            seed=self.seed,
            workers=workers,
        )

    def pilot_config(self, workers=1) -> Optional[ChainConfig]:
        if self.pilot_iterations is None:
            return None
        return ChainConfig(n_chains=self.chains, n_iterations=self.pilot_iterations, seed=self.seed, workers=workers)

    def priors(self) -> PriorScales:
        return PriorScales(self.prior_sd, self.prior_upper)

    def modes(self):
        return self.effect_modes if self.effect_modes == "auto" else list(self.effect_modes)

    def override(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(value)
            lines.append(f"{f.name} = {'none' if value is None else value}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _opt(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none") else conv(text)

    return parse


_PARSERS = {
    "covariates": _list,
    "effect_modes": lambda t: "auto" if t.strip().lower() == "auto" else _list(t),
    "prior_sd": float,
    "prior_upper": float,
    "weight_percentile": _opt(float),
    "chains": int,
    "iterations": int,
    "burnin": _opt(int),
    "thin": int,
    "seed": int,
    "pilot_iterations": _opt(int),
    "pred_draws": int,
}


def parse_config(text: str, source="<config>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string("[run]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for key, raw in parser["run"].items():
        if key not in _PARSERS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key}: {exc}") from None
    cfg = RunConfig(**values)
    validate(cfg, source)
    return cfg


def validate(cfg: RunConfig, source="<config>"):
    if cfg.effect_modes != "auto":
        bad = [m for m in cfg.effect_modes if m not in (RANDOM, FIXED)]
        if bad:
            raise ConfigError(f"{source}: effect modes must be random or fixed, got {bad}")
        if cfg.covariates and len(cfg.effect_modes) != len(cfg.covariates):
            raise ConfigError(f"{source}: {len(cfg.effect_modes)} effect modes for {len(cfg.covariates)} covariates")
    if cfg.weight_percentile is not None and not 0 < cfg.weight_percentile < 1:
        raise ConfigError(f"{source}: weight_percentile must lie in (0, 1)")
    if cfg.prior_sd <= 0 or cfg.prior_upper <= 0:
        raise ConfigError(f"{source}: prior constants must be positive")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def file_digest(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    seed: int
    config_digest: str = ""
    inputs: dict = field(default_factory=dict)  # name -> sha256
    outputs: list = field(default_factory=list)
    version: str = ""
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, directory):
        lines = [
            f"subcommand = {self.subcommand}",
            f"version = {self.version}",
            f"seed = {self.seed}",
            f"config_digest = {self.config_digest}",
            f"wall_clock_s = {self.wall_clock_s:.3f}",
        ]
        lines += [f"input.{k} = {v}" for k, v in sorted(self.inputs.items())]
        lines += [f"output = {o}" for o in self.outputs]
        lines += [f"{k} = {v}" for k, v in self.extra.items()]
        path = Path(directory) / "manifest.txt"
        path.write_text("\n".join(lines) + "\n")
        return path


def read_manifest(path):
    out: dict = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out.setdefault(k.strip(), []).append(v.strip())
    return {k: v[0] if len(v) == 1 else v for k, v in out.items()}


__all__ = ["RunConfig", "RunManifest", "ConfigError", "parse_config", "load_config", "file_digest", "read_manifest"]
