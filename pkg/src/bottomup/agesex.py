"""Province-level age and sex proportions (Dirichlet-multinomial).

Groups are two sexes times 18 age bands: under 1, 1-4, fifteen five-year
bands 5-9 ... 75-79, and 80+. Group id = ``sex_index * 18 + band_index``
with male = 0, female = 1. The prior is Dirichlet with every concentration
``1 / G``; with multinomial counts the posterior is Dirichlet(1/G + N).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .stats import quantile

SEXES = ("male", "female")
N_BANDS = 18
N_GROUPS = len(SEXES) * N_BANDS
BAND_LOWER_EDGES = (0, 1) + tuple(range(5, 85, 5))  # 18 entries ending at 80
_SEX_ALIASES = {"male": 0, "m": 0, "1": 0, "female": 1, "f": 1, "2": 1}


def band_label(band: int) -> str:
    if band == 0:
        return "<1"
    if band == 1:
        return "1-4"
    if band == N_BANDS - 1:
        return "80+"
    lo = BAND_LOWER_EDGES[band]
    return f"{lo}-{lo + 4}"


GROUP_LABELS = tuple(f"{sex}_{band_label(b)}" for sex in SEXES for b in range(N_BANDS))


def age_band(age_years: float) -> int:
    if age_years < 0:
        raise ValueError(f"negative age: {age_years}")
    if age_years < 1:
        return 0
    if age_years < 5:
        return 1
    if age_years >= 80:
        return N_BANDS - 1
    return 2 + int((age_years - 5) // 5)


def group_id(sex, age_years) -> int:
    key = str(sex).strip().lower()
    if key not in _SEX_ALIASES:
        raise ValueError(f"unknown sex code {sex!r}")
    return _SEX_ALIASES[key] * N_BANDS + age_band(float(age_years))


@dataclass
class AgeSexTable:
    provinces: list
    counts: np.ndarray  # (P, G) nonnegative integers

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (len(self.provinces), N_GROUPS):
            raise ValueError(f"counts must have shape ({len(self.provinces)}, {N_GROUPS})")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")

    @property
    def totals(self):
        return self.counts.sum(axis=1)


def aggregate_counts(records) -> AgeSexTable:
    """Bin ``(province_id, sex, age_years[, count])`` records into a table."""
    acc: dict[int, np.ndarray] = {}
    for rec in records:
        province, sex, age = rec[0], rec[1], rec[2]
        count = int(rec[3]) if len(rec) > 3 else 1
        if count < 0:
            raise ValueError("negative count")
        row = acc.setdefault(int(province), np.zeros(N_GROUPS, dtype=np.int64))
        row[group_id(sex, age)] += count
    provinces = sorted(acc)
    counts = np.array([acc[p] for p in provinces]).reshape(len(provinces), N_GROUPS)
    return AgeSexTable(provinces, counts)


def read_agesex_records(path):
    """Rows of an age-sex CSV as ``(province_id, sex, age_years, count, cluster_id)``.

    ``count`` defaults to 1 for individual-level files; ``cluster_id`` is
    ``None`` when the column is absent.
    """
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"province_id", "sex", "age_years"}
        if not reader.fieldnames or not required <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain province_id,sex,age_years")
        for row_no, row in enumerate(reader, start=2):
            try:
                out.append(
                    (
                        int(row["province_id"]),
                        row["sex"],
                        float(row["age_years"]),
                        int(row["count"]) if row.get("count") not in (None, "") else 1,
                        row.get("cluster_id") or None,
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{path}: row {row_no}: {exc}") from None
    return out


def write_agesex_records(path, records):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cluster_id", "province_id", "sex", "age_years", "count"])
        for cid, province, sex, age, count in records:
            writer.writerow([cid, province, sex, age, count])


@dataclass
class ProportionDraws:
    provinces: list
    draws: np.ndarray  # (n_draws, P, G)

    def for_province(self, province):
        return self.draws[:, self.provinces.index(province), :]


def posterior_concentration(counts):
    """Dirichlet(1/G + N) concentration for counts over the last axis."""
    counts = np.asarray(counts, dtype=float)
    return 1.0 / counts.shape[-1] + counts


def dirichlet_draws(counts, n_draws: int, rng):
    """Posterior proportion draws for one count vector via normalized Gammas."""
    conc = posterior_concentration(counts)
    g = rng.gamma(conc, size=(n_draws, conc.size))
    return g / g.sum(axis=1, keepdims=True)


def sample_pi(table: AgeSexTable, n_draws: int, seed: int) -> ProportionDraws:
    """Exact posterior draws of province proportions, one substream per province."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    out = np.empty((n_draws, len(table.provinces), N_GROUPS))
    for j, province in enumerate(table.provinces):
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(province)]))
        out[:, j, :] = dirichlet_draws(table.counts[j], n_draws, rng)
    return ProportionDraws(list(table.provinces), out)


def posterior_mean(table_or_counts):
    counts = table_or_counts.counts if isinstance(table_or_counts, AgeSexTable) else table_or_counts
    conc = posterior_concentration(counts)
    return conc / conc.sum(axis=-1, keepdims=True)


def proportion_summary(draws: ProportionDraws):
    """Per province and group: mean and 95% equal-tailed interval."""
    if draws.draws.shape[0] < 100:
        raise ValueError("need at least 100 draws to summarize proportions")
    lo, hi = quantile(draws.draws, [0.025, 0.975], axis=0)
    return {"mean": draws.draws.mean(axis=0), "lo95": lo, "hi95": hi}


def write_proportion_summary(path, draws: ProportionDraws):
    s = proportion_summary(draws)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["province_id", "group_id", "mean", "lo95", "hi95"])
        for j, p in enumerate(draws.provinces):
            for g in range(N_GROUPS):
                writer.writerow([p, g, f"{s['mean'][j, g]:.10g}", f"{s['lo95'][j, g]:.10g}", f"{s['hi95'][j, g]:.10g}"])
