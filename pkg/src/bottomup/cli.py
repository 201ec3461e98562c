"""Command-line entry point: ``bottomup <subcommand> ...``.

Subcommands: ingest, fit, predict, cv, diagnose, simulate. Exit status is 0
on success, 1 on invalid input and 2 when a fit completed but did not
converge (some R-hat >= 1.1).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .agesex import GROUP_LABELS, N_GROUPS, aggregate_counts, read_agesex_records, sample_pi, write_proportion_summary
from .ascgrid import GridFormatError, read_asc
from .config import ConfigError, RunConfig, RunManifest, file_digest, load_config
from .data import (
    DataError,
    covariate_names_from_csv,
    load_clusters,
    load_grid,
    prepare_clusters,
    save_grid,
    scale_covariates,
    write_clusters,
    write_scaling_stats,
)
from .density import ModelError, ModelLayout
from .diagnostics import (
    IN_SAMPLE,
    OUT_OF_SAMPLE,
    agesex_cv,
    kfold_cv,
    morans_i,
    residual_metrics,
    semivariogram,
    write_scatter,
    write_table1,
    write_variogram,
)
from .mcmc import PosteriorDraws, SamplerError, gelman_rubin, read_draws, summarize_draws, write_draws, write_rhat, write_summary
from .posterior import fit_density
from .predict import predict_clusters, predict_grid, select_draws, write_grid_outputs
from .synthetic import POP_WEIGHTED, RANDOM_DESIGN, WorldConfig, gen_world, recovery_report, write_world

log = logging.getLogger("bottomup")

EXIT_OK, EXIT_INPUT, EXIT_UNCONVERGED = 0, 1, 2
RHAT_THRESHOLD = 1.1


class InputError(Exception):
    pass


def _require(path, what):
    if path is None:
        raise InputError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.override(
        chains=getattr(args, "chains", None),
        iterations=getattr(args, "iterations", None),
        burnin=getattr(args, "burnin", None),
        seed=getattr(args, "seed", None),
        pred_draws=getattr(args, "pred_draws", None),
    )


def _load_training(clusters_path, cfg: RunConfig):
    path = _require(clusters_path, "cluster CSV")
    records = load_clusters(path)
    names = list(cfg.covariates) or covariate_names_from_csv(path)
    available = covariate_names_from_csv(path)
    missing = [n for n in names if n not in available]
    if missing:
        raise InputError(f"covariate(s) {missing} not in {path}")
    cols = [available.index(n) for n in names]
    records = [replace(r, covariates=tuple(r.covariates[i] for i in cols)) for r in records]
    retained, discards = prepare_clusters(records, cfg.weight_percentile)
    if not retained:
        raise InputError("no clusters left after discarding")
    return retained, discards, names


def _fit(clusters, names, cfg: RunConfig, workers):
    return fit_density(
        clusters,
        names,
        cfg.modes(),
        cfg.chain_config(workers),
        cfg.priors(),
        cfg.pilot_config(workers),
    )


def _write_model(out: Path, fit, cfg: RunConfig):
    doc = {"layout": fit.layout.to_dict(), "config": cfg.to_text(), "pilot_modes": fit.pilot_modes}
    (out / "model.json").write_text(json.dumps(doc, indent=1))


def _read_model(directory: Path):
    path = _require(directory / "model.json", "model file")
    doc = json.loads(path.read_text())
    return ModelLayout.from_dict(doc["layout"])


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(args):
    """Filter clusters, truncate weights and z-scale covariates with grid statistics."""
    out = Path(args.out)
    records = load_clusters(_require(args.clusters, "cluster CSV"))
    names = covariate_names_from_csv(args.clusters)
    grid = load_grid(_require(args.grid_dir, "grid directory"), names)
    retained, discards = prepare_clusters(records, args.weight_percentile)
    scaled, scaled_grid, stats = scale_covariates(retained, grid, names)
    out.mkdir(parents=True, exist_ok=True)
    write_clusters(out / "clusters.csv", scaled, names)
    save_grid(out / "grid", scaled_grid)
    write_scaling_stats(out / "scaling.csv", stats)
    with (out / "discards.csv").open("w") as fh:
        fh.write("cluster_id,reason\n")
        for d in discards:
            fh.write(f"{d.cluster_id},{d.reason}\n")
    log.info("%d clusters retained, %d discarded", len(scaled), len(discards))
    return EXIT_OK, ["clusters.csv", "grid", "scaling.csv", "discards.csv"], {"clusters": args.clusters}


def cmd_fit(args):
    out = Path(args.out)
    cfg = _run_config(args)
    clusters, discards, names = _load_training(args.clusters, cfg)
    fit = _fit(clusters, names, cfg, args.threads)
    out.mkdir(parents=True, exist_ok=True)
    write_draws(out, fit.draws)
    rhat = fit.rhat()
    write_rhat(out / "rhat.csv", fit.draws.names, rhat)
    write_summary(out / "summary.csv", summarize_draws(fit.draws), rhat)
    _write_model(out, fit, cfg)
    outputs = [f"draws_chain{c + 1}.csv" for c in range(fit.draws.n_chains)] + ["rhat.csv", "summary.csv", "model.json"]
    if args.plots:
        from .svg import caterpillar_svg

        s = summarize_draws(fit.draws)
        keep = [i for i, n in enumerate(s["name"]) if n.startswith(("alpha", "beta"))]
        caterpillar_svg(out / "effects.svg", [s["name"][i] for i in keep], s["mean"][keep], s["q2.5"][keep], s["q97.5"][keep])
        outputs.append("effects.svg")
    converged = bool(np.all(rhat < RHAT_THRESHOLD))
    if not converged:
        worst = int(np.nanargmax(rhat))
        log.warning("not converged: max R-hat %.3f (%s)", rhat[worst], fit.draws.names[worst])
    extra = {"modes": ",".join(fit.layout.modes), "max_rhat": f"{np.nanmax(rhat):.6g}", "discarded": len(discards)}
    return (EXIT_OK if converged else EXIT_UNCONVERGED), outputs, {"clusters": args.clusters, "config": args.config}, cfg, extra


def cmd_predict(args):
    out = Path(args.out)
    cfg = _run_config(args)
    draws_dir = _require(args.draws, "draws directory")
    layout = _read_model(draws_dir)
    draws = read_draws(draws_dir)
    if draws.names != layout.names():
        raise InputError("draw files do not match model.json parameter names")
    grid_dir = _require(args.grid_dir, "grid directory")
    grid_layers = {p.stem for p in grid_dir.glob("*.asc")}
    missing = [c for c in layout.covariates if c not in grid_layers]
    if missing:
        raise InputError(f"covariate mismatch: model uses {layout.covariates}, grid lacks {missing}")
    grid = load_grid(grid_dir, layout.covariates)
    pred = predict_grid(layout, draws, grid, cfg.pred_draws, cfg.seed)
    pi = None
    inputs = {"draws": str(draws_dir), "grid": str(grid_dir)}
    if args.agesex:
        table = aggregate_counts(read_agesex_records(_require(args.agesex, "age-sex CSV")))
        pi = sample_pi(table, pred.cell_draws.shape[0], cfg.seed)
        inputs["agesex"] = args.agesex
    zones = None
    if args.zones:
        zheader, zones = read_asc(_require(args.zones, "zone raster"))
        if not zheader.matches(grid.header):
            raise InputError("zone raster is not co-registered with the grid")
        inputs["zones"] = args.zones
    written = write_grid_outputs(out, pred, pi, zones)
    if pi is not None:
        write_proportion_summary(out / "agesex_proportions.csv", pi)
        written.append(out / "agesex_proportions.csv")
        if args.plots:
            from .svg import pyramid_svg

            pyramid_svg(out / "pyramid.svg", pi.draws.mean(axis=(0, 1)), GROUP_LABELS[: N_GROUPS // 2])
            written.append(out / "pyramid.svg")
    return EXIT_OK, [p.name for p in written], inputs, cfg, {"total_mean": f"{pred.cell_draws.sum(axis=1).mean():.6g}"}


def cmd_cv(args):
    out = Path(args.out)
    cfg = _run_config(args)
    clusters, _, names = _load_training(args.clusters, cfg)
    result = kfold_cv(clusters, names, cfg.modes(), args.k, cfg.seed, cfg.chain_config(args.threads), cfg.pred_draws)
    out.mkdir(parents=True, exist_ok=True)
    rows = result.report()
    inputs = {"clusters": args.clusters}
    if args.agesex:
        ins, oos = agesex_cv(read_agesex_records(_require(args.agesex, "age-sex CSV")), cfg.pred_draws, cfg.seed)
        rows += [("Age and sex proportions", IN_SAMPLE, ins), ("Age and sex proportions", OUT_OF_SAMPLE, oos)]
        inputs["agesex"] = args.agesex
    write_table1(out / "table1.csv", rows)
    scatter = out / "scatter.csv"
    scatter.unlink(missing_ok=True)
    for mode, draws in ((IN_SAMPLE, result.in_sample), (OUT_OF_SAMPLE, result.out_of_sample)):
        write_scatter(scatter, clusters, draws, mode, "total")
        write_scatter(scatter, clusters, result.densities(draws), mode, "density")
    with (out / "folds.csv").open("w") as fh:
        fh.write("cluster_id,fold\n")
        for c, f in zip(clusters, result.folds):
            fh.write(f"{c.cluster_id},{f + 1}\n")
    outputs = ["table1.csv", "scatter.csv", "folds.csv"]
    if args.plots:
        from .svg import scatter_svg

        draws = result.out_of_sample
        from .stats import credible_interval

        lo, hi = credible_interval(draws, axis=0)
        scatter_svg(out / "scatter_totals.svg", [c.population for c in clusters], draws.mean(axis=0), lo, hi, [c.settlement_type for c in clusters])
        outputs.append("scatter_totals.svg")
    return EXIT_OK, outputs, inputs, cfg, {"k": args.k}


def cmd_diagnose(args):
    out = Path(args.out)
    cfg = _run_config(args)
    draws_dir = _require(args.draws, "draws directory")
    layout = _read_model(draws_dir)
    draws = read_draws(draws_dir)
    clusters, _, names = _load_training(args.clusters, cfg.override(covariates=tuple(layout.covariates)))
    ids = [c.cluster_id for c in clusters]
    if ids != layout.cluster_ids:
        raise InputError("clusters do not match the fitted model")
    matrix = select_draws(draws, cfg.pred_draws)
    counts = predict_clusters(layout, matrix, clusters, cfg.seed)
    obs = np.array([c.population for c in clusters], dtype=float)
    area = np.array([c.footprint_area for c in clusters])
    rows = [
        ("Population totals", IN_SAMPLE, residual_metrics(obs, counts)),
        ("Population densities", IN_SAMPLE, residual_metrics(obs / area, counts / area)),
    ]
    if args.agesex:
        ins, _ = agesex_cv(read_agesex_records(_require(args.agesex, "age-sex CSV")), cfg.pred_draws, cfg.seed)
        rows.append(("Age and sex proportions", IN_SAMPLE, ins))
    out.mkdir(parents=True, exist_ok=True)
    write_table1(out / "table1.csv", rows)
    scatter = out / "scatter.csv"
    scatter.unlink(missing_ok=True)
    write_scatter(scatter, clusters, counts, IN_SAMPLE, "total")
    write_scatter(scatter, clusters, counts / area, IN_SAMPLE, "density")
    resid = counts.mean(axis=0) - obs
    coords = np.array([c.centroid for c in clusters], dtype=float)
    outputs = ["table1.csv", "scatter.csv"]
    if len(clusters) > args.neighbours:
        m = morans_i(resid, coords, k=args.neighbours, seed=cfg.seed)
        with (out / "moran.csv").open("w") as fh:
            fh.write("I,expected,p_value,permutations\n")
            fh.write(f"{m.I:.10g},{m.expected:.10g},{m.p_value:.10g},{m.n_permutations}\n")
        d = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
        dmax = float(d.max()) / 2 if d.max() > 0 else 1.0
        write_variogram(out / "variogram.csv", semivariogram(resid, coords, np.linspace(0, dmax, args.bins + 1)))
        outputs += ["moran.csv", "variogram.csv"]
    return EXIT_OK, outputs, {"draws": str(draws_dir), "clusters": args.clusters}, cfg, {}


def cmd_simulate(args):
    out = Path(args.out)
    cfg = _run_config(args)
    out.mkdir(parents=True, exist_ok=True)
    wc = WorldConfig(
        nrows=args.nrows,
        ncols=args.ncols,
        n_clusters=args.n_clusters,
        design=args.design,
        log_sd_range=(args.log_sd_min, args.log_sd_max),
    )
    summary = []
    outputs = []
    for r in range(args.replicates):
        seed = int(np.random.SeedSequence([cfg.seed, r]).generate_state(1)[0])
        world, survey = gen_world(wc, seed)
        rdir = out / f"replicate_{r + 1}"
        write_world(rdir, world, survey)
        clusters, _ = prepare_clusters(survey.clusters, cfg.weight_percentile)
        fit = fit_density(clusters, wc.covariate_names, cfg.modes(), replace(cfg.chain_config(args.threads), seed=seed), cfg.priors(), cfg.pilot_config(args.threads))
        pi = sample_pi(survey.agesex, min(cfg.pred_draws, fit.draws.pooled().shape[0]), seed)
        pred = predict_grid(fit.layout, fit.draws, world.grid, pi.draws.shape[0], seed)
        report = recovery_report(world, fit.layout, fit.draws, pi, pred.cell_draws.sum(axis=1))
        report.write_csv(rdir / "recovery.csv")
        outputs.append(f"replicate_{r + 1}/recovery.csv")
        summary.append((r + 1, seed, report.coverage, report.total_true, report.total_mean, report.total_relative_error, float(np.nanmax(fit.rhat()))))
    with (out / "recovery_summary.csv").open("w") as fh:
        fh.write("replicate,seed,coverage,total_true,total_mean,total_relative_error,max_rhat\n")
        for row in summary:
            fh.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row) + "\n")
    outputs.append("recovery_summary.csv")
    return EXIT_OK, outputs, {}, cfg, {"replicates": args.replicates}


# --------------------------------------------------------------------------
# plumbing


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 so that status 2 always means an unconverged fit."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="bottomup", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, chains=True):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)
        sp.add_argument("--threads", type=int, default=1, help="cap on worker processes")
        sp.add_argument("--plots", action="store_true", help="also write SVG charts")
        if chains:
            sp.add_argument("--chains", type=int)
            sp.add_argument("--iterations", type=int)
            sp.add_argument("--burnin", type=int)

    sp = sub.add_parser("ingest", help="filter, weight and scale survey clusters")
    sp.add_argument("--clusters", required=True)
    sp.add_argument("--grid-dir", required=True)
    sp.add_argument("--weight-percentile", type=float, default=0.9)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("fit", help="fit the density model by MCMC")
    sp.add_argument("--clusters", required=True)
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="predict gridded population from posterior draws")
    sp.add_argument("--draws", required=True, help="directory written by fit")
    sp.add_argument("--grid-dir", required=True)
    sp.add_argument("--agesex")
    sp.add_argument("--zones")
    sp.add_argument("--pred-draws", type=int)
    common(sp, chains=False)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("cv", help="k-fold cross-validation")
    sp.add_argument("--clusters", required=True)
    sp.add_argument("--agesex")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--pred-draws", type=int)
    common(sp)
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("diagnose", help="in-sample residual table, Moran's I and variogram")
    sp.add_argument("--draws", required=True)
    sp.add_argument("--clusters", required=True)
    sp.add_argument("--agesex")
    sp.add_argument("--neighbours", type=int, default=5)
    sp.add_argument("--bins", type=int, default=10)
    sp.add_argument("--pred-draws", type=int)
    common(sp, chains=False)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("simulate", help="generate worlds, fit and report parameter recovery")
    sp.add_argument("--replicates", type=int, default=1)
    sp.add_argument("--nrows", type=int, default=50)
    sp.add_argument("--ncols", type=int, default=80)
    sp.add_argument("--n-clusters", type=int, default=200)
    sp.add_argument("--design", choices=[RANDOM_DESIGN, POP_WEIGHTED], default=RANDOM_DESIGN)
    sp.add_argument("--log-sd-min", type=float, default=0.2)
    sp.add_argument("--log-sd-max", type=float, default=1.0)
    common(sp)
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        result = args.func(args)
    except (InputError, DataError, ModelError, ConfigError, GridFormatError, FileNotFoundError, ValueError, SamplerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    code, outputs, inputs = result[:3]
    cfg = result[3] if len(result) > 3 else None
    extra = result[4] if len(result) > 4 else {}
    digests = {k: file_digest(v) if Path(v).is_file() else str(v) for k, v in inputs.items() if v}
    RunManifest(
        subcommand=args.command,
        seed=cfg.seed if cfg is not None else 0,
        config_digest=cfg.digest() if cfg is not None else "",
        inputs=digests,
        outputs=[str(o) for o in outputs],
        version=__version__,
        wall_clock_s=time.perf_counter() - start,
        extra=extra,
    ).write(args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
