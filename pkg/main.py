"""
Main entry point for the RDD-MK command line.

    rddmk <simulate|krige|cv|variogram|mc-study> --config PATH
          [--seed-override N] [--workers N] [--out-dir PATH]

Failures exit with status 1 and print ``{code, message, context}`` JSON on
stderr.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
from dotenv import load_dotenv

from config import COMMANDS, ConfigFile, parse_config
from data_io import (
    ingest_dataset,
    read_distance_matrix,
    read_points,
    read_targets,
    write_cv_summary,
    write_ellipses,
    write_grid,
    write_iterations,
    write_matrices,
    write_mc_outputs,
    write_points,
    write_predictions,
    write_sites,
    write_subsamples,
    write_varsigma,
    write_variograms,
)
from domain_graph import DomainGraph, SiteSet, build_delaunay, euclidean_graph, precomputed_graph
from errors import InternalError, OutputWriteError, RDDMKError
from field_simulator import (
    GaussianFieldSampler,
    c_domain_boundary,
    c_domain_grid,
    draw_subsample,
    field_manifold,
    field_seed,
    generate_field,
    monte_carlo_study,
)
from manifolds import SPDManifold
from rdd_service import RDDKrigingService, SpatialDataset, TargetSet

# Load environment variables
load_dotenv()

logger = logging.getLogger("rddmk")


def setup_logging() -> None:
    level = os.getenv("RDDMK_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rddmk",
        description="Random-domain-decomposition kriging of manifold-valued spatial data",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="dotenv-style config file")
    parser.add_argument("--seed-override", type=int, default=None, help="replace master_seed from the config")
    parser.add_argument("--workers", type=int, default=None, help="parallel workers for the bootstrap iterations")
    parser.add_argument("--out-dir", default=None, help="directory for result files")
    return parser


def build_graph(config: ConfigFile, sites: SiteSet) -> DomainGraph:
    """Site metric as configured: Euclidean, Delaunay graph distance, or a supplied matrix."""
    paths = config.paths
    if config.distance == "precomputed":
        return precomputed_graph(sites, read_distance_matrix(paths["distance_path"], sites))
    if config.distance == "delaunay":
        boundary = read_points(paths["boundary_path"]) if paths.get("boundary_path") else None
        extra = read_points(paths["extra_vertices_path"]) if paths.get("extra_vertices_path") else None
        return build_delaunay(sites, boundary=boundary, extra_vertices=extra)
    return euclidean_graph(sites)


def load_dataset(config: ConfigFile) -> SpatialDataset:
    sites, observations = ingest_dataset(
        config.paths["sites_path"], config.paths["matrices_path"], config.run.manifold
    )
    manifold = config.run.manifold.build()
    return SpatialDataset(build_graph(config, sites), observations, manifold)


def _is_spd2(manifold) -> bool:
    return isinstance(manifold, SPDManifold) and manifold.dim == 2


def run_simulate(config: ConfigFile) -> List[Path]:
    out = config.out_dir
    seed = config.run.master_seed
    mc = config.monte_carlo
    grid = c_domain_grid(config.domain)
    manifold = field_manifold(config.field_spec)
    sampler = GaussianFieldSampler(grid.phi_r, config.field_spec.grf_range, config.field_spec.grf_sill)
    field = generate_field(grid, config.field_spec, field_seed(seed), sampler)
    subsamples = {j: draw_subsample(len(grid), mc.n_sites, seed, j) for j in range(mc.n_replicates)}

    first = subsamples[0]
    first_field = generate_field(grid, config.field_spec, field_seed(seed, 0), sampler) if mc.resimulate_field else field
    site_set = SiteSet([grid.ids[i] for i in first], grid.coords[first])

    written = [
        write_grid(out / "grid.csv", grid),
        write_points(out / "boundary.csv", c_domain_boundary(config.domain)),
        write_matrices(out / "field.csv", grid.ids, field, manifold),
        write_subsamples(out / "subsamples.csv", subsamples, grid),
        write_sites(out / "sites.csv", site_set),
        write_matrices(out / "matrices.csv", site_set.ids, first_field[first], manifold),
    ]
    if _is_spd2(manifold):
        written.append(write_ellipses(out / "ellipses.csv", grid.ids, grid.coords, field))
    logger.info(f"🎲 Simulated {config.field_spec.kind} field on {len(grid)} grid points, {mc.n_replicates} subsamples")
    return written


def run_krige(config: ConfigFile, service: RDDKrigingService) -> List[Path]:
    out = config.out_dir
    data = load_dataset(config)
    targets_path = config.paths.get("targets_path")
    targets = read_targets(targets_path) if targets_path else TargetSet.from_sites(data.sites)
    result = service.krige(data, targets)

    written = [
        write_predictions(out / "predictions.csv", result, data.manifold),
        write_varsigma(out / "varsigma.csv", result),
    ]
    if config.run.keep_iterations:
        path = write_iterations(out / "iterations.csv", result, data.manifold)
        if path is not None:
            written.append(path)
    if config.run.dump_variograms and result.variogram_rows:
        frame = pd.DataFrame(
            result.variogram_rows, columns=["iteration", "tile", "lag", "gamma_emp", "gamma_fit", "weight"]
        )
        written.append(write_variograms(out / "variograms.csv", frame))
    if _is_spd2(data.manifold):
        written.append(write_ellipses(out / "ellipses.csv", targets.ids, targets.coords, result.predictions))
    return written


def run_cv(config: ConfigFile, service: RDDKrigingService) -> List[Path]:
    cv = service.cross_validate(load_dataset(config))
    return [write_cv_summary(config.out_dir / "cv_summary.json", cv)]


def run_variogram(config: ConfigFile, service: RDDKrigingService) -> List[Path]:
    frame = service.variogram_diagnostics(load_dataset(config))
    return [write_variograms(config.out_dir / "variograms.csv", frame)]


def run_mc_study(config: ConfigFile) -> List[Path]:
    mc = config.monte_carlo
    result = monte_carlo_study(
        config.run,
        n_replicates=mc.n_replicates,
        n_sites=mc.n_sites,
        k_values=mc.k_values,
        seed=config.run.master_seed,
        domain=config.domain,
        field_spec=config.field_spec,
        resimulate_field=mc.resimulate_field,
        exclude_observed=mc.exclude_observed,
        keep_spe=mc.dump_spe,
        workers=config.run.workers,
    )
    return write_mc_outputs(config.out_dir, result)


def dispatch(command: str, config: ConfigFile) -> List[Path]:
    """Run one command and return the files it wrote."""
    config.require(command)
    try:
        config.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputWriteError(
            f"Cannot create output directory {config.out_dir}: {e}", {"path": str(config.out_dir), "errno": e.errno}
        )
    service = RDDKrigingService(config.run, workers=config.run.workers)

    if command == "simulate":
        written = run_simulate(config)
    elif command == "krige":
        written = run_krige(config, service)
    elif command == "cv":
        written = run_cv(config, service)
    elif command == "variogram":
        written = run_variogram(config, service)
    else:
        written = run_mc_study(config)

    for path in written:
        logger.info(f"💾 Wrote {path}")
    return written


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config).with_overrides(
            seed=args.seed_override, workers=args.workers, out_dir=args.out_dir
        )
        written = dispatch(args.command, config)
    except RDDMKError as e:
        logger.error(f"❌ {args.command} failed: {e.message}")
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception(f"❌ {args.command} failed unexpectedly")
        error = InternalError(f"{type(e).__name__}: {e}", {"exception": type(e).__name__, "command": args.command})
        print(json.dumps(error.to_dict(), default=str), file=sys.stderr)
        return 1
    print(f"✅ {args.command} finished: {len(written)} file(s) in {config.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
