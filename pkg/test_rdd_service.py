#!/usr/bin/env python3
"""
Test script for the RDD-MK engine: bagged prediction, bootstrap variance,
leave-one-out cross-validation and the service wrapper.
"""

import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

# Add project directory to path
project_dir = Path(__file__).parent
sys.path.insert(0, str(project_dir))

os.environ["RDDMK_PROGRESS"] = "0"

from domain_graph import SiteSet, euclidean_graph
from errors import DimensionMismatchError, PartitionInfeasibleError, PreconditionViolation
from kriging import TileModel, predict_tile
from manifolds import CholeskyManifold, ManifoldKind, SPDManifold, SphereManifold, corr_to_chol
from matrix_utils import matrix_exp_sym
from rdd_service import (
    RDDKrigingService,
    RunConfig,
    SpatialDataset,
    TargetSet,
    error_metrics,
    iteration_seed,
    loo_cross_validate,
    run_iteration,
    run_rdd_mk,
)
from variography import KernelConfig, fit_with_fallback, kernel_weight, weighted_variogram


def smooth_spd(coords):
    x, y = coords[:, 0], coords[:, 1]
    y_sym = np.zeros((len(coords), 2, 2))
    y_sym[:, 0, 0] = 0.3 * x
    y_sym[:, 1, 1] = -0.2 * y
    y_sym[:, 0, 1] = y_sym[:, 1, 0] = 0.1 * (x - y)
    return matrix_exp_sym(y_sym)


def spd_dataset(n=30, seed=0, noise=0.05) -> SpatialDataset:
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, 5.0, size=(n, 2))
    sites = SiteSet([f"s{i}" for i in range(n)], coords)
    base = smooth_spd(coords)
    jitter = rng.normal(scale=noise, size=(n, 2, 2))
    jitter = 0.5 * (jitter + np.swapaxes(jitter, 1, 2))
    obs = SPDManifold(2).exp(base, jitter)
    return SpatialDataset(euclidean_graph(sites), obs, SPDManifold(2))


def grid_targets() -> TargetSet:
    xs, ys = np.meshgrid(np.linspace(0.5, 4.5, 4), np.linspace(0.5, 4.5, 4))
    coords = np.column_stack([xs.ravel(), ys.ravel()])
    return TargetSet([f"t{i}" for i in range(len(coords))], coords)


def expect(error_type, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except error_type as e:
        return e
    raise AssertionError(f"{fn.__name__} did not raise {error_type.__name__}")


def test_run_config_violations():
    problems = RunConfig(k=0).violations(10)
    assert any("1 ≤ K ≤ n" in p for p in problems)
    assert RunConfig(k=11).violations(10)
    assert not RunConfig(k=4).violations(10)
    assert RunConfig(b=0, workers=0).violations()


def test_prediction_shapes_and_manifold():
    data = spd_dataset()
    targets = grid_targets()
    config = RunConfig(k=2, b=5, master_seed=7, keep_iterations=True)
    result = run_rdd_mk(config, data, targets, progress=False)
    assert result.predictions.shape == (16, 2, 2)
    SPDManifold(2).validate_point(result.predictions)
    assert result.varsigma2.shape == (16,)
    assert np.all(result.varsigma2 >= 0.0)
    assert result.iteration_predictions.shape == (16, 5, 2, 2)
    assert result.iteration_tiles.shape == (16, 5)
    assert set(np.unique(result.iteration_tiles)) <= {0, 1}
    assert result.statistics["k"] == 2 and result.statistics["b"] == 5


def test_reproducible_and_order_independent():
    data = spd_dataset(seed=1)
    targets = grid_targets()
    config = RunConfig(k=2, b=4, master_seed=11)
    a = run_rdd_mk(config, data, targets, progress=False)
    b = run_rdd_mk(config, data, targets, progress=False)
    assert np.array_equal(a.predictions, b.predictions)
    assert np.array_equal(a.varsigma2, b.varsigma2)
    parallel = run_rdd_mk(config, data, targets, workers=2, progress=False)
    assert np.array_equal(parallel.predictions, a.predictions)
    assert np.array_equal(parallel.varsigma2, a.varsigma2)
    other = run_rdd_mk(replace(config, master_seed=12), data, targets, progress=False)
    assert not np.array_equal(other.predictions, a.predictions)


def test_single_iteration_has_zero_variance():
    data = spd_dataset(seed=2)
    result = run_rdd_mk(RunConfig(k=1, b=1), data, grid_targets(), progress=False)
    assert np.all(result.varsigma2 == 0.0)


def test_single_tile_matches_stationary_kriging():
    data = spd_dataset(n=20, seed=9)
    targets = grid_targets()
    config = RunConfig(k=1, b=6, master_seed=2, keep_iterations=True)
    result = run_rdd_mk(config, data, targets, progress=False)
    assert np.all(result.varsigma2 == 0.0)
    for b in range(1, 6):
        assert np.array_equal(result.iteration_predictions[:, b], result.iteration_predictions[:, 0])

    # one tile holding every site, each with full weight
    manifold = data.manifold
    graph = data.graph
    base = manifold.mean(data.observations, tol=config.mean_tol, max_iter=config.mean_max_iter)
    logs = manifold.log(base, data.observations)
    coords = manifold.tangent_coordinates(base, logs)
    site_weights = kernel_weight(KernelConfig("tile_indicator"), graph.dist[0], np.ones(data.n, dtype=bool))
    emp = weighted_variogram(coords, graph.dist, site_weights, config.bins)
    variogram, _ = fit_with_fallback(emp, config.variogram_family, coords)
    model = TileModel(0, manifold, base, np.arange(data.n), logs, variogram)
    expected, _ = predict_tile(model, graph, graph.target_distances(targets.coords))
    assert np.allclose(result.predictions, expected, rtol=0.0, atol=1e-12)


def test_run_is_composed_of_seeded_iterations():
    data = spd_dataset(seed=10)
    targets = grid_targets()
    config = RunConfig(k=3, b=4, master_seed=17, keep_iterations=True)
    result = run_rdd_mk(config, data, targets, progress=False)
    manifold = data.manifold

    for b in range(config.b):
        single = run_iteration(config, data, targets, iteration_seed(config.master_seed, b), iteration=b)
        assert np.array_equal(result.iteration_predictions[:, b], single.predictions), b
        assert np.array_equal(result.iteration_tiles[:, b], single.target_tiles), b

    stack = result.iteration_predictions
    aggregated = manifold.mean(stack, tol=config.mean_tol, max_iter=config.mean_max_iter)
    assert np.array_equal(result.predictions, aggregated)

    varsigma2 = np.zeros(len(targets))
    for t in range(len(targets)):
        for b in range(config.b):
            varsigma2[t] += float(manifold.dist(stack[t, b], result.predictions[t])) ** 2 / config.b
    assert np.allclose(result.varsigma2, varsigma2, rtol=0.0, atol=1e-12)


def test_loo_folds_are_independent_runs():
    data = spd_dataset(n=10, seed=12)
    config = RunConfig(k=2, b=3, master_seed=4)
    cv = loo_cross_validate(config, data)
    for i in range(data.n):
        target = TargetSet([data.sites.ids[i]], data.sites.coords[i : i + 1])
        fold = run_rdd_mk(config, data.without_site(i), target, progress=False)
        expected = float(data.manifold.dist(data.observations[i], fold.predictions[0])) ** 2
        assert cv.squared_errors[i] == expected, i


def test_iteration_seed_stream():
    data = spd_dataset(seed=3)
    targets = grid_targets()
    config = RunConfig(k=3, b=1)
    first = run_iteration(config, data, targets, iteration_seed(5, 2), iteration=2)
    again = run_iteration(config, data, targets, iteration_seed(5, 2), iteration=2)
    assert np.array_equal(first.partition.nuclei, again.partition.nuclei)
    assert np.array_equal(first.predictions, again.predictions)
    assert sum(first.tile_sizes) == data.n
    assert min(first.tile_sizes) >= config.min_tile_size


def test_preconditions():
    data = spd_dataset(n=10)
    targets = grid_targets()
    expect(PreconditionViolation, run_rdd_mk, RunConfig(k=0), data, targets, progress=False)
    expect(PreconditionViolation, run_rdd_mk, RunConfig(k=11), data, targets, progress=False)
    expect(PreconditionViolation, run_rdd_mk, RunConfig(k=1, b=1), data, TargetSet([], np.empty((0, 2))), progress=False)
    expect(PartitionInfeasibleError, run_rdd_mk, RunConfig(k=4, b=1), data, targets, progress=False)
    expect(
        DimensionMismatchError,
        run_rdd_mk,
        RunConfig(k=1, b=2),
        data,
        targets,
        iteration_weights=[1.0, 1.0, 1.0],
        progress=False,
    )


def test_iteration_weights():
    data = spd_dataset(seed=4)
    targets = grid_targets()
    config = RunConfig(k=2, b=3, master_seed=3, keep_iterations=True)
    uniform = run_rdd_mk(config, data, targets, progress=False)
    weighted = run_rdd_mk(config, data, targets, iteration_weights=[1.0, 1.0, 1.0], progress=False)
    assert np.allclose(uniform.predictions, weighted.predictions, atol=1e-12)
    # all weight on one iteration reproduces that iteration
    picked = run_rdd_mk(config, data, targets, iteration_weights=[0.0, 1.0, 0.0], progress=False)
    assert np.allclose(picked.predictions, uniform.iteration_predictions[:, 1], atol=1e-8)


def test_loo_cross_validation():
    data = spd_dataset(n=12, seed=5)
    cv = loo_cross_validate(RunConfig(k=1, b=2), data)
    assert len(cv.squared_errors) == 12
    assert np.all(cv.squared_errors >= 0.0)
    summary = cv.to_dict()
    assert set(summary) == {"per_site", "mean", "median"}
    assert summary["per_site"][0]["id"] == "s0"
    assert np.isclose(summary["mean"], np.mean(cv.squared_errors))
    expect(PreconditionViolation, loo_cross_validate, RunConfig(k=12, min_tile_size=1), data)


def test_error_metrics():
    data = spd_dataset(n=5)
    metrics = error_metrics(data.observations, data.observations, data.manifold)
    assert metrics["mspe"] == 0.0 and metrics["mean_squared_distance"] == 0.0

    chol = CholeskyManifold(2)
    truth = corr_to_chol(np.array([[[1.0, 0.2], [0.2, 1.0]], [[1.0, -0.4], [-0.4, 1.0]]]))
    pred = corr_to_chol(np.array([[[1.0, 0.5], [0.5, 1.0]], [[1.0, -0.4], [-0.4, 1.0]]]))
    metrics = error_metrics(pred, truth, chol)
    assert np.allclose(metrics["rho_sq_diff"], [0.09, 0.0])
    assert np.isclose(metrics["mean_rho_sq_diff"], 0.045)
    masked = error_metrics(pred, truth, chol, mask=[False, True])
    assert masked["mspe"] == 0.0
    expect(DimensionMismatchError, error_metrics, pred[:1], truth, chol)


def test_sphere_and_cholesky_runs():
    rng = np.random.default_rng(6)
    coords = rng.uniform(0.0, 4.0, size=(24, 2))
    sites = SiteSet([f"s{i}" for i in range(24)], coords)
    graph = euclidean_graph(sites)
    targets = grid_targets()

    raw = np.column_stack([np.cos(0.2 * coords[:, 0]), np.sin(0.2 * coords[:, 0]), 1.0 + 0.1 * coords[:, 1]])
    sphere_obs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    sphere = SpatialDataset(graph, sphere_obs, SphereManifold(3))
    result = run_rdd_mk(RunConfig(k=2, b=3, manifold=ManifoldKind("sphere", 3)), sphere, targets, progress=False)
    assert np.allclose(np.linalg.norm(result.predictions, axis=1), 1.0)

    rho = np.tanh(0.3 * (coords[:, 0] - 2.0))
    corr = np.zeros((24, 2, 2))
    corr[:, 0, 0] = corr[:, 1, 1] = 1.0
    corr[:, 0, 1] = corr[:, 1, 0] = rho
    chol = SpatialDataset(graph, corr_to_chol(corr), CholeskyManifold(2))
    result = run_rdd_mk(RunConfig(k=2, b=3, manifold=ManifoldKind("cholesky", 2)), chol, targets, progress=False)
    CholeskyManifold(2).validate_point(result.predictions)


def test_service_wrapper():
    data = spd_dataset(seed=8)
    targets = grid_targets()
    service = RDDKrigingService(RunConfig(k=2, b=2, master_seed=1))
    service.krige(data, targets)
    frame = service.variogram_diagnostics(data)
    assert list(frame.columns) == ["iteration", "tile", "lag", "gamma_emp", "gamma_fit", "weight"]
    assert set(frame["tile"].unique()) <= {0, 1}
    assert np.all(frame["weight"] > 0.0)

    truth = smooth_spd(targets.coords)
    table = service.compare_k(data, targets, truth, [1, 2])
    assert list(table["k"]) == [1, 2]
    assert np.all(table["mspe"] >= 0.0)

    stats = service.get_run_statistics()
    assert stats["runs"] == 3
    assert stats["by_type"] == {"krige": 1, "variogram": 1, "compare_k": 1}


def main():
    """Main test function"""
    print("🧪 RDD-MK Engine Tests")
    print("=" * 50)

    tests = [
        test_run_config_violations,
        test_prediction_shapes_and_manifold,
        test_reproducible_and_order_independent,
        test_single_iteration_has_zero_variance,
        test_single_tile_matches_stationary_kriging,
        test_run_is_composed_of_seeded_iterations,
        test_loo_folds_are_independent_runs,
        test_iteration_seed_stream,
        test_preconditions,
        test_iteration_weights,
        test_loo_cross_validation,
        test_error_metrics,
        test_sphere_and_cholesky_runs,
        test_service_wrapper,
    ]
    success = True
    for test in tests:
        try:
            test()
            print(f"✅ {test.__name__}")
        except Exception as e:
            print(f"❌ {test.__name__}: {e!r}")
            success = False

    print("\n" + "=" * 50)
    print("🎉 ALL TESTS PASSED!" if success else "❌ SOME TESTS FAILED!")
    return success


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
