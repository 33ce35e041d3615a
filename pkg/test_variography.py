#!/usr/bin/env python3
"""
Test script for kernel weights, the weighted empirical variogram and the
parametric variogram fit with its nugget-only fallback.
"""

import sys
from pathlib import Path

import numpy as np

# Add project directory to path
project_dir = Path(__file__).parent
sys.path.insert(0, str(project_dir))

from errors import FitFailedError, NoPairsError
from variography import (
    EmpiricalVariogram,
    KernelConfig,
    LagBins,
    VariogramModel,
    empirical_variogram,
    fit_variogram,
    fit_with_fallback,
    kernel_weight,
    mean_semivariance,
    model_eval,
    weighted_variogram,
)


def synthetic(model: VariogramModel, n_bins=15, h_max=3.0) -> EmpiricalVariogram:
    edges = np.linspace(0.0, h_max, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return EmpiricalVariogram(
        lag_centers=centers,
        semivariances=model(centers),
        pair_weights=np.ones(n_bins),
        bin_counts=np.full(n_bins, 10),
        bin_edges=edges,
    )


def test_kernel_weights():
    cfg = KernelConfig("gaussian", 1.5)
    assert np.isclose(float(kernel_weight(cfg, 1.5)), np.exp(-0.5))
    assert float(kernel_weight(cfg, 0.0)) == 1.0
    tile = KernelConfig("tile_indicator")
    w = kernel_weight(tile, np.array([0.0, 3.0, 7.0]), np.array([True, False, True]))
    assert np.array_equal(w, [1.0, 0.0, 1.0])
    for bad in (("gaussian", 0.0), ("boxcar", 1.0)):
        try:
            KernelConfig(*bad)
        except ValueError:
            continue
        raise AssertionError(f"KernelConfig{bad} was accepted")


def test_model_evaluation():
    sph = VariogramModel("spherical", nugget=0.2, partial_sill=1.0, range=2.0)
    assert float(sph(0.0)) == 0.0
    assert np.isclose(float(sph(1e-9)), 0.2, atol=1e-8)
    assert np.isclose(float(sph(2.0)), 1.2)
    assert np.isclose(float(sph(5.0)), 1.2)
    assert np.isclose(float(sph(1.0)), 0.2 + 1.5 * 0.5 - 0.5 * 0.125)
    exp = VariogramModel("exponential", nugget=0.0, partial_sill=2.0, range=1.0)
    assert np.isclose(float(model_eval(exp, 1.0)), 2.0 * (1.0 - np.exp(-3.0)))
    flat = VariogramModel("nugget_only", nugget=0.7)
    assert np.allclose(flat(np.array([0.0, 0.1, 10.0])), [0.0, 0.7, 0.7])


def test_weighted_variogram_by_hand():
    x = np.array([0.0, 1.0, 2.0])
    dist = np.abs(x[:, None] - x[None])
    coords = np.array([[0.0], [1.0], [3.0]])
    emp = weighted_variogram(coords, dist, np.ones(3), LagBins(n_bins=2, h_max=2.0))
    assert np.array_equal(emp.bin_counts, [2, 1])
    assert np.allclose(emp.semivariances, [1.25, 4.5])
    assert np.allclose(emp.lag_centers, [0.5, 1.5])

    partial = weighted_variogram(coords, dist, np.array([1.0, 1.0, 0.0]), LagBins(n_bins=2, h_max=2.0))
    assert np.isclose(partial.semivariances[0], 0.5)
    assert np.isnan(partial.semivariances[1])

    try:
        weighted_variogram(coords, dist, np.zeros(3), LagBins(n_bins=2, h_max=2.0))
    except NoPairsError:
        pass
    else:
        raise AssertionError("Zero kernel weights did not raise NoPairsError")


def test_empirical_variogram_kernel():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.0, 5.0, size=(60, 2))
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    coords = rng.normal(size=(60, 3))
    emp = empirical_variogram(coords, dist, 0, np.ones(60, dtype=bool), KernelConfig("gaussian", 1.5))
    assert emp.semivariances.shape == (15,)
    assert np.all(emp.pair_weights >= 0.0)
    # white noise in three coordinates: the weighted level is about 3
    populated = emp.populated
    assert np.all(emp.semivariances[populated] > 0.0)
    overall = np.sum(emp.pair_weights[populated] * emp.semivariances[populated]) / np.sum(emp.pair_weights[populated])
    assert 2.0 < overall < 4.0


def pairwise_variogram(coords, dist, site_weights, n_bins, cutoff):
    """Pair-by-pair evaluation of the weighted estimator, one bin at a time."""
    n = len(site_weights)
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            weight = site_weights[i] * site_weights[j]
            if weight >= cutoff:
                pairs.append((i, j, weight))
    if not pairs:
        return None
    h_max = 0.5 * max(dist[i, j] for i, j, _ in pairs)
    edges = np.linspace(0.0, h_max, n_bins + 1)
    numerator = np.zeros(n_bins)
    denominator = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=int)
    for i, j, weight in pairs:
        for b in range(n_bins):
            if edges[b] < dist[i, j] <= edges[b + 1]:
                numerator[b] += weight * float(np.sum((coords[i] - coords[j]) ** 2))
                denominator[b] += weight
                counts[b] += 1
                break
    if not np.any(counts):
        return None
    gamma = np.full(n_bins, np.nan)
    gamma[counts > 0] = numerator[counts > 0] / (2.0 * denominator[counts > 0])
    return gamma, denominator, counts


def test_weighted_variogram_matches_pairwise_sum():
    rng = np.random.default_rng(42)
    for case in range(100):
        n = int(rng.integers(3, 11))
        pts = rng.uniform(0.0, 5.0, size=(n, 2))
        dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        coords = rng.normal(size=(n, 3))
        if case % 2 == 0:
            cfg = KernelConfig("gaussian", float(rng.uniform(0.3, 2.0)))
            site_weights = kernel_weight(cfg, dist[int(rng.integers(n))])
        else:
            site_weights = kernel_weight(KernelConfig("tile_indicator"), dist[0], rng.random(n) < 0.7)
        bins = LagBins(n_bins=int(rng.integers(1, 16)))

        expected = pairwise_variogram(coords, dist, site_weights, bins.n_bins, bins.weight_cutoff)
        if expected is None:
            try:
                weighted_variogram(coords, dist, site_weights, bins)
            except NoPairsError:
                continue
            raise AssertionError(f"case {case}: no usable pair but no NoPairsError")
        gamma, weights, counts = expected
        emp = weighted_variogram(coords, dist, site_weights, bins)
        assert np.array_equal(emp.bin_counts, counts), case
        assert np.allclose(emp.pair_weights, weights, rtol=0.0, atol=1e-12), case
        assert np.allclose(emp.semivariances, gamma, rtol=0.0, atol=1e-12, equal_nan=True), case


def test_tile_indicator_is_unweighted_estimator():
    rng = np.random.default_rng(7)
    pts = rng.uniform(0.0, 4.0, size=(25, 2))
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    coords = rng.normal(size=(25, 4))
    bins = LagBins(n_bins=6)
    emp = empirical_variogram(coords, dist, 3, np.ones(25, dtype=bool), KernelConfig("tile_indicator"), bins)

    i, j = np.triu_indices(25, k=1)
    lag = dist[i, j]
    half_sq = 0.5 * np.sum((coords[i] - coords[j]) ** 2, axis=1)
    edges = emp.bin_edges
    for b in range(6):
        in_bin = (lag > edges[b]) & (lag <= edges[b + 1])
        if in_bin.any():
            assert np.isclose(emp.semivariances[b], half_sq[in_bin].mean(), rtol=1e-12)
            assert emp.pair_weights[b] == in_bin.sum()


def test_gaussian_weight_decreases_with_distance():
    cfg = KernelConfig("gaussian", 0.8)
    d = np.sort(np.random.default_rng(3).uniform(0.0, 6.0, size=200))
    w = kernel_weight(cfg, d)
    assert np.all(np.diff(w) <= 0.0)
    assert np.all((w > 0.0) & (w <= 1.0))
    # a pair only loses weight when one of its sites moves away from the nucleus
    partner = float(kernel_weight(cfg, 1.0))
    assert np.all(np.diff(partner * w) <= 0.0)


def test_fit_recovers_spherical():
    truth = VariogramModel("spherical", nugget=0.2, partial_sill=1.0, range=2.0)
    fit = fit_variogram(synthetic(truth), "spherical")
    assert fit.family == "spherical"
    assert abs(fit.range - 2.0) < 0.05
    assert abs(fit.nugget - 0.2) < 0.02
    assert abs(fit.partial_sill - 1.0) < 0.02


def test_fit_recovers_exponential():
    truth = VariogramModel("exponential", nugget=0.1, partial_sill=0.5, range=1.2)
    fit = fit_variogram(synthetic(truth), "exponential")
    assert fit.family == "exponential"
    assert abs(fit.range - 1.2) < 0.05
    assert abs(fit.nugget + fit.partial_sill - 0.6) < 0.02


def test_flat_variogram_is_nugget_only():
    flat = synthetic(VariogramModel("nugget_only", nugget=0.4))
    fit = fit_variogram(flat, "spherical")
    assert fit.family == "nugget_only"
    assert np.isclose(fit.nugget, 0.4)
    assert fit_variogram(flat, "nugget_only").family == "nugget_only"


def test_fit_fallbacks():
    sparse = synthetic(VariogramModel("spherical", nugget=0.1, partial_sill=1.0, range=1.0), n_bins=2)
    try:
        fit_variogram(sparse, "spherical")
    except FitFailedError:
        pass
    else:
        raise AssertionError("Fit on two bins did not fail")
    model, reason = fit_with_fallback(sparse, "spherical")
    assert model.family == "nugget_only" and reason == "fit_failed"
    assert model.nugget > 0.0

    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    model, reason = fit_with_fallback(None, "spherical", coords)
    assert model.family == "nugget_only" and reason == "no_pairs"
    # half the mean squared pair distance: (1 + 4 + 5) / 3 / 2
    assert np.isclose(model.nugget, 5.0 / 3.0)
    assert np.isclose(mean_semivariance(coords), 5.0 / 3.0)
    assert mean_semivariance(coords[:1]) == 0.0

    empty = EmpiricalVariogram(
        lag_centers=np.array([0.5]),
        semivariances=np.array([np.nan]),
        pair_weights=np.zeros(1),
        bin_counts=np.zeros(1, dtype=int),
        bin_edges=np.array([0.0, 1.0]),
    )
    model, reason = fit_with_fallback(empty, "spherical", coords)
    assert reason == "fit_failed" and np.isclose(model.nugget, 5.0 / 3.0)


def main():
    """Main test function"""
    print("🧪 Variography Tests")
    print("=" * 50)

    tests = [
        test_kernel_weights,
        test_model_evaluation,
        test_weighted_variogram_by_hand,
        test_empirical_variogram_kernel,
        test_weighted_variogram_matches_pairwise_sum,
        test_tile_indicator_is_unweighted_estimator,
        test_gaussian_weight_decreases_with_distance,
        test_fit_recovers_spherical,
        test_fit_recovers_exponential,
        test_flat_variogram_is_nugget_only,
        test_fit_fallbacks,
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
