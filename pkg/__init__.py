from rdd_service import (
    RDDKrigingService,
    RunConfig,
    SpatialDataset,
    TargetSet,
    PredictionResult,
    CrossValidationResult,
    run_rdd_mk,
    run_iteration,
    loo_cross_validate,
    error_metrics,
)
from manifolds import ManifoldKind, SPDManifold, SphereManifold, CholeskyManifold, intrinsic_mean
from domain_graph import SiteSet, DomainGraph, build_delaunay, euclidean_graph, precomputed_graph, draw_partition
from variography import KernelConfig, LagBins, VariogramModel, empirical_variogram, fit_variogram
from kriging import TileModel, kriging_weights, krige_predict
from field_simulator import CDomainSpec, FieldSpec, c_domain_grid, generate_field, monte_carlo_study
from config import parse_config
from data_io import ingest_dataset

__all__ = [
    'RDDKrigingService',
    'RunConfig',
    'SpatialDataset',
    'TargetSet',
    'PredictionResult',
    'CrossValidationResult',
    'run_rdd_mk',
    'run_iteration',
    'loo_cross_validate',
    'error_metrics',
    'ManifoldKind',
    'SPDManifold',
    'SphereManifold',
    'CholeskyManifold',
    'intrinsic_mean',
    'SiteSet',
    'DomainGraph',
    'build_delaunay',
    'euclidean_graph',
    'precomputed_graph',
    'draw_partition',
    'KernelConfig',
    'LagBins',
    'VariogramModel',
    'empirical_variogram',
    'fit_variogram',
    'TileModel',
    'kriging_weights',
    'krige_predict',
    'CDomainSpec',
    'FieldSpec',
    'c_domain_grid',
    'generate_field',
    'monte_carlo_study',
    'parse_config',
    'ingest_dataset',
]
