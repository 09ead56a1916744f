"""Scene flow between point clouds by minimising the Cauchy-Schwarz divergence
between isotropic Gaussian mixtures, with Chamfer and EMD baselines."""

from csflow.core import (
    CsFlowError,
    DimensionError,
    FlowField,
    FlowMetrics,
    GmmSpec,
    MetricThresholds,
    ParameterError,
    PointCloud,
    SizeError,
    evaluate_flow,
    warp,
)
from csflow.correspondence import (
    VoxelGrid,
    compute_features,
    correspondence_flow,
    interpolate_to_points,
    soft_correspondence_flow,
    voxelize,
)
from csflow.divergence import (
    CrossTermTable,
    DivergenceValue,
    chamfer_distance,
    cross_term_table,
    cs_divergence,
    cs_divergence_numeric,
    emd_approx,
    emd_exact,
    gaussian_log_density,
    gaussian_product_identity,
)
from csflow.io import ParseError, read_cloud, read_flow, read_metrics, write_cloud, write_flow, write_metrics
from csflow.optimizer import (
    NonFiniteObjectiveError,
    OptimizeConfig,
    OptimizeReport,
    estimate_flow,
    objective,
    silverman_bandwidth,
)
from csflow.regularizer import KnnGraph, build_knn_graph, laplacian_loss
from csflow.synth import RigidMotion, SceneRecipe, generate

__version__ = "0.1.0"
