"""Cluster-based probabilistic flow estimation from sparse sensors.

Offline: snapshots are normalized by the incoming wind speed, each
subdomain is coarse-grained by k-means, and inference matrices link the
cluster affiliations of different subdomains. Online: a single sensor
signal is affiliated to source clusters and propagated to velocity
estimates along a query trajectory. Sensor placement is optimized by
exhaustive search over a candidate grid.
"""

from .crom import ClusterModel, SubdomainKMeans, affiliation, fit_clusters, representation_error
from .estimator import (
    ClusterFlowEstimator,
    Estimate,
    SensorSpec,
    SignalLibrary,
    Trajectory,
    affiliate_sensor,
    average_error,
    build_signal_library,
    estimate_at_point,
    estimate_u_inf,
    trajectory_error,
)
from .field import (
    Box,
    Dataset,
    GridSpec,
    OperatingCondition,
    Snapshot,
    VelocityField,
    hilbert_norm,
    normalize_snapshot,
    read_dataset,
    sample_velocity,
    write_dataset,
)
from .inference import InferenceMatrix, build_inference_matrix, column_uncertainty, propagate
from .partition import Subdomain, default_subdomains, locate, restrict
from .sensor_opt import CandidateSet, OptimizationReport, build_candidate_grid, optimize_sensor
from .synthetic import BuildingSpec, GenConfig, generate_dataset, generate_snapshot

__version__ = "0.1.0"
