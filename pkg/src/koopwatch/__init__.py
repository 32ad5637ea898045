"""Incident detection in sensor time series from changes in the sparsity
pattern of windowed Koopman operator estimates."""

__version__ = "0.1.0"

from .cluster import ClusterConfig, ClusterResult, correlation_distance, kmeans, misclassification_rate
from .detect import DetectConfig, IncidentFlag, SparsityPattern, binarize, detect_incidents, pattern_distance
from .kernel import KernelConfig, augment, gaussian_kernel
from .koopman import (
    Dictionary,
    KoopmanEstimate,
    SolverConfig,
    accumulate_moments,
    estimate_sequence,
    generate_centers,
    solve_sparse,
)
from .timeseries import Dataset, Event, EventLog, load_csv, save_csv, slice_window

__all__ = [
    "ClusterConfig", "ClusterResult", "Dataset", "DetectConfig", "Dictionary", "Event",
    "EventLog", "IncidentFlag", "KernelConfig", "KoopmanEstimate", "SolverConfig",
    "SparsityPattern", "accumulate_moments", "augment", "binarize", "correlation_distance",
    "detect_incidents", "estimate_sequence", "gaussian_kernel", "generate_centers", "kmeans",
    "load_csv", "misclassification_rate", "pattern_distance", "save_csv", "slice_window",
    "solve_sparse",
]
