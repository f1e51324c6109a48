"""Wi-Fi-signature gating for visual loop-closure search, on simulated indoor worlds."""

__version__ = "0.1.0"

from .clustering import ClusterStore, SimilarClusters, assign, members_of, similar_clusters
from .gating import PolicyParams, RunRecord, run_pipeline
from .posegraph import Pose2, PoseGraph, kabsch_align, optimize, rmse
from .signature import Signature, cosine_similarity, mask_bssid, signature_from_window
from .simworld import Dataset, preset_worlds, synthesize

__all__ = [
    "ClusterStore",
    "SimilarClusters",
    "assign",
    "members_of",
    "similar_clusters",
    "PolicyParams",
    "RunRecord",
    "run_pipeline",
    "Pose2",
    "PoseGraph",
    "kabsch_align",
    "optimize",
    "rmse",
    "Signature",
    "cosine_similarity",
    "mask_bssid",
    "signature_from_window",
    "Dataset",
    "preset_worlds",
    "synthesize",
]
