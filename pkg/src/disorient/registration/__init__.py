"""Registration backends exposing scored correspondences."""

from .features import (FeatureParams, ScoredKeypoint, compute_descriptors, detect_keypoints,
                       feature_register, match_descriptors, ransac_register)
from .icp import IcpParams, icp_register
from .kabsch import (Correspondence, DegenerateGeometryError, RegistrationResult,
                     weighted_kabsch)
from .ndt import EmptyGridError, NdtGrid, NdtParams, ndt_build, ndt_objective, ndt_register

__all__ = [
    "Correspondence", "DegenerateGeometryError", "EmptyGridError", "FeatureParams",
    "IcpParams", "NdtGrid", "NdtParams", "RegistrationResult", "ScoredKeypoint",
    "compute_descriptors", "detect_keypoints", "feature_register", "icp_register",
    "match_descriptors", "ndt_build", "ndt_objective", "ndt_register", "ransac_register",
    "weighted_kabsch",
]
