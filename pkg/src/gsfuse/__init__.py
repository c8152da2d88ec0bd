"""Skeleton-guided registration and fusion of 3D Gaussian Splatting sub-maps."""
from .errors import (
    ConfigError,
    DegenerateInputError,
    FormatError,
    GSFuseError,
    InsufficientCorrespondences,
    RegistrationFailure,
    ValidationError,
)
from .model import GaussianModel, GaussianPrimitive, apply_transform, concatenate, covariance
from .ply import load_ply, save_ply
from .transform import SimilarityTransform

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "FormatError",
    "GSFuseError",
    "GaussianModel",
    "GaussianPrimitive",
    "InsufficientCorrespondences",
    "RegistrationFailure",
    "SimilarityTransform",
    "ValidationError",
    "apply_transform",
    "concatenate",
    "covariance",
    "load_ply",
    "save_ply",
]
