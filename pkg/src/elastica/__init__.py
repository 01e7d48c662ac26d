"""Deformable-object simulation on Gaussian-splat spring-mass systems, with
differentiable rollouts and physical attribute identification."""

from ._core import backend_name
from .core import (
    BindingTable,
    GaussianKernel,
    GaussianSet,
    PhysicalAttributes,
    SceneBundle,
    SimConfig,
    SpringMassState,
    SpringTopology,
    read_bundle,
    validate_bundle,
    write_bundle,
)

__version__ = "0.1.0"

__all__ = [
    "BindingTable",
    "GaussianKernel",
    "GaussianSet",
    "PhysicalAttributes",
    "SceneBundle",
    "SimConfig",
    "SpringMassState",
    "SpringTopology",
    "backend_name",
    "read_bundle",
    "validate_bundle",
    "write_bundle",
    "__version__",
]
