"""Log-radial harmonic scale-steerable filters and a scale-invariant CNN."""

from .filterbank import BasisSpec, SampledBasis, build_basis, sample_basis_filter
from .network import NetworkConfig, NetworkState, SSCNN
from .steering import CoefficientSet, steer

__version__ = "0.1.0"

__all__ = ["BasisSpec", "SampledBasis", "build_basis", "sample_basis_filter", "CoefficientSet", "steer",
           "NetworkConfig", "NetworkState", "SSCNN"]
