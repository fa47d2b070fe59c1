"""Differentiable per-channel mapping of small CNNs onto heterogeneous compute units."""

from .hwmodel import CostReport, CUProfile, PlatformProfile, energy_cost, latency_cost, resolve_platform
from .netspec import LayerGeometry, LayerSpec, NetworkSpec, builtin_specs, resolve_spec
from .network import Network, build_supernet
from .tensor import Tensor, make_rng, no_grad

__all__ = [
    "CUProfile",
    "CostReport",
    "LayerGeometry",
    "LayerSpec",
    "Network",
    "NetworkSpec",
    "PlatformProfile",
    "Tensor",
    "build_supernet",
    "builtin_specs",
    "energy_cost",
    "latency_cost",
    "make_rng",
    "no_grad",
    "resolve_platform",
    "resolve_spec",
]
__version__ = "0.1.0"
