"""Local Lipschitz and closed-loop stability certificates for feedforward
networks via incremental quadratic constraints and semidefinite programming."""

from importlib import resources

from .deltaqc import SlopeBounds, layer_slope_bounds, qc_matrix, relu_partition, slope_bounds_smooth
from .lipschitz import (LipschitzCertificate, RobustnessResult, certify_radius, classifier_margin,
                        global_lipschitz, local_lipschitz)
from .lmi import SdpProblem, SolverConfig, SolverReport, assemble_M
from .network import (Activation, InputRegion, Network, load_network, random_network,
                      saturated_linear_controller, save_network)
from .relaxation import LayerBounds, propagate_bounds, relax_activation
from .stability import (Plant, StabilityCertificate, double_integrator, find_equilibrium, max_ellipsoid_level,
                        max_region, simulate_reachable, stability_lmi)

__version__ = "0.1.0"


def data_path(name: str):
    """Path of a bundled data file (networks, plants, inputs)."""
    return resources.files(__name__).joinpath("data", name)


__all__ = [
    "Activation", "InputRegion", "LayerBounds", "LipschitzCertificate", "Network", "Plant",
    "RobustnessResult", "SdpProblem", "SlopeBounds", "SolverConfig", "SolverReport", "StabilityCertificate",
    "assemble_M", "certify_radius", "classifier_margin", "data_path", "double_integrator", "find_equilibrium",
    "global_lipschitz", "layer_slope_bounds", "load_network", "local_lipschitz", "max_ellipsoid_level",
    "max_region", "propagate_bounds", "qc_matrix", "random_network", "relax_activation", "relu_partition",
    "saturated_linear_controller", "save_network", "simulate_reachable", "slope_bounds_smooth", "stability_lmi",
]
