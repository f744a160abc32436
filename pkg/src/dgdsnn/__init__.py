"""Dynamic-graph spiking network engine.

Spiking LIF nodes with per-timestep structural plasticity and symmetric
graph diffusion, plus the instrumentation around them: Dirichlet-energy
gradient-flow verification, topology-based OOD detection with
baselines, perturbation-robustness protocols, and synaptic-operation
energy accounting.
"""

from .numgrad import GradNode, Rng, backward, spectral_range
from .network import MorphNet, network_forward, reset_state
from .training import (
    PerturbSpec,
    SynthStream,
    TrainConfig,
    build_network,
    evaluate,
    generate_dataset,
    perturb,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "GradNode",
    "MorphNet",
    "PerturbSpec",
    "Rng",
    "SynthStream",
    "TrainConfig",
    "backward",
    "build_network",
    "evaluate",
    "generate_dataset",
    "network_forward",
    "perturb",
    "reset_state",
    "spectral_range",
    "train",
    "__version__",
]
