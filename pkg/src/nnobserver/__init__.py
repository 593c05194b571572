"""Interval observers for systems with embedded feedforward networks."""

from .nnet import (
    Activation,
    AuxNetPair,
    NeuralNet,
    aux_forward,
    build_aux_pair,
    check_bracketing,
    forward,
    split_weights,
)
from .observer_synth import ObserverGains, PlantModel, SynthOptions, synthesize, verify_certificate

__all__ = [
    "Activation",
    "AuxNetPair",
    "NeuralNet",
    "aux_forward",
    "build_aux_pair",
    "check_bracketing",
    "forward",
    "split_weights",
    "ObserverGains",
    "PlantModel",
    "SynthOptions",
    "synthesize",
    "verify_certificate",
]

__version__ = "0.1.0"
