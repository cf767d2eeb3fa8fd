"""Simulator for quantized neural network inference on non-ideal NVM
crossbars, with adversarial-attack evaluation across analog backends."""

__version__ = "0.1.0"
