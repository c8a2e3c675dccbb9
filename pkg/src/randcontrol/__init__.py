"""Randomization method for stochastic optimal control: simulation, reweighting, BSDE and oracles."""
__version__ = "0.1.0"
