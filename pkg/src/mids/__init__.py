"""Simulation of model-induced distribution shifts with stratified reparation."""

__version__ = "0.1.0"
