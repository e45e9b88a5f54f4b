"""Gamma-ray induced offset-charge and quasiparticle-poisoning pipeline for qubit chips."""

__version__ = "0.1.0"
