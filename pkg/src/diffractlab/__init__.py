"""Diffraction of weighted point sets: lattice gases, Gibbs weights and model sets."""

__version__ = "0.1.0"
