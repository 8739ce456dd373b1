"""Lattice emulation of inflationary curvature perturbations on a truncated field grid."""

__version__ = "0.1.0"
