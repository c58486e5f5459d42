"""Footprint emulation with deep-ensemble uncertainty quantification.

A self-contained desk-scale pipeline: a seeded synthetic meteorology
generator, a backward-trajectory particle dispersion oracle, a mesh-based
graph-network emulator trained per seed, and ensemble statistics relating
spread to emulation error for footprints and derived mole fractions.
"""

__version__ = "0.1.0"
