"""spikefield: desk-scale grid radiance fields with a learnable spiking
density threshold and level-set mesh extraction."""

__version__ = "0.1.0"
