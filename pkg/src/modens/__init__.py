"""Post-hoc OoD detectors, mode ensembles and toy-scale experiments around them."""

__version__ = "0.1.0"
