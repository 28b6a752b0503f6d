"""Random-graph-model view of graph domain adaptation.

Submodules: ``rgm`` (models and sampling), ``mpnn`` (message passing networks
and training), ``transport`` (Wasserstein estimators), ``spectral`` (Gram
spectra), ``bound`` (generalization bound terms), ``lsm`` (latent space model)
and ``harness`` (pipelines and CLI).
"""
from ._validation import (ConstraintViolation, DegenerateGraph, InvalidArgument, NumericError, RgmShiftError,
                          SizeCapExceeded, TrainingFailure)

__version__ = "0.1.0"

__all__ = ["RgmShiftError", "InvalidArgument", "ConstraintViolation", "DegenerateGraph", "NumericError",
           "SizeCapExceeded", "TrainingFailure", "__version__"]
