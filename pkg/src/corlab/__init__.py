"""Desk-scale laboratory for SAM optimization collapse diagnostics."""

from . import autodiff, diagnostics, harness, model, optim, regions, softmaxreg, tasks

__version__ = "0.1.0"

__all__ = ["autodiff", "diagnostics", "harness", "model", "optim",
           "regions", "softmaxreg", "tasks", "__version__"]
