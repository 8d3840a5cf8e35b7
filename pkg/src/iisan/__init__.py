"""Decoupled side-network fine-tuning of frozen text and image encoders.

The package bundles a small reverse-mode autodiff engine, toy transformer
backbones, the IISAN side network with its embedded PEFT baselines, a
sequential recommender with debiased in-batch training, a hidden-state
cache and the TPME efficiency harness.
"""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
