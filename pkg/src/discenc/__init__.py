"""Discriminative encoder feature learning.

Alternates per-sample latent selection under a batch-normalized joint
distribution with encoder updates, optionally regularized by training the
encoder to be maximally unsure about fake samples.  Categorical heads give
clusterings; sphere-valued gaussian heads give embeddings for linear probes.
"""

from discenc import core, data, evaluate, gradcheck, nn, regularize, rng, train

__version__ = "0.1.0"

__all__ = ["core", "data", "evaluate", "gradcheck", "nn", "regularize", "rng", "train",
           "__version__"]
