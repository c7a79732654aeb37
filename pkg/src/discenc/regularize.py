"""Fake-sample sources for adversarial regularization.

Two families: frequency-based negative sampling for documents, and a
generator network for dense data.  The generator is either class-conditioned
(noise concatenated with a one-hot latent code; the encoder should recover
the code) or unconditioned with feature matching (match the mean head-input
activations of real and fake batches).  Class-conditioned generation tends to
destabilize clustering runs, so feature matching is the classification
default.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from discenc import nn
from discenc.core import BatchEncodings


class NegativeSampler:
    """Draws fake documents: word picks follow corpus frequency, lengths are
    Poisson around the corpus mean (resampled to keep every document non-empty)."""

    def __init__(self, word_probs, mean_length):
        word_probs = np.asarray(word_probs, dtype=np.float64)
        if word_probs.ndim != 1 or np.any(word_probs < 0):
            raise ValueError("word_probs must be a non-negative vector")
        total = word_probs.sum()
        if total <= 0:
            raise ValueError("word_probs carries no mass")
        if abs(total - 1.0) > 1e-12:
            word_probs = word_probs / total
        if mean_length <= 0:
            raise ValueError("mean document length must be positive")
        self.word_probs = word_probs
        self.mean_length = float(mean_length)

    @classmethod
    def from_counts(cls, counts) -> "NegativeSampler":
        """Fit from a (docs x vocab) term-count matrix (sparse or dense)."""
        counts = sparse.csr_matrix(counts)
        word_totals = np.asarray(counts.sum(axis=0)).ravel().astype(np.float64)
        doc_lengths = np.asarray(counts.sum(axis=1)).ravel()
        return cls(word_totals, doc_lengths.mean())

    def sample_documents(self, count: int, rng: np.random.Generator) -> sparse.csr_matrix:
        """Fake term-count matrix of `count` rows (apply the real corpus'
        tf-idf weighting downstream to land in the same feature space)."""
        if count < 1:
            raise ValueError("count must be >= 1")
        lengths = rng.poisson(self.mean_length, size=count)
        while np.any(lengths == 0):
            zero = lengths == 0
            lengths[zero] = rng.poisson(self.mean_length, size=int(zero.sum()))
        rows = rng.multinomial(lengths, self.word_probs)
        return sparse.csr_matrix(rows.astype(np.float64))


class Generator:
    """Dense generator network plus its sampling conventions."""

    def __init__(self, network: nn.Network, noise_dim: int, mode: str):
        if mode not in ("class_conditioned", "feature_matching"):
            raise ValueError(f"unknown generator mode {mode!r}")
        if noise_dim < 1:
            raise ValueError("noise dimension must be positive")
        self.network = network
        self.noise_dim = noise_dim
        self.mode = mode
        self.classes = network.in_dim - noise_dim if mode == "class_conditioned" else 0
        if mode == "class_conditioned" and self.classes < 1:
            raise ValueError("class-conditioned generator input must be noise_dim + classes wide")

    def generate_class_conditioned(self, z_indices, rng, training=False):
        """Fake batch from standard-normal noise concatenated with one-hot codes."""
        if self.mode != "class_conditioned":
            raise ValueError("generator is not class-conditioned")
        z_indices = np.asarray(z_indices, dtype=np.intp)
        b = z_indices.shape[0]
        noise = rng.standard_normal((b, self.noise_dim))
        onehot = np.zeros((b, self.classes))
        if b:
            onehot[np.arange(b), z_indices] = 1.0
        fake, _ = self.network.forward(np.concatenate([noise, onehot], axis=1), training=training)
        return fake

    def generate(self, count, rng, training=False):
        """Unconditioned fake batch from standard-normal noise."""
        if self.mode != "feature_matching":
            raise ValueError("generator is class-conditioned; pass latent codes")
        noise = rng.standard_normal((count, self.noise_dim))
        fake, _ = self.network.forward(noise, training=training)
        return fake


def generator_loss_class_conditioned(enc_fake: BatchEncodings, z_indices):
    """Negative mean log-probability of the conditioning class on fake samples.

    Gradient is w.r.t. the encoder head logits; chain it through the encoder
    (parameters frozen) and on into the generator.
    """
    lp = enc_fake.log_probs
    b, k = lp.shape
    z = np.asarray(z_indices, dtype=np.intp)
    if z.shape != (b,):
        raise ValueError(f"expected {b} latent codes, got shape {z.shape}")
    loss = float(-lp[np.arange(b), z].mean())
    onehot = np.zeros((b, k))
    onehot[np.arange(b), z] = 1.0
    grad = (np.exp(lp) - onehot) / b
    return loss, grad


def feature_matching_loss(penult_real, penult_fake):
    """Squared distance between mean head-input activations of the two batches.

    Gradient only w.r.t. the fake activations; the real batch is a fixed
    statistic for this update.
    """
    real = np.asarray(penult_real, dtype=np.float64)
    fake = np.asarray(penult_fake, dtype=np.float64)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise ValueError("real and fake activations must be 2-d with equal widths")
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("feature matching needs non-empty batches")
    diff = real.mean(axis=0) - fake.mean(axis=0)
    loss = float(diff @ diff)
    grad_fake = np.tile(-2.0 * diff / fake.shape[0], (fake.shape[0], 1))
    return loss, grad_fake
