"""Joint-distribution math for the discriminative encoder.

The model couples the encoding distribution p(z|x) with a prior p(z) into a
joint q(x, z) that puts mass only on training points:

    log q(x_i, z) = log p(z|x_i) + log p(z) - log sum_j p(z|x_j)

Training alternates per-sample selection of the z maximizing log q with
encoder updates on the selected pairs; the normalizing sum over j is always
restricted to the current minibatch (or, for sphere-valued latents, to a FIFO
queue of recently trained samples).  Everything here works in log space;
probabilities only appear at the API boundary.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

NEG_INF = -np.inf


def log_sum_exp(v, axis=None):
    """log(sum(exp(v))) via max shift; safe for entries of magnitude 1e3."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    hi = np.max(v, axis=axis, keepdims=True)
    # An all -inf slice must come out -inf, not nan.
    shift = np.where(np.isfinite(hi), hi, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(out)
    return np.squeeze(out, axis=axis)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log probabilities; exact counterpart of nn.softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    return logits - log_sum_exp(logits, axis=-1)[..., None]


@dataclass
class UniformCategorical:
    """Uniform prior over K one-hot latent classes."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("class count must be >= 1")

    def log_prob(self, index) -> float:
        return -np.log(self.k)

    def probs(self) -> np.ndarray:
        return np.full(self.k, 1.0 / self.k)


@dataclass
class UniformSphere:
    """Uniform prior on the radius-r sphere in R^m; default radius sqrt(m)."""

    dim: int
    radius: float = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("sphere dimension must be >= 1")
        if self.radius is None:
            self.radius = float(np.sqrt(self.dim))
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def log_surface_area(self) -> float:
        m, r = self.dim, self.radius
        return float(np.log(2.0) + 0.5 * m * np.log(np.pi) + (m - 1) * np.log(r) - gammaln(0.5 * m))

    def log_prob(self, z) -> float:
        z = np.asarray(z, dtype=np.float64)
        if abs(np.linalg.norm(z) - self.radius) > 1e-9 * max(1.0, self.radius):
            return NEG_INF
        return -self.log_surface_area()

    def project(self, v: np.ndarray) -> np.ndarray:
        """Nearest sphere point; a zero vector is nudged before normalizing."""
        v = np.array(v, dtype=np.float64)
        flat = v.ndim == 1
        if flat:
            v = v[None, :]
        norms = np.linalg.norm(v, axis=1)
        dead = norms == 0.0
        if np.any(dead):
            v[dead, 0] = 1e-12
            norms = np.linalg.norm(v, axis=1)
        out = v * (self.radius / norms)[:, None]
        return out[0] if flat else out


class BatchEncodings:
    """Encoder outputs for one batch: log class probabilities or sphere-space means."""

    def __init__(self, kind, log_probs=None, means=None, lam=None, sample_ids=None):
        self.kind = kind
        self.log_probs = log_probs
        self.means = means
        self.lam = lam
        self.sample_ids = sample_ids

    @classmethod
    def from_logits(cls, logits, sample_ids=None):
        return cls("categorical", log_probs=log_softmax(logits), sample_ids=sample_ids)

    @classmethod
    def from_probs(cls, probs, sample_ids=None):
        probs = np.asarray(probs, dtype=np.float64)
        row_sums = probs.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-12):
            raise ValueError("categorical rows must sum to 1 within 1e-12")
        with np.errstate(divide="ignore"):
            return cls("categorical", log_probs=np.log(probs), sample_ids=sample_ids)

    @classmethod
    def from_log_probs(cls, log_probs, sample_ids=None):
        # Expert path: accepts unnormalized log scores (selection only needs
        # per-class ratios, which ignore per-class positive scaling).
        return cls("categorical", log_probs=np.asarray(log_probs, dtype=np.float64),
                   sample_ids=sample_ids)

    @classmethod
    def gaussian(cls, means, lam, sample_ids=None):
        if lam <= 0:
            raise ValueError("encoding variance must be positive")
        return cls("gaussian", means=np.asarray(means, dtype=np.float64), lam=float(lam),
                   sample_ids=sample_ids)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def __len__(self):
        arr = self.log_probs if self.kind == "categorical" else self.means
        return arr.shape[0]


class RecentQueue:
    """FIFO of the most recently trained samples' encoder means."""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self._rows = deque(maxlen=capacity)

    def push(self, row: np.ndarray) -> None:
        self._rows.append(np.array(row, dtype=np.float64))

    def push_batch(self, rows: np.ndarray) -> None:
        for row in np.asarray(rows, dtype=np.float64):
            self._rows.append(row.copy())

    def snapshot(self) -> np.ndarray:
        if not self._rows:
            raise ValueError("queue is empty")
        return np.stack(list(self._rows))

    def __len__(self):
        return len(self._rows)


def _pair_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs squared distances, (len(a), len(b))."""
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def log_q_joint(enc: BatchEncodings, i: int, z, prior) -> float:
    """log q(x_i, z) with the normalizer restricted to the batch behind `enc`.

    For a categorical encoding `z` is a class index; for a gaussian encoding
    it is a real vector (density constants cancel between numerator and
    normalizer and are omitted).  A zero-probability class comes back as -inf
    rather than raising.
    """
    if enc.kind == "categorical":
        k = int(z)
        lp = enc.log_probs
        if not 0 <= k < lp.shape[1]:
            raise ValueError(f"class index {k} out of range for K={lp.shape[1]}")
        if lp[i, k] == NEG_INF:
            return NEG_INF
        return float(lp[i, k] + prior.log_prob(k) - log_sum_exp(lp[:, k]))
    z = np.asarray(z, dtype=np.float64)
    ll = -_pair_sqdist(enc.means, z[None, :])[:, 0] / (2.0 * enc.lam)
    return float(ll[i] + prior.log_prob(z) - log_sum_exp(ll))


def class_selection_scores(log_scores: np.ndarray) -> np.ndarray:
    """Per-sample per-class selection scores log(s_ik / sum_j s_jk).

    Works on any log-score matrix: multiplying a class column of the
    underlying scores by a positive constant leaves its column of ratios
    unchanged.  Classes whose column carries no mass are excluded (-inf).
    """
    log_scores = np.asarray(log_scores, dtype=np.float64)
    if log_scores.ndim != 2 or log_scores.shape[0] < 1:
        raise ValueError("expected a non-empty (batch, classes) matrix")
    col_lse = log_sum_exp(log_scores, axis=0)
    dead = ~np.isfinite(col_lse)
    if dead.all():
        raise ValueError("every class column has zero total mass")
    with np.errstate(invalid="ignore"):
        scores = log_scores - col_lse[None, :]
    scores[:, dead] = NEG_INF
    return scores


def select_latent_categorical(enc: BatchEncodings) -> np.ndarray:
    """Class index per sample maximizing the batch-normalized ratio (ties -> lowest)."""
    if enc.kind != "categorical":
        raise ValueError("categorical selection needs a categorical encoding")
    return np.argmax(class_selection_scores(enc.log_probs), axis=1)


def gaussian_selection_objective(z, phi, pool, lam):
    """Eq-of-selection objective rows: ||phi_i - z_i||^2/(2 lam) + lse_pool(-d^2/(2 lam))."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    own = ((phi - z) ** 2).sum(axis=1) / (2.0 * lam)
    crowd = log_sum_exp(-_pair_sqdist(z, pool) / (2.0 * lam), axis=1)
    return own + crowd


def select_latent_gaussian(phi_i, queue, prior: UniformSphere, lam,
                           steps: int = 25, step_size: float = None) -> np.ndarray:
    """Sphere-constrained latent for one sample; see select_latent_gaussian_batch."""
    z = select_latent_gaussian_batch(np.atleast_2d(phi_i), queue, prior, lam,
                                     steps=steps, step_size=step_size)
    return z[0]


def select_latent_gaussian_batch(phi, queue, prior: UniformSphere, lam,
                                 steps: int = 25, step_size: float = None,
                                 max_halvings: int = 10) -> np.ndarray:
    """Projected gradient descent on the selection objective, one z per row of phi.

    Starts at the sphere projection of each mean, takes `steps` descent
    updates each followed by projection, and halves a row's step size (up to
    `max_halvings` times) whenever a candidate would increase the objective;
    a row whose candidates all increase keeps its current point, so the final
    objective never exceeds the initializer's.
    """
    if lam <= 0:
        raise ValueError("encoding variance must be positive")
    if len(queue) == 0:
        raise ValueError("queue is empty")
    if step_size is None:
        step_size = 0.1 * lam
    pool = queue.snapshot() if isinstance(queue, RecentQueue) else np.asarray(queue, dtype=np.float64)
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))

    z = prior.project(phi)
    obj = gaussian_selection_objective(z, phi, pool, lam)
    for _ in range(steps):
        d = _pair_sqdist(z, pool)
        w = np.exp(-(d - d.min(axis=1, keepdims=True)) / (2.0 * lam))
        w /= w.sum(axis=1, keepdims=True)
        grad = ((z - phi) + (w @ pool - z)) / lam
        eta = np.full(len(z), step_size)
        moved = np.zeros(len(z), dtype=bool)
        for _ in range(max_halvings + 1):
            todo = ~moved
            if not todo.any():
                break
            cand = prior.project(z[todo] - eta[todo, None] * grad[todo])
            cand_obj = gaussian_selection_objective(cand, phi[todo], pool, lam)
            ok = cand_obj <= obj[todo]
            idx = np.flatnonzero(todo)
            accept = idx[ok]
            z[accept] = cand[ok]
            obj[accept] = cand_obj[ok]
            moved[accept] = True
            eta[idx[~ok]] *= 0.5
    return z


def encoder_loss_categorical(enc: BatchEncodings, assignments):
    """Batch-restricted negative joint objective for one-hot latents.

    loss = sum_i [ log sum_j p(k_i|x_j) - log p(k_i|x_i) ]; the gradient is
    returned with respect to the head logits, with the softmax chain fused so
    no probability is ever divided by.
    """
    lp = enc.log_probs
    b, k = lp.shape
    a = np.asarray(assignments, dtype=np.intp)
    if a.shape != (b,):
        raise ValueError(f"expected {b} assignments, got shape {a.shape}")
    col_lse = log_sum_exp(lp, axis=0)
    counts = np.bincount(a, minlength=k).astype(np.float64)
    loss = float(-lp[np.arange(b), a].sum() + counts @ col_lse)

    probs = np.exp(lp)
    share = np.exp(lp - col_lse[None, :])         # p(k|x_j) / sum_j' p(k|x_j')
    onehot = np.zeros((b, k))
    onehot[np.arange(b), a] = 1.0
    r = share @ counts
    grad = counts[None, :] * share - onehot + probs * (1.0 - r)[:, None]
    return loss, grad


def encoder_loss_gaussian(means, targets, lam):
    """Batch-restricted negative joint objective for sphere-valued latents.

    loss = sum_i ||phi_i - z_i||^2/(2 lam)
         + sum_i log sum_j exp(-||phi_j - z_i||^2/(2 lam));
    gradient w.r.t. the means phi.
    """
    if lam <= 0:
        raise ValueError("encoding variance must be positive")
    phi = np.asarray(means, dtype=np.float64)
    z = np.asarray(targets, dtype=np.float64)
    if phi.shape != z.shape:
        raise ValueError(f"means {phi.shape} and targets {z.shape} must agree")
    d = _pair_sqdist(phi, z)
    loss = float(np.trace(d) / (2.0 * lam) + log_sum_exp(-d / (2.0 * lam), axis=0).sum())
    w = np.exp(-(d - d.min(axis=0, keepdims=True)) / (2.0 * lam))
    w /= w.sum(axis=0, keepdims=True)             # w[j, i]: weight of phi_j for target z_i
    grad = ((phi - z) - w.sum(axis=1)[:, None] * phi + w @ z) / lam
    return loss, grad


def confusion_loss(enc: BatchEncodings, prior: UniformCategorical):
    """Push the posterior on (fake) samples toward the prior over classes.

    loss = -sum_i sum_k p(k) log p(k|x_i), minimized when every row equals
    the prior; gradient w.r.t. the head logits.
    """
    lp = enc.log_probs
    w = prior.probs()
    if w.shape[0] != lp.shape[1]:
        raise ValueError("prior class count does not match the encodings")
    loss = float(-(lp @ w).sum())
    grad = np.exp(lp) - w[None, :]
    return loss, grad


def supervised_loss(enc: BatchEncodings, labels):
    """Mean negative log-likelihood of the given class labels."""
    lp = enc.log_probs
    b, k = lp.shape
    y = np.asarray(labels, dtype=np.intp)
    if y.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {y.shape}")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    loss = float(-lp[np.arange(b), y].mean())
    onehot = np.zeros((b, k))
    onehot[np.arange(b), y] = 1.0
    grad = (np.exp(lp) - onehot) / b
    return loss, grad
