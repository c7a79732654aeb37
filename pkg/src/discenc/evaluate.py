"""Cluster-to-label assignment schemes, clustering error, linear probe, k-means.

Two ways to turn clusters into class predictions, matching the two protocols
used for reporting:

* max intersection: each cluster takes the true class it overlaps most;
* max confidence: each cluster takes the true label of the single sample
  most confidently assigned to it (the argmax of that cluster's posterior
  column), so one anchor sample labels the whole cluster.

Empty clusters map to the sentinel label -1 and never crash evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from discenc import nn
from discenc.core import BatchEncodings, supervised_loss

SENTINEL = -1


def assign_labels_max_intersection(cluster_ids, true_labels, n_clusters=None) -> np.ndarray:
    """Cluster -> label map by largest overlap; ties to the lowest class index."""
    cluster_ids = np.asarray(cluster_ids, dtype=np.intp)
    true_labels = np.asarray(true_labels, dtype=np.intp)
    if cluster_ids.shape != true_labels.shape:
        raise ValueError("cluster ids and labels must have equal length")
    k = int(n_clusters if n_clusters is not None else cluster_ids.max() + 1)
    classes = int(true_labels.max() + 1)
    mapping = np.full(k, SENTINEL, dtype=np.intp)
    for c in range(k):
        members = true_labels[cluster_ids == c]
        if members.size:
            mapping[c] = np.argmax(np.bincount(members, minlength=classes))
    return mapping


def assign_labels_max_confidence(posteriors, true_labels) -> np.ndarray:
    """Cluster -> label map via each cluster's most confident sample."""
    post = np.asarray(posteriors, dtype=np.float64)
    true_labels = np.asarray(true_labels, dtype=np.intp)
    if post.ndim != 2 or post.shape[0] != true_labels.shape[0]:
        raise ValueError("posterior matrix rows must match labels")
    mapping = np.full(post.shape[1], SENTINEL, dtype=np.intp)
    for c in range(post.shape[1]):
        col = post[:, c]
        if np.any(col > 0):
            mapping[c] = true_labels[int(np.argmax(col))]
    return mapping


def map_labels(cluster_ids, mapping) -> np.ndarray:
    return np.asarray(mapping, dtype=np.intp)[np.asarray(cluster_ids, dtype=np.intp)]


def clustering_error(mapped_labels, true_labels) -> float:
    """Percentage of samples whose mapped label disagrees with the truth."""
    mapped = np.asarray(mapped_labels)
    true = np.asarray(true_labels)
    if mapped.shape != true.shape:
        raise ValueError("label vectors must have equal length")
    return 100.0 * float(np.mean(mapped != true))


def clustering_accuracy(mapped_labels, true_labels) -> float:
    return 100.0 - clustering_error(mapped_labels, true_labels)


def linear_probe(embeddings, labels, train_ids, test_ids, epochs=200, lr=0.01,
                 batch_size=100, seed=0) -> float:
    """Train one softmax layer on frozen embeddings; returns test accuracy (%)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    train_ids = np.asarray(train_ids, dtype=np.intp)
    test_ids = np.asarray(test_ids, dtype=np.intp)
    train_classes = np.unique(labels[train_ids])
    if train_classes.size < 2:
        raise ValueError("probe training split must contain at least two classes")
    k = int(labels.max() + 1)
    probe = nn.feedforward(emb.shape[1], [], k, head="softmax")
    nn.init_params(probe, seed)
    adam = nn.AdamState(probe.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(train_ids)
        for start in range(0, len(order), batch_size):
            ids = order[start:start + batch_size]
            _, logits = probe.forward(emb[ids], training=True)
            _, grad = supervised_loss(BatchEncodings.from_logits(logits), labels[ids])
            grads, _ = probe.backward(grad)
            nn.adam_step(probe.parameters(), grads, adam)
    out, _ = probe.forward(emb[test_ids])
    return 100.0 * float(np.mean(out.argmax(axis=1) == labels[test_ids]))


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_history: list


def _kmeans_pp_init(x, k, rng):
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    d2 = _sqdist(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j:] = x[rng.integers(len(x), size=k - j)]
            break
        centers[j] = x[rng.choice(len(x), p=d2 / total)]
        d2 = np.minimum(d2, _sqdist(x, centers[j:j + 1])[:, 0])
    return centers


def _sqdist(a, b):
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def _lloyd(x, centers, max_iter=300, tol=1e-10):
    history = []
    assign = None
    for _ in range(max_iter):
        d2 = _sqdist(x, centers)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(x)), assign].sum())
        history.append(inertia)
        new_centers = centers.copy()
        for j in range(len(centers)):
            members = x[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        if np.allclose(new_centers, centers, atol=tol, rtol=0.0):
            centers = new_centers
            break
        centers = new_centers
    return assign, centers, history


def kmeans_baseline(features, k, restarts=10, seed=0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ starts; best of `restarts` by inertia."""
    x = np.asarray(features, dtype=np.float64)
    if hasattr(features, "toarray"):
        x = features.toarray()
    if k > len(x):
        raise ValueError("k must not exceed the sample count")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        assign, centers, history = _lloyd(x, _kmeans_pp_init(x, k, rng))
        if best is None or history[-1] < best.inertia:
            best = KMeansResult(assign, centers, history[-1], history)
    return best


def posterior_clusters(encoder, features):
    """Posterior matrix and argmax cluster ids for a categorical encoder."""
    probs, _ = nn.encode(encoder, features)
    return probs, probs.argmax(axis=1)


def evaluation_report(posteriors, true_labels):
    """Per-cluster composition plus overall error under both schemes."""
    post = np.asarray(posteriors, dtype=np.float64)
    true = np.asarray(true_labels, dtype=np.intp)
    clusters = post.argmax(axis=1)
    map_inter = assign_labels_max_intersection(clusters, true, post.shape[1])
    map_conf = assign_labels_max_confidence(post, true)
    rows = []
    for c in range(post.shape[1]):
        members = true[clusters == c]
        purity = float(np.mean(members == map_inter[c])) if members.size else 0.0
        rows.append({
            "cluster": c,
            "size": int(members.size),
            "label_max_intersection": int(map_inter[c]),
            "label_max_confidence": int(map_conf[c]),
            "purity": purity,
        })
    return {
        "clusters": rows,
        "error_max_intersection": clustering_error(map_labels(clusters, map_inter), true),
        "error_max_confidence": clustering_error(map_labels(clusters, map_conf), true),
    }
