"""Dataset ingestion, normalization, synthetic generators, and label splits.

Two on-disk formats:

* IDX (big-endian): ``\\x00\\x00<dtype><ndim>`` then uint32 dimensions, then
  raw values.  Supported dtypes: 0x08 unsigned byte (image data, mapped to
  [0, 1] by dividing by 255) and 0x0E float64 (used verbatim).  Label files
  are 1-d unsigned byte.
* Sparse text: one document per line, ``label term:value term:value ...``
  with label ``-1`` meaning unlabeled.

Synthetic sources cover the desk-scale experiments: a Gaussian-mixture cloud,
a rendered-digit image set (stand-in for handwritten digits when no real
image files are around), and a topic-mixture bag-of-words corpus.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse


@dataclass
class DenseDataset:
    """Row-major feature matrix with optional integer labels."""

    features: np.ndarray
    labels: np.ndarray = None
    normalization: str = "none"  # unit -> [0,1], symmetric -> [-1,1]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.intp)
            if len(self.labels) != len(self.features):
                raise ValueError("labels length must match feature rows")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def rows(self, ids):
        return self.features[ids]


@dataclass
class SparseDataset:
    """Sparse document rows (term index, weight) with optional labels."""

    matrix: sparse.csr_matrix
    labels: np.ndarray = None

    def __post_init__(self):
        self.matrix = sparse.csr_matrix(self.matrix, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.intp)
            if len(self.labels) != self.matrix.shape[0]:
                raise ValueError("labels length must match document rows")

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    vocab_size = dim

    def rows(self, ids):
        return np.asarray(self.matrix[ids].todense(), dtype=np.float64)


@dataclass
class SemiSupervisedSplit:
    """Per-class labeled id lists plus the remaining unlabeled ids."""

    labeled_ids: dict
    unlabeled_ids: np.ndarray

    @property
    def all_labeled(self) -> np.ndarray:
        return np.concatenate([self.labeled_ids[c] for c in sorted(self.labeled_ids)])


# IDX dtype codes (big-endian format, as used for digit image archives).
_IDX_UBYTE = 0x08
_IDX_DOUBLE = 0x0E


def _read_idx_array(path):
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0:
            raise ValueError(f"{path}: bad IDX magic {head!r} (first two bytes must be zero)")
        dtype_code, ndim = head[2], head[3]
        if dtype_code not in (_IDX_UBYTE, _IDX_DOUBLE):
            raise ValueError(f"{path}: unsupported IDX dtype byte 0x{dtype_code:02X}")
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        count = int(np.prod(dims)) if dims else 0
        if dtype_code == _IDX_UBYTE:
            raw = fh.read(count)
            if len(raw) != count:
                raise ValueError(f"{path}: dims {dims} promise {count} bytes, file is short")
            arr = np.frombuffer(raw, dtype=np.uint8).reshape(dims)
        else:
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: dims {dims} promise {count} float64s, file is short")
            arr = np.frombuffer(raw, dtype=">f8").reshape(dims).astype(np.float64)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes beyond dims {dims}")
    return arr, dtype_code


def load_idx(features_path, labels_path=None) -> DenseDataset:
    """Read an IDX feature file (images or float64 matrix) plus optional labels."""
    arr, dtype_code = _read_idx_array(features_path)
    if dtype_code == _IDX_UBYTE:
        if arr.ndim != 3:
            raise ValueError(f"{features_path}: image file must be 3-d, got dims {arr.shape}")
        features = arr.reshape(arr.shape[0], -1).astype(np.float64) / 255.0
        normalization = "unit"
    else:
        if arr.ndim != 2:
            raise ValueError(f"{features_path}: float64 file must be 2-d, got dims {arr.shape}")
        features = arr
        normalization = "none"
    labels = None
    if labels_path is not None:
        larr, lcode = _read_idx_array(labels_path)
        if lcode != _IDX_UBYTE or larr.ndim != 1:
            raise ValueError(f"{labels_path}: label file must be 1-d unsigned byte")
        if larr.shape[0] != features.shape[0]:
            raise ValueError(
                f"{labels_path}: count {larr.shape[0]} does not match {features.shape[0]} rows"
            )
        labels = larr.astype(np.intp)
    return DenseDataset(features, labels, normalization)


def save_idx(array, path) -> None:
    """Write an IDX file: uint8 arrays as unsigned byte, float arrays as float64."""
    arr = np.asarray(array)
    if arr.dtype == np.uint8:
        code, payload = _IDX_UBYTE, arr.tobytes()
    else:
        code, payload = _IDX_DOUBLE, arr.astype(">f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(payload)


def write_sparse_text(ds: SparseDataset, path) -> None:
    """One line per document: ``label idx:value ...`` (label -1 = unlabeled)."""
    mat = ds.matrix.tocsr()
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(ds.n):
            label = int(ds.labels[i]) if ds.labels is not None else -1
            start, stop = mat.indptr[i], mat.indptr[i + 1]
            terms = (
                f"{j}:{v:g}" if float(v).is_integer() else f"{j}:{v!r}"
                for j, v in zip(mat.indices[start:stop], mat.data[start:stop])
            )
            fh.write(" ".join([str(label), *terms]) + "\n")


def read_sparse_text(path, vocab_size=None) -> SparseDataset:
    labels, rows_i, cols, vals = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            parts = line.split()
            if not parts:
                continue
            labels.append(int(parts[0]))
            for tok in parts[1:]:
                j, v = tok.split(":")
                rows_i.append(i)
                cols.append(int(j))
                vals.append(float(v))
    n = len(labels)
    width = vocab_size if vocab_size is not None else (max(cols) + 1 if cols else 0)
    if cols and max(cols) >= width:
        raise ValueError(f"{path}: term index {max(cols)} exceeds vocabulary size {width}")
    mat = sparse.csr_matrix((vals, (rows_i, cols)), shape=(n, width))
    labels = np.asarray(labels)
    return SparseDataset(mat, None if (labels < 0).all() else labels)


@dataclass
class TfidfWeights:
    """Smooth idf weights fitted on a corpus, reusable for fake documents."""

    idf: np.ndarray

    @classmethod
    def fit(cls, counts: sparse.csr_matrix) -> "TfidfWeights":
        counts = sparse.csr_matrix(counts)
        n = counts.shape[0]
        df = np.asarray((counts > 0).sum(axis=0)).ravel()
        return cls(idf=1.0 + np.log((1.0 + n) / (1.0 + df)))

    def apply(self, counts: sparse.csr_matrix) -> sparse.csr_matrix:
        """weight = tf * idf, then L2-normalize each row (zero rows stay zero)."""
        weighted = sparse.csr_matrix(counts, dtype=np.float64).multiply(self.idf).tocsr()
        norms = np.sqrt(np.asarray(weighted.multiply(weighted).sum(axis=1)).ravel())
        scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        return sparse.diags(scale) @ weighted


def tf_idf(counts: SparseDataset) -> SparseDataset:
    """tf-idf representation with smooth idf and unit-L2 rows.

    Empty documents come out as zero rows and are reported via a warning.
    """
    weights = TfidfWeights.fit(counts.matrix)
    mat = weights.apply(counts.matrix)
    empty = np.flatnonzero(np.diff(counts.matrix.tocsr().indptr) == 0)
    if empty.size:
        warnings.warn(f"{empty.size} empty documents produce zero tf-idf rows: {empty.tolist()[:20]}")
    return SparseDataset(mat, counts.labels)


def synth_gmm(classes, dim, n_per_cluster, separation, cluster_std, seed) -> DenseDataset:
    """Isotropic Gaussian blobs with means at separation * (cos, sin of 2 pi k/K)."""
    if min(classes, dim, n_per_cluster) < 1:
        raise ValueError("classes, dim and n_per_cluster must be >= 1")
    if separation < 0 or cluster_std <= 0:
        raise ValueError("separation must be >= 0 and cluster std positive")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0] = separation * np.cos(angles)
    if dim > 1:
        means[:, 1] = separation * np.sin(angles)
    feats = np.concatenate(
        [m + cluster_std * rng.standard_normal((n_per_cluster, dim)) for m in means]
    )
    labels = np.repeat(np.arange(classes), n_per_cluster)
    order = rng.permutation(len(labels))
    return DenseDataset(feats[order], labels[order], normalization="none")


# Seven-segment layout used for the rendered-digit image generator.
_SEGMENTS = {
    "a": (slice(3, 6), slice(9, 19)),
    "g": (slice(13, 16), slice(9, 19)),
    "d": (slice(22, 25), slice(9, 19)),
    "f": (slice(4, 15), slice(8, 11)),
    "b": (slice(4, 15), slice(17, 20)),
    "e": (slice(14, 24), slice(8, 11)),
    "c": (slice(14, 24), slice(17, 20)),
}
_DIGIT_SEGMENTS = [
    "abcdef", "bc", "abged", "abgcd", "fgbc",
    "afgcd", "afgedc", "abc", "abcdefg", "abcdfg",
]


def _digit_templates():
    tpl = np.zeros((10, 28, 28))
    for digit, segs in enumerate(_DIGIT_SEGMENTS):
        for s in segs:
            rows, cols = _SEGMENTS[s]
            tpl[digit, rows, cols] = 1.0
    return tpl


def synth_digits(n, seed, noise=0.18, blur=0.8, max_shift=2.5, max_rot_deg=14.0,
                 scale_jitter=0.14) -> DenseDataset:
    """Rendered seven-segment digits with random affine jitter and pixel noise.

    A deterministic stand-in for handwritten digit images: 10 balanced
    classes, 28x28 pixels flattened to 784 features in [0, 1].
    """
    rng = np.random.default_rng(seed)
    templates = _digit_templates()
    labels = rng.permutation(np.arange(n) % 10)
    feats = np.empty((n, 28 * 28))
    center = np.array([13.5, 13.5])
    for i, lab in enumerate(labels):
        theta = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
        s = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        # affine_transform maps output coords through the matrix, so pass the
        # inverse of (rotate then scale) and keep the canvas center fixed.
        inv = np.array([[cos_t, -sin_t], [sin_t, cos_t]]) / s
        shift = rng.uniform(-max_shift, max_shift, size=2)
        offset = center - inv @ (center + shift)
        img = ndimage.affine_transform(templates[lab], inv, offset=offset, order=1)
        img = ndimage.gaussian_filter(img, blur)
        img = img + noise * rng.standard_normal((28, 28))
        feats[i] = np.clip(img, 0.0, 1.0).ravel()
    return DenseDataset(feats, labels, normalization="unit")


def synth_topics(classes, vocab_size, docs_per_class, mean_length, seed,
                 overlap=0.5, concentration=0.05) -> SparseDataset:
    """Bag-of-words corpus from per-class topic distributions.

    Each class mixes a shared background unigram distribution (weight
    `overlap`) with its own Dirichlet-drawn topic, so classes share common
    words but differ in their tails.  Returns raw term counts.
    """
    rng = np.random.default_rng(seed)
    background = rng.dirichlet(np.full(vocab_size, 1.0))
    topics = rng.dirichlet(np.full(vocab_size, concentration), size=classes)
    word_dists = overlap * background + (1.0 - overlap) * topics
    n = classes * docs_per_class
    labels = np.repeat(np.arange(classes), docs_per_class)
    lengths = rng.poisson(mean_length, size=n)
    lengths[lengths == 0] = 1
    rows = np.empty((n, vocab_size))
    for i, (lab, length) in enumerate(zip(labels, lengths)):
        rows[i] = rng.multinomial(length, word_dists[lab])
    order = rng.permutation(n)
    return SparseDataset(sparse.csr_matrix(rows[order]), labels[order])


def split_semi_supervised(dataset, per_class, seed) -> SemiSupervisedSplit:
    """Uniform per-class draw of labeled ids; everything else is unlabeled."""
    if dataset.labels is None:
        raise ValueError("semi-supervised split needs labels")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    labeled = {}
    for c in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) < per_class:
            raise ValueError(f"class {c} has only {len(members)} members, need {per_class}")
        labeled[int(c)] = np.sort(rng.choice(members, size=per_class, replace=False))
    taken = np.concatenate(list(labeled.values()))
    mask = np.ones(dataset.n, dtype=bool)
    mask[taken] = False
    return SemiSupervisedSplit(labeled, np.flatnonzero(mask))
