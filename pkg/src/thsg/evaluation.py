"""Retrieval (Recall@K, mAP) and clustering (NMI, pairwise F1) metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .errors import ContractError


def squared_distances(x):
    """Squared Euclidean distance matrix via the Gram trick, clamped at 0."""
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


@dataclass
class RankedRetrieval:
    """Per query, gallery indices by ascending distance (self excluded)."""

    order: np.ndarray
    relevance: np.ndarray

    @property
    def num_queries(self):
        return self.order.shape[0]


def rank_gallery(dist, labels):
    """Rank every other sample for each query; ties go to the lower index."""
    dist = np.asarray(dist, dtype=np.float64)
    labels = np.asarray(labels)
    n = dist.shape[0]
    if n < 2:
        raise ContractError("gallery is empty: need at least 2 samples")
    masked = dist.copy()
    np.fill_diagonal(masked, np.inf)
    order = np.argsort(masked, axis=1, kind="stable")[:, : n - 1]
    relevance = labels[order] == labels[:, None]
    return RankedRetrieval(order, relevance)


def recall_at_k_ranked(ret, ks):
    ks = list(ks)
    if ks != sorted(ks):
        raise ContractError("ks must be sorted ascending")
    gallery = ret.order.shape[1]
    if ks and (ks[0] < 1 or ks[-1] >= gallery):
        raise ContractError(f"every k must satisfy 1 <= k < gallery size ({gallery})")
    first_hit = np.where(ret.relevance.any(axis=1), np.argmax(ret.relevance, axis=1), gallery)
    return [int(np.count_nonzero(first_hit < k)) / ret.num_queries for k in ks]


def recall_at_k(emb, ks):
    return recall_at_k_ranked(rank_gallery(squared_distances(emb.embeddings), emb.labels), ks)


def mean_average_precision(ret):
    """Mean over queries of the precision averaged at each relevant rank.

    Queries without any relevant gallery item score 0.  Sums run in rank
    order, then query order (cumsum is sequential), so the result does not
    depend on numpy's pairwise-summation blocking.
    """
    if ret.order.shape[1] == 0:
        raise ContractError("empty gallery")
    rel = ret.relevance.astype(np.float64)
    hits = np.cumsum(rel, axis=1)
    ranks = np.arange(1, rel.shape[1] + 1)
    n_rel = hits[:, -1]
    prec_sum = np.cumsum(rel * hits / ranks, axis=1)[:, -1]
    ap = np.divide(prec_sum, n_rel, out=np.zeros_like(prec_sum), where=n_rel > 0)
    return float(np.cumsum(ap)[-1] / ap.size)


@dataclass
class Clustering:
    assignment: np.ndarray
    k: int
    inertia: float = 0.0
    centroids: np.ndarray = field(default=None, repr=False)


def _plus_plus(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return x[chosen].copy()


def _lloyd(x, centers, max_iter):
    k = centers.shape[0]
    assign = None
    for _ in range(max_iter):
        d2 = squared_to(x, centers)
        new = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-served point
                far = int(np.argmax(d2[np.arange(len(x)), assign]))
                centers[c] = x[far]
                assign[far] = c
    d2 = squared_to(x, centers)
    assign = np.argmin(d2, axis=1)
    inertia = float(np.sum(d2[np.arange(len(x)), assign]))
    return assign, centers, inertia


def squared_to(x, centers):
    diff = x[:, None, :] - centers[None, :, :]
    return np.sum(diff * diff, axis=2)


def kmeans(emb, k, seed=0, restarts=1, max_iter=100):
    """Lloyd's algorithm from k-means++ seeds; best inertia over ``restarts``."""
    x = np.asarray(getattr(emb, "embeddings", emb), dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ContractError(f"k={k} must lie in [1, n={n}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        assign, centers, inertia = _lloyd(x, _plus_plus(x, k, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = Clustering(assign, k, inertia, centers)
    return best


def _contingency(clusters, labels):
    clusters = np.asarray(clusters)
    labels = np.asarray(labels)
    if clusters.shape != labels.shape:
        raise ContractError("clustering and labels differ in length")
    _, ci = np.unique(clusters, return_inverse=True)
    _, li = np.unique(labels, return_inverse=True)
    table = np.zeros((ci.max() + 1, li.max() + 1))
    np.add.at(table, (ci, li), 1.0)
    return table


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(clustering, labels):
    """2 I(clusters; labels) / (H(clusters) + H(labels))."""
    assignment = getattr(clustering, "assignment", clustering)
    table = _contingency(assignment, labels)
    n = table.sum()
    h_c = _entropy(table.sum(axis=1))
    h_l = _entropy(table.sum(axis=0))
    if h_c + h_l == 0:
        return 1.0
    pij = table / n
    pi = pij.sum(axis=1, keepdims=True)
    pj = pij.sum(axis=0, keepdims=True)
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / (pi @ pj)[nz])))
    return float(np.clip(2.0 * mi / (h_c + h_l), 0.0, 1.0))


def _pairs(counts):
    return float(np.sum(counts * (counts - 1) / 2.0))


def f1_pairwise(clustering, labels):
    """Harmonic mean of pairwise precision and recall; 0 when undefined."""
    assignment = getattr(clustering, "assignment", clustering)
    table = _contingency(assignment, labels)
    tp = _pairs(table)
    same_cluster = _pairs(table.sum(axis=1))
    same_label = _pairs(table.sum(axis=0))
    if same_cluster == 0 or same_label == 0:
        return 0.0
    precision, recall = tp / same_cluster, tp / same_label
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    recall: dict
    map: float
    nmi: float
    f1: float

    def to_text(self):
        lines = [f"recall@{k}={v!r}" for k, v in self.recall.items()]
        lines += [f"map={self.map!r}", f"nmi={self.nmi!r}", f"f1={self.f1!r}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        recall, values = {}, {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"not a key=value line: {line!r}")
            if key.startswith("recall@"):
                recall[int(key[len("recall@"):])] = float(value)
            else:
                values[key] = float(value)
        return cls(recall, values["map"], values["nmi"], values["f1"])


def evaluate(emb, ks=(1, 2, 4, 8), seed=0, restarts=10):
    """All retrieval and clustering metrics for a labelled embedding set."""
    ret = rank_gallery(squared_distances(emb.embeddings), emb.labels)
    gallery = ret.order.shape[1]
    ks = [k for k in ks if k < gallery]
    recalls = recall_at_k_ranked(ret, ks)
    k = len(np.unique(emb.labels))
    clustering = kmeans(emb, k, seed=seed, restarts=restarts)
    return MetricsReport(
        recall=dict(zip(ks, recalls)),
        map=mean_average_precision(ret),
        nmi=nmi(clustering, emb.labels),
        f1=f1_pairwise(clustering, emb.labels),
    )


def pca_2d(x):
    """Centred projection onto the top two principal axes (variance-ordered)."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((proj.shape[0], 2 - proj.shape[1]))])
    return proj - proj.mean(axis=0)


def generator_diversity(generator, inputs):
    """(max pairwise output distance, Spearman rho of input vs output distances).

    A collapsed generator maps distinct inputs to (nearly) one point, giving a
    tiny maximum distance and no rank agreement with the input geometry.
    Constant distances give rho = 0.
    """
    from .autodiff import Tensor

    inputs = np.asarray(inputs, dtype=np.float64)
    outputs = generator(Tensor(inputs)).data
    iu = np.triu_indices(inputs.shape[0], k=1)
    d_in = np.sqrt(squared_distances(inputs))[iu]
    d_out = np.sqrt(squared_distances(outputs))[iu]
    if np.ptp(d_out) == 0 or np.ptp(d_in) == 0:
        return float(d_out.max()), 0.0
    rho = spearmanr(d_in, d_out).statistic
    return float(d_out.max()), float(rho)
