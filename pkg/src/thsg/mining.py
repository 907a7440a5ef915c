"""In-batch triplet construction.

Every miner emits at most one triplet per anchor, as an ``(m, 3)`` integer
array of (anchor, positive, negative) row indices.  Anchors whose class has
no other member in the batch are skipped.
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import ContractError, MiningError


class MinerKind(str, Enum):
    RANDOM = "random"
    SEMIHARD = "semihard"
    SOFTHARD = "softhard"
    DISTANCE_WEIGHTED = "distance_weighted"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = "|".join(m.value for m in cls)
            raise ContractError(f"unknown miner {value!r}; expected one of {choices}") from None


def pairwise_distances(x):
    x = np.asarray(x, dtype=np.float64)
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def check_triplets(triplets, labels):
    """Raise if any triplet breaks the label contract."""
    labels = np.asarray(labels)
    t = np.asarray(triplets).reshape(-1, 3)
    a, p, n = t[:, 0], t[:, 1], t[:, 2]
    bad = (labels[a] != labels[p]) | (labels[a] == labels[n]) | (a == p)
    if bad.any():
        raise ContractError(f"invalid triplet {t[np.argmax(bad)].tolist()}")


def _masks(labels):
    same = labels[:, None] == labels[None, :]
    pos = same.copy()
    np.fill_diagonal(pos, False)
    return pos, ~same


def _validate(labels):
    classes = np.unique(labels)
    if classes.size < 2:
        raise MiningError(f"batch needs at least 2 classes, has {classes.size}")
    pos, neg = _masks(labels)
    if not pos.any():
        raise MiningError(
            "no anchor has a positive in the batch; every class is a singleton: "
            + ", ".join(str(c) for c in classes)
        )
    return pos, neg


def distance_weights(d, dim, lower=0.5, upper=1.4, clip=1e4):
    """Sampling weights ``min(clip, 1/q(d))`` for unit-sphere distances.

    ``q(d) ~ d^(dim-2) (1 - d^2/4)^((dim-3)/2)`` is the distance density of
    uniform points on the sphere; distances are clamped to [lower, upper].
    """
    d = np.clip(np.asarray(d, dtype=np.float64), lower, upper)
    log_q = (dim - 2.0) * np.log(d) + (dim - 3.0) / 2.0 * np.log(np.maximum(1.0 - 0.25 * d * d, 1e-12))
    capped = -log_q >= np.log(clip)
    return np.where(capped, clip, np.exp(np.where(capped, 0.0, -log_q)))


def mine(kind, emb, margin=0.2, rng=None, *, dw_lower=0.5, dw_upper=1.4, dw_clip=1e4):
    """Build one triplet per eligible anchor of ``emb`` (an EmbeddingBatch)."""
    kind = MinerKind.parse(kind)
    if rng is None:
        rng = np.random.default_rng(0)
    x = emb.embeddings
    labels = np.asarray(emb.labels)
    pos_mask, neg_mask = _validate(labels)
    dist = pairwise_distances(x)
    out = []
    for i in range(len(labels)):
        pos = np.flatnonzero(pos_mask[i])
        neg = np.flatnonzero(neg_mask[i])
        if pos.size == 0:
            continue
        if kind is MinerKind.RANDOM:
            j = rng.choice(pos)
            k = rng.choice(neg)
        elif kind is MinerKind.SEMIHARD:
            j = rng.choice(pos)
            k = _semihard_negative(dist[i], dist[i, j], neg, margin, rng)
        elif kind is MinerKind.SOFTHARD:
            j, k = _softhard(dist[i], pos, neg, rng)
        else:
            j = rng.choice(pos)
            w = distance_weights(dist[i, neg], x.shape[1], dw_lower, dw_upper, dw_clip)
            k = rng.choice(neg, p=w / w.sum())
        out.append((i, j, k))
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


def _semihard_negative(d_row, d_ap, neg, margin, rng):
    d_an = d_row[neg]
    window = neg[(d_an > d_ap) & (d_an < d_ap + margin)]
    if window.size:
        return rng.choice(window)
    beyond = d_an > d_ap
    if beyond.any():
        # closest negative that is still farther than the positive
        cand = neg[beyond]
        return cand[np.argmin(d_row[cand])]
    return rng.choice(neg)


def _softhard(d_row, pos, neg, rng):
    order = pos[np.argsort(-d_row[pos], kind="stable")]
    harder = order[: max(1, (order.size + 1) // 2)]
    j = rng.choice(harder)
    hardest_pos = d_row[pos].max()
    by_dist = neg[np.argsort(d_row[neg], kind="stable")]
    moderate = by_dist[1:]
    moderate = moderate[d_row[moderate] < hardest_pos]
    if moderate.size:
        return j, rng.choice(moderate)
    return j, rng.choice(by_dist[1:] if by_dist.size > 1 else by_dist)
