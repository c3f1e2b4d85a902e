"""Return-guided contrastive machinery for training the gaze head.

A ring buffer stores detached backbone feature maps together with a
retrieval embedding (L2-normalized flattened map) and the finished
episode's return.  Mining retrieves each anchor's exact cosine
k-nearest neighbors, splits them into high/low-return groups around the
median with an adaptive dead zone, and emits one triplet per anchor.
The triplet loss is evaluated on embeddings recomputed through the
CURRENT attention head, so its gradients flow only into the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DTensor

EMB_EPS = 1e-8


@dataclass
class FeatureRecord:
    feature_map: np.ndarray  # (C, H, W), detached
    embedding: np.ndarray    # (D,), unit norm
    episode_return: float


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


def _flatten_embed(feature_map):
    flat = np.asarray(feature_map, dtype=np.float32).reshape(-1)
    return flat / (np.linalg.norm(flat) + EMB_EPS)


class ContrastiveBuffer:
    """FIFO ring of FeatureRecords with exact cosine retrieval."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.write_cursor = 0
        self._size = 0
        self._feats = None
        self._embs = None
        self._rets = None

    def _alloc(self, feat_shape):
        self._feats = np.zeros((self.capacity, *feat_shape), dtype=np.float32)
        self._embs = np.zeros((self.capacity, int(np.prod(feat_shape))), dtype=np.float32)
        self._rets = np.zeros(self.capacity, dtype=np.float64)

    @property
    def size(self):
        return self._size

    def __len__(self):
        return self._size

    @property
    def embeddings(self):
        if self._embs is None:
            return np.zeros((0, 0), dtype=np.float32)
        return self._embs[: self._size]

    @property
    def returns(self):
        if self._rets is None:
            return np.zeros(0, dtype=np.float64)
        return self._rets[: self._size]

    @property
    def feature_maps(self):
        if self._feats is None:
            return np.zeros((0,), dtype=np.float32)
        return self._feats[: self._size]

    def record(self, i):
        if not 0 <= i < self._size:
            raise IndexError(f"record {i} out of range (size {self._size})")
        return FeatureRecord(self._feats[i], self._embs[i], float(self._rets[i]))

    def push_episode(self, frames, episode_return):
        """Insert one record per frame, all tagged with the episode return."""
        frames = list(frames)
        if not frames:
            return 0
        if self._feats is None:
            self._alloc(np.asarray(frames[0]).shape)
        for fm in frames:
            fm = np.asarray(fm, dtype=np.float32)
            if fm.shape != self._feats.shape[1:]:
                raise ValueError(
                    f"feature map shape {fm.shape} does not match buffer {self._feats.shape[1:]}"
                )
            i = self.write_cursor
            self._feats[i] = fm
            self._embs[i] = _flatten_embed(fm)
            self._rets[i] = float(episode_return)
            self.write_cursor = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
        return len(frames)

    def knn_query(self, q, k, exclude=()):
        """Indices of the k most cosine-similar records, ties to lower index."""
        q = np.asarray(q, dtype=np.float32)
        exclude = [i for i in exclude if 0 <= i < self._size]
        if k < 1 or self._size - len(exclude) < k:
            raise ValueError(
                f"knn_query: k={k} not satisfiable with size {self._size} "
                f"and {len(exclude)} excluded"
            )
        scores = self.embeddings @ q
        if exclude:
            scores = scores.copy()
            scores[exclude] = -np.inf
        order = np.argsort(-scores, kind="stable")  # score desc, then index asc
        return order[:k]

    def knn_batch(self, queries, k, exclude_self=None):
        """Exact top-k for many queries at once.

        Returns (A, k) indices in ascending index order per row (the
        set matches knn_query exactly; only the ordering differs).
        ``exclude_self`` optionally gives one excluded index per query.
        """
        queries = np.asarray(queries, dtype=np.float32)
        scores = self.embeddings @ queries.T  # (size, A)
        if exclude_self is not None:
            scores[np.asarray(exclude_self), np.arange(queries.shape[0])] = -np.inf
        kth = -np.partition(-scores, k - 1, axis=0)[k - 1]  # per-column kth largest
        strictly = scores > kth
        need = k - strictly.sum(axis=0)
        eq = scores == kth
        sel = eq & (np.cumsum(eq, axis=0) <= need)  # lowest-index tie winners
        mask = strictly | sel
        idx = np.argwhere(mask.T)  # sorted by (column, row)
        return idx[:, 1].reshape(queries.shape[0], k)

    def return_histogram(self, bins=20):
        """Debug view of the stored return distribution."""
        if self._size == 0:
            return np.zeros(bins, dtype=int), np.linspace(0.0, 1.0, bins + 1)
        return np.histogram(self.returns, bins=bins)


def partition_by_return(neighbor_returns):
    """Split neighbor positions into high/low-return sets.

    Uses the median as threshold with a dead zone of 0.25 sample
    standard deviations on each side; ties inside the zone join neither
    set.  Returns positions into the input list.
    """
    r = np.asarray(neighbor_returns, dtype=np.float64)
    med = np.median(r)
    delta = 0.25 * r.std(ddof=1) if r.size >= 2 else 0.0
    pos = np.nonzero(r > med + delta)[0]
    neg = np.nonzero(r < med - delta)[0]
    return pos, neg


def mine_triplets(buffer, n_anchors, k, rng):
    """Sample anchors and form (anchor, positive, negative) index triplets.

    Anchors are drawn without replacement (with replacement when the
    buffer is smaller than n_anchors).  Anchors whose neighborhood has a
    degenerate return split are skipped, so the result may be shorter
    than n_anchors (possibly empty).
    """
    size = buffer.size
    if size <= k + 1:
        return []
    replace = size < n_anchors
    anchors = rng.choice(size, size=n_anchors, replace=replace)
    neighbors = buffer.knn_batch(buffer.embeddings[anchors], k, exclude_self=anchors)
    out = []
    rets = buffer.returns
    for a, nb in zip(anchors, neighbors):
        pos, neg = partition_by_return(rets[nb])
        if pos.size == 0 or neg.size == 0:
            continue
        p = nb[pos[rng.integers(pos.size)]]
        n = nb[neg[rng.integers(neg.size)]]
        out.append(Triplet(int(a), int(p), int(n)))
    return out


def embed_records(buffer, indices, attention):
    """Re-attend stored feature maps with the current head.

    The maps enter as constants, so backward from the returned
    embeddings only reaches the attention head's parameters.
    """
    maps = buffer.feature_maps[np.asarray(indices)]
    f = DTensor(maps)  # constant leaf: stored features stay detached
    z, out = attention.embed(f)
    return z, out


def triplet_margin_loss(z_a, z_p, z_n, margin=0.5):
    """Mean over rows of max(0, D(a,p) - D(a,n) + margin), D = 1 - cosine.

    Rows are assumed unit-norm, so cosines reduce to dot products and
    D(a,p) - D(a,n) = cos(a,n) - cos(a,p).
    """
    cos_ap = T.tsum(T.mul(z_a, z_p), axis=1)
    cos_an = T.tsum(T.mul(z_a, z_n), axis=1)
    return T.tmean(T.relu(T.add(T.sub(cos_an, cos_ap), margin)))


def spread_loss(sigma_x, sigma_y, sigma_target):
    """Mean over fixations and axes of (log sigma_i - log sigma_target)^2.

    Averaging (rather than summing) the two axis terms makes the loss scale
    independent of dimensionality: it is 0 at sigma_target exactly and 1 when
    both spreads sit a factor of e away.
    """
    lt = float(np.log(sigma_target))
    dx = T.sub(T.log(sigma_x), lt)
    dy = T.sub(T.log(sigma_y), lt)
    return T.tmean(T.scale(T.add(T.mul(dx, dx), T.mul(dy, dy)), 0.5))


def attention_loss(con_term, spread_term, lambda_spread=0.1):
    """Combined attention objective: contrastive plus scaled spread."""
    return T.add(con_term, T.scale(spread_term, lambda_spread))


def contrastive_terms(buffer, triplets, attention, margin=0.5, sigma_target=0.1,
                      lambda_spread=0.1):
    """Full auxiliary loss for a mined triplet batch.

    Recomputes embeddings for the unique records touched by the batch,
    forms the margin and spread terms, and combines them.  Returns
    (loss DTensor, stats dict).  With an empty batch the loss is a
    constant 0 (the trainer skips the auxiliary step entirely).
    """
    if not triplets:
        return DTensor(np.zeros(())), {"n_triplets": 0, "n_unique": 0,
                                       "loss_con": 0.0, "loss_spread": 0.0}
    ids = np.array([[t.anchor, t.positive, t.negative] for t in triplets])
    uniq, inverse = np.unique(ids.reshape(-1), return_inverse=True)
    inverse = inverse.reshape(-1, 3)
    z, out = embed_records(buffer, uniq, attention)
    z_a = T.take(z, inverse[:, 0])
    z_p = T.take(z, inverse[:, 1])
    z_n = T.take(z, inverse[:, 2])
    con = triplet_margin_loss(z_a, z_p, z_n, margin=margin)
    spread = spread_loss(out["params"]["sigma_x"], out["params"]["sigma_y"], sigma_target)
    loss = attention_loss(con, spread, lambda_spread)
    stats = {
        "n_triplets": len(triplets),
        "n_unique": int(uniq.size),
        "loss_con": float(con.data),
        "loss_spread": float(spread.data),
    }
    return loss, stats
