"""Shared test doubles and brute-force oracles."""

import math

import numpy as np

from editroute.augmenter import Edit, augment_rule_based
from editroute.memory import Memory


class LookupEmbedder:
    """Random unit vectors per text. With ``pool`` set, texts share a small
    set of vectors so exact similarity ties are common."""

    def __init__(self, dimension, seed=0, pool=None):
        self.dimension = dimension
        self.name = f"lookup-{dimension}"
        self._rng = np.random.default_rng(seed)
        self._pool = [self._draw() for _ in range(pool)] if pool else None
        self._table = {}

    def _draw(self):
        v = self._rng.normal(size=self.dimension)
        return v / np.linalg.norm(v)

    def embed(self, text):
        if text not in self._table:
            if self._pool:
                self._table[text] = self._pool[int(self._rng.integers(len(self._pool)))]
            else:
                self._table[text] = self._draw()
        return self._table[text]


def random_memory(embedder, n_edits):
    memory = Memory.for_embedder(embedder)
    for i in range(1, n_edits + 1):
        edit = Edit(f"e{i}", f"query {i}?", f"answer {i}", i)
        memory.insert(edit, augment_rule_based(edit), embedder)
    return memory


def scalar_dot(u, v):
    assert len(u) == len(v)
    total = 0.0
    for a, b in zip(u, v):
        total += float(a) * float(b)
    return total


def brute_force_topk(memory, query_embedding, k):
    """Score every entry, sort all of them, cut to k."""
    scored = []
    for entry in memory.entries:
        sim = float(np.dot(entry.embedding, query_embedding))
        scored.append((-sim, entry.step, entry.position, entry))
    scored.sort(key=lambda t: t[:3])
    return [(t[3].position, -t[0]) for t in scored[:k]]


def scalar_loss(weights, bias, features, labels, clamp=1e-12):
    total = 0.0
    for x, y in zip(features, labels):
        z = bias + scalar_dot(weights, x)
        p = 1.0 / (1.0 + math.exp(-z))
        p = min(max(p, clamp), 1.0 - clamp)
        total += -math.log(p) if y == 1 else -math.log(1.0 - p)
    return total / len(labels)


def separable_pairs(n, dimension, rng):
    """Pair features for n samples: label 1 pairs are near-duplicates, label 0 pairs unrelated."""
    from editroute.retrieval import featurize_pair

    X, y = [], []
    for i in range(n):
        q = rng.normal(size=dimension)
        q /= np.linalg.norm(q)
        if i % 2 == 0:
            e = q + 0.2 * rng.normal(size=dimension) / math.sqrt(dimension)
            label = 1
        else:
            e = rng.normal(size=dimension)
            label = 0
        e /= np.linalg.norm(e)
        X.append(featurize_pair(q, e))
        y.append(label)
    return np.array(X), np.array(y, dtype=np.float64)
