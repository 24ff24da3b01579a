"""Top-k retrieval over memory, relevance filtering and best-edit selection.

The relevance filter is a logistic regression over embedding pair features
``[q; e; |q - e|; q . e]``. It is trained with the per-sample binary
cross-entropy objective: edit and portability queries should be judged
relevant to their edit, locality queries and general prompts irrelevant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Iterable, Mapping, Protocol, Sequence, Union

import httpx
import numpy as np

from .augmenter import Edit
from .embedding import EmbeddingBackend, l2_normalize
from .errors import BackendUnavailable, EmbeddingError, NotTrainedError, SchemaError
from .memory import Memory, MemoryEntry, MemoryView

DEFAULT_K = 4
DEFAULT_THRESHOLD = 0.5
PROB_CLAMP = 1e-12
WEIGHTS_VERSION = 1

MemoryLike = Union[Memory, MemoryView]


@dataclass(frozen=True)
class RetrievalCandidate:
    entry: MemoryEntry
    similarity: float


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Dot product of two unit vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.dot(u, v))


def embed_query(embedder: EmbeddingBackend, query: str) -> np.ndarray:
    try:
        return l2_normalize(embedder.embed(query))
    except EmbeddingError:
        raise
    except Exception as exc:
        raise EmbeddingError(f"embedder failed: {exc}") from exc


def _view(memory: MemoryLike) -> MemoryView:
    return memory.view() if isinstance(memory, Memory) else memory


def topk_by_embedding(memory: MemoryLike, query_embedding: np.ndarray, k: int = DEFAULT_K) -> list[RetrievalCandidate]:
    if k < 1:
        raise ValueError("k must be >= 1")
    view = _view(memory)
    if not view.entries:
        return []
    # row-wise reduction gives bit-identical scores for identical rows,
    # which a BLAS matvec does not guarantee; ties must resolve by position
    sims = (view.matrix * query_embedding).sum(axis=1)
    order = np.argsort(-sims, kind="stable")[:k]
    return [RetrievalCandidate(view.entries[i], float(sims[i])) for i in order]


def retrieve_topk(query: str, memory: MemoryLike, embedder: EmbeddingBackend, k: int = DEFAULT_K) -> list[RetrievalCandidate]:
    """The ``min(k, len(memory))`` most similar entries, best first.

    Ties go to the earlier insertion step, then the earlier entry.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    return topk_by_embedding(memory, embed_query(embedder, query), k)


def featurize_pair(query_emb: np.ndarray, edit_emb: np.ndarray) -> np.ndarray:
    query_emb = np.asarray(query_emb, dtype=np.float64)
    edit_emb = np.asarray(edit_emb, dtype=np.float64)
    if query_emb.shape != edit_emb.shape or query_emb.ndim != 1:
        raise ValueError(f"dimension mismatch: {query_emb.shape} vs {edit_emb.shape}")
    return np.concatenate([query_emb, edit_emb, np.abs(query_emb - edit_emb), [float(query_emb @ edit_emb)]])


def sigmoid(z):
    # numerically stable on both tails
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


# --- filters -----------------------------------------------------------------


class RelevanceFilter(Protocol):
    threshold: float

    def score(self, query: str, query_embedding: np.ndarray, entry: MemoryEntry) -> float: ...


@dataclass(frozen=True)
class FilterModel:
    weights: np.ndarray
    bias: float = 0.0
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        weights = np.array(self.weights, dtype=np.float64)
        if weights.ndim != 1 or len(weights) % 3 != 1:
            raise ValueError(f"feature dimension must be 3*d + 1, got {weights.shape}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def zeros(cls, dimension: int, threshold: float = DEFAULT_THRESHOLD) -> FilterModel:
        return cls(np.zeros(3 * dimension + 1), 0.0, threshold)

    @property
    def feature_dim(self) -> int:
        return len(self.weights)

    @property
    def dimension(self) -> int:
        return (len(self.weights) - 1) // 3

    def probability(self, features: np.ndarray):
        return sigmoid(np.asarray(features) @ self.weights + self.bias)

    def score(self, query: str, query_embedding: np.ndarray, entry: MemoryEntry) -> float:
        return float(self.probability(featurize_pair(query_embedding, entry.embedding)))

    def with_threshold(self, threshold: float) -> FilterModel:
        return FilterModel(self.weights, self.bias, threshold)

    def to_dict(self) -> dict:
        return {
            "version": WEIGHTS_VERSION,
            "feature_dim": self.feature_dim,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "threshold": self.threshold,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> FilterModel:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"filter weights file is not valid JSON: {exc.msg}", line=exc.lineno) from exc
        for key in ("version", "feature_dim", "weights", "bias", "threshold"):
            if key not in data:
                raise SchemaError(f"filter weights file lacks {key!r}", field=key)
        if data["version"] != WEIGHTS_VERSION:
            raise SchemaError(f"unsupported weights version {data['version']!r}", field="version")
        if len(data["weights"]) != data["feature_dim"]:
            raise SchemaError("weights length differs from feature_dim", field="weights")
        try:
            return cls(np.asarray(data["weights"], dtype=np.float64), data["bias"], data["threshold"])
        except (TypeError, ValueError) as exc:
            raise SchemaError(str(exc), field="weights") from exc


def score_relevance(model: FilterModel, query: str, entry_text: str, embedder: EmbeddingBackend) -> float:
    features = featurize_pair(embed_query(embedder, query), embed_query(embedder, entry_text))
    return float(model.probability(features))


@dataclass(frozen=True)
class ConstantFilter:
    """Scores every pair the same; ``accept_all`` / ``reject_all`` gates."""

    probability: float
    threshold: float = DEFAULT_THRESHOLD

    def score(self, query: str, query_embedding: np.ndarray, entry: MemoryEntry) -> float:
        return self.probability


def accept_all() -> ConstantFilter:
    return ConstantFilter(1.0)


def reject_all() -> ConstantFilter:
    return ConstantFilter(0.0)


@dataclass(frozen=True)
class OracleFilter:
    """Accepts exactly the entries of the edits known to be relevant to a query."""

    relevant: Mapping[str, Collection[str]] = field(default_factory=dict)
    threshold: float = DEFAULT_THRESHOLD

    def score(self, query: str, query_embedding: np.ndarray, entry: MemoryEntry) -> float:
        return 1.0 if entry.edit_id in self.relevant.get(query, ()) else 0.0


class ExternalScorer:
    """Relevance scores from an HTTP endpoint, e.g. a hosted cross-encoder.

    Request ``{"query", "edit_text"}``, response ``{"probability"}``.
    """

    def __init__(
        self,
        url: str,
        threshold: float = DEFAULT_THRESHOLD,
        timeout: float = 30.0,
        retries: int = 2,
        client: httpx.Client | None = None,
    ) -> None:
        self.url = url
        self.threshold = threshold
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)

    def score(self, query: str, query_embedding: np.ndarray, entry: MemoryEntry) -> float:
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                response = self._client.post(self.url, json={"query": query, "edit_text": entry.text})
                response.raise_for_status()
                probability = float(response.json()["probability"])
                break
            except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
                last = exc
        else:
            raise BackendUnavailable(f"relevance scorer failed: {last}")
        if not 0.0 <= probability <= 1.0:
            raise BackendUnavailable(f"relevance scorer returned {probability}, outside [0, 1]")
        return probability


def filter_candidates(
    model: RelevanceFilter,
    query: str,
    candidates: Sequence[RetrievalCandidate],
    query_embedding: np.ndarray | None = None,
    embedder: EmbeddingBackend | None = None,
) -> list[RetrievalCandidate]:
    """Candidates whose relevance score reaches the filter threshold, in input order."""
    if not candidates:
        return []
    if query_embedding is None:
        if embedder is None:
            raise ValueError("need query_embedding or embedder")
        query_embedding = embed_query(embedder, query)
    return [c for c in candidates if model.score(query, query_embedding, c.entry) >= model.threshold]


def select_best(filtered: Sequence[RetrievalCandidate], memory: MemoryLike) -> tuple[Edit, float] | None:
    if not filtered:
        return None
    best = max(filtered, key=lambda c: (c.similarity, -c.entry.step, -c.entry.position))
    return _view(memory).edits[best.entry.edit_id], best.similarity


# --- training ----------------------------------------------------------------

SAMPLE_KINDS = {"edit": 1, "portability": 1, "locality": 0, "general": 0}


@dataclass(frozen=True)
class FilterTrainSample:
    query: str
    edit_text: str
    label: int
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in SAMPLE_KINDS:
            raise ValueError(f"unknown sample kind {self.kind!r}")
        if self.label != SAMPLE_KINDS[self.kind]:
            raise ValueError(f"{self.kind} samples must have label {SAMPLE_KINDS[self.kind]}")
        if not self.query.strip() or not self.edit_text.strip():
            raise ValueError("query and edit_text must be non-empty")

    @classmethod
    def of(cls, query: str, edit_text: str, kind: str) -> FilterTrainSample:
        return cls(query, edit_text, SAMPLE_KINDS[kind], kind)


def save_samples(samples: Iterable[FilterTrainSample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"query": s.query, "edit_text": s.edit_text, "label": s.label, "kind": s.kind}) + "\n")


def load_samples(path: str | Path) -> list[FilterTrainSample]:
    samples = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"malformed record: {exc.msg}", line=lineno) from exc
            for key in ("query", "edit_text", "label", "kind"):
                if key not in row:
                    raise SchemaError(f"missing field {key!r}", line=lineno, field=key)
            try:
                samples.append(FilterTrainSample(row["query"], row["edit_text"], row["label"], row["kind"]))
            except (ValueError, AttributeError) as exc:
                raise SchemaError(str(exc), line=lineno) from exc
    return samples


def featurize_samples(samples: Sequence[FilterTrainSample], embedder: EmbeddingBackend) -> tuple[np.ndarray, np.ndarray]:
    cache: dict[str, np.ndarray] = {}

    def emb(text: str) -> np.ndarray:
        if text not in cache:
            cache[text] = embed_query(embedder, text)
        return cache[text]

    X = np.stack([featurize_pair(emb(s.query), emb(s.edit_text)) for s in samples])
    y = np.array([s.label for s in samples], dtype=np.float64)
    return X, y


def logistic_loss(weights: np.ndarray, bias: float, X: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(sigmoid(X @ weights + bias), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def logistic_gradient(weights: np.ndarray, bias: float, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    residual = sigmoid(X @ weights + bias) - y
    return X.T @ residual / len(y), float(residual.mean())


def filter_loss(model: FilterModel, batch: Sequence[FilterTrainSample], embedder: EmbeddingBackend) -> float:
    if not batch:
        raise ValueError("batch must be non-empty")
    X, y = featurize_samples(batch, embedder)
    return logistic_loss(model.weights, model.bias, X, y)


def filter_gradient(
    model: FilterModel, batch: Sequence[FilterTrainSample], embedder: EmbeddingBackend
) -> tuple[np.ndarray, float]:
    if not batch:
        raise ValueError("batch must be non-empty")
    X, y = featurize_samples(batch, embedder)
    return logistic_gradient(model.weights, model.bias, X, y)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 500
    seed: int = 0
    general_sample_rate: float = 0.5
    batch_size: int | None = None  # None = full batch
    threshold: float = DEFAULT_THRESHOLD


@dataclass(frozen=True)
class TrainResult:
    model: FilterModel
    losses: tuple[float, ...]
    samples_used: int


def select_training_samples(
    samples: Sequence[FilterTrainSample], rate: float, rng: np.random.Generator
) -> list[FilterTrainSample]:
    """Keep every sample except general prompts, which survive with probability ``rate``."""
    kept = []
    for s in samples:
        if s.kind == "general":
            if rng.random() < rate:
                kept.append(s)
        else:
            kept.append(s)
    return kept


def train_on_features(X: np.ndarray, y: np.ndarray, config: TrainConfig, rng: np.random.Generator | None = None) -> TrainResult:
    if len(y) == 0 or len(np.unique(y)) < 2:
        raise NotTrainedError("training data must contain both relevant and irrelevant samples")
    if (X.shape[1] - 1) % 3:
        raise ValueError("feature width must be 3*d + 1")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    weights = np.zeros(X.shape[1])
    bias = 0.0
    n = len(y)
    batch = config.batch_size or n
    losses = []
    for _ in range(config.epochs):
        order = np.arange(n) if batch >= n else rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            gw, gb = logistic_gradient(weights, bias, X[idx], y[idx])
            weights = weights - config.lr * gw
            bias = bias - config.lr * gb
        losses.append(logistic_loss(weights, bias, X, y))
    model = FilterModel(weights, bias, config.threshold)
    return TrainResult(model, tuple(losses), n)


def train_filter(
    samples: Sequence[FilterTrainSample], embedder: EmbeddingBackend, config: TrainConfig = TrainConfig()
) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    chosen = select_training_samples(samples, config.general_sample_rate, rng)
    if len({s.label for s in chosen}) < 2:
        raise NotTrainedError("training data must contain both relevant and irrelevant samples")
    X, y = featurize_samples(chosen, embedder)
    return train_on_features(X, y, config, rng)


def accuracy(model: FilterModel, X: np.ndarray, y: np.ndarray) -> float:
    predicted = (model.probability(X) >= model.threshold).astype(np.float64)
    return float(np.mean(predicted == y))

