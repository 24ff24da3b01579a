import json
import math

import httpx
import numpy as np
import pytest

from editroute.augmenter import DECLARATIVE, QA, AugmentedEdit, Edit
from editroute.errors import BackendUnavailable, NotTrainedError, SchemaError
from editroute.memory import Memory
from editroute.retrieval import (
    ExternalScorer,
    FilterModel,
    FilterTrainSample,
    RetrievalCandidate,
    TrainConfig,
    accept_all,
    accuracy,
    cosine_similarity,
    featurize_pair,
    filter_candidates,
    filter_gradient,
    filter_loss,
    load_samples,
    logistic_gradient,
    logistic_loss,
    reject_all,
    retrieve_topk,
    save_samples,
    score_relevance,
    select_best,
    select_training_samples,
    sigmoid,
    topk_by_embedding,
    train_filter,
    train_on_features,
)

from helpers import LookupEmbedder, brute_force_topk, random_memory, scalar_dot, scalar_loss, separable_pairs


def unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def test_cosine_identity_and_antipodal(rng):
    v = unit(rng, 32)
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-12)


def test_cosine_matches_scalar_loop(rng):
    for _ in range(50):
        u, v = unit(rng, 48), unit(rng, 48)
        assert abs(cosine_similarity(u, v) - scalar_dot(u, v)) <= 1e-9


def test_cosine_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        cosine_similarity(unit(rng, 3), unit(rng, 4))


def test_empty_memory(embedder):
    assert retrieve_topk("anything", Memory.for_embedder(embedder), embedder) == []


def test_verbatim_self_match(embedder):
    memory = random_memory(embedder, 5)
    edit = Edit("verbatim", "Where is the tallest lighthouse?", "Jeddah", 6)
    forms = ((QA, "Where is the tallest lighthouse? Jeddah"), (DECLARATIVE, "Where is the tallest lighthouse?"))
    memory.insert(edit, AugmentedEdit("verbatim", forms), embedder)
    top = retrieve_topk("Where is the tallest lighthouse?", memory, embedder, k=4)
    assert top[0].entry.edit_id == "verbatim" and top[0].entry.form == DECLARATIVE
    assert top[0].similarity == pytest.approx(1.0, abs=1e-12)


def test_topk_matches_brute_force():
    embedder = LookupEmbedder(8, seed=3)
    memory = random_memory(embedder, 5)  # 20 entries
    q = embedder.embed("probe")
    got = [(c.entry.position, c.similarity) for c in retrieve_topk("probe", memory, embedder, k=4)]
    want = brute_force_topk(memory, q, 4)
    assert [p for p, _ in got] == [p for p, _ in want]
    assert np.allclose([s for _, s in got], [s for _, s in want], atol=1e-12)


def test_topk_ties_prefer_earlier_entries():
    embedder = LookupEmbedder(6, seed=5, pool=3)
    memory = random_memory(embedder, 10)
    q = embedder.embed("query 1?")
    got = [c.entry.position for c in topk_by_embedding(memory, q, 10)]
    assert got == [p for p, _ in brute_force_topk(memory, q, 10)]
    # several entries share q's vector; they must come in step/position order
    sims = [c.similarity for c in topk_by_embedding(memory, q, 10)]
    assert sims[0] == sims[1]
    assert got[0] < got[1]


def test_topk_short_memory_and_bad_k(embedder):
    memory = random_memory(embedder, 1)
    assert len(retrieve_topk("q", memory, embedder, k=10)) == 4
    with pytest.raises(ValueError):
        retrieve_topk("q", memory, embedder, k=0)


def test_featurize_pair(rng):
    d = 10
    v, w = unit(rng, d), unit(rng, d)
    same = featurize_pair(v, v)
    assert same[-1] == pytest.approx(1.0)
    assert np.all(same[2 * d : 3 * d] == 0.0)
    assert featurize_pair(v, w).shape == (3 * d + 1,)
    assert np.array_equal(featurize_pair(v, w)[:d], featurize_pair(w, v)[d : 2 * d])
    with pytest.raises(ValueError):
        featurize_pair(v, unit(rng, d + 1))


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(800.0) == 1.0 and sigmoid(-800.0) == 0.0
    assert np.allclose(sigmoid(np.array([-2.0, 2.0])), [1 / (1 + math.e**2), 1 / (1 + math.e**-2)])


def test_score_relevance_defaults(embedder):
    zero = FilterModel.zeros(embedder.dimension)
    assert score_relevance(zero, "a query", "some edit", embedder) == 0.5
    biased = FilterModel(np.zeros(3 * embedder.dimension + 1), 20.0)
    assert score_relevance(biased, "a query", "unrelated", embedder) > 0.999


def test_filter_model_validation():
    with pytest.raises(ValueError):
        FilterModel(np.zeros(5))
    with pytest.raises(ValueError):
        FilterModel(np.zeros(4), threshold=1.0)


def test_filter_candidates_edge_cases(embedder):
    memory = random_memory(embedder, 3)
    candidates = retrieve_topk("query 2?", memory, embedder, k=4)
    assert filter_candidates(accept_all(), "q", [], embedder=embedder) == []
    assert filter_candidates(reject_all(), "query 2?", candidates, embedder=embedder) == []


def test_filter_candidates_against_per_candidate_scores(embedder, rng):
    memory = random_memory(embedder, 6)
    query = "query 3? answer"
    q_emb = embedder.embed(query)
    candidates = retrieve_topk(query, memory, embedder, k=10)
    model = FilterModel(rng.normal(size=3 * embedder.dimension + 1), 0.0)
    scores = [model.score(query, q_emb, c.entry) for c in candidates]
    model = model.with_threshold(float(np.median(scores)))
    kept = filter_candidates(model, query, candidates, query_embedding=q_emb)
    expected = [c for c, s in zip(candidates, scores) if s >= model.threshold]
    assert 0 < len(kept) < len(candidates)
    assert [c.entry.position for c in kept] == [c.entry.position for c in expected]


def test_select_best():
    embedder = LookupEmbedder(4, seed=9)
    memory = Memory.for_embedder(embedder)
    for i in range(1, 8):
        edit = Edit(f"e{i}", f"q{i}", f"a{i}", i)
        forms = ((QA, f"q{i} a{i}"),)
        if i in (3, 7):
            forms += ((DECLARATIVE, "shared statement"),)
        memory.insert(edit, AugmentedEdit(edit.id, forms), embedder)
    assert select_best([], memory) is None
    shared = [c for c in topk_by_embedding(memory, embedder.embed("shared statement"), 3)]
    assert shared[0].similarity == shared[1].similarity
    for order in (shared[:2], shared[:2][::-1]):
        edit, sim = select_best(order, memory)
        assert edit.id == "e3" and edit.step == 3
    single = topk_by_embedding(memory, embedder.embed("q5 a5"), 1)
    assert select_best(single, memory)[0].id == "e5"


def test_select_best_is_max(rng):
    embedder = LookupEmbedder(5, seed=11)
    memory = random_memory(embedder, 8)
    for _ in range(20):
        candidates = topk_by_embedding(memory, unit(rng, 5), 6)
        subset = [c for c in candidates if rng.random() < 0.6] or candidates[:1]
        _, sim = select_best(subset, memory)
        assert sim == max(c.similarity for c in subset)


def test_loss_analytic(embedder):
    zero = FilterModel.zeros(embedder.dimension)
    pos = [FilterTrainSample.of("q", "e", "edit")]
    neg = [FilterTrainSample.of("q", "e", "locality")]
    assert filter_loss(zero, pos, embedder) == pytest.approx(math.log(2), abs=1e-12)
    assert filter_loss(zero, neg, embedder) == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        filter_loss(zero, [], embedder)


def test_loss_matches_scalar_oracle(embedder, rng):
    words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
    batch = [
        FilterTrainSample.of(" ".join(rng.choice(words, 3)), " ".join(rng.choice(words, 4)), kind)
        for kind in ("edit", "general", "portability", "locality", "edit", "general")
    ]
    model = FilterModel(0.5 * rng.normal(size=3 * embedder.dimension + 1), 0.3)
    feats = []
    for s in batch:
        q, e = embedder.embed(s.query), embedder.embed(s.edit_text)
        feats.append(list(q) + list(e) + [abs(a - b) for a, b in zip(q, e)] + [scalar_dot(q, e)])
    oracle = scalar_loss(model.weights, model.bias, feats, [s.label for s in batch])
    assert abs(filter_loss(model, batch, embedder) - oracle) <= 1e-9


def test_gradient_single_sample(embedder):
    zero = FilterModel.zeros(embedder.dimension)
    sample = FilterTrainSample.of("who wrote it", "the writer", "edit")
    gw, gb = filter_gradient(zero, [sample], embedder)
    x = featurize_pair(embedder.embed(sample.query), embedder.embed(sample.edit_text))
    assert np.allclose(gw, -0.5 * x, atol=1e-15)
    assert gb == -0.5


def test_gradient_vanishes_at_optimum(rng):
    X = rng.normal(size=(30, 13))
    w = rng.normal(size=13)
    z = X @ w
    w *= 60.0 / np.min(np.abs(z))
    y = (X @ w > 0).astype(float)
    gw, gb = logistic_gradient(w, 0.0, X, y)
    assert np.max(np.abs(gw)) < 1e-12 and abs(gb) < 1e-12


def test_gradient_matches_finite_differences(rng):
    h = 1e-5
    X, y = separable_pairs(20, 4, rng)
    w, b = 0.5 * rng.normal(size=X.shape[1]), 0.1
    gw, gb = logistic_gradient(w, b, X, y)
    for i in range(len(w)):
        step = np.zeros_like(w)
        step[i] = h
        fd = (logistic_loss(w + step, b, X, y) - logistic_loss(w - step, b, X, y)) / (2 * h)
        assert abs(gw[i] - fd) / max(abs(gw[i]), abs(fd), 1e-6) <= 1e-4
    fd_b = (logistic_loss(w, b + h, X, y) - logistic_loss(w, b - h, X, y)) / (2 * h)
    assert abs(gb - fd_b) / max(abs(gb), abs(fd_b), 1e-6) <= 1e-4


def test_training_separable_monotone(rng):
    X, y = separable_pairs(200, 16, rng)
    result = train_on_features(X, y, TrainConfig(lr=0.1, epochs=500))
    assert accuracy(result.model, X, y) >= 0.95
    assert len(result.losses) == 500
    assert all(b <= a + 1e-9 for a, b in zip(result.losses, result.losses[1:]))


def test_training_deterministic(embedder):
    samples = [
        FilterTrainSample.of("capital of france", "paris is the capital of france", "edit"),
        FilterTrainSample.of("where is paris", "paris is the capital of france", "portability"),
        FilterTrainSample.of("best pizza topping", "paris is the capital of france", "locality"),
    ] + [FilterTrainSample.of(f"general prompt {i}", "paris is the capital of france", "general") for i in range(10)]
    cfg = TrainConfig(lr=0.5, epochs=50, seed=7)
    a, b = train_filter(samples, embedder, cfg), train_filter(samples, embedder, cfg)
    assert a.model.weights.tobytes() == b.model.weights.tobytes() and a.model.bias == b.model.bias
    assert a.samples_used == b.samples_used
    assert 3 <= a.samples_used <= 13


def test_minibatch_training_is_seeded(rng):
    X, y = separable_pairs(40, 4, rng)
    cfg = TrainConfig(lr=0.2, epochs=20, seed=3, batch_size=8)
    a, b = train_on_features(X, y, cfg), train_on_features(X, y, cfg)
    assert a.model.weights.tobytes() == b.model.weights.tobytes()


def test_general_sample_rate(rng):
    samples = [FilterTrainSample.of("q", "e", "edit")] + [FilterTrainSample.of(f"g{i}", "e", "general") for i in range(200)]
    assert len(select_training_samples(samples, 0.0, rng)) == 1
    assert len(select_training_samples(samples, 1.0, rng)) == 201
    kept = len(select_training_samples(samples, 0.5, np.random.default_rng(0))) - 1
    assert 70 <= kept <= 130


def test_single_class_rejected(embedder, rng):
    samples = [FilterTrainSample.of("q", "e", "edit"), FilterTrainSample.of("p", "e", "portability")]
    with pytest.raises(NotTrainedError):
        train_filter(samples, embedder)
    with pytest.raises(NotTrainedError):
        train_on_features(rng.normal(size=(4, 7)), np.ones(4), TrainConfig())


def test_sample_kind_labels():
    with pytest.raises(ValueError):
        FilterTrainSample("q", "e", 0, "edit")
    with pytest.raises(ValueError):
        FilterTrainSample("q", "e", 1, "general")
    assert FilterTrainSample.of("q", "e", "locality").label == 0


def test_samples_file_round_trip(tmp_path):
    samples = [FilterTrainSample.of("q1", "e1", "edit"), FilterTrainSample.of("q2", "e1", "general")]
    path = tmp_path / "samples.jsonl"
    save_samples(samples, path)
    assert load_samples(path) == samples
    path.write_text(path.read_text() + '{"query": "q", "edit_text": "e", "label": 1}\n')
    with pytest.raises(SchemaError, match="line 3"):
        load_samples(path)


def test_weights_file_round_trip(tmp_path, rng):
    model = FilterModel(rng.normal(size=31), -0.25, 0.6)
    path = tmp_path / "w.json"
    model.save(path)
    body = json.loads(path.read_text())
    assert body["feature_dim"] == 31 and body["version"] == 1
    loaded = FilterModel.load(path)
    assert loaded.weights.tobytes() == model.weights.tobytes()
    assert (loaded.bias, loaded.threshold, loaded.dimension) == (-0.25, 0.6, 10)
    body["feature_dim"] = 30
    path.write_text(json.dumps(body))
    with pytest.raises(SchemaError):
        FilterModel.load(path)


def test_external_scorer(embedder):
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        return httpx.Response(200, json={"probability": 0.8})

    memory = random_memory(embedder, 1)
    entry = memory.entries[0]
    scorer = ExternalScorer("http://scorer/score", client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert scorer.score("hello", embedder.embed("hello"), entry) == 0.8
    assert seen == [{"query": "hello", "edit_text": entry.text}]
    bad = ExternalScorer(
        "http://scorer/score",
        retries=0,
        client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"probability": 3}))),
    )
    with pytest.raises(BackendUnavailable):
        bad.score("hello", embedder.embed("hello"), entry)


def test_candidate_similarity_matches_dot(embedder):
    memory = random_memory(embedder, 4)
    q = embedder.embed("query 1? answer 1")
    for c in retrieve_topk("query 1? answer 1", memory, embedder, k=8):
        assert isinstance(c, RetrievalCandidate)
        assert abs(c.similarity - scalar_dot(q, c.entry.embedding)) <= 1e-12
