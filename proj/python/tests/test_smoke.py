import math

import numpy as np
import pytest

import cglab


def tiny_bundle():
    world = cglab.configure(cglab.WorldConfig(), n_users=80, n_items=400, languages=3)
    policy = cglab.configure(cglab.PolicyConfig(), slate_size=20)
    return cglab.make_bundle(world, policy)


def tiny_train_config(**fields):
    c = cglab.configure(cglab.TrainConfig(), epochs=1, hidden=[16], embedding_dim=8, **fields)
    c.eval.query_sample = 40
    return c


def test_popularity_weight_values():
    assert cglab.popularity_weight(0.0, 100.0) == 1.0
    assert cglab.popularity_weight(100.0, 100.0) == pytest.approx(0.5 + 0.5 * math.exp(-1.0), abs=1e-15)
    with pytest.raises(cglab.ConfigError):
        cglab.popularity_weight(-1.0, 10.0)


def test_auc_matches_pair_count():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 4, 60).astype(float)
    labels = rng.integers(0, 2, 60)
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert cglab.roc_auc(scores.tolist(), labels.tolist()) == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-12)
    with pytest.raises(cglab.DataError):
        cglab.roc_auc([0.1, 0.2], [1, 1])
    mean, used, skipped = cglab.grouped_roc_auc([0, 0, 1, 1, 2], [0.1, 0.9, 0.8, 0.2, 0.5], [0, 1, 0, 1, 1])
    assert (mean, used, skipped) == (0.5, 2, 1)


def test_train_evaluate_and_checkpoint(tmp_path):
    bundle = tiny_bundle()
    model, report, losses = cglab.train(bundle, tiny_train_config())
    assert report["kind"] == "train"
    assert len(losses) == 1 and math.isfinite(losses[0])
    assert 0.0 <= report["metrics"]["sampled_auc"] <= 1.0
    again = cglab.train(bundle, tiny_train_config())
    assert again[0].parameters() == model.parameters()

    path = tmp_path / "m.ckpt"
    model.save(path)
    loaded = cglab.TwoTowerModel.load(path)
    assert loaded.parameters() == model.parameters()
    with pytest.raises(cglab.MissingFileError):
        cglab.TwoTowerModel.load(tmp_path / "absent.ckpt")

    eval_opts = cglab.EvalOptions()
    eval_opts.knn.query_sample = 40
    evaluated = cglab.evaluate_model(loaded, bundle, eval_opts)["metrics"]
    for name in ("sampled_auc", "served_grouped_auc", "mismatch_rate"):
        assert evaluated[name] == report["metrics"][name]
    q = np.array(loaded.embed_query(bundle.world.query_features(0)))
    assert np.linalg.norm(q) == pytest.approx(1.0)


def test_fine_tune_freezes_layers():
    bundle = tiny_bundle()
    model, _, _ = cglab.train(bundle, tiny_train_config())
    ft = cglab.configure(cglab.FineTuneConfig(), frozen_layers=["query.0"])
    eval_opts = cglab.configure(cglab.EvalOptions(), knn_eval=False)
    tuned, report = cglab.fine_tune(model, bundle, ft, eval=eval_opts)
    assert tuned.layer_checksum("query.0") == model.layer_checksum("query.0")
    assert tuned.layer_checksum("candidate.0") != model.layer_checksum("candidate.0")
    assert report["kind"] == "finetune"


def test_pointwise_in_batch_is_rejected():
    c = tiny_train_config()
    c.sampler.mode = cglab.SamplerMode.in_batch
    with pytest.raises(cglab.ConfigError):
        cglab.train(tiny_bundle(), c)


def test_elbow():
    assert cglab.find_elbow([1, 10, 100, 1000], [0.5, 0.7, 0.71, 0.711]) == 10
    assert cglab.find_elbow([1], [0.5]) is None


def test_bias_simulation_small():
    ratings = cglab.synthetic_ratings(cglab.configure(cglab.ratings_world(), n_users=120, n_items=300), 20, 1)
    c = cglab.configure(cglab.BiasSimConfig(), taus=[0.0, 0.5])
    c.classifier.epochs = 1
    report = cglab.run_bias_simulation(ratings, c)
    assert report["columns"][:3] == ["tau", "train_examples", "test_examples"]
    assert cglab.column(report, "tau") == [0.0, 0.5]
    assert report == cglab.run_bias_simulation(ratings, c, threads=2)


def test_hnsw_matches_exact_search(tmp_path):
    vectors = cglab.random_unit_vectors(400, 12, 3)
    assert vectors.shape == (400, 12)
    index = cglab.HnswIndex(12)
    index.add(vectors)
    assert len(index) == 400
    queries = cglab.random_unit_vectors(20, 12, 4)
    for q in queries:
        assert index.search(q, k=5, ef_search=400) == cglab.exact_knn(vectors, q, 5)
    assert index.recall(queries, k=10) >= 0.9

    path = tmp_path / "i.hnsw"
    index.save(path)
    assert cglab.HnswIndex.load(path).digest() == index.digest()

    single = cglab.HnswIndex(3)
    single.insert(7, [0.0, 0.0, 1.0])
    assert single.search([0.0, 0.0, 1.0], k=1) == [(7, 1.0)]
    with pytest.raises(cglab.DataError):
        single.insert(8, [1.0, 1.0, 0.0])
