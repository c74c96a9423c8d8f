import itertools
from dataclasses import replace

import numpy as np
import pytest
import torch

from stmtvd import trainer
from stmtvd.gnn import ModelConfig
from stmtvd.synthetic import planted_corpus, planted_labels
from stmtvd.trainer import (
    SearchSpace,
    TrainConfig,
    TrainingDivergedError,
    build_labeled,
    build_vocabulary,
    evaluate_loss,
    f1_at,
    random_search,
    repeated_runs,
    select_threshold,
    to_graph_samples,
    train,
)

import support


@pytest.fixture(scope="module")
def planted():
    items = planted_corpus(24, 5)
    labeled = build_labeled([p.sample for p in items], planted_labels(items))
    vocab = build_vocabulary(labeled)
    samples = to_graph_samples(labeled, vocab)
    return samples[:16], samples[16:20], samples[20:], len(vocab)


def small_config(vocab_size, **kw):
    mc = ModelConfig(vocab_size=vocab_size, in_dim=16, hidden_dims=(16, 16), mlp_dim=16, dropout=0.0)
    base = dict(model=mc, learning_rate=1e-2, batch_size=8, max_epochs=5, patience=5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# --------------------------------------------------------------------------- training


def test_memorizes_a_single_function(planted):
    train_s, _, _, v = planted
    one = [s for s in train_s if s.func_label == 1][:1]
    cfg = small_config(v, max_epochs=300, patience=300, learning_rate=2e-2)
    trained = train(cfg, one, [])
    assert evaluate_loss(trained.model, one) < 0.01


def test_same_seed_is_bit_identical(planted):
    train_s, val_s, _, v = planted
    a = train(small_config(v), train_s, val_s)
    b = train(small_config(v), train_s, val_s)
    assert a.history == b.history
    assert evaluate_loss(a.model, val_s) == evaluate_loss(b.model, val_s)
    c = train(small_config(v, seed=1), train_s, val_s)
    assert c.history != a.history


def test_best_epoch_is_restored(planted):
    train_s, val_s, _, v = planted
    trained = train(small_config(v, max_epochs=8, patience=2), train_s, val_s)
    best = min(h["val_loss"] for h in trained.history)
    assert trained.history[trained.best_epoch - 1]["val_loss"] == best
    assert evaluate_loss(trained.model, val_s) == pytest.approx(best, rel=1e-6)
    # stopping happens once patience runs out after the best epoch
    assert len(trained.history) <= trained.best_epoch + 2


def test_float64_training(planted):
    train_s, val_s, _, v = planted
    trained = train(small_config(v, max_epochs=2, patience=2), train_s, val_s, dtype=torch.float64)
    assert next(trained.model.parameters()).dtype == torch.float64


def test_divergence_keeps_last_finite_parameters(planted, monkeypatch):
    train_s, val_s, _, v = planted
    real_loss = trainer.loss
    calls = {"n": 0}

    def flaky(out, batch, config):
        calls["n"] += 1
        value = real_loss(out, batch, config)
        return value * float("nan") if calls["n"] > 2 else value

    monkeypatch.setattr(trainer, "loss", flaky)
    with pytest.raises(TrainingDivergedError) as err:
        train(small_config(v, batch_size=4), train_s, val_s)
    assert err.value.epoch == 1
    assert all(torch.all(torch.isfinite(p)) for p in err.value.model.parameters())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=3, patience=4)
    cfg = TrainConfig(model=ModelConfig(gnn_type="gcn", hidden_dims=(8, 8)), seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_empty_validation_warns_and_keeps_default_threshold(planted):
    train_s, val_s, _, v = planted
    no_positive = [s for s in val_s if not np.any(s.stmt_labels)]
    if not no_positive:
        pytest.skip("fixture has no clean validation function")
    with pytest.warns(UserWarning, match="no vulnerable statements"):
        trained = train(small_config(v, max_epochs=1, patience=1), train_s, no_positive)
    assert trained.threshold == 0.5


# --------------------------------------------------------------------------- threshold


def sweep(scores, labels):
    grid = sorted(set(scores) | {0.0, 1.0})
    best = max(f1_at(np.asarray(scores), np.asarray(labels, bool), g) for g in grid)
    return min(g for g in grid if f1_at(np.asarray(scores), np.asarray(labels, bool), g) == best)


def test_separated_scores_pick_smallest_gap_threshold():
    assert select_threshold([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 0.8


def test_small_example_matches_exhaustive_sweep():
    assert select_threshold([0.9, 0.8, 0.1], [1, 0, 1]) == sweep([0.9, 0.8, 0.1], [1, 0, 1])


def test_identical_scores():
    for labels in ([1, 0, 0], [1, 1, 0], [1, 1, 1]):
        assert select_threshold([0.4] * 3, labels) == sweep([0.4] * 3, labels)


def test_no_positives_rejected():
    with pytest.raises(ValueError):
        select_threshold([0.2, 0.3], [0, 0])


def test_f1_at_reference():
    for bits in itertools.product((0, 1), repeat=5):
        scores = np.array([0.1, 0.4, 0.5, 0.7, 0.9])
        labels = np.array(bits, bool)
        pred = scores >= 0.5
        tp, fp, fn = int(np.sum(pred & labels)), int(np.sum(pred & ~labels)), int(np.sum(~pred & labels))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        assert f1_at(scores, labels, 0.5) == pytest.approx(2 * p * r / (p + r) if p + r else 0.0)


# --------------------------------------------------------------------------- search and repeats


def test_random_search_budget_one():
    base = TrainConfig()
    best, trials = random_search(SearchSpace(), 1, 0, lambda c: 1.0, base)
    assert len(trials) == 1 and best == trials[0][0]


def test_random_search_picks_lowest_loss():
    losses = iter([0.5, 0.2, 0.9])
    best, trials = random_search(SearchSpace(), 3, 1, lambda c: next(losses))
    assert best == trials[1][0]


def test_random_search_is_deterministic():
    _, a = random_search(SearchSpace(), 4, 7, lambda c: 0.0)
    _, b = random_search(SearchSpace(), 4, 7, lambda c: 0.0)
    assert [c for c, _ in a] == [c for c, _ in b]
    for cfg, _ in a:
        assert 1e-4 <= cfg.learning_rate <= 1e-2
        assert cfg.model.hidden_dims[0] in (64, 128, 256)
        assert cfg.model.hidden_dims[0] % cfg.model.heads == 0


def test_repeated_runs(planted):
    train_s, val_s, test_s, v = planted
    cfg = small_config(v, max_epochs=1, patience=1)
    reports = repeated_runs(cfg, train_s, val_s, test_s, n=10)
    seeds = [r.extra["seed"] for r in reports]
    assert len(reports) == 10 and len(set(seeds)) == 10
    mean_f1 = sum(r.f1 for r in reports) / 10
    from stmtvd.metrics import mean_report

    assert mean_report(reports, "f1") == pytest.approx(mean_f1)


def test_repeated_runs_differ_only_by_seed(planted):
    train_s, val_s, test_s, v = planted
    cfg = small_config(v, max_epochs=2, patience=2)
    a, b = repeated_runs(cfg, train_s, val_s, test_s, n=2, seeds=[3, 4])
    again = repeated_runs(replace(cfg, seed=3), train_s, val_s, test_s, n=2, seeds=[3, 5])[0]
    assert a.to_json() == again.to_json()
    assert a.extra["seed"] != b.extra["seed"]


def test_repeated_runs_need_distinct_seeds(planted):
    train_s, val_s, test_s, v = planted
    with pytest.raises(ValueError):
        repeated_runs(small_config(v), train_s, val_s, test_s, n=2, seeds=[1, 1])


def test_prediction_gate_on_embedding_inputs():
    rng = np.random.default_rng(0)
    model = support.tiny_model(rng, dim=4)
    samples = [support.random_sample(rng, 4, 4, function_id=f"f{i}") for i in range(5)]
    model = model.float()
    for p in trainer.predict(model, samples, 0.0):
        if p.func_pred == 0:
            assert not any(p.predicted)
