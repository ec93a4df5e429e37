import numpy as np
import pytest

from bimodal_gan.classifier import (ClassifierConfig, PairClassifier, evaluate_accuracy, pair_inputs, run_protocol,
                                    train_classifier, train_label_model)
from bimodal_gan.dataset import ToyParams, generate_toy_bimodal


def _blobs(n, seed):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(0, 0.3, (n, 2, 8, 8)).astype(np.float32)
    x[y == 1, :, 2:6, 2:6] += 1.0
    return x, y


def test_lr_schedule():
    c = ClassifierConfig()
    assert c.lr_at(0) == 0.01
    assert c.lr_at(29) == 0.01
    assert c.lr_at(30) == pytest.approx(0.0099)
    assert c.lr_at(300) == pytest.approx(0.01 * 0.99 ** 10)


def test_config_validation():
    with pytest.raises(ValueError):
        ClassifierConfig(iterations=0)
    with pytest.raises(ValueError):
        ClassifierConfig(momentum=1.0)


def test_training_is_deterministic():
    x, y = _blobs(40, 0)
    cfg = ClassifierConfig(iterations=20, seed=5)
    assert train_classifier(cfg, x, y).digest() == train_classifier(cfg, x, y).digest()
    assert train_classifier(ClassifierConfig(iterations=20, seed=6), x, y).digest() != train_classifier(cfg, x, y).digest()


def test_separable_data_is_learned(tmp_path):
    x, y = _blobs(200, 1)
    xt, yt = _blobs(100, 2)
    model = train_classifier(ClassifierConfig(iterations=300), x, y, tmp_path / "log.csv")
    assert evaluate_accuracy(model, xt, yt) >= 0.95
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "step,lr,loss"


def test_constant_predictor_on_balanced_set():
    _, y = _blobs(50, 0)
    assert evaluate_accuracy(lambda x: np.ones(len(x)), np.zeros((50, 2, 8, 8)), y) == 0.5


def test_single_class_rejected():
    x, _ = _blobs(10, 0)
    with pytest.raises(ValueError, match="both labels"):
        train_classifier(ClassifierConfig(iterations=1), x, np.ones(10))


def test_protocol_runs_and_pair_inputs():
    ds = generate_toy_bimodal(ToyParams(n_pairs=12, image_size=16, seed=0))
    assert pair_inputs(ds).shape == (12, 2, 16, 16)
    pos = generate_toy_bimodal(ToyParams(n_pairs=16, image_size=16, seed=1, class_balance=1.0))
    neg = generate_toy_bimodal(ToyParams(n_pairs=16, image_size=16, seed=2, class_balance=0.0))
    score = run_protocol(ClassifierConfig(iterations=5, runs=3), pos, neg, ds, ds.labels)
    assert len(score.group_values) == 3
    assert 0 <= score.mean <= 1


def test_label_model_distribution():
    x, y = _blobs(40, 3)
    m = train_label_model(ClassifierConfig(iterations=10), x[:, 0], y)
    p = m.label_distribution(x[:5, 0])
    assert p.shape == (5, 2)
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-6)
    assert isinstance(m, PairClassifier)
