import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from brainsegnet.data import make_phantom
from brainsegnet.errors import DataError, DimensionMismatchError, LabelRangeError
from brainsegnet.estimator import BrainSegNetSegmenter
from brainsegnet.validation import check_labels, check_volume_pairs

TINY = dict(embed_dim=16, num_blocks=4, num_heads=2, adapter_bottleneck=4, lora_rank=2,
            aspp_channels=16, br_channels=8, epochs=1, batch_size=4, warmup_steps=2)


@pytest.fixture
def phantoms():
    vols = [make_phantom(s, dims=(6, 32, 32), num_foreground=3) for s in range(2)]
    return [v.intensities for v in vols], [v.labels for v in vols]


def test_params_round_trip():
    est = BrainSegNetSegmenter(**TINY)
    assert est.get_params()["embed_dim"] == 16
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(epochs=3)
    assert est.epochs == 3


def test_predict_before_fit_raises(phantoms):
    with pytest.raises(NotFittedError):
        BrainSegNetSegmenter(**TINY).predict(phantoms[0])


def test_fit_predict_score(phantoms):
    X, y = phantoms
    est = BrainSegNetSegmenter(**TINY).fit(X, y)
    assert est.n_classes_ == 4 and est.input_size_ == (32, 32)
    preds = est.predict(X)
    assert [p.shape for p in preds] == [x.shape for x in X]
    assert all(p.min() >= 0 and p.max() < 4 for p in preds)
    score = est.score(X, y)
    assert 0.0 <= score <= 1.0
    single = est.predict(X[0])
    assert np.array_equal(single[0], preds[0])


def test_fit_is_reproducible(phantoms):
    X, y = phantoms
    a = BrainSegNetSegmenter(**TINY).fit(X, y).predict(X)
    b = BrainSegNetSegmenter(**TINY).fit(X, y).predict(X)
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_predict_rejects_other_plane(phantoms):
    X, y = phantoms
    est = BrainSegNetSegmenter(**TINY).fit(X[:1], y[:1])
    with pytest.raises(DimensionMismatchError):
        est.predict(np.zeros((6, 24, 32), np.float32))


def test_validation_helpers():
    vol = np.ones((2, 3, 4), np.float32)
    with pytest.raises(DimensionMismatchError):
        check_volume_pairs(vol, np.zeros((2, 3, 5), int))
    with pytest.raises(LabelRangeError):
        check_labels(np.full((2, 2, 2), 5), num_classes=4)
    with pytest.raises(DataError):
        check_labels(np.full((2, 2, 2), 0.5))
    bad = vol.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(DataError):
        check_volume_pairs(bad, np.zeros((2, 3, 4), int))
    with pytest.raises(DimensionMismatchError):
        check_volume_pairs([np.ones((2, 2))], [np.zeros((2, 2), int)])
