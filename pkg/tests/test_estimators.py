import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fn2en.checkpoint import save_network
from fn2en.estimators import TwoStageExpressionClassifier, check_images


def small(teacher=None, **kw):
    params = dict(teacher=teacher, tap="pool2", conv_channels=(4, 8), fc_dim=8, crop_size=14, stage1_lr=1e-3,
                  stage1_epochs=2, stage1_decay_steps=(), stage2_lr=0.01, stage2_epochs=3, stage2_decay_steps=(),
                  batch_size=8, random_state=0)
    params.update(kw)
    return TwoStageExpressionClassifier(**params)


@pytest.fixture
def xy(tiny):
    names = np.array(["happy", "sad", "surprise"])
    return tiny.data.images, names[tiny.data.labels]


def test_fit_predict_with_teacher(tiny, xy):
    X, y = xy
    before = tiny.teacher.checksum()
    clf = small(tiny.teacher).fit(X, y)
    assert len(clf.stage1_history_) == 2 and len(clf.stage2_history_) == 3
    assert tiny.teacher.checksum() == before
    assert set(clf.predict(X)) <= set(clf.classes_)
    proba = clf.predict_proba(X)
    assert proba.shape == (len(X), 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert clf.transform(X).shape[0] == len(X)
    assert 0.0 <= clf.score(X, y) <= 1.0


def test_teacher_from_path_matches_object(tiny, xy, tmp_path):
    X, y = xy
    save_network(tiny.teacher.network, tmp_path / "t.fn2e")
    a = small(tiny.teacher).fit(X, y)
    b = small(str(tmp_path / "t.fn2e")).fit(X, y)
    assert a.network_.checksum() == b.network_.checksum()


def test_scratch_skips_stage1(tiny, xy):
    X, y = xy
    clf = small(tiny.teacher, from_scratch=True).fit(X, y)
    assert clf.stage1_history_ == []
    assert "upsample" not in clf.network_.layer_names


def test_clone_and_params(tiny):
    clf = small(tiny.teacher, stage2_lr=0.5)
    copy = clone(clf)
    assert copy.get_params()["stage2_lr"] == 0.5 and not hasattr(copy, "network_")


def test_unfitted_and_bad_inputs(tiny, xy):
    X, y = xy
    with pytest.raises(NotFittedError):
        small().predict(X)
    with pytest.raises(ValueError):
        small().fit(X[:, :, :, :15], y)
    with pytest.raises(ValueError):
        small().fit(X * 2, y)
    with pytest.raises(ValueError):
        small().fit(X, np.zeros(len(X)))
    clf = small(stage2_epochs=1).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :1])


def test_check_images_rejects_nan():
    with pytest.raises(ValueError):
        check_images(np.full((1, 1, 2, 2), np.nan))
