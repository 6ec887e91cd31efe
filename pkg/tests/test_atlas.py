import numpy as np
import pytest

from adaatlas.atlas import Atlas, atlas_init, atlas_update
from adaatlas.volumes import one_hot


def _labels(seed, shape=(4, 4, 4), c=3):
    return np.random.default_rng(seed).integers(0, c, size=shape)


def test_single_subject_init_is_one_hot():
    y = _labels(0)
    a = atlas_init([y], 3)
    np.testing.assert_array_equal(a.probs, one_hot(y, 3))


def test_two_subject_init_is_average():
    y1, y2 = _labels(1), _labels(2)
    a = atlas_init([y1, y2], 3)
    np.testing.assert_array_equal(a.probs, (one_hot(y1, 3) + one_hot(y2, 3)) / 2)
    assert a.simplex_error() < 1e-12


def test_momentum_one_is_identity():
    a = atlas_init([_labels(3), _labels(4)], 3, momentum=1.0)
    b = atlas_update(a, [one_hot(_labels(5), 3)])
    np.testing.assert_array_equal(a.probs, b.probs)
    assert a.checksum() == b.checksum()


def test_momentum_zero_replaces():
    a = atlas_init([_labels(3)], 3, momentum=0.0)
    w = [one_hot(_labels(6), 3), one_hot(_labels(7), 3)]
    np.testing.assert_allclose(atlas_update(a, w).probs, np.mean(w, axis=0), atol=1e-15)


def test_ema_hand_value():
    a = atlas_init([np.zeros((1, 1, 2), int)], 2, momentum=0.9)
    w = one_hot(np.ones((1, 1, 2), int), 2)
    b = atlas_update(a, [w])
    np.testing.assert_allclose(b.probs[:, 0, 0, 0], [0.9, 0.1], atol=1e-15)


def test_simplex_preserved_over_many_updates():
    rng = np.random.default_rng(8)
    a = atlas_init([_labels(i) for i in range(5)], 3)
    for _ in range(20):
        # warped soft maps: any ProbMaps, not only one-hot
        z = rng.random(size=(4, 3, 4, 4, 4))
        a = atlas_update(a, list(z / z.sum(axis=1, keepdims=True)))
        assert a.simplex_error() < 1e-5
        assert np.all(a.probs >= 0) and np.all(a.probs <= 1)


def test_atlas_is_immutable():
    a = atlas_init([_labels(9)], 3)
    with pytest.raises(ValueError):
        a.probs[0, 0, 0, 0] = 0.5
    src = one_hot(_labels(10), 3)
    b = Atlas(src)
    src[:] = 0
    assert b.simplex_error() < 1e-12


def test_errors():
    with pytest.raises(ValueError):
        atlas_init([], 3)
    with pytest.raises(ValueError):
        atlas_init([_labels(0), _labels(1, shape=(4, 4, 5))], 3)
    with pytest.raises(ValueError):
        Atlas(np.ones((2, 2, 2, 2)) / 2, momentum=1.5)
    a = atlas_init([_labels(0)], 3)
    with pytest.raises(ValueError):
        atlas_update(a, [np.ones((3, 4, 4, 5)) / 3])
