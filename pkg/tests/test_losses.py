import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from saliencystrike import ConfigError, DataError, DimensionError, core, losses

P3 = np.array([0.7, 0.2, 0.1])


def test_l_base_examples():
    assert losses.l_base(P3, 0)[0] == 0.7
    assert losses.l_base(np.full(4, 0.25), 2)[0] == 0.25
    assert losses.l_base(np.array([0.0, 1.0, 0.0]), 1)[0] == 1.0
    with pytest.raises(IndexError):
        losses.l_base(P3, 3)


def test_l_score_examples():
    value, wrong, _ = losses.l_score(P3, 0)
    assert value == pytest.approx(0.8) and wrong == 1
    assert losses.l_score(np.array([0.5, 0.5]), 0)[0] == 0.5
    assert losses.l_score(np.array([0.0, 1.0, 0.0]), 0)[0] == 0.0
    with pytest.raises(ConfigError):
        losses.l_score(np.array([1.0]), 0)


def test_l_cons_examples():
    assert losses.l_cons(np.array([0.3, 0.6, 0.1]), 0, 1, margin=0.1)[0] == pytest.approx(-5.0)
    assert losses.l_cons(np.array([0.5, 0.3, 0.2]), 0, 1, margin=0.1)[0] == pytest.approx(-0.2)
    assert losses.l_cons(np.array([0.4, 0.6]), 0, 1, margin=0.0)[0] == 0.0
    with pytest.raises(ConfigError):
        losses.l_cons(P3, 0, 0)


def test_attack_loss_composition():
    br, _ = losses.attack_loss_J(np.array([0.3, 0.6, 0.1]), 0, 1, kappa2=1.0, kappa3=0.5, margin=0.1)
    assert br.J == pytest.approx(-1.8)
    warm, grad = losses.attack_loss_J(P3, 0, None)
    assert warm.J == warm.l_base == 0.7
    assert np.array_equal(grad, [1.0, 0.0, 0.0])


@pytest.mark.parametrize("use_score,use_cons", [(True, True), (True, False), (False, True)])
def test_attack_loss_grad_wrt_probs(rng, use_score, use_cons):
    p = core.softmax(rng.normal(size=5))
    true, pre = 0, int(np.argmax(p[1:])) + 1
    _, g = losses.attack_loss_J(p, true, pre, use_score=use_score, use_cons=use_cons)
    err = core.finite_diff_check(lambda v: (losses.attack_loss_J(v, true, pre, use_score=use_score,
                                                                 use_cons=use_cons)[0].J,
                                            losses.attack_loss_J(v, true, pre, use_score=use_score,
                                                                 use_cons=use_cons)[1]), p)
    assert err < 1e-6


def test_d_l2_examples():
    a = np.array([[1.0, 0, 0]])
    assert losses.d_l2(a, a)[0] == 0.0
    assert losses.d_l2(a, np.zeros((1, 3)))[0] == 1.0
    two = np.zeros((2, 3))
    assert losses.d_l2(two + [0.5, 0, 0], two)[0] == 1.0
    with pytest.raises(DimensionError):
        losses.d_l2(np.zeros((2, 3)), np.zeros((3, 3)))


def test_chamfer_examples():
    a = np.zeros((1, 3))
    b = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    assert losses.d_chamfer(a, b)[0] == 2.0
    assert losses.d_chamfer(b, b)[0] == 0.0
    with pytest.raises(DataError):
        losses.d_chamfer(np.zeros((0, 3)), b)


def test_hausdorff_examples():
    a = np.array([[0.0, 0, 0], [3.0, 0, 0]])
    b = np.zeros((1, 3))
    assert losses.d_hausdorff(a, b)[0] == 3.0
    assert losses.d_hausdorff(b, a)[0] == 0.0
    assert losses.d_hausdorff(a, a)[0] == 0.0


def test_brute_force_oracles(rng):
    from saliencystrike.checks import brute_chamfer, brute_hausdorff
    a, b = rng.normal(size=(32, 3)), rng.normal(size=(48, 3))
    assert abs(losses.d_chamfer(a, b)[0] - brute_chamfer(a, b)) < 1e-9
    assert abs(losses.d_hausdorff(a, b)[0] - brute_hausdorff(a, b)) < 1e-9


def test_total_loss():
    assert losses.total_loss(-1.8, 0.002, 0.0) == -1.8
    assert losses.total_loss(-1.8, 0.002, 10.0) == pytest.approx(-1.78)


@pytest.mark.parametrize("kind", losses.DISTANCE_KINDS)
def test_distance_grad_check(rng, kind):
    clean = rng.normal(size=(16, 3))
    adv = clean + rng.normal(scale=0.1, size=clean.shape)
    err = core.finite_diff_check(lambda v: losses.distance(kind, v, clean), adv)
    assert err < 1e-4


def test_unknown_distance():
    with pytest.raises(ConfigError):
        losses.distance("emd", np.zeros((1, 3)), np.zeros((1, 3)))


clouds = arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)), elements=st.floats(-5, 5))


@settings(max_examples=60, deadline=None)
@given(clouds, clouds)
def test_distance_axioms(a, b):
    for fn in (losses.d_chamfer, losses.d_hausdorff):
        assert fn(a, a)[0] == 0.0
        assert fn(a, b)[0] >= 0.0
    assert abs(losses.d_chamfer(a, b)[0] - losses.d_chamfer(b, a)[0]) < 1e-9
    # one-sided: b inside a superset costs nothing in that direction
    sup = np.vstack([a, b])
    assert losses.d_hausdorff(a, sup)[0] == 0.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(0.01, 1.0)))
def test_score_and_base_bounds(raw):
    p = raw / raw.sum()
    assert 0.0 <= losses.l_base(p, 0)[0] <= 1.0
    value, wrong, _ = losses.l_score(p, 0)
    assert wrong != 0 and 0.0 <= value <= 1.0
