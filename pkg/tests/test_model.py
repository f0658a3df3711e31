import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import finite_difference, reference_head_loss, relative_error
from xhate.corpus import ClassWeights
from xhate.errors import ConfigError, DataError, NumericError
from xhate.model import (
    HeadParams,
    HeadSpec,
    Prediction,
    head_forward,
    head_from_json,
    head_gradients,
    head_to_json,
    init_head,
    load_head,
    loss_and_gradients,
    predict,
    save_head,
    softmax,
    weighted_cross_entropy,
)


def tiny():
    spec = HeadSpec(2, 1, dropout_p=0.5)
    params = HeadParams(
        W1=np.array([[1.0, 0.0]]), b1=np.zeros(1), W2=np.array([[1.0], [-1.0]]), b2=np.zeros(2)
    )
    return spec, params


# ---------------------------------------------------------------- init


def test_init_deterministic_and_zero_bias():
    spec = HeadSpec(16, 8, extra_dense=True)
    a, b = init_head(spec, 3), init_head(spec, 3)
    assert a.digest() == b.digest()
    assert not a.b1.any() and not a.b2.any() and not a.b1b.any()
    assert init_head(spec, 4).digest() != a.digest()
    a.check_shapes(spec)


def test_init_variance():
    spec = HeadSpec(256, 512)
    p = init_head(spec, 0)
    s = math.sqrt(6 / (256 + 512))
    assert abs(p.W1.var() / (s * s / 3) - 1) < 0.10
    assert np.abs(p.W1).max() <= s


def test_head_spec_invariants():
    with pytest.raises(ConfigError):
        HeadSpec(4, 0)
    with pytest.raises(ConfigError):
        HeadSpec(4, 2, dropout_p=1.0)
    with pytest.raises(ConfigError):
        HeadSpec(4, 2, n_classes=3)


# ---------------------------------------------------------------- forward


def test_zero_params_give_uniform():
    spec = HeadSpec(3, 4)
    p = init_head(spec).map(np.zeros_like)
    probs, _ = head_forward(np.ones(3), p, spec, "eval")
    assert probs.tolist() == [0.5, 0.5]


def test_hand_computed_forward():
    spec, p = tiny()
    probs, hidden = head_forward(np.array([2.0, 0.0]), p, spec, "eval")
    assert hidden.tolist() == [2.0]
    e4 = math.exp(4)
    assert probs[0] == pytest.approx(e4 / (1 + e4), abs=1e-15)
    assert probs[1] == pytest.approx(1 / (1 + e4), abs=1e-15)


def test_inverted_dropout_scaling():
    spec, p = tiny()
    x = np.array([2.0, 0.0])
    _, h_eval = head_forward(x, p, spec, "eval")
    _, h_train = head_forward(x, p, spec, "train", dropout_mask=np.ones(1))
    assert h_train.tolist() == (2 * h_eval).tolist()


def test_train_mode_needs_mask_or_rng():
    spec, p = tiny()
    with pytest.raises(ConfigError):
        head_forward(np.ones(2), p, spec, "train")


def test_non_finite_input():
    spec, p = tiny()
    with pytest.raises(NumericError):
        head_forward(np.array([np.inf, 0.0]), p, spec)
    with pytest.raises(DataError):
        head_forward(np.ones(3), p, spec)


finite = st.floats(-50, 50, allow_nan=False)


@given(arrays(np.float64, (5, 6), elements=finite), st.integers(0, 1000))
def test_probs_normalized(x, seed):
    spec = HeadSpec(6, 4, extra_dense=seed % 2 == 0)
    probs, _ = head_forward(x, init_head(spec, seed), spec)
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-6)
    assert np.all(probs >= 0)


@given(arrays(np.float64, (4, 2), elements=st.floats(-30, 30)), st.floats(-500, 500))
def test_softmax_shift_invariant(logits, c):
    assert np.allclose(softmax(logits), softmax(logits + c), atol=1e-9, rtol=0)


def test_dropout_expectation():
    spec = HeadSpec(8, 16, dropout_p=0.3)
    p = init_head(spec, 1)
    x = np.random.default_rng(0).normal(size=8)
    _, h_eval = head_forward(x, p, spec, "eval")
    rng = np.random.default_rng(1)
    n = 20000
    xs = np.repeat(x[None, :], n, axis=0)
    _, h_train = head_forward(xs, p, spec, "train", rng=rng)
    mean = h_train.mean(axis=0)
    live = h_eval > 1e-3
    assert np.all(np.abs(mean[live] - h_eval[live]) <= 0.02 * h_eval[live])
    assert np.all(mean[~live] <= 0.02 * max(h_eval.max(), 1e-3))


# ---------------------------------------------------------------- predict


def test_predict_tie_and_labels():
    spec = HeadSpec(2, 1)
    p = HeadParams(W1=np.zeros((1, 2)), b1=np.zeros(1), W2=np.zeros((2, 1)), b2=np.array([0.0, 0.0]))
    assert predict(np.ones(2), p, spec) == Prediction((0.5, 0.5), 0)
    p.b2 = np.array([math.log(0.9), math.log(0.1)])
    assert predict(np.ones(2), p, spec).label == 0
    p.b2 = np.array([0.0, 1.0])
    assert predict(np.ones(2), p, spec).label == 1


def test_batch_predict_equals_rows():
    spec = HeadSpec(6, 5)
    p = init_head(spec, 2)
    x = np.random.default_rng(0).normal(size=(30, 6))
    batch = predict(x, p, spec)
    rows = [predict(row, p, spec) for row in x]
    assert [b.label for b in batch] == [r.label for r in rows]
    # matrix and vector products may round differently in the last ulp
    assert np.allclose([b.probs for b in batch], [r.probs for r in rows], atol=1e-12, rtol=0)


def test_argmax_ignores_loss_weights():
    # weights enter the loss only; predictions from the same params cannot depend on them
    spec = HeadSpec(4, 3)
    p = init_head(spec, 5)
    x = np.random.default_rng(1).normal(size=(20, 4))
    y = np.arange(20) % 2
    before = predict(x, p, spec)
    weighted_cross_entropy(head_forward(x, p, spec)[0], y, ClassWeights((7.0, 0.5)))
    assert predict(x, p, spec) == before


# ---------------------------------------------------------------- loss


def test_loss_examples():
    assert weighted_cross_entropy(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) == 0.0
    assert abs(weighted_cross_entropy(np.full((3, 2), 0.5), [0, 1, 1]) - math.log(2)) <= 1e-12
    got = weighted_cross_entropy(np.array([[0.9, 0.1], [0.2, 0.8]]), [0, 1], ClassWeights((1, 3)))
    assert abs(got - (-math.log(0.9) - 3 * math.log(0.8)) / 4) <= 1e-12


def test_loss_clamps_log():
    assert weighted_cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))


def test_loss_empty_batch():
    with pytest.raises(DataError):
        weighted_cross_entropy(np.zeros((0, 2)), [])


# ---------------------------------------------------------------- gradients


def _fd_case(seed, extra_dense=False, weights=(1.0, 1.0)):
    rng = np.random.default_rng(seed)
    d_model, d_hidden, n = int(rng.integers(2, 9)), int(rng.integers(1, 6)), int(rng.integers(2, 7))
    spec = HeadSpec(d_model, d_hidden, use_dropout=False, extra_dense=extra_dense)
    p = init_head(spec, seed)
    p = p.map(lambda a: a + rng.normal(scale=0.1, size=a.shape))
    x = rng.normal(size=(n, d_model))
    y = rng.integers(0, 2, size=n)
    _, g = loss_and_gradients(x, y, p, spec, ClassWeights(weights))
    arrays_ = {name: arr.copy() for name, arr in p.items()}
    num = finite_difference(lambda a: reference_head_loss(x, y, a, weights, extra_dense), arrays_)
    return g, num


@pytest.mark.parametrize("seed", range(12))
def test_gradients_match_finite_differences(seed):
    g, num = _fd_case(seed, extra_dense=seed % 3 == 0, weights=(1.0, 1.0 + seed))
    for name, arr in g.items():
        assert relative_error(arr, num[name]) < 1e-4, name


def test_reference_loss_agrees_with_package():
    spec = HeadSpec(5, 4, use_dropout=False, extra_dense=True)
    p = init_head(spec, 9)
    rng = np.random.default_rng(9)
    x, y = rng.normal(size=(6, 5)), rng.integers(0, 2, 6)
    mine, _ = loss_and_gradients(x, y, p, spec, ClassWeights((2.0, 0.5)))
    ref = reference_head_loss(x, y, {k: v for k, v in p.items()}, (2.0, 0.5), True)
    assert abs(mine - ref) < 1e-12


def test_gradient_with_dropout_mask():
    spec = HeadSpec(4, 3, dropout_p=0.5)
    p = init_head(spec, 1)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(5, 4)), rng.integers(0, 2, 5)
    mask = rng.random((5, 3)) > 0.5

    def loss_of(arrays_):
        q = HeadParams(**arrays_)
        probs, _ = head_forward(x, q, spec, "train", dropout_mask=mask)
        return weighted_cross_entropy(probs, y)

    g = head_gradients(x, y, p, spec, dropout_masks=mask)
    num = finite_difference(loss_of, {k: v.copy() for k, v in p.items()})
    for name, arr in g.items():
        assert relative_error(arr, num[name]) < 1e-4


def test_saturated_gradient_is_tiny():
    spec = HeadSpec(2, 1, use_dropout=False)
    p = HeadParams(W1=np.array([[1.0, 0.0]]), b1=np.zeros(1), W2=np.array([[20.0], [-20.0]]), b2=np.zeros(2))
    _, g = loss_and_gradients(np.array([[3.0, 0.0]]), [0], p, spec)
    assert g.global_norm() < 1e-6


def test_gradient_defined_when_class_absent():
    spec = HeadSpec(3, 2, use_dropout=False)
    p = init_head(spec, 0)
    _, g = loss_and_gradients(np.ones((4, 3)), [0, 0, 0, 0], p, spec, ClassWeights((1.0, 5.0)))
    assert np.all(np.isfinite(g.W2)) and g.W2[1].any()


# ---------------------------------------------------------------- persistence


def test_head_file_round_trip_exact(tmp_path):
    spec = HeadSpec(7, 5, extra_dense=True, dropout_p=0.2)
    p = init_head(spec, 11)
    sha = save_head(p, spec, tmp_path / "h.json")
    q, spec2 = load_head(tmp_path / "h.json")
    assert spec2 == spec and q.digest() == p.digest()
    assert len(sha) == 64
    assert head_from_json(head_to_json(q, spec2))[0].digest() == p.digest()


def test_head_file_rejects_bad_shapes():
    spec = HeadSpec(3, 2)
    text = head_to_json(init_head(spec), spec).replace('"d_hidden": 2', '"d_hidden": 3')
    with pytest.raises(ConfigError):
        head_from_json(text)


def test_overflowing_logits_raise():
    spec = HeadSpec(2, 2, use_dropout=False)
    p = HeadParams(W1=np.eye(2), b1=np.zeros(2), W2=np.full((2, 2), 1e308), b2=np.zeros(2))
    with pytest.raises(NumericError):
        head_forward(np.array([10.0, 10.0]), p, spec)
