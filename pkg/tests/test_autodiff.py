import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnr_lab import autodiff as ad


def store_with(**arrays):
    s = ad.ParamStore()
    for name, value in arrays.items():
        s.add(name, value)
    return s


def test_sigmoid_and_softmax_fixed_points():
    assert ad.forward_op("sigmoid", [np.array([[0.0]])]).value[0, 0] == 0.5
    out = ad.forward_op("softmax_rows", [np.zeros((1, 3))]).value
    np.testing.assert_allclose(out, np.full((1, 3), 1.0 / 3.0), atol=1e-15)


def test_matmul_shapes():
    assert ad.matmul(np.ones((2, 3)), np.ones((3, 4))).shape == (2, 4)
    with pytest.raises(ad.ShapeError) as err:
        ad.matmul(np.ones((2, 3)), np.ones((2, 4)))
    assert "matmul" in str(err.value) and "(2, 3)" in str(err.value) and "(2, 4)" in str(err.value)


def test_unknown_op_kind():
    with pytest.raises(ValueError):
        ad.forward_op("tanh", [np.zeros((1, 1))])


def test_nan_raises_with_op_kind():
    with pytest.raises(ad.NumericalError) as err:
        ad.exp(np.array([[1e6]]))
    assert "exp" in str(err.value)


def test_log_is_clamped():
    assert np.isfinite(ad.log(np.array([[0.0]])).value).all()
    assert ad.log(np.array([[0.0]])).value[0, 0] == pytest.approx(math.log(1e-12))


def test_bce_examples():
    assert ad.bce_loss(np.array([[0.5]]), [[1]], [[1]]).value[0, 0] == pytest.approx(math.log(2), abs=1e-12)
    assert ad.bce_loss(np.array([[1 - 1e-7]]), [[1]]).value[0, 0] == pytest.approx(1e-7, rel=1e-3)
    # (-ln 0.9 - ln 0.8) / 2, evaluated by hand
    v = ad.bce_loss(np.array([[0.9], [0.2]]), [[1], [0]], [[1], [1]]).value[0, 0]
    assert v == pytest.approx(0.164252, abs=1e-6)
    assert v == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2, abs=1e-15)


def test_bce_mask_and_empty_batch():
    pred = np.array([[0.9], [0.3]])
    v = ad.bce_loss(pred, [[1], [1]], [[1], [0]]).value[0, 0]
    assert v == pytest.approx(-math.log(0.9), abs=1e-15)
    with pytest.raises(ValueError, match="empty batch"):
        ad.bce_loss(pred, [[1], [1]], [[0], [0]])


def test_bce_finite_at_hard_probabilities():
    s = store_with(p=np.array([[0.0], [1.0], [0.0], [1.0]]))
    loss = ad.bce_loss(s.node("p"), [[0], [1], [1], [0]])
    assert np.isfinite(loss.value).all()
    ad.backward(loss)
    assert np.isfinite(s.grads["p"]).all()


def test_backward_scalar_examples():
    s = store_with(x=np.array([[0.0]]))
    ad.backward(ad.mean(ad.sigmoid(s.node("x"))))
    assert s.grads["x"][0, 0] == pytest.approx(0.25, abs=1e-15)
    s = store_with(x=np.array([[3.0]]))
    x = s.node("x")
    ad.backward(ad.mean(ad.mul(x, x)))
    assert s.grads["x"][0, 0] == pytest.approx(6.0, abs=1e-12)


def test_backward_needs_scalar():
    s = store_with(x=np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.backward(ad.relu(s.node("x")))


def test_backward_accumulates_across_calls():
    s = store_with(x=np.array([[3.0]]))
    for _ in range(2):
        x = s.node("x")
        ad.backward(ad.mean(ad.mul(x, x)))
    assert s.grads["x"][0, 0] == pytest.approx(12.0)


def test_fan_out_sums_both_paths():
    s = store_with(w=np.array([[2.0]]))
    w = s.node("w")
    # f = w*3 + sigmoid(w): df/dw = 3 + s(1-s)
    f = ad.add(ad.scale(w, 3.0), ad.sigmoid(w))
    ad.backward(f)
    sg = 1.0 / (1.0 + math.exp(-2.0))
    assert s.grads["w"][0, 0] == pytest.approx(3.0 + sg * (1 - sg), abs=1e-14)


def test_frozen_node_gets_no_gradient():
    s = store_with(w=np.array([[2.0]]))
    ad.backward(ad.mean(ad.mul(s.node("w", frozen=True), np.array([[5.0]]))))
    assert s.grads["w"][0, 0] == 0.0


def test_backward_releases_graph():
    s = store_with(w=np.ones((2, 2)))
    h = ad.relu(s.node("w"))
    loss = ad.mean(h)
    ad.backward(loss)
    assert h.parents == [] and h.grad is None


# -- finite-difference checks --------------------------------------------------

UNARY = {
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "exp": ad.exp,
    "log": ad.log,
    "softmax_rows": ad.softmax_rows,
    "mean": ad.mean,
    "transpose": ad.transpose,
}


def _relu_safe(a):
    # keep entries away from the kink at 0 so central differences are valid
    return np.where(np.abs(a) < 0.05, a + 0.2, a)


@pytest.mark.parametrize("kind", sorted(UNARY))
@settings(max_examples=5, deadline=None)
@given(rows=st.integers(1, 8), cols=st.integers(1, 8), seed=st.integers(0, 2**16))
def test_unary_primitive_grad(kind, rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rows, cols))
    if kind == "log":
        a = np.abs(a) + 0.5
    if kind == "relu":
        a = _relu_safe(a)
    w = rng.normal(size=(cols, rows)) if kind == "transpose" else rng.normal(size=(rows, cols))
    s = store_with(a=a)

    def f():
        out = UNARY[kind](s.node("a"))
        weights = w if out.shape == w.shape else np.ones(out.shape)
        return ad.total(ad.mul(out, weights))

    assert ad.grad_check(f, s) < 1e-4


BINARY = {"matmul": ad.matmul, "add": ad.add, "sub": ad.sub, "mul": ad.mul}


@pytest.mark.parametrize("kind", sorted(BINARY))
@settings(max_examples=5, deadline=None)
@given(r=st.integers(1, 8), c=st.integers(1, 8), m=st.integers(1, 8), bcast=st.booleans(), seed=st.integers(0, 2**16))
def test_binary_primitive_grad(kind, r, c, m, bcast, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(r, c))
    if kind == "matmul":
        b = rng.normal(size=(c, m))
    else:
        b = rng.normal(size=(1, c) if bcast else (r, c))
    s = store_with(a=a, b=b)

    def f():
        out = BINARY[kind](s.node("a"), s.node("b"))
        return ad.total(ad.mul(out, np.cos(np.arange(out.value.size).reshape(out.shape))))

    assert ad.grad_check(f, s) < 1e-4


@settings(max_examples=10, deadline=None)
@given(r=st.integers(1, 8), c1=st.integers(1, 8), c2=st.integers(1, 8), seed=st.integers(0, 2**16))
def test_structural_ops_grad(r, c1, c2, seed):
    rng = np.random.default_rng(seed)
    s = store_with(a=rng.normal(size=(r, c1)), b=rng.normal(size=(r, c2)))
    idx = rng.integers(0, r, size=r + 2)
    lo = int(rng.integers(0, c1 + c2))
    weights = rng.normal(size=(r + 2, c1 + c2 - lo))

    def f():
        cat = ad.concat_cols([s.node("a"), s.node("b")])
        g = ad.gather_rows(cat, idx)
        return ad.total(ad.mul(ad.slice_cols(g, lo, c1 + c2), weights))

    assert ad.grad_check(f, s) < 1e-4


@settings(max_examples=10, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 2**16))
def test_bce_grad(n, seed):
    rng = np.random.default_rng(seed)
    s = store_with(p=rng.uniform(0.05, 0.95, size=(n, 1)))
    z = rng.integers(0, 2, size=(n, 1))
    mask = np.ones((n, 1))
    mask[0] = 1
    mask[1:] = rng.integers(0, 2, size=(n - 1, 1))
    assert ad.grad_check(lambda: ad.bce_loss(s.node("p"), z, mask), s) < 1e-4


def test_grad_check_linear_is_exact():
    s = store_with(w=np.arange(12.0).reshape(3, 4))
    assert ad.grad_check(lambda: ad.total(s.node("w")), s) < 1e-10


def test_grad_check_three_layer_sigmoid_mlp():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4))
    s = store_with(
        w1=rng.normal(size=(4, 6)), b1=rng.normal(size=(1, 6)),
        w2=rng.normal(size=(6, 6)), b2=rng.normal(size=(1, 6)),
        w3=rng.normal(size=(6, 1)), b3=rng.normal(size=(1, 1)),
    )
    z = rng.integers(0, 2, size=(5, 1))

    def f():
        h = ad.sigmoid(ad.add(ad.matmul(x, s.node("w1")), s.node("b1")))
        h = ad.sigmoid(ad.add(ad.matmul(h, s.node("w2")), s.node("b2")))
        p = ad.sigmoid(ad.add(ad.matmul(h, s.node("w3")), s.node("b3")))
        return ad.bce_loss(p, z)

    assert ad.grad_check(f, s, max_coords=None) < 1e-4


# -- Adam ----------------------------------------------------------------------


def test_adam_first_step_magnitude_is_lr():
    s = store_with(w=np.array([[1.0, -2.0]]))
    s.grads["w"][:] = [[0.3, -7.0]]
    ad.adam_step(s, lr=0.01, clip_norm=None)
    np.testing.assert_allclose(s["w"], [[1.0 - 0.01, -2.0 + 0.01]], atol=1e-9)
    assert s.steps["w"] == 1
    assert (s.grads["w"] == 0).all()


def test_adam_zero_grad_only_decays():
    s = store_with(w=np.array([[1.0]]))
    ad.adam_step(s, lr=0.1)
    assert s["w"][0, 0] == 1.0
    ad.adam_step(s, lr=0.1, weight_decay=0.5)
    assert s["w"][0, 0] < 1.0


def test_adam_zero_lr_is_identity():
    s = store_with(w=np.array([[1.5, 2.5]]))
    s.grads["w"][:] = 3.0
    ad.adam_step(s, lr=0.0, weight_decay=0.1)
    np.testing.assert_array_equal(s["w"], [[1.5, 2.5]])


def test_adam_converges_on_quadratic():
    s = store_with(w=np.array([[0.0]]))
    for _ in range(200):
        w = s.node("w")
        d = ad.sub(w, np.array([[2.0]]))
        ad.backward(ad.mean(ad.mul(d, d)))
        ad.adam_step(s, lr=0.1)
    assert abs(s["w"][0, 0] - 2.0) < 0.05


def test_adam_rejects_nan_gradient():
    s = store_with(w=np.array([[1.0]]))
    s.grads["w"][0, 0] = np.nan
    with pytest.raises(ad.NumericalError):
        ad.adam_step(s, 0.1)


def test_adam_global_clip():
    s = store_with(a=np.zeros((1, 1)), b=np.zeros((1, 1)))
    s.grads["a"][:] = 30.0
    s.grads["b"][:] = 40.0
    assert s.grad_norm() == pytest.approx(50.0)
    # with beta1 = 0 and huge eps the step is proportional to the clipped gradient
    ad.adam_step(s, lr=1.0, beta1=0.0, beta2=0.0, eps=1e12, clip_norm=5.0)
    np.testing.assert_allclose([s["a"][0, 0], s["b"][0, 0]], [-3.0e-12, -4.0e-12], rtol=1e-9)


# -- serialization -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = store_with(user_emb=rng.normal(size=(3, 2)), item_emb=rng.normal(size=(4, 2)))
    s.grads["user_emb"][:] = 1.0
    ad.adam_step(s, 0.1)
    s.save(tmp_path / "w.dnrw")
    t = ad.ParamStore.load(tmp_path / "w.dnrw")
    assert t.names() == s.names()
    for n in s.names():
        np.testing.assert_array_equal(t[n], s[n])
        assert t.steps[n] == 0  # Adam state is not checkpointed
    assert t.digest() == s.digest()


def test_checkpoint_layout():
    s = store_with(ab=np.array([[1.5, -2.0]]))
    raw = s.to_bytes()
    assert raw[:4] == b"DNRW"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2 and raw[12:14] == b"ab"
    assert int.from_bytes(raw[14:18], "little") == 1 and int.from_bytes(raw[18:22], "little") == 2
    np.testing.assert_array_equal(np.frombuffer(raw[22:], dtype="<f8"), [1.5, -2.0])


def test_checkpoint_rejects_bad_magic():
    with pytest.raises(ValueError):
        ad.ParamStore.from_bytes(b"XXXX" + bytes(8))
