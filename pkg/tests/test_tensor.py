from unittest import mock

from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
import numpy as np
import pytest

from fadpy.errors import NumericalError, ShapeError
from fadpy.tensor import (
    add,
    bernoulli_kl_loss,
    concat,
    conv2d,
    conv_output_size,
    cross_entropy,
    default_num_groups,
    exp,
    global_avg_pool,
    group_norm,
    iou_loss,
    mse_loss,
    mul,
    no_grad,
    pool2d,
    relu,
    sigmoid,
    sigmoid_focal_loss,
    softmax,
    softmax_array,
    subsample,
    sum_all,
    Tensor,
    weighted_sum,
)


# =======
# helpers
# =======


def numeric_grad(fn, array, eps=1e-6):
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + eps
        plus = fn()
        array[index] = original - eps
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2 * eps)
    return grad


def assert_gradients(build, *arrays, seed=0, rtol=1e-4, atol=1e-6):
    """Compare backward() with central differences of sum(build(...) * R)."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with no_grad():
        shape = build(*tensors).shape
    projection = Tensor(rng.standard_normal(shape))

    def loss_value():
        with no_grad():
            return float(sum_all(mul(build(*tensors), projection)).item())

    loss = sum_all(mul(build(*tensors), projection))
    loss.backward()
    for tensor in tensors:
        expected = numeric_grad(loss_value, tensor.data)
        np.testing.assert_allclose(tensor.grad, expected, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ======
# Tensor
# ======


def test_tensor__default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.arange(3)).dtype == np.float32


def test_tensor__keeps_float64_arrays():
    assert Tensor(np.zeros(3)).dtype == np.float64


def test_tensor__item():
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_tensor__detach_copies():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x.detach()
    y.data[0] = 10.0
    assert x.data[0] == 1.0
    assert not y.requires_grad


def test_tensor__check_finite():
    Tensor([1.0]).check_finite()
    with pytest.raises(NumericalError):
        Tensor([np.nan]).check_finite("logits")


def test_backward__needs_scalar_without_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_backward__accumulates_shared_subexpressions():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = mul(x, x) + x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_backward__deep_chain_does_not_recurse():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 1.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_backward__non_finite_gradient_names_op():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = mul(x, Tensor(np.array([np.inf])))
    with pytest.raises(NumericalError) as exc_info:
        y.sum().backward()
    assert exc_info.value.node == "mul"


def test_no_grad__records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert y.is_leaf


# ===========
# Elementwise
# ===========


def test_add__broadcast_gradient(rng):
    assert_gradients(add, rng.standard_normal((2, 3, 4, 4)),
                     rng.standard_normal((1, 3, 1, 1)))


def test_mul__gradient(rng):
    assert_gradients(mul, rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))


def test_relu__gradient(rng):
    assert_gradients(relu, rng.standard_normal((2, 3, 4, 4)))


def test_relu__zeroes_negative():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_and_exp__gradients(rng):
    assert_gradients(sigmoid, rng.standard_normal((3, 4)))
    assert_gradients(exp, rng.standard_normal((3, 4)))


def test_sigmoid__extreme_values_are_finite():
    out = sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    assert np.isfinite(out).all()
    assert out.tolist() == pytest.approx([0.0, 0.5, 1.0])


# =========
# Structure
# =========


def test_concat__gradient(rng):
    assert_gradients(
        lambda a, b: concat([a, b], axis=1),
        rng.standard_normal((2, 3, 4, 4)),
        rng.standard_normal((2, 2, 4, 4)),
    )


def test_concat__mismatch():
    with pytest.raises(ShapeError):
        concat([Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 2, 3, 3)))])


def test_weighted_sum__none_is_zero_map(rng):
    a = rng.standard_normal((1, 2, 3, 3))
    out = weighted_sum(Tensor(np.array([0.25, 0.75])), [Tensor(a), None], a.shape)
    np.testing.assert_allclose(out.data, 0.25 * a)


def test_weighted_sum__gradient(rng):
    shape = (1, 2, 3, 3)
    assert_gradients(
        lambda w, a, b: weighted_sum(w, [a, None, b], shape),
        rng.standard_normal(3),
        rng.standard_normal(shape),
        rng.standard_normal(shape),
    )


def test_weighted_sum__weight_count_mismatch():
    with pytest.raises(ShapeError):
        weighted_sum(Tensor(np.ones(2)), [None], (1, 1, 1, 1))


def test_global_avg_pool_and_subsample__gradients(rng):
    assert_gradients(global_avg_pool, rng.standard_normal((2, 3, 4, 4)))
    assert_gradients(lambda x: subsample(x, 2), rng.standard_normal((1, 2, 5, 5)))


def test_subsample__shape():
    assert subsample(Tensor(np.ones((1, 1, 5, 5))), 2).shape == (1, 1, 3, 3)


# =======
# Softmax
# =======


finite_vectors = arrays(
    np.float64,
    st.integers(1, 12),
    elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False),
)


@given(finite_vectors)
def test_softmax__sums_to_one(logits):
    weights = softmax(Tensor(logits)).data
    assert weights.sum() == pytest.approx(1.0)
    assert (weights >= 0).all()


@given(finite_vectors, st.floats(-100, 100))
def test_softmax__shift_invariant(logits, shift):
    np.testing.assert_allclose(
        softmax_array(logits), softmax_array(logits + shift), rtol=1e-9, atol=1e-12
    )


def test_softmax__large_logits_are_stable():
    weights = softmax(Tensor(np.array([1000.0, 1000.0]))).data
    assert weights.tolist() == pytest.approx([0.5, 0.5])


def test_softmax__empty():
    with pytest.raises(ValueError):
        softmax(Tensor(np.zeros(0)))


def test_softmax__non_finite():
    with pytest.raises(NumericalError):
        softmax(Tensor(np.array([0.0, np.nan])))


def test_softmax__gradient(rng):
    assert_gradients(softmax, rng.standard_normal(5))


# ===========
# Convolution
# ===========


@pytest.mark.parametrize(
    "size, kernel, stride, dilation, expected",
    (
        (8, 3, 1, 1, 8),
        (8, 3, 1, 2, 8),
        (8, 3, 1, 3, 8),
        (8, 1, 1, 1, 8),
        (8, 3, 2, 1, 4),
        (7, 3, 2, 1, 4),
        (8, 1, 2, 1, 4),
    ),
)
def test_conv_output_size(size, kernel, stride, dilation, expected):
    assert conv_output_size(size, kernel, stride, dilation) == expected


@pytest.mark.parametrize(
    "kernel, stride, dilation, groups",
    (
        (3, 1, 1, 1),
        (1, 1, 1, 1),
        (3, 2, 1, 1),
        (3, 1, 2, 4),
        (3, 1, 3, 4),
        (3, 1, 1, 2),
    ),
)
def test_conv2d__gradient(rng, kernel, stride, dilation, groups):
    x = rng.standard_normal((2, 4, 7, 7))
    w = rng.standard_normal((4, 4 // groups, kernel, kernel))
    b = rng.standard_normal(4)
    assert_gradients(
        lambda x, w, b: conv2d(x, w, b, stride=stride, dilation=dilation, groups=groups),
        x, w, b,
    )


@pytest.mark.parametrize(
    "dilation, groups",
    ((1, 1), (2, 1), (3, 1), (2, 4), (3, 4), (1, 2)),
)
def test_conv2d__matches_direct_sum(rng, dilation, groups):
    x = rng.standard_normal((2, 4, 8, 8))
    w = rng.standard_normal((4, 4 // groups, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), dilation=dilation, groups=groups).data
    d = dilation
    padded = np.pad(x, ((0, 0), (0, 0), (d, d), (d, d)))
    per_group = 4 // groups
    expected = np.zeros((2, 4, 8, 8))
    for n in range(2):
        for o in range(4):
            start = (o // per_group) * per_group
            for i in range(8):
                for j in range(8):
                    patch = padded[n, start:start + per_group,
                                   i:i + 2 * d + 1:d, j:j + 2 * d + 1:d]
                    expected[n, o, i, j] = np.sum(patch * w[o])
    assert np.max(np.abs(out - expected)) < 1e-5


def test_conv2d__all_ones():
    out = conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3)))).data
    assert out[0, 0, 2, 2] == 9.0
    assert out[0, 0, 0, 0] == 4.0
    assert out[0, 0, 0, 2] == 6.0


def test_conv2d__delta_kernel_dilated():
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1.0
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = conv2d(Tensor(x), Tensor(w), dilation=3).data
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize(
    "x_shape, w_shape, stride, dilation, groups",
    (
        ((1, 4, 8, 8), (4, 4, 5, 5), 1, 1, 1),
        ((1, 4, 8, 8), (4, 4, 3, 3), 3, 1, 1),
        ((1, 4, 8, 8), (4, 4, 3, 3), 1, 4, 1),
        ((1, 4, 8, 8), (4, 2, 3, 3), 1, 1, 3),
        ((1, 4, 8, 8), (4, 3, 3, 3), 1, 1, 1),
        ((4, 8, 8), (4, 4, 3, 3), 1, 1, 1),
    ),
)
def test_conv2d__rejects(x_shape, w_shape, stride, dilation, groups):
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros(x_shape)), Tensor(np.zeros(w_shape)),
               stride=stride, dilation=dilation, groups=groups)


# =======
# Pooling
# =======


def test_pool2d__max_forward():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = pool2d(Tensor(x), "max").data[0, 0]
    assert out[0, 0] == 5
    assert out[3, 3] == 15
    assert out[1, 1] == 10


def test_pool2d__avg_counts_padding():
    out = pool2d(Tensor(np.ones((1, 1, 3, 3))), "avg").data[0, 0]
    assert out[1, 1] == pytest.approx(1.0)
    assert out[0, 0] == pytest.approx(4 / 9)


@pytest.mark.parametrize("kind", ("max", "avg"))
@pytest.mark.parametrize("stride", (1, 2))
def test_pool2d__gradient(rng, kind, stride):
    assert_gradients(lambda x: pool2d(x, kind, stride), rng.standard_normal((1, 2, 5, 5)))


def test_pool2d__unknown_kind():
    with pytest.raises(ValueError):
        pool2d(Tensor(np.zeros((1, 1, 3, 3))), "min")


# ==========
# Group norm
# ==========


@pytest.mark.parametrize(
    "channels, expected",
    ((16, 8), (12, 6), (8, 8), (5, 5), (9, 3), (7, 7), (1, 1), (32, 8)),
)
def test_default_num_groups(channels, expected):
    assert default_num_groups(channels) == expected


def test_group_norm__normalizes(rng):
    x = rng.standard_normal((2, 4, 3, 3)) * 5 + 3
    out = group_norm(Tensor(x), 2, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    grouped = out.reshape(2, 2, -1)
    np.testing.assert_allclose(grouped.mean(axis=-1), 0, atol=1e-10)
    np.testing.assert_allclose(grouped.var(axis=-1), 1, rtol=1e-3)


def test_group_norm__gradient(rng):
    assert_gradients(
        lambda x, g, b: group_norm(x, 2, g, b),
        rng.standard_normal((2, 4, 3, 3)),
        rng.standard_normal(4),
        rng.standard_normal(4),
    )


@pytest.mark.parametrize("groups", (0, 3, 5))
def test_group_norm__bad_groups(groups):
    with pytest.raises(ShapeError):
        group_norm(Tensor(np.ones((1, 4, 2, 2))), groups,
                   Tensor(np.ones(4)), Tensor(np.zeros(4)))


# ======
# Losses
# ======


def test_sigmoid_focal_loss__perfect_prediction():
    targets = np.zeros((1, 3, 4, 4))
    targets[0, 1, 2, 2] = 1.0
    logits = np.where(targets > 0, 20.0, -20.0)
    assert sigmoid_focal_loss(Tensor(logits), targets).item() < 1e-3


def test_sigmoid_focal_loss__gradient(rng):
    targets = (rng.random((1, 2, 3, 3)) > 0.7).astype(np.float64)
    assert_gradients(lambda x: sigmoid_focal_loss(x, targets),
                     rng.standard_normal(targets.shape))


def test_iou_loss__zero_on_exact_distances(rng):
    target = rng.uniform(0.5, 3.0, (1, 4, 3, 3))
    mask = np.ones((1, 1, 3, 3), dtype=bool)
    loss = iou_loss(Tensor(np.log(target)), target, mask)
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_iou_loss__ignores_background(rng):
    raw = rng.standard_normal((1, 4, 3, 3))
    mask = np.zeros((1, 1, 3, 3), dtype=bool)
    assert iou_loss(Tensor(raw), np.ones_like(raw), mask).item() == 0.0


def test_iou_loss__gradient(rng):
    target = rng.uniform(0.5, 3.0, (1, 4, 3, 3))
    mask = rng.random((1, 1, 3, 3)) > 0.3
    assert_gradients(lambda x: iou_loss(x, target, mask),
                     rng.standard_normal(target.shape))


def test_bernoulli_kl_loss__zero_iff_match(rng):
    targets = rng.uniform(0.1, 0.9, (1, 1, 3, 3))
    mask = np.ones_like(targets, dtype=bool)
    logits = np.log(targets / (1 - targets))
    loss = bernoulli_kl_loss(Tensor(logits), targets, mask)
    assert loss.item() == pytest.approx(0, abs=1e-9)
    assert bernoulli_kl_loss(Tensor(logits + 0.5), targets, mask).item() > 0


def test_bernoulli_kl_loss__gradient(rng):
    targets = rng.uniform(0.0, 1.0, (1, 1, 3, 3))
    mask = rng.random((1, 1, 3, 3)) > 0.3
    assert_gradients(
        lambda x: bernoulli_kl_loss(x, targets, mask), rng.standard_normal(targets.shape)
    )


def test_bernoulli_kl_loss__clamped_entries_have_no_gradient(rng):
    targets = rng.uniform(0.1, 0.9, (1, 1, 3, 3))
    mask = np.ones_like(targets, dtype=bool)
    logits = Tensor(np.log(targets / (1 - targets)), requires_grad=True)
    shifted = mock.patch("fadpy.tensor._softplus",
                         side_effect=lambda x: np.logaddexp(0, x) - 1)
    with shifted:
        loss = bernoulli_kl_loss(logits, targets, mask)
    loss.backward()
    assert loss.item() == 0
    np.testing.assert_array_equal(logits.grad, np.zeros_like(targets))


def test_cross_entropy__uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((3, 4, 1, 1))), np.array([0, 1, 3]))
    assert loss.item() == pytest.approx(np.log(4))


def test_cross_entropy__gradient(rng):
    labels = np.array([2, 0, 1])
    assert_gradients(lambda x: cross_entropy(x, labels), rng.standard_normal((3, 3)))


def test_cross_entropy__bad_labels():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_mse_loss(rng):
    target = rng.standard_normal((2, 3))
    assert mse_loss(Tensor(target), target).item() == 0.0
    assert_gradients(lambda x: mse_loss(x, target), rng.standard_normal((2, 3)))
