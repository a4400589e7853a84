import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uhrkit import ops
from uhrkit.ops import (
    OddChannelCount,
    OpTape,
    ShapeMismatch,
    TapeMismatch,
    Tensor,
    add,
    backward,
    batchnorm_infer,
    bilinear_upsample,
    channel_avg_pool2,
    concat_channels,
    conv2d,
    relu,
)


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# convolution


def naive_conv2d(x, w, stride=1, pad=None):
    """Quadruple-loop reference convolution, independent of the fast path."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if pad is None:
        pad = kh // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += x.dtype.type(
                                    xp[b, c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj]
                                )
                    y[b, o, i, j] = acc
    return y


def test_conv_identity_kernel():
    x = _rng().normal(size=(1, 1, 5, 5)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    assert np.allclose(conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_all_ones_counts_window():
    x = np.ones((1, 1, 4, 4), dtype=np.float32)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    y = conv2d(Tensor(x), Tensor(w)).data[0, 0]
    assert y[0, 0] == 4 and y[0, 3] == 4 and y[3, 0] == 4 and y[3, 3] == 4
    assert y[0, 1] == 6 and y[1, 0] == 6 and y[2, 3] == 6
    assert (y[1:3, 1:3] == 9).all()


def test_conv_1x1_scales():
    x = _rng(1).normal(size=(2, 3, 4, 4)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 2.0
    assert np.allclose(conv2d(Tensor(x), Tensor(w)).data, 2 * x)


def test_conv_matches_naive_oracle():
    rng = _rng(42)
    for trial in range(20):
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
        h = int(rng.integers(3, 9))
        wd = int(rng.integers(3, 9))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        x = rng.normal(size=(n, cin, h, wd))
        w = rng.normal(size=(cout, cin, k, k))
        got = ops.conv2d_fwd(x, w, stride)
        want = naive_conv2d(x, w, stride)
        assert np.max(np.abs(got - want)) < 1e-12


def test_conv_shape_mismatch():
    x = np.zeros((1, 3, 4, 4), dtype=np.float32)
    w = np.zeros((2, 4, 3, 3), dtype=np.float32)
    with pytest.raises(ShapeMismatch):
        conv2d(Tensor(x), Tensor(w))


def test_conv_stride2_output_size():
    x = np.zeros((1, 2, 8, 8), dtype=np.float32)
    w = np.zeros((5, 2, 3, 3), dtype=np.float32)
    assert conv2d(Tensor(x), Tensor(w), stride=2).shape == (1, 5, 4, 4)


# ---------------------------------------------------------------------------
# batchnorm


def test_batchnorm_identity():
    x = _rng(2).normal(size=(1, 3, 4, 4))
    ones, zeros = np.ones(3), np.zeros(3)
    y = batchnorm_infer(Tensor(x), Tensor(ones), Tensor(zeros), Tensor(zeros), Tensor(ones), eps=1e-12)
    assert np.allclose(y.data, x, atol=1e-9)


def test_batchnorm_constant_input_gives_beta():
    x = np.full((1, 2, 3, 3), 7.0)
    mean = np.full(2, 7.0)
    beta = np.array([0.5, -1.0])
    y = batchnorm_infer(Tensor(x), Tensor(np.ones(2)), Tensor(beta), Tensor(mean), Tensor(np.ones(2)))
    assert np.allclose(y.data[0, 0], 0.5) and np.allclose(y.data[0, 1], -1.0)


def test_batchnorm_direct_substitution():
    # gamma 2, beta 1, mean 0, var 3, eps 1, x 4 -> 2*4/sqrt(4) + 1 = 5
    x = np.full((1, 1, 1, 1), 4.0)
    y = batchnorm_infer(
        Tensor(x), Tensor(np.array([2.0])), Tensor(np.array([1.0])),
        Tensor(np.array([0.0])), Tensor(np.array([3.0])), eps=1.0,
    )
    assert np.allclose(y.data, 5.0)


# ---------------------------------------------------------------------------
# relu, pooling, concat, add


def test_relu_examples():
    x = np.array([[-1.0, 0.0, 2.0]]).reshape(1, 1, 1, 3)
    assert np.array_equal(relu(Tensor(x)).data.ravel(), [0, 0, 2])
    assert (relu(Tensor(-np.ones((1, 2, 2, 2)))).data == 0).all()


def test_relu_idempotent():
    x = _rng(3).normal(size=(2, 3, 4, 4))
    once = relu(Tensor(x)).data
    assert np.array_equal(relu(Tensor(once)).data, once)


def test_upsample_constant():
    x = np.full((1, 2, 3, 3), 4.5)
    y = bilinear_upsample(Tensor(x)).data
    assert y.shape == (1, 2, 6, 6) and np.allclose(y, 4.5)


def test_upsample_corner_aligned_ramp():
    x = np.array([0.0, 3.0]).reshape(1, 1, 1, 2)
    y = bilinear_upsample(Tensor(x)).data
    assert y.shape == (1, 1, 2, 4)
    assert np.allclose(y[0, 0, 0], [0, 1, 2, 3])
    assert np.allclose(y[0, 0, 1], [0, 1, 2, 3])


def test_upsample_single_pixel():
    x = np.array([[[[2.5]]]])
    assert np.allclose(bilinear_upsample(Tensor(x)).data, np.full((1, 1, 2, 2), 2.5))


def test_channel_pool_definition():
    x = np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1)
    y = channel_avg_pool2(Tensor(x)).data
    assert np.allclose(y.ravel(), [0.5, 2.5])


def test_channel_pool_duplicated_channels():
    x = _rng(4).normal(size=(1, 3, 2, 2))
    dup = np.repeat(x, 2, axis=1)
    assert np.allclose(channel_avg_pool2(Tensor(dup)).data, x)


def test_channel_pool_shape_and_odd():
    x = np.zeros((1, 18, 5, 7))
    assert channel_avg_pool2(Tensor(x)).shape == (1, 9, 5, 7)
    with pytest.raises(OddChannelCount):
        channel_avg_pool2(Tensor(np.zeros((1, 3, 2, 2))))


def test_concat_and_add():
    a = _rng(5).normal(size=(1, 4, 2, 2))
    b = _rng(6).normal(size=(1, 5, 2, 2))
    cat = concat_channels([Tensor(a), Tensor(b)]).data
    assert cat.shape == (1, 9, 2, 2)
    assert np.array_equal(cat[:, :4], a) and np.array_equal(cat[:, 4:], b)
    assert np.array_equal(add(Tensor(a), Tensor(np.zeros_like(a))).data, a)
    with pytest.raises(ShapeMismatch):
        add(Tensor(a), Tensor(b))


# ---------------------------------------------------------------------------
# linearity properties

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@given(finite, finite, st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_linear_ops_superpose(a, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 4, 4))
    y = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    mix = a * x + b * y
    for f in (
        lambda t: ops.conv2d_fwd(t, w),
        ops.bilinear_up2_fwd,
        ops.channel_pool2_fwd,
        lambda t: ops.concat_fwd([t, t]),
    ):
        assert np.allclose(f(mix), a * f(x) + b * f(y), atol=1e-9)


def test_forward_determinism():
    rng = _rng(9)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    first = ops.conv2d_fwd(x, w)
    for _ in range(3):
        assert np.array_equal(ops.conv2d_fwd(x, w), first)


# ---------------------------------------------------------------------------
# tape and gradients


def test_backward_relu_examples():
    for val, expect in ((2.0, 1.0), (-2.0, 0.0)):
        tape = OpTape()
        x = Tensor(np.array([[[[val]]]]))
        out = relu(x, tape=tape)
        backward(tape, np.ones_like(out.data))
        assert x.grad.ravel()[0] == expect


def test_backward_1x1_conv_weight_is_input_dot_grad():
    rng = _rng(7)
    x = Tensor(rng.normal(size=(1, 1, 3, 3)))
    w = Tensor(rng.normal(size=(1, 1, 1, 1)))
    tape = OpTape()
    out = conv2d(x, w, tape=tape)
    g = rng.normal(size=out.shape)
    backward(tape, g)
    assert np.allclose(w.grad.ravel()[0], np.sum(x.data * g))


def test_backward_tape_mismatch():
    tape = OpTape()
    with pytest.raises(TapeMismatch):
        backward(tape, np.ones((1, 1, 1, 1)))
    x = Tensor(np.ones((1, 2, 2, 2)))
    relu(x, tape=tape)
    with pytest.raises(TapeMismatch):
        backward(tape, np.ones((1, 2, 2, 3)))


def _central_diff(f, arr, idx, eps=1e-4):
    plus = arr.copy()
    plus.flat[idx] += eps
    minus = arr.copy()
    minus.flat[idx] -= eps
    return (f(plus) - f(minus)) / (2 * eps)


@pytest.mark.parametrize(
    "name",
    ["conv_x", "conv_w", "bn", "upsample", "chpool", "concat", "add", "relu"],
)
def test_primitive_gradients_match_central_differences(name):
    rng = _rng(11)
    x = rng.normal(size=(2, 3, 6, 6))
    x += 0.25 * np.sign(x)  # keep relu inputs away from the kink
    w = rng.normal(size=(4, 3, 3, 3))
    x2 = rng.normal(size=(2, 3, 6, 6))
    gamma, beta = rng.normal(size=3) + 2.0, rng.normal(size=3)
    mean, var = rng.normal(size=3) * 0.1, rng.random(3) + 0.5
    weight = rng.normal(size=(2, 4, 6, 6))  # fixed projection for a scalar loss

    def run(name, arrays):
        tape = OpTape()
        ts = [Tensor(a) for a in arrays]
        if name in ("conv_x", "conv_w"):
            out = conv2d(ts[0], ts[1], tape=tape)
            loss_w = weight
        elif name == "bn":
            out = batchnorm_infer(ts[0], ts[1], ts[2], ts[3], ts[4], tape=tape)
            loss_w = weight[:, :3]
        elif name == "upsample":
            out = bilinear_upsample(ts[0], tape=tape)
            loss_w = np.ones((2, 3, 12, 12))
        elif name == "chpool":
            out = channel_avg_pool2(concat_channels([ts[0], ts[0]], tape=tape), tape=tape)
            loss_w = weight[:, :3]
        elif name == "concat":
            out = concat_channels([ts[0], ts[1]], tape=tape)
            loss_w = np.ones((2, 6, 6, 6))
        elif name == "add":
            out = add(ts[0], ts[1], tape=tape)
            loss_w = weight[:, :3]
        else:
            out = relu(ts[0], tape=tape)
            loss_w = weight[:, :3]
        return ts, tape, out, loss_w

    arrays = {
        "conv_x": [x, w],
        "conv_w": [x, w],
        "bn": [x, gamma, beta, mean, var],
        "upsample": [x],
        "chpool": [x],
        "concat": [x, x2],
        "add": [x, x2],
        "relu": [x],
    }[name]
    target = {"conv_x": 0, "conv_w": 1, "bn": 4, "upsample": 0, "chpool": 0, "concat": 1, "add": 0, "relu": 0}[name]

    ts, tape, out, loss_w = run(name, arrays)
    backward(tape, loss_w)
    analytic = ts[target].grad

    def loss(perturbed):
        arrs = list(arrays)
        arrs[target] = perturbed
        _, _, o, lw = run(name, arrs)
        return float(np.sum(o.data * lw))

    rng2 = np.random.default_rng(13)
    size = arrays[target].size
    for idx in rng2.choice(size, size=min(12, size), replace=False):
        fd = _central_diff(loss, arrays[target], idx)
        a = analytic.flat[idx]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        assert rel < 1e-5, f"{name}[{idx}]: analytic {a} vs fd {fd}"


# ---------------------------------------------------------------------------
# tensor file format


def test_tensor_file_round_trip(tmp_path):
    t = Tensor(_rng(21).normal(size=(2, 3, 4, 5)).astype(np.float32))
    path = tmp_path / "x.hrtf"
    ops.write_tensor(path, t)
    back = ops.read_tensor(path)
    assert back.data.dtype == np.float32
    assert np.array_equal(back.data, t.data)
    ops.write_tensor(path, back)
    assert path.read_bytes() == path.read_bytes()


def test_tensor_file_float64(tmp_path):
    t = Tensor(_rng(22).normal(size=(3, 2)))
    path = tmp_path / "x64.hrtf"
    ops.write_tensor(path, t)
    assert np.array_equal(ops.read_tensor(path).data, t.data)


def test_tensor_file_errors(tmp_path):
    path = tmp_path / "bad.hrtf"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(ops.FormatError):
        ops.read_tensor(path)
    ops.write_tensor(path, Tensor(np.zeros((2, 2), dtype=np.float32)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])  # truncated payload
    with pytest.raises(ops.FormatError):
        ops.read_tensor(path)
