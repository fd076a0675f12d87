"""Forward semantics of the tensor ops against brute-force references."""

import math

import numpy as np
import pytest

from promptcir import tensor as T
from promptcir.tensor import NonFiniteError, ShapeError, Tensor


def conv2d_loops(x, w, b, stride, padding, groups):
    """Direct six-nested-loop cross-correlation, the conv oracle."""
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo), dtype=np.float64)
    cg_out = O // groups
    for bi in range(B):
        for o in range(O):
            gi = o // cg_out
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(Cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (xp[bi, gi * Cg + c, i * stride + u, j * stride + v]
                                        * w[o, c, u, v])
                    out[bi, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def test_tensor_basics():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.dtype == np.float32
    assert t.data.flags["C_CONTIGUOUS"]
    assert not t.requires_grad and t.grad is None
    assert Tensor(3.0).item() == 3.0
    with pytest.raises(ShapeError):
        t.item()


def test_arithmetic_and_broadcast(rng):
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    b = rng.standard_normal((3, 1)).astype(np.float32)
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_array_equal((ta + tb).data, a + b)
    np.testing.assert_array_equal((ta - tb).data, a - b)
    np.testing.assert_array_equal((ta * tb).data, a * b)
    np.testing.assert_array_equal((ta / (tb + 10.0)).data, a / (b + 10.0))
    np.testing.assert_array_equal((-ta).data, -a)
    np.testing.assert_array_equal((2.0 * ta).data, 2.0 * a)


def test_mixed_dtype_rejected():
    a = Tensor(np.ones(3, np.float32))
    b = Tensor(np.ones(3, np.float64))
    with pytest.raises(ShapeError):
        T.add(a, b)


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((3, 4)).astype(np.float64)
    b = rng.standard_normal((4, 5)).astype(np.float64)
    want = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_matmul_batched_broadcast(rng):
    a = rng.standard_normal((2, 5, 3, 4)).astype(np.float32)
    b = rng.standard_normal((5, 4, 6)).astype(np.float32)
    got = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, a @ b, rtol=1e-6)
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@pytest.mark.parametrize("case", [
    dict(b=1, cin=3, cout=4, hw=(6, 5), k=3, stride=1, padding=1, groups=1, bias=True),
    dict(b=2, cin=4, cout=8, hw=(7, 7), k=3, stride=2, padding=1, groups=1, bias=False),
    dict(b=1, cin=6, cout=6, hw=(5, 6), k=3, stride=1, padding=1, groups=6, bias=True),
    dict(b=2, cin=4, cout=6, hw=(6, 6), k=3, stride=1, padding=0, groups=2, bias=True),
    dict(b=1, cin=5, cout=7, hw=(4, 4), k=1, stride=1, padding=0, groups=1, bias=True),
    dict(b=1, cin=2, cout=3, hw=(9, 8), k=5, stride=2, padding=2, groups=1, bias=False),
])
def test_conv2d_matches_loops(rng, case):
    x = rng.standard_normal((case["b"], case["cin"], *case["hw"])).astype(np.float64)
    w = rng.standard_normal(
        (case["cout"], case["cin"] // case["groups"], case["k"], case["k"])
    ).astype(np.float64)
    bias = rng.standard_normal(case["cout"]).astype(np.float64) if case["bias"] else None
    want = conv2d_loops(x, w, bias, case["stride"], case["padding"], case["groups"])
    got = T.conv2d(Tensor(x), Tensor(w), None if bias is None else Tensor(bias),
                   stride=case["stride"], padding=case["padding"],
                   groups=case["groups"]).data
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_conv2d_shape_validation():
    x = Tensor(np.ones((1, 4, 8, 8), np.float32))
    w = Tensor(np.ones((6, 2, 3, 3), np.float32))
    with pytest.raises(ShapeError):
        T.conv2d(x, w, groups=1)  # weight says 2 in-channels/group, groups=1 needs 4
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.ones((6, 1, 3, 3), np.float32)), groups=3)
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.ones((4, 4, 9, 9), np.float32)))  # kernel > input


def test_softmax_rows_sum_to_one(rng):
    x = rng.standard_normal((4, 7)).astype(np.float32) * 30.0
    s = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(4), atol=1e-6)
    np.testing.assert_allclose(
        T.softmax(Tensor(np.zeros(4, np.float32)), axis=0).data, np.full(4, 0.25), atol=1e-7)
    # shift stability: huge logits stay finite
    big = T.softmax(Tensor(np.array([1e4, 0.0, -1e4], np.float32)), axis=0).data
    assert np.isfinite(big).all() and abs(big.sum() - 1.0) < 1e-6


def test_layer_norm_zero_mean_unit_var(rng):
    x = rng.standard_normal((3, 16)).astype(np.float64) * 5 + 2
    y = T.layer_norm(Tensor(x), axis=-1, eps=1e-6).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)
    g = Tensor(np.full(16, 2.0))
    b = Tensor(np.full(16, 1.5))
    y2 = T.layer_norm(Tensor(x), axis=-1, gamma=g, beta=b).data
    np.testing.assert_allclose(y2, 2.0 * y + 1.5, atol=1e-9)
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(x), axis=-1, eps=0.0)


def test_gelu_reference_points():
    x = Tensor(np.array([0.0, 1.0, -1.0, 3.0], np.float64))
    y = T.gelu(x).data
    assert y[0] == 0.0
    assert abs(y[1] - 0.8413447460685429) < 1e-12
    assert abs(y[2] - (-0.15865525393145707)) < 1e-12
    assert abs(y[3] - 3.0 * 0.9986501019683699) < 1e-12


def test_relu_sigmoid():
    x = Tensor(np.array([-2.0, 0.0, 3.0], np.float64))
    np.testing.assert_array_equal(T.relu(x).data, [0.0, 0.0, 3.0])
    np.testing.assert_allclose(T.sigmoid(x).data,
                               1 / (1 + np.exp([2.0, 0.0, -3.0])), rtol=1e-12)


def test_l2_normalize_unit_norm(rng):
    x = rng.standard_normal((2, 3, 5)).astype(np.float64)
    y = T.l2_normalize(Tensor(x), axis=-1).data
    np.testing.assert_allclose((y * y).sum(axis=-1), 1.0, atol=1e-12)
    z = T.l2_normalize(Tensor(np.zeros((2, 3), np.float64)), axis=-1).data
    np.testing.assert_array_equal(z, 0.0)


def test_reshape_transpose_concat_narrow(rng):
    x = rng.standard_normal((2, 3, 4)).astype(np.float32)
    t = Tensor(x)
    np.testing.assert_array_equal(T.reshape(t, (6, 4)).data, x.reshape(6, 4))
    np.testing.assert_array_equal(T.transpose(t, (2, 0, 1)).data, x.transpose(2, 0, 1))
    c = T.concat([t, t], axis=1).data
    np.testing.assert_array_equal(c, np.concatenate([x, x], axis=1))
    np.testing.assert_array_equal(T.narrow(t, 1, 1, 2).data, x[:, 1:3])
    with pytest.raises(ShapeError):
        T.narrow(t, 1, 2, 5)
    parts = T.chunk(t, 2, axis=2)
    np.testing.assert_array_equal(parts[0].data, x[:, :, :2])
    np.testing.assert_array_equal(parts[1].data, x[:, :, 2:])
    with pytest.raises(ShapeError):
        T.chunk(t, 5, axis=2)


def test_roll_and_pads(rng):
    x = rng.standard_normal((1, 2, 4, 5)).astype(np.float32)
    t = Tensor(x)
    np.testing.assert_array_equal(
        T.roll(t, (1, -2), (2, 3)).data, np.roll(x, (1, -2), axis=(2, 3)))
    z = T.pad_zero(t, {2: (1, 2), 3: (0, 1)}).data
    assert z.shape == (1, 2, 7, 6)
    np.testing.assert_array_equal(z[:, :, 1:5, 0:5], x)
    assert z[:, :, 0].sum() == 0 and z[:, :, 5:].sum() == 0
    r = T.pad_reflect(t, {2: (2, 1), 3: (1, 2)}).data
    np.testing.assert_array_equal(
        r, np.pad(x, ((0, 0), (0, 0), (2, 1), (1, 2)), mode="reflect"))
    with pytest.raises(ShapeError):
        T.pad_reflect(t, {2: (4, 0)})


def test_crop_and_index_select(rng):
    x = rng.standard_normal((2, 3, 6, 7)).astype(np.float32)
    got = T.crop(Tensor(x), {2: (1, 4), 3: (0, 5)}).data
    np.testing.assert_array_equal(got, x[:, :, 1:4, 0:5])
    table = rng.standard_normal((9, 4)).astype(np.float32)
    idx = np.array([0, 3, 3, 8])
    np.testing.assert_array_equal(T.index_select(Tensor(table), idx).data, table[idx])


def test_pixel_shuffle_round_trip(rng):
    x = rng.standard_normal((2, 8, 3, 5)).astype(np.float32)
    t = Tensor(x)
    back = T.pixel_unshuffle(T.pixel_shuffle(t, 2), 2).data
    assert back.dtype == x.dtype and (back == x).all()
    y = rng.standard_normal((1, 3, 6, 4)).astype(np.float32)
    back2 = T.pixel_shuffle(T.pixel_unshuffle(Tensor(y), 2), 2).data
    assert (back2 == y).all()
    with pytest.raises(ShapeError):
        T.pixel_shuffle(t, 3)
    with pytest.raises(ShapeError):
        T.pixel_unshuffle(Tensor(y), 4)


def test_pixel_unshuffle_layout():
    # 1 channel, 2x2 image: output channel order is (row-offset, col-offset)
    x = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2)
    y = T.pixel_unshuffle(Tensor(x), 2).data
    np.testing.assert_array_equal(y.reshape(4), [0, 1, 2, 3])


def test_unfold_matches_torch_layout(rng):
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float64)
    out = T.unfold(Tensor(x), kernel=2, stride=2, padding=0).data
    assert out.shape == (1, 2 * 4, 4)
    # patch 0 is the top-left 2x2 block, rows ordered (c, ki, kj)
    want0 = np.stack([x[0, c, i, j] for c in range(2) for i in range(2) for j in range(2)])
    np.testing.assert_array_equal(out[0, :, 0], want0)
    # padded overlapping case against a naive gather
    o2 = T.unfold(Tensor(x), kernel=3, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = []
    for i in range(0, 3, 2):
        for j in range(0, 3, 2):
            patches.append(xp[0, :, i:i + 3, j:j + 3].reshape(-1))
    np.testing.assert_array_equal(o2[0], np.stack(patches, axis=1))


def test_bilinear_resize_identity_and_average(rng):
    x = rng.standard_normal((1, 3, 5, 7)).astype(np.float32)
    same = T.interpolate_bilinear(Tensor(x), 5, 7).data
    assert (same == x).all()
    # 2x2 constant blocks downsampled 2x -> exact block means
    y = np.zeros((1, 1, 4, 4), np.float64)
    y[0, 0, :2, :2], y[0, 0, :2, 2:], y[0, 0, 2:, :2], y[0, 0, 2:, 2:] = 1, 2, 3, 4
    d = T.interpolate_bilinear(Tensor(y), 2, 2).data
    np.testing.assert_allclose(d[0, 0], [[1, 2], [3, 4]], atol=1e-12)
    up = T.interpolate_bilinear(Tensor(np.ones((1, 1, 3, 3), np.float32)), 9, 11).data
    np.testing.assert_allclose(up, 1.0, atol=1e-6)  # constants stay constant


def test_reductions(rng):
    x = rng.standard_normal((3, 4, 5)).astype(np.float64)
    t = Tensor(x)
    np.testing.assert_allclose(T.sum_(t).item(), x.sum(), rtol=1e-12)
    np.testing.assert_allclose(T.sum_(t, axis=1).data, x.sum(axis=1), rtol=1e-12)
    np.testing.assert_allclose(T.mean_(t, axis=(0, 2)).data, x.mean(axis=(0, 2)), rtol=1e-12)
    np.testing.assert_allclose(T.mean_(t, axis=1, keepdims=True).data,
                               x.mean(axis=1, keepdims=True), rtol=1e-12)


def test_finite_check_names_op_and_scope():
    x = Tensor(np.array([1.0, 0.0], np.float32))
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteError) as exc:
            with T.scope("encoder"), T.scope("block3"):
                T.div(x, Tensor(np.zeros(2, np.float32)))
    msg = str(exc.value)
    assert "div" in msg and "encoder/block3" in msg


def test_scope_stack_restores_after_error():
    with np.errstate(divide="ignore"):
        with pytest.raises(NonFiniteError):
            with T.scope("outer"):
                T.div(Tensor(np.ones(1)), Tensor(np.zeros(1)))
    assert T._SCOPE == []


def test_deterministic_env_flag(monkeypatch):
    monkeypatch.setenv("PCIR_DETERMINISTIC", "1")
    assert T.deterministic()
    monkeypatch.setenv("PCIR_DETERMINISTIC", "0")
    assert not T.deterministic()
    monkeypatch.delenv("PCIR_DETERMINISTIC")
    assert T.deterministic()


def test_repeated_forward_is_bit_identical(rng):
    x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert (a == b).all()
