import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctd2gan.tensor import autograd, checkpoint, conv, nn, ops
from ctd2gan.tensor.autograd import GraphError, ShapeError, Tensor
from ctd2gan.tensor.optim import Adam, adam_step


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# -- autograd core ----------------------------------------------------------
def test_backward_accumulates_through_shared_subexpressions():
    x = leaf([1.0, 2.0, 3.0])
    y = x * x + x
    ops.sum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_double_backward_cubic():
    x = leaf([0.5, -2.0])
    (g,) = autograd.grad(ops.sum(x ** 3), [x], create_graph=True)
    (gg,) = autograd.grad(ops.sum(g), [x])
    np.testing.assert_allclose(g.data, 3 * x.data ** 2)
    np.testing.assert_allclose(gg.data, 6 * x.data)


def test_consumed_graph_raises():
    x = leaf([1.0])
    y = ops.sum(x * x)
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with autograd.no_grad():
        y = x * 3
    assert not y.requires_grad


def test_grad_of_unreached_input_is_zero():
    x, z = leaf([1.0]), leaf([4.0, 5.0])
    gx, gz = autograd.grad(ops.sum(x * 2), [x, z])
    np.testing.assert_array_equal(gz.data, 0.0)
    np.testing.assert_array_equal(gx.data, 2.0)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_softmax_rows_sum_to_one_for_large_logits():
    x = Tensor(np.array([[1000.0, 1001.0, 999.0], [-5.0, 0.0, 5.0]]))
    s = ops.softmax(x, axis=-1).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(s))


def test_selu_constants_match_reference_values():
    assert ops.SELU_SCALE == pytest.approx(1.0507009873554805, abs=1e-15)
    assert ops.SELU_ALPHA == pytest.approx(1.6732632423543772, abs=1e-15)


# -- convolution ------------------------------------------------------------
def naive_conv2d(x, w, stride, dilation):
    B, H, W, _ = x.shape
    kh, kw, _, co = w.shape
    oh = (H - dilation * (kh - 1) - 1) // stride + 1
    ow = (W - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((B, oh, ow, co))
    for b in range(B):
        for i in range(oh):
            for j in range(ow):
                for a in range(kh):
                    for c in range(kw):
                        out[b, i, j] += x[b, i * stride + a * dilation, j * stride + c * dilation] @ w[a, c]
    return out


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2)])
def test_conv_nd_matches_loop_oracle(stride, dilation):
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 7, 6, 3)), rng.normal(size=(3, 3, 3, 4))
    got = conv.conv_nd(Tensor(x), Tensor(w), (stride, stride), (dilation, dilation)).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, stride, dilation), atol=1e-12)


def test_same_padding_preserves_extent_and_puts_extra_pixel_after():
    assert conv.same_padding(8, 3, 1, 1) == (1, 1)
    assert conv.same_padding(8, 3, 2, 1) == (0, 1)
    y = conv.conv2d(Tensor(np.ones((1, 8, 8, 2))), Tensor(np.ones((3, 3, 2, 1))), stride=2)
    assert y.shape == (1, 4, 4, 1)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv.conv2d(Tensor(np.ones((1, 4, 4, 3))), Tensor(np.ones((3, 3, 2, 1))))


def test_conv2d_transpose_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 8, 8, 3))     # conv input (2x extent)
    y = rng.normal(size=(2, 4, 4, 5))     # transpose input
    k = rng.normal(size=(4, 4, 3, 5))     # [k, k, c_out of transpose, c_in of transpose]
    forward = conv.conv2d(Tensor(x), Tensor(k), stride=2).data
    back = conv.conv2d_transpose(Tensor(y), Tensor(k)).data
    assert back.shape == x.shape
    assert np.sum(forward * y) == pytest.approx(np.sum(x * back), rel=1e-12)


def test_conv_against_torch_when_available():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 9, 9, 3)), rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    ours = conv.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, dilation=2, padding="same").data
    ref = torch.nn.functional.conv2d(
        torch.tensor(x).permute(0, 3, 1, 2), torch.tensor(w).permute(3, 2, 0, 1), torch.tensor(b),
        padding=2, dilation=2).permute(0, 2, 3, 1).numpy()
    np.testing.assert_allclose(ours, ref, atol=1e-10)


def test_conv3d_temporal_shrink_and_error():
    x = Tensor(np.ones((1, 6, 8, 8, 2)))
    k = Tensor(np.ones((2, 4, 4, 2, 3)))
    assert conv.conv3d(x, k, spatial_stride=2, padding=1).shape == (1, 5, 4, 4, 3)
    with pytest.raises(ShapeError):
        conv.conv3d(Tensor(np.ones((1, 1, 8, 8, 2))), k, padding=1)


# -- layers -----------------------------------------------------------------
def test_batch_norm_train_statistics_and_running_update():
    rng = np.random.default_rng(1)
    bn = nn.BatchNorm(3)
    x = rng.normal(2.0, 3.0, size=(4, 5, 5, 3))
    y = bn(Tensor(x)).data
    np.testing.assert_allclose(y.reshape(-1, 3).mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.reshape(-1, 3).var(0), 1.0, rtol=1e-3)
    flat = x.reshape(-1, 3)
    np.testing.assert_allclose(bn.running_mean, 0.1 * flat.mean(0))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * flat.var(0, ddof=1))
    bn.eval()
    z = bn(Tensor(x)).data
    np.testing.assert_allclose(z, (x - bn.running_mean) / np.sqrt(bn.running_var + 1e-5))


def test_dropout_inverted_scaling_and_identity_in_eval():
    d = nn.Dropout(0.25, np.random.default_rng(0))
    x = np.ones((200, 200))
    y = d(Tensor(x)).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert y.mean() == pytest.approx(1.0, abs=0.02)
    d.eval()
    np.testing.assert_array_equal(d(Tensor(x)).data, x)


@settings(max_examples=20, deadline=None)
@given(rows=st.integers(1, 8), cols=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_spectral_norm_estimate_matches_svd(rows, cols, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(cols, rows))  # output channels last -> matrix is rows x cols
    u = rng.normal(size=rows)
    u /= np.linalg.norm(u)
    _, sigma = nn.spectral_normalize(Tensor(w), u, iterations=50, update=False)
    assert abs(sigma - nn.operator_norm(w)) < 1e-4 * max(1.0, nn.operator_norm(w))


def test_spectral_buffer_updates_only_in_training():
    conv_layer = nn.SNConv2d(2, 3, np.random.default_rng(0))
    before = conv_layer.sn_u.copy()
    conv_layer.eval()
    conv_layer(Tensor(np.ones((1, 8, 8, 2))))
    np.testing.assert_array_equal(conv_layer.sn_u, before)
    conv_layer.train()
    conv_layer.weight.data = conv_layer.weight.data + 0.5
    conv_layer(Tensor(np.ones((1, 8, 8, 2))))
    assert not np.array_equal(conv_layer.sn_u, before)


def test_state_dict_round_trip_and_shape_check():
    rng = np.random.default_rng(0)
    a, b = nn.Conv2d(2, 3, rng), nn.Conv2d(2, 3, rng)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    bad = a.state_dict()
    bad["weight"] = np.zeros((1, 1))
    with pytest.raises(ValueError):
        b.load_state_dict(bad)
    with pytest.raises(KeyError):
        b.load_state_dict({})


def test_adam_first_step_moves_by_lr_times_sign():
    p = nn.Parameter(np.array([1.0, -1.0, 0.5]))
    p.grad = np.array([0.3, -2.0, 0.0])
    adam_step(p, lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -0.99, 0.5], atol=1e-7)


def test_adam_rejects_non_finite_gradient():
    p = nn.Parameter(np.zeros(2))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError):
        Adam([p]).step()


# -- checkpoint container ---------------------------------------------------
def test_checkpoint_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.normal(size=(3, 4)), "b": rng.normal(size=(2,)), "scalar": np.array(1.5)}
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, tensors)
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()


def test_checkpoint_errors():
    blob = checkpoint.dumps({"w": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointError, match="offset"):
        checkpoint.loads(blob[:-3])
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + blob[4:])
    bumped = blob[:4] + (99).to_bytes(4, "little") + blob[8:]
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.loads(bumped)
