import numpy as np
import pytest

from normlab.errors import InvalidLabel, InvalidShape
from normlab.gradcheck import gradcheck, gradcheck_function, relative_error
from normlab.layers import AvgPool2, BasicBlock, Conv2d, GlobalAvgPool, Linear, ReLU, softmax_xent
from normlab.models import miniresnet, plain4
from normlab.module import Identity, Module
from normlab.norm import BatchNorm2d
from normlab.optim import SGD, SgdConfig, cosine_lr, sgd_step
from normlab.module import Parameter


def _conv(weight, bias=None, stride=1, padding=None):
    o, i, k, _ = weight.shape
    c = Conv2d(i, o, k, stride=stride, padding=padding, bias=bias is not None)
    c.weight.data[...] = weight
    if bias is not None:
        c.bias.data[...] = bias
    return c


def _conv_oracle(x, w, b, stride, pad):
    # direct loops, independent of the im2col path
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, ho, wo))
    for n in range(B):
        for o in range(O):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5))
    np.testing.assert_array_equal(_conv(np.ones((1, 1, 1, 1)), np.zeros(1))(x), x)


def test_conv_all_ones_interior():
    y = _conv(np.ones((1, 1, 3, 3)), np.zeros(1), padding=1)(np.ones((1, 1, 5, 5)))
    assert y[0, 0, 2, 2] == 9.0
    assert y[0, 0, 0, 0] == 4.0


def test_conv_zero_weight_gives_bias():
    y = _conv(np.zeros((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]))(np.random.default_rng(1).standard_normal((2, 2, 4, 4)))
    for o, b in enumerate([1.0, -2.0, 0.5]):
        np.testing.assert_array_equal(y[:, o], b)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(_conv(w, b, stride, pad)(x), _conv_oracle(x, w, b, stride, pad), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(InvalidShape):
        Conv2d(3, 4)(np.zeros((1, 2, 4, 4)))
    with pytest.raises(InvalidShape):
        Conv2d(3, 4, kernel_size=2)


def test_relu_examples():
    r = ReLU()
    np.testing.assert_array_equal(r(np.array([-1.0, 2.0]).reshape(1, 2, 1, 1)).ravel(), [0.0, 2.0])
    neg = -np.abs(np.random.default_rng(0).standard_normal((2, 2, 3, 3))) - 0.1
    assert np.all(r(neg) == 0)
    assert np.all(r.backward(np.ones_like(neg)) == 0)
    pos = -neg
    np.testing.assert_array_equal(r(pos), pos)
    r(np.zeros((1, 1, 1, 1)))
    assert r.backward(np.ones((1, 1, 1, 1))).item() == 0.0


def test_avgpool_examples():
    p = AvgPool2()
    assert p(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)).item() == 2.5
    np.testing.assert_array_equal(p(np.full((1, 2, 4, 4), 3.0)), 3.0)
    g = np.random.default_rng(0).standard_normal((2, 2, 2, 2))
    back = p.backward(g)
    np.testing.assert_array_equal(back[:, :, :2, :2], np.broadcast_to(g[:, :, :1, :1] / 4, (2, 2, 2, 2)))
    assert np.isclose(back.sum(), g.sum(), rtol=1e-12)
    with pytest.raises(InvalidShape):
        p(np.zeros((1, 1, 3, 4)))


def test_global_avgpool_examples():
    gp = GlobalAvgPool()
    assert np.all(gp(np.full((2, 3, 4, 4), 1.5)) == 1.5)
    assert gp(np.array([[[[7.0]]]])).item() == 7.0
    assert gp(np.array([1.0, 3.0]).reshape(1, 1, 1, 2)).item() == 2.0


def test_linear_examples():
    lin = Linear(2, 2)
    lin.weight.data[...] = np.eye(2)
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(lin(x), x)
    lin = Linear(2, 1)
    lin.weight.data[...] = [[1.0, 1.0]]
    assert lin(x).item() == 3.0
    lin.weight.data[...] = 0.0
    lin.bias.data[...] = 0.7
    np.testing.assert_array_equal(lin(np.ones((3, 2))), 0.7)
    with pytest.raises(InvalidShape):
        lin(np.ones((3, 3)))


def test_softmax_uniform_and_single_class():
    loss, _ = softmax_xent(np.zeros((4, 10)), np.arange(4))
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    assert np.isclose(np.log(10), 2.302585, atol=1e-6)
    loss, d = softmax_xent(np.array([[3.0], [-2.0]]), np.array([0, 0]))
    assert loss == 0.0 and np.all(d == 0)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5, 7)) * 3
    y = rng.integers(0, 7, 5)
    l1, d1 = softmax_xent(z, y)
    l2, d2 = softmax_xent(z + 123.0, y)
    assert abs(l1 - l2) <= 1e-12
    np.testing.assert_allclose(d1, d2, atol=1e-12)


def test_softmax_bad_label():
    with pytest.raises(InvalidLabel):
        softmax_xent(np.zeros((2, 3)), np.array([0, 3]))


def test_basic_block_zero_branch_is_identity():
    blk = BasicBlock(2, 2, norm=None)
    blk.conv2.weight.data[...] = 0.0
    x = np.abs(np.random.default_rng(0).standard_normal((2, 2, 4, 4)))
    np.testing.assert_array_equal(blk(x), x)
    np.testing.assert_array_equal(blk(np.zeros((1, 2, 4, 4))), 0.0)


def test_basic_block_one_channel_hand_case():
    blk = BasicBlock(1, 1, norm=None)
    blk.conv1.weight.data[...] = 0.0
    blk.conv2.weight.data[...] = 0.0
    blk.conv1.weight.data[0, 0, 1, 1] = 2.0
    blk.conv2.weight.data[0, 0, 1, 1] = -0.25
    # x = 4: relu(2 * 4) = 8, branch = -0.25 * 8 = -2, out = relu(-2 + 4) = 2
    assert blk(np.array([[[[4.0]]]])).item() == 2.0
    # x = 10: branch = -5, out = 5
    assert blk(np.array([[[[10.0]]]])).item() == 5.0


def test_basic_block_projection_shapes():
    blk = BasicBlock(2, 4, stride=2, norm=lambda c: BatchNorm2d(c))
    assert blk(np.random.default_rng(0).standard_normal((2, 2, 8, 8))).shape == (2, 4, 4, 4)


def test_sgd_examples():
    cfg = SgdConfig(lr=0.1)
    (w,), _ = sgd_step([np.array(1.0)], [np.array(0.5)], cfg)
    assert w == pytest.approx(0.95, abs=1e-15)
    (w,), _ = sgd_step([np.array(1.0)], [np.array(0.0)], cfg)
    assert w == 1.0
    p = Parameter(np.array([1.0]))
    opt = SGD([p], SgdConfig(lr=0.1, momentum=0.9))
    for _ in range(2):
        p.grad[...] = 0.5
        opt.step()
    # v1 = 0.5, w1 = 0.95; v2 = 0.9*0.5 + 0.5 = 0.95, w2 = 0.95 - 0.095 = 0.855
    assert p.data[0] == pytest.approx(0.855, abs=1e-15)


def test_sgd_weight_decay():
    p = Parameter(np.array([2.0]))
    opt = SGD([p], SgdConfig(lr=0.1, weight_decay=0.5))
    opt.step()
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 1.0)


def test_cosine_lr_endpoints():
    assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
    assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
    assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0, abs=1e-18)


def test_gradcheck_reports_linear_and_relu_precision():
    rng = np.random.default_rng(0)
    rep = gradcheck(Linear(5, 3, rng=rng), rng.standard_normal((4, 5)))
    assert rep.max_rel_error <= 1e-7
    x = rng.standard_normal((2, 2, 3, 3))
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    assert gradcheck(ReLU(), x).max_rel_error <= 1e-6


def test_gradcheck_constant_function():
    rep = gradcheck_function(lambda x: (3.0, np.zeros_like(x)), np.ones(4))
    assert rep.max_rel_error == 0.0 and rep.passed
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_gradcheck_flags_wrong_gradient():
    class Wrong(Module):
        def forward(self, x):
            return 2 * x

        def backward(self, g):
            return g

    rep = gradcheck(Wrong(), np.ones((1, 1, 2, 2)))
    assert not rep.passed


def test_model_shapes():
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
    assert plain4(lambda c: BatchNorm2d(c))(x).shape == (2, 10)
    net = miniresnet(1, lambda c: BatchNorm2d(c))
    assert net(x).shape == (2, 10)
    convs = [m for m in net.modules() if isinstance(m, Conv2d)]
    # stem + 3 blocks x 2 convs + 2 projections
    assert len(convs) == 1 + 6 + 2


def test_backward_reverses_forward_through_model():
    rng = np.random.default_rng(0)
    net = plain4(lambda c: BatchNorm2d(c), width=4, rng=rng)
    x = rng.standard_normal((3, 3, 16, 16))
    loss, d = softmax_xent(net(x), np.array([0, 1, 2]))
    net.zero_grad()
    dx = net.backward(d)
    assert dx.shape == x.shape
    assert all(np.any(p.grad != 0) for p in net.parameters())
