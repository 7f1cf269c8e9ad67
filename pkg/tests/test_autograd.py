import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proactive_detect.autograd import (
    OP_COUNTS,
    BatchNorm2d,
    Conv2d,
    ConvBNReLU,
    Linear,
    OptimizerKind,
    OptimizerSpec,
    Parameter,
    ShapeError,
    Tensor,
    avg_pool2,
    batch_norm,
    bce_with_logits,
    broadcast_channels,
    conv2d,
    dot,
    grad_check,
    l2_norm,
    log_softmax,
    matmul,
    optimizer_step,
    relu,
    reset_op_counts,
    sigmoid,
    spatial_mean,
    upsample2,
)
from proactive_detect.autograd import checkpoint as ckpt

F64 = np.float64


def rng(seed=0):
    return np.random.default_rng(seed)


def param(shape, seed=0, scale=1.0, low=None):
    r = rng(seed)
    if low is not None:
        # magnitudes bounded away from 0 keep ReLU / abs away from kinks
        mag = r.uniform(low, 1.0, size=shape)
        return Parameter(mag * r.choice([-1.0, 1.0], size=shape) * scale, dtype=F64)
    return Parameter(r.standard_normal(shape) * scale, dtype=F64)


def weighted(out, seed=99):
    # random projection so every output entry influences the scalar loss
    w = rng(seed).standard_normal(out.shape)
    return (out * Tensor(w)).sum()


# -- forward examples --------------------------------------------------------

def test_relu_values():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_zero():
    assert sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_extreme_logits_finite():
    out = sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_conv_unit_kernel_is_identity():
    x = rng().uniform(size=(2, 5, 5, 1))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_preserves_spatial_size():
    x = Tensor(np.zeros((1, 7, 9, 2)))
    assert conv2d(x, Tensor(np.zeros((3, 3, 2, 4)))).shape == (1, 7, 9, 4)


def test_conv_matches_direct_loop():
    x = rng(1).standard_normal((1, 4, 4, 2))
    w = rng(2).standard_normal((3, 3, 2, 3))
    out = conv2d(Tensor(x), Tensor(w)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 4, 4, 3))
    for i in range(4):
        for j in range(4):
            ref[0, i, j] = np.einsum("abc,abco->o", xp[0, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))


# -- backward examples -------------------------------------------------------

def test_quadratic_gradient():
    w = Parameter([1.0, 2.0], dtype=F64)
    (w * w).sum().backward()
    assert w.grad.tolist() == [2.0, 4.0]


def test_unreachable_parameter_gets_zero_gradient():
    w = Parameter([1.0, 2.0], dtype=F64)
    v = Parameter([3.0], dtype=F64)
    (v * v).sum().backward()
    assert w.grad.tolist() == [0.0, 0.0]
    assert w.grad.shape == w.shape


def test_backward_twice_raises():
    w = Parameter([1.0], dtype=F64)
    loss = (w * w).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_backward_needs_scalar():
    w = Parameter([1.0, 2.0], dtype=F64)
    with pytest.raises(ShapeError):
        (w * 2.0).backward()


def test_gradient_accumulates_over_shared_uses():
    w = Parameter([3.0], dtype=F64)
    (w * w + w).sum().backward()
    assert w.grad.tolist() == [7.0]


# -- finite-difference checks ---------------------------------------------------

def test_two_layer_net_grad_check():
    r = rng(3)
    l1, l2 = Linear(5, 8, r, dtype=F64), Linear(8, 2, r, dtype=F64)
    assert sum(p.size for p in l1.parameters() + l2.parameters()) == 66
    x = Tensor(r.standard_normal((6, 5)))

    def loss():
        return weighted(l2(l1(x).relu()))

    rep = grad_check(loss, l1.named_parameters("l1.") + l2.named_parameters("l2."))
    assert rep.max_error < 1e-4, rep.errors


def test_linear_layer_grad_check_tight():
    r = rng(4)
    lin = Linear(3, 4, r, dtype=F64)
    x = Tensor(r.standard_normal((5, 3)))
    rep = grad_check(lambda: weighted(lin(x)), lin.named_parameters(), tolerance=1e-6)
    assert rep.ok and rep.max_error < 1e-6


def test_constant_network_exact_zero_error():
    w = Parameter(np.ones(3), dtype=F64)
    rep = grad_check(lambda: Tensor(5.0) + (w * 0.0).sum(), [("w", w)])
    assert rep.max_error == 0.0


def test_grad_check_flags_wrong_gradient():
    w = Parameter(np.array([0.5, -1.5]), dtype=F64)

    def bad():
        # derivative of exp is exp; pretend it is 2 * exp
        out = w.exp()
        orig = out._backward
        out._backward = lambda g: orig(2 * g)
        return out.sum()

    rep = grad_check(bad, [("w", w)])
    assert rep.failed == ["w"]


ELEMENTWISE = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "pow": lambda a, b: (a * a + 1.0) ** 1.5 + b,
    "exp_log": lambda a, b: (a * 0.3).exp() + (b * b + 0.5).log(),
    "sqrt_abs": lambda a, b: (a.abs() + 0.2).sqrt() + b,
    "sigmoid": lambda a, b: a.sigmoid() * b,
    "relu": lambda a, b: a.relu() * b,
    "clamp": lambda a, b: a.clamp(-0.5, 0.5) + b,
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_grad(name):
    a = param((3, 4), seed=1, low=0.1)
    b = param((4,), seed=2)  # broadcast against a
    rep = grad_check(lambda: weighted(ELEMENTWISE[name](a, b)), [("a", a), ("b", b)])
    assert rep.max_error < 1e-4, rep.errors


LAYERS = {
    "matmul": lambda x, p: matmul(x.reshape(4, 8), p["m"]),
    "dot": lambda x, p: dot(x.reshape(-1)[:6], p["v"]),
    "conv3": lambda x, p: conv2d(x, p["k3"], p["b"]),
    "conv1": lambda x, p: conv2d(x, p["k1"]),
    "avg_pool2": lambda x, p: avg_pool2(x * p["s"]),
    "upsample2": lambda x, p: upsample2(x * p["s"]),
    "spatial_mean": lambda x, p: spatial_mean(x * p["s"]),
    "batch_norm": lambda x, p: batch_norm(x, p["g"], p["s"])[0],
    "l2_norm": lambda x, p: l2_norm(x * p["s"]),
    "l2_norm_axis": lambda x, p: l2_norm(x * p["s"], axis=(1, 2)),
    "log_softmax": lambda x, p: log_softmax(x * p["s"], axis=-1),
    "bce": lambda x, p: bce_with_logits(x * p["s"], (rng(7).uniform(size=(2, 2, 4, 2)) > 0.5)),
    "broadcast_channels": lambda x, p: broadcast_channels(x[..., :1] * p["s"][:1], 3),
    "getitem": lambda x, p: (x * p["s"])[:, 1:, ::2],
    "transpose": lambda x, p: (x * p["s"]).transpose(0, 3, 1, 2),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_grad(name):
    x = param((2, 2, 4, 2), seed=5, low=0.1)
    p = {
        "m": param((8, 3), seed=6),
        "v": param((6,), seed=7),
        "k3": param((3, 3, 2, 3), seed=8),
        "k1": param((1, 1, 2, 4), seed=9),
        "b": param((3,), seed=10),
        "s": param((2,), seed=11, low=0.5),
        "g": param((2,), seed=12, low=0.5),
    }
    fn = LAYERS[name]
    used = {k: v for k, v in p.items()}
    rep = grad_check(lambda: weighted(fn(x, used)), [("x", x)] + sorted(used.items()))
    assert rep.max_error < 1e-4, rep.errors


def test_conv_bn_relu_module_grad():
    r = rng(13)
    block = ConvBNReLU(2, 3, r, dtype=F64)
    x = Tensor(r.standard_normal((3, 4, 4, 2)))
    rep = grad_check(lambda: weighted(block(x)), block.named_parameters())
    assert rep.max_error < 1e-4, rep.errors


def test_l2_norm_gradient_at_origin_is_zero():
    a = Parameter(np.zeros(3), dtype=F64)
    l2_norm(a).backward()
    assert np.all(a.grad == 0.0)


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    broadcast_rows=st.booleans(),
    seed=st.integers(0, 10_000),
)
def test_broadcast_mul_add_grad_property(rows, cols, broadcast_rows, seed):
    a = param((rows, cols), seed=seed)
    b = param((1, cols) if broadcast_rows else (rows, 1), seed=seed + 1)
    rep = grad_check(lambda: weighted(a * b + b, seed=seed), [("a", a), ("b", b)])
    assert rep.max_error < 1e-4


# -- batch norm modes --------------------------------------------------------------

def test_batchnorm_running_stats_update():
    bn = BatchNorm2d(2, dtype=F64)
    x = rng(14).standard_normal((4, 3, 3, 2)) * 2 + 1
    bn(Tensor(x))
    flat = x.reshape(-1, 2)
    np.testing.assert_allclose(bn.running_mean, 0.1 * flat.mean(axis=0))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * flat.var(axis=0, ddof=1))


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm2d(1, dtype=F64)
    bn.running_mean[:] = 2.0
    bn.running_var[:] = 4.0
    bn.eval()
    out = bn(Tensor(np.full((1, 2, 2, 1), 4.0)))
    np.testing.assert_allclose(out.data, 2.0 / np.sqrt(4.0 + 1e-5))


# -- optimizers --------------------------------------------------------------------

def test_sgd_step_example():
    w = Parameter([1.0], dtype=F64)
    w.grad[:] = 2.0
    optimizer_step([w], OptimizerSpec(OptimizerKind.SGD, 0.1))
    assert w.data[0] == pytest.approx(0.8)


@pytest.mark.parametrize("kind", list(OptimizerKind))
def test_zero_gradient_leaves_parameters(kind):
    w = Parameter([1.5, -2.0], dtype=F64)
    optimizer_step([w], OptimizerSpec(kind, 0.1))
    assert w.data.tolist() == [1.5, -2.0]


def test_sgd_quadratic_bowl_converges():
    target = np.array([3.0, -1.0, 0.5])
    w = Parameter(np.zeros(3), dtype=F64)
    spec = OptimizerSpec(OptimizerKind.SGD, 0.1)
    for _ in range(100):
        w.zero_grad()
        d = w - Tensor(target)
        ((d * d).sum() * 0.5).backward()
        optimizer_step([w], spec)
    # contraction factor 0.9 per step: |w - c| = 0.9^100 |c|
    assert np.linalg.norm(w.data - target) < 1e-3


def test_adam_first_step_moves_by_learning_rate():
    w = Parameter([1.0, 1.0], dtype=F64)
    w.grad[:] = [5.0, -0.01]
    optimizer_step([w], OptimizerSpec(OptimizerKind.ADAPTIVE_MOMENT, 0.01))
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(w.data, [0.99, 1.01], rtol=1e-6)


def test_optimizer_spec_validation():
    with pytest.raises(ValueError):
        OptimizerSpec(OptimizerKind.SGD, 0.0)
    with pytest.raises(ValueError):
        OptimizerSpec(OptimizerKind.SGD, 0.1, moment_decays=(1.0, 0.5))


# -- determinism and tape cost ----------------------------------------------------

def _train_small(seed, steps=5):
    r = rng(seed)
    conv = Conv2d(3, 4, r)
    bn = BatchNorm2d(4)
    x = Tensor(rng(seed + 1).uniform(size=(4, 6, 6, 3)).astype(np.float32))
    params = conv.parameters() + bn.parameters()
    spec = OptimizerSpec(OptimizerKind.ADAPTIVE_MOMENT, 1e-2)
    for _ in range(steps):
        for p in params:
            p.zero_grad()
        weighted(bn(conv(x)).relu()).backward()
        optimizer_step(params, spec)
    return [p.data.copy() for p in params]


def test_training_is_bitwise_deterministic():
    a, b = _train_small(21), _train_small(21)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = _train_small(22)
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_backward_cost_is_linear_in_forward_ops():
    r = rng(23)
    blocks = [ConvBNReLU(3 if k == 0 else 4, 4, r) for k in range(5)]
    x = Tensor(r.uniform(size=(2, 8, 8, 3)).astype(np.float32))
    reset_op_counts()
    h = x
    for blk in blocks:
        h = blk(h)
    loss = weighted(avg_pool2(h))
    forward = OP_COUNTS["forward"]
    loss.backward()
    assert OP_COUNTS["backward"] <= 4 * forward
    assert OP_COUNTS["backward"] >= 1


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip_byte_exact(tmp_path):
    r = rng(24)
    state = {
        "detector.w": r.standard_normal((3, 3, 2, 4)).astype(np.float32),
        "detector.b": r.standard_normal(4).astype(np.float32),
        "encoder.scalar": np.float32(1.25).reshape(()),
    }
    path = tmp_path / "m.ckpt"
    digest = ckpt.save(state, path)
    loaded = ckpt.load(path)
    assert sorted(loaded) == sorted(state)
    for k in state:
        assert loaded[k].tobytes() == np.asarray(state[k]).tobytes()
        assert loaded[k].shape == np.asarray(state[k]).shape
    assert ckpt.dumps(loaded) == path.read_bytes()
    assert ckpt.content_hash(path) == digest


def test_checkpoint_header_is_text():
    blob = ckpt.dumps({"a.b": np.zeros((2, 3), np.float32)})
    head = blob.split(b"\n\n")[0].decode("ascii")
    assert head.splitlines() == ["MGCKPT 1", "1", "a.b float32 2x3"]


def test_checkpoint_truncated_raises():
    blob = ckpt.dumps({"w": np.ones(10, np.float32)})
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(blob[:-3])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(blob + b"\0")


def test_module_state_dict_round_trip():
    r = rng(25)
    a, b = ConvBNReLU(2, 3, r), ConvBNReLU(2, 3, rng(26))
    a(Tensor(r.uniform(size=(2, 4, 4, 2)).astype(np.float32)))  # moves running stats
    b.load_state_dict(ckpt.loads(ckpt.dumps(a.state_dict())))
    for (n1, v1), (n2, v2) in zip(sorted(a.state_dict().items()), sorted(b.state_dict().items())):
        assert n1 == n2 and np.array_equal(v1, v2)


def test_load_state_dict_shape_mismatch():
    a = Linear(2, 3, rng())
    bad = {k: np.zeros((1,)) for k in a.state_dict()}
    with pytest.raises(ValueError):
        a.load_state_dict(bad)
