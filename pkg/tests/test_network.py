import numpy as np
import pytest

from infarctseg import network as net
from infarctseg.errors import ConfigurationError, FormatError, ShapeError

TINY = net.NetworkConfig(features=(2, 4), blocks=(1, 2), seed=3)


def conv_oracle(x, w, b, stride):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = (h + 2 * p - k) // stride + 1, (wd + 2 * p - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


def upconv_oracle(x, w, b):
    n, c, h, wd = x.shape
    o = w.shape[1]
    out = np.zeros((n, o, 2 * h, 2 * wd)) + b[None, :, None, None]
    for i in range(h):
        for j in range(wd):
            for di in range(2):
                for dj in range(2):
                    out[:, :, 2 * i + di, 2 * j + dj] += x[:, :, i, j] @ w[:, :, di, dj]
    return out


@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (1, 1), (1, 2)])
def test_conv_matches_oracle(k, stride, rng):
    x = rng.normal(size=(2, 3, 8, 6))
    w, b = rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
    out, _ = net.conv2d(x, w, b, stride)
    assert np.allclose(out, conv_oracle(x, w, b, stride), atol=1e-12)


def test_upconv_matches_oracle(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    w, b = rng.normal(size=(3, 2, 2, 2)), rng.normal(size=2)
    out, _ = net.conv_transpose2x2(x, w, b)
    assert np.allclose(out, upconv_oracle(x, w, b), atol=1e-12)


def test_instance_norm_statistics(rng):
    x = rng.normal(5, 3, size=(2, 3, 16, 16))
    out, _ = net.instance_norm(x, np.ones(3), np.zeros(3))
    assert np.allclose(out.mean(axis=(2, 3)), 0, atol=1e-12)
    assert np.allclose(out.var(axis=(2, 3)), 9 / (9 + net.NORM_EPS), atol=1e-3)


@pytest.mark.parametrize(
    "layer",
    ["conv3", "conv3s2", "upconv", "norm", "leaky"],
)
def test_layer_gradients(layer, rng):
    x = rng.normal(size=(2, 2, 6, 6))
    if layer.startswith("conv"):
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        stride = 2 if layer.endswith("s2") else 1
        f = lambda x, w, b: net.conv2d(x, w, b, stride)[0]
        out, cache = net.conv2d(x, w, b, stride)
        grads = lambda d: net.conv2d_backward(d, cache)
        args = [x, w, b]
    elif layer == "upconv":
        w, b = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3)
        f = lambda x, w, b: net.conv_transpose2x2(x, w, b)[0]
        out, cache = net.conv_transpose2x2(x, w, b)
        grads = lambda d: net.conv_transpose2x2_backward(d, cache)
        args = [x, w, b]
    elif layer == "norm":
        g, b = rng.normal(size=2), rng.normal(size=2)
        f = lambda x, g, b: net.instance_norm(x, g, b)[0]
        out, cache = net.instance_norm(x, g, b)
        grads = lambda d: net.instance_norm_backward(d, cache)
        args = [x, g, b]
    else:
        f = lambda x: net.leaky_relu(x, 0.01)[0]
        out, pos = net.leaky_relu(x, 0.01)
        grads = lambda d: (net.leaky_relu_backward(d, pos, 0.01),)
        args = [x]
    d = rng.normal(size=out.shape)
    analytic = grads(d)
    for a, ga in zip(args, analytic):
        num = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + 1e-6
            plus = np.vdot(f(*args), d)
            a[idx] = old - 1e-6
            minus = np.vdot(f(*args), d)
            a[idx] = old
            num[idx] = (plus - minus) / 2e-6
        assert np.allclose(ga, num, rtol=1e-5, atol=1e-6)


def test_residual_block_zero_weights(rng):
    cfg = net.NetworkConfig(features=(4,), blocks=(1,), in_channels=4)
    params = net.zero_params(cfg, np.float64)
    x = rng.normal(size=(1, 4, 8, 8))
    out = net.residual_block(x, params, "enc0.b0", 1)
    assert np.allclose(out, np.where(x > 0, x, 0.01 * x))
    assert not net.residual_block(np.zeros_like(x), params, "enc0.b0", 1).any()


def test_residual_block_extents(rng):
    cfg = net.NetworkConfig(features=(4, 8), blocks=(1, 1), in_channels=4)
    p = net.init_params(cfg, np.float64)
    x = rng.normal(size=(1, 4, 64, 64))
    assert net.residual_block(x, p, "enc0.b0", 1).shape == (1, 4, 64, 64)
    h = net.residual_block(x, p, "enc0.b0", 1)
    assert net.residual_block(h, p, "enc1.b0", 2).shape == (1, 8, 32, 32)
    with pytest.raises(ShapeError):
        net.residual_block(rng.normal(size=(1, 3, 8, 8)), p, "enc0.b0", 1)


def test_toy_shapes_and_trace(toy_cfg, rng):
    res = net.forward(toy_cfg, net.init_params(toy_cfg), rng.normal(size=(1, 1, 64, 64)))
    assert res.logits.shape == (1, 2, 64, 64)
    trace = dict(res.trace)
    assert trace["enc2"] == (1, 32, 16, 16)
    assert trace["dec1"] == (1, 8, 64, 64)


def test_zero_params_give_even_softmax(toy_cfg, rng):
    logits = net.forward(toy_cfg, net.zero_params(toy_cfg), rng.normal(size=(2, 1, 32, 32))).logits
    assert np.array_equal(logits[:, 0], logits[:, 1])
    assert np.all(net.softmax_probabilities(logits) == 0.5)


def test_indivisible_input_names_divisor(toy_cfg):
    with pytest.raises(ShapeError, match="divisible by 4"):
        net.forward(toy_cfg, net.init_params(toy_cfg), np.zeros((1, 1, 30, 32)))
    with pytest.raises(ShapeError, match="128"):
        net.check_input(net.NetworkConfig.full(), np.zeros((1, 1, 500, 500)))


def test_softmax_cases():
    p = net.softmax_probabilities(np.array([[0.0, 0.0], [1000.0, 0.0]]))
    assert np.array_equal(p[0], [0.5, 0.5])
    assert p[1, 0] == 1.0 and np.isfinite(p).all()
    z = np.random.default_rng(0).normal(size=(4, 2, 3, 3))
    assert np.allclose(net.softmax_probabilities(z), net.softmax_probabilities(z + 17.0), atol=1e-7)


def test_parameter_count_examples():
    single = net.param_shapes(net.NetworkConfig(features=(8,), blocks=(1,)))
    conv1 = sum(int(np.prod(single[f"enc0.b0.conv1.{k}"])) for k in ("weight", "bias"))
    assert conv1 == 8 * (1 * 9) + 8 == 80


def test_parameter_count_allocation_walk(toy_cfg):
    params = net.init_params(toy_cfg)
    walked = 0
    for arr in params.values():
        walked += arr.size
    assert net.parameter_count(toy_cfg) == walked == 27402
    full = net.NetworkConfig.full()
    assert net.parameter_count(full) == sum(int(np.prod(s)) for s in net.param_shapes(full).values())


def test_width_scaling_is_quadratic():
    small = net.NetworkConfig(features=(64, 128, 256), blocks=(2, 2, 2))
    big = net.NetworkConfig(features=(128, 256, 512), blocks=(2, 2, 2))
    ratio = net.parameter_count(big) / net.parameter_count(small)
    assert 3.9 < ratio < 4.0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        net.NetworkConfig(features=(8, 16), blocks=(1,))
    with pytest.raises(ConfigurationError):
        net.NetworkConfig(features=(8, 0), blocks=(1, 1))
    assert net.NetworkConfig.from_json(net.NetworkConfig.full().to_json()) == net.NetworkConfig.full()
    assert net.NetworkConfig.full().decoder_features == (512, 512, 512, 256, 128, 64, 32)


def test_init_determinism(toy_cfg):
    a, b = net.init_params(toy_cfg), net.init_params(toy_cfg)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = net.init_params(toy_cfg, seed=99)
    assert not np.array_equal(a["enc0.b0.conv1.weight"], c["enc0.b0.conv1.weight"])


def test_init_scale(toy_cfg):
    w = net.init_params(net.NetworkConfig(features=(64, 64), blocks=(1, 1)), np.float64)["enc1.b0.conv2.weight"]
    gain = np.sqrt(2 / (1 + 0.01**2))
    assert w.std() == pytest.approx(gain / np.sqrt(64 * 9), rel=0.05)


def test_network_gradient_check(rng):
    params = net.init_params(TINY, np.float64)
    x = rng.normal(size=(2, 1, 8, 8))
    target = rng.normal(size=(2, 2, 8, 8))

    def loss(p):
        return float(np.vdot(net.forward(TINY, p, x).logits, target))

    res = net.forward(TINY, params, x, train=True)
    grads = net.backward(TINY, params, res, target)
    for name in params:
        flat = params[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            up = loss(params)
            flat[i] = old - 1e-6
            down = loss(params)
            flat[i] = old
            num = (up - down) / 2e-6
            ana = grads[name].reshape(-1)[i]
            assert abs(ana - num) <= 1e-5 * max(1.0, abs(num)), name


def test_checkpoint_round_trip(tmp_path, toy_cfg):
    p = net.init_params(toy_cfg)
    net.save_checkpoint(tmp_path / "a.ckpt", toy_cfg, p, {"fold": 1})
    net.save_checkpoint(tmp_path / "b.ckpt", toy_cfg, p, {"fold": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    cfg, q, meta = net.load_checkpoint(tmp_path / "a.ckpt")
    assert cfg == toy_cfg and meta["fold"] == 1
    assert all(np.array_equal(p[k], q[k]) for k in p)


def test_checkpoint_errors(tmp_path, toy_cfg):
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        net.load_checkpoint(tmp_path / "junk.ckpt")
    p = net.init_params(toy_cfg)
    p["head.weight"] = np.zeros((2, 9, 1, 1), np.float32)
    net.save_checkpoint(tmp_path / "bad.ckpt", toy_cfg, p)
    with pytest.raises(FormatError):
        net.load_checkpoint(tmp_path / "bad.ckpt")
