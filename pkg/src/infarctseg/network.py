"""Residual Encoder U-Net over 2-D patches, forward and backward in numpy.

Layout is NCHW.  Parameters live in an ordered ``{path: array}`` mapping, and
their dtype decides the compute precision (float32 for training, float64 for
gradient checks).

Encoder stage ``s`` holds ``blocks[s]`` residual blocks; the first block of every
stage after the first downsamples with stride 2.  Each decoder stage upsamples
with a 2x2 transposed convolution, concatenates the matching encoder output
and applies ``decoder_blocks`` conv-norm-nonlinearity units.  A 1x1 head maps
to class scores.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigurationError, FormatError, ShapeError

NORM_EPS = 1e-5

PAPER_FEATURES = (32, 64, 128, 256, 512, 512, 512, 512)
PAPER_BLOCKS = (1, 3, 4, 6, 6, 6, 6, 6)


@dataclass(frozen=True)
class NetworkConfig:
    features: tuple[int, ...] = PAPER_FEATURES
    blocks: tuple[int, ...] = PAPER_BLOCKS
    decoder_blocks: int = 1
    in_channels: int = 1
    num_classes: int = 2
    negative_slope: float = 0.01
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(int(f) for f in self.features))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if len(self.features) != len(self.blocks):
            raise ConfigurationError("features and blocks must have one entry per encoder stage")
        if not self.features or min(self.features) < 1 or min(self.blocks) < 1:
            raise ConfigurationError("feature widths and block counts must be >= 1")
        if self.decoder_blocks < 1 or self.in_channels < 1 or self.num_classes < 1:
            raise ConfigurationError("decoder blocks, input channels and classes must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel size must be odd")

    @classmethod
    def full(cls, **kw) -> "NetworkConfig":
        return cls(PAPER_FEATURES, PAPER_BLOCKS, **kw)

    @classmethod
    def toy(cls, **kw) -> "NetworkConfig":
        return cls((8, 16, 32), (1, 1, 1), **kw)

    @property
    def stages(self) -> int:
        return len(self.features)

    @property
    def decoder_features(self) -> tuple[int, ...]:
        """Widths of the decoder stages, deepest first (mirrors the encoder)."""
        return tuple(reversed(self.features[:-1]))

    @property
    def divisor(self) -> int:
        return 2 ** (self.stages - 1)

    def to_json(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# --------------------------------------------------------------------------
# parameter layout


def _block_in_out(cfg: NetworkConfig, s: int, b: int) -> tuple[int, int, int]:
    cin = (cfg.in_channels if s == 0 else cfg.features[s - 1]) if b == 0 else cfg.features[s]
    stride = 2 if (s > 0 and b == 0) else 1
    return cin, cfg.features[s], stride


def _has_projection(cin: int, cout: int, stride: int) -> bool:
    return cin != cout or stride != 1


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter path and its shape, in allocation order."""
    k = cfg.kernel_size
    shapes: dict[str, tuple[int, ...]] = {}
    for s in range(cfg.stages):
        for b in range(cfg.blocks[s]):
            cin, cout, stride = _block_in_out(cfg, s, b)
            p = f"enc{s}.b{b}"
            shapes[f"{p}.conv1.weight"] = (cout, cin, k, k)
            shapes[f"{p}.conv1.bias"] = (cout,)
            shapes[f"{p}.norm1.weight"] = (cout,)
            shapes[f"{p}.norm1.bias"] = (cout,)
            shapes[f"{p}.conv2.weight"] = (cout, cout, k, k)
            shapes[f"{p}.conv2.bias"] = (cout,)
            shapes[f"{p}.norm2.weight"] = (cout,)
            shapes[f"{p}.norm2.bias"] = (cout,)
            if _has_projection(cin, cout, stride):
                shapes[f"{p}.skip.weight"] = (cout, cin, 1, 1)
                shapes[f"{p}.skip.bias"] = (cout,)
    for d in range(cfg.stages - 1):
        s = cfg.stages - 2 - d
        deep, width = cfg.features[s + 1], cfg.features[s]
        shapes[f"dec{d}.up.weight"] = (deep, width, 2, 2)
        shapes[f"dec{d}.up.bias"] = (width,)
        for j in range(cfg.decoder_blocks):
            cin = 2 * width if j == 0 else width
            shapes[f"dec{d}.b{j}.conv.weight"] = (width, cin, k, k)
            shapes[f"dec{d}.b{j}.conv.bias"] = (width,)
            shapes[f"dec{d}.b{j}.norm.weight"] = (width,)
            shapes[f"dec{d}.b{j}.norm.bias"] = (width,)
    shapes["head.weight"] = (cfg.num_classes, cfg.features[0], 1, 1)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def parameter_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter count (conv weights + biases, norm affine pairs)."""
    k2 = cfg.kernel_size**2
    total = 0
    for s in range(cfg.stages):
        for b in range(cfg.blocks[s]):
            cin, cout, stride = _block_in_out(cfg, s, b)
            total += cout * cin * k2 + cout  # conv1
            total += cout * cout * k2 + cout  # conv2
            total += 4 * cout  # two norms
            if _has_projection(cin, cout, stride):
                total += cout * cin + cout
    for s in range(cfg.stages - 1):
        deep, width = cfg.features[s + 1], cfg.features[s]
        total += deep * width * 4 + width
        total += width * 2 * width * k2 + width + 2 * width
        total += (cfg.decoder_blocks - 1) * (width * width * k2 + 3 * width)
    total += cfg.num_classes * cfg.features[0] + cfg.num_classes
    return total


class NetworkParams(dict):
    """Ordered mapping of layer path -> array."""

    @property
    def total(self) -> int:
        return int(sum(a.size for a in self.values()))

    @property
    def dtype(self):
        return next(iter(self.values())).dtype

    def copy(self) -> "NetworkParams":
        return NetworkParams((k, v.copy()) for k, v in self.items())

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams((k, v.astype(dtype)) for k, v in self.items())


def init_params(cfg: NetworkConfig, dtype=np.float32, seed: Optional[int] = None) -> NetworkParams:
    """Kaiming fan-in normal init for convolutions, (1, 0) for norms, zero biases."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    gain = np.sqrt(2.0 / (1.0 + cfg.negative_slope**2))
    params = NetworkParams()
    for path, shape in param_shapes(cfg).items():
        if path.endswith("bias"):
            arr = np.zeros(shape, dtype=dtype)
        elif ".norm" in path:
            arr = np.ones(shape, dtype=dtype)
        else:
            if path.startswith("dec") and ".up." in path:
                fan_in = shape[0]
            else:
                fan_in = int(np.prod(shape[1:]))
            std = (1.0 if path.startswith("head") else gain) / np.sqrt(fan_in)
            arr = (rng.standard_normal(shape, dtype=np.float64 if dtype == np.float64 else np.float32) * std).astype(dtype)
        params[path] = arr
    return params


def zero_params(cfg: NetworkConfig, dtype=np.float32) -> NetworkParams:
    return NetworkParams((p, np.zeros(s, dtype=dtype)) for p, s in param_shapes(cfg).items())


# --------------------------------------------------------------------------
# layers; each returns (output, cache) and has a matching *_backward


def conv2d(x, w, b, stride: int):
    n, c, h, wd = x.shape
    o, ci, k, _ = w.shape
    if ci != c:
        raise ShapeError(f"convolution expects {ci} input channels, got {c}")
    pad = k // 2
    if k == 1:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        ho, wo = xs.shape[2:]
        cols = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    else:
        ho, wo = kernels.out_size(h, k, stride, pad), kernels.out_size(wd, k, stride, pad)
        cols = kernels.im2col(x, k, stride, pad)
    out = np.matmul(w.reshape(o, -1), cols)
    out += b[None, :, None]
    return out.reshape(n, o, ho, wo), (cols, x.shape, w, stride)


def conv2d_backward(dout, cache):
    cols, x_shape, w, stride = cache
    n, o, ho, wo = dout.shape
    k = w.shape[2]
    d2 = dout.reshape(n, o, ho * wo)
    dw = np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, d2)
    if k == 1:
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx[:, :, ::stride, ::stride] = dcols.reshape(n, x_shape[1], ho, wo)
    else:
        dx = kernels.col2im(dcols, x_shape, k, stride, k // 2)
    return dx, dw, db


def instance_norm(x, gamma, beta):
    mean = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = xc * inv
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv, gamma)


def instance_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    m = dxhat.mean(axis=(2, 3), keepdims=True)
    mx = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
    dx = inv * (dxhat - m - xhat * mx)
    return dx, dgamma, dbeta


def leaky_relu(x, slope):
    return np.where(x > 0, x, x * x.dtype.type(slope)), x > 0


def leaky_relu_backward(dout, positive, slope):
    return np.where(positive, dout, dout * dout.dtype.type(slope))


def conv_transpose2x2(x, w, b):
    n, c, h, wd = x.shape
    o = w.shape[1]
    wm = w.reshape(c, o * 4).T
    y = np.matmul(wm, x.reshape(n, c, h * wd)).reshape(n, o, 2, 2, h, wd)
    y = y.transpose(0, 1, 4, 2, 5, 3).reshape(n, o, 2 * h, 2 * wd)
    y += b[None, :, None, None]
    return y, (x, w)


def conv_transpose2x2_backward(dout, cache):
    x, w = cache
    n, c, h, wd = x.shape
    o = w.shape[1]
    g = dout.reshape(n, o, h, 2, wd, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, o * 4, h * wd)
    xm = x.reshape(n, c, h * wd)
    dwm = np.matmul(g, xm.transpose(0, 2, 1)).sum(axis=0)  # (o*4, c)
    dw = dwm.T.reshape(w.shape)
    dx = np.matmul(w.reshape(c, o * 4), g).reshape(x.shape)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def softmax_probabilities(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# --------------------------------------------------------------------------
# blocks


def residual_block(x, params, prefix: str, stride: int, slope: float = 0.01, cache: Optional[dict] = None):
    """conv(stride) -> norm -> leaky -> conv -> norm, plus skip, then leaky."""
    P = params
    w1 = P[f"{prefix}.conv1.weight"]
    if x.shape[1] != w1.shape[1]:
        raise ShapeError(f"{prefix}: expected {w1.shape[1]} input channels, got {x.shape[1]}")
    h1, c1 = conv2d(x, w1, P[f"{prefix}.conv1.bias"], stride)
    n1, cn1 = instance_norm(h1, P[f"{prefix}.norm1.weight"], P[f"{prefix}.norm1.bias"])
    a1, m1 = leaky_relu(n1, slope)
    h2, c2 = conv2d(a1, P[f"{prefix}.conv2.weight"], P[f"{prefix}.conv2.bias"], 1)
    n2, cn2 = instance_norm(h2, P[f"{prefix}.norm2.weight"], P[f"{prefix}.norm2.bias"])
    if f"{prefix}.skip.weight" in P:
        sk, cs = conv2d(x, P[f"{prefix}.skip.weight"], P[f"{prefix}.skip.bias"], stride)
    else:
        if stride != 1:
            raise ShapeError(f"{prefix}: strided block needs a projection skip")
        sk, cs = x, None
    out, m2 = leaky_relu(n2 + sk, slope)
    if cache is not None:
        cache[prefix] = (c1, cn1, m1, c2, cn2, cs, m2)
    return out


def residual_block_backward(dout, cache_entry, prefix: str, slope: float, grads: dict):
    c1, cn1, m1, c2, cn2, cs, m2 = cache_entry
    dz = leaky_relu_backward(dout, m2, slope)
    if cs is not None:
        dx_skip, grads[f"{prefix}.skip.weight"], grads[f"{prefix}.skip.bias"] = conv2d_backward(dz, cs)
    else:
        dx_skip = dz
    dh2, grads[f"{prefix}.norm2.weight"], grads[f"{prefix}.norm2.bias"] = instance_norm_backward(dz, cn2)
    da1, grads[f"{prefix}.conv2.weight"], grads[f"{prefix}.conv2.bias"] = conv2d_backward(dh2, c2)
    dn1 = leaky_relu_backward(da1, m1, slope)
    dh1, grads[f"{prefix}.norm1.weight"], grads[f"{prefix}.norm1.bias"] = instance_norm_backward(dn1, cn1)
    dx, grads[f"{prefix}.conv1.weight"], grads[f"{prefix}.conv1.bias"] = conv2d_backward(dh1, c1)
    return dx + dx_skip


def _conv_unit(x, params, prefix, slope, cache):
    h, c = conv2d(x, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"], 1)
    n, cn = instance_norm(h, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"])
    out, m = leaky_relu(n, slope)
    if cache is not None:
        cache[prefix] = (c, cn, m)
    return out


def _conv_unit_backward(dout, entry, prefix, slope, grads):
    c, cn, m = entry
    dn = leaky_relu_backward(dout, m, slope)
    dh, grads[f"{prefix}.norm.weight"], grads[f"{prefix}.norm.bias"] = instance_norm_backward(dn, cn)
    dx, grads[f"{prefix}.conv.weight"], grads[f"{prefix}.conv.bias"] = conv2d_backward(dh, c)
    return dx


# --------------------------------------------------------------------------
# whole network


@dataclass
class ForwardResult:
    logits: np.ndarray
    trace: list = field(default_factory=list)  # [(layer path, shape)]
    cache: Optional[dict] = None


def check_input(cfg: NetworkConfig, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected a batch of shape (N, C, H, W), got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channel(s), got {x.shape[1]}")
    h, w = x.shape[2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(
            f"spatial extents {h}x{w} must be divisible by {cfg.divisor} "
            f"(2^{cfg.stages - 1} for {cfg.stages} encoder stages)"
        )


def forward(cfg: NetworkConfig, params: NetworkParams, x: np.ndarray, train: bool = False) -> ForwardResult:
    """Class logits of shape (N, num_classes, H, W).

    With ``train=True`` the intermediate values needed by :func:`backward` are kept.
    """
    check_input(cfg, x)
    x = np.asarray(x, dtype=params.dtype)
    slope = cfg.negative_slope
    cache = {} if train else None
    trace = []
    skips = []
    h = x
    for s in range(cfg.stages):
        for b in range(cfg.blocks[s]):
            _, _, stride = _block_in_out(cfg, s, b)
            h = residual_block(h, params, f"enc{s}.b{b}", stride, slope, cache)
        trace.append((f"enc{s}", h.shape))
        skips.append(h)
    skips.pop()
    for d in range(cfg.stages - 1):
        up, cu = conv_transpose2x2(h, params[f"dec{d}.up.weight"], params[f"dec{d}.up.bias"])
        skip = skips.pop()
        h = np.concatenate([up, skip], axis=1)
        if cache is not None:
            cache[f"dec{d}.up"] = (cu, up.shape[1])
        for j in range(cfg.decoder_blocks):
            h = _conv_unit(h, params, f"dec{d}.b{j}", slope, cache)
        trace.append((f"dec{d}", h.shape))
        del up, skip
    logits, ch = conv2d(h, params["head.weight"], params["head.bias"], 1)
    if cache is not None:
        cache["head"] = ch
    trace.append(("head", logits.shape))
    return ForwardResult(logits, trace, cache)


def backward(cfg: NetworkConfig, params: NetworkParams, result: ForwardResult, dlogits: np.ndarray) -> NetworkParams:
    """Parameter gradients of a scalar loss given its gradient wrt the logits."""
    if result.cache is None:
        raise ValueError("forward was not run with train=True")
    cache = result.cache
    slope = cfg.negative_slope
    grads: dict = {}
    dh, grads["head.weight"], grads["head.bias"] = conv2d_backward(dlogits.astype(params.dtype, copy=False), cache["head"])
    dskips = []
    for d in reversed(range(cfg.stages - 1)):
        for j in reversed(range(cfg.decoder_blocks)):
            dh = _conv_unit_backward(dh, cache[f"dec{d}.b{j}"], f"dec{d}.b{j}", slope, grads)
        cu, n_up = cache[f"dec{d}.up"]
        dup, dskip = dh[:, :n_up], dh[:, n_up:]
        dskips.append(dskip)
        dh, grads[f"dec{d}.up.weight"], grads[f"dec{d}.up.bias"] = conv_transpose2x2_backward(np.ascontiguousarray(dup), cu)
    # dskips[0] belongs to the shallowest stage
    for s in reversed(range(cfg.stages)):
        if s < cfg.stages - 1:
            dh = dh + dskips[s]
        for b in reversed(range(cfg.blocks[s])):
            dh = residual_block_backward(dh, cache[f"enc{s}.b{b}"], f"enc{s}.b{b}", slope, grads)
    return NetworkParams((k, grads[k]) for k in params)


def predict_probabilities(cfg: NetworkConfig, params: NetworkParams, x: np.ndarray, batch: int = 8) -> np.ndarray:
    out = [softmax_probabilities(forward(cfg, params, x[i : i + batch]).logits) for i in range(0, len(x), batch)]
    return np.concatenate(out)


# --------------------------------------------------------------------------
# checkpoints: a ZIP (stored, fixed timestamps) of NPY arrays named
# "<layer path>.npy" plus "meta.json" holding the network config and extras.

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def checkpoint_bytes(cfg: NetworkConfig, params: NetworkParams, extra: Optional[dict] = None) -> bytes:
    meta = {"format": "infarctseg-checkpoint/1", "network": cfg.to_json(), "seed": cfg.seed, "order": list(params)}
    meta.update(extra or {})
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_DATE), json.dumps(meta, indent=2, sort_keys=True))
        for path, arr in params.items():
            b = io.BytesIO()
            np.lib.format.write_array(b, np.ascontiguousarray(arr), version=(1, 0), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{path}.npy", _ZIP_DATE), b.getvalue())
    return buf.getvalue()


def save_checkpoint(path, cfg: NetworkConfig, params: NetworkParams, extra: Optional[dict] = None) -> None:
    from .io.nifti import atomic_write

    atomic_write(path, checkpoint_bytes(cfg, params, extra))


def load_checkpoint(path) -> tuple[NetworkConfig, NetworkParams, dict]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as e:
        raise FormatError(f"{path}: not a checkpoint ({e})") from None
    with zf:
        meta = json.loads(zf.read("meta.json"))
        cfg = NetworkConfig.from_json(meta["network"])
        params = NetworkParams()
        for name in meta["order"]:
            with zf.open(f"{name}.npy") as f:
                params[name] = np.lib.format.read_array(io.BytesIO(f.read()), allow_pickle=False)
    expected = param_shapes(cfg)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise FormatError(f"{path}: parameter shapes do not match the stored network config")
    return cfg, params, meta
