"""Convolutional autoencoder with hand-written reverse-mode gradients.

Activations are NHWC numpy arrays. Two layouts are supported, matching the
two classic image-to-image designs:

* ``downsample="maxpool"``, ``upsample="transposed"``, skips on (HDR style)
* ``downsample="strided"``, ``upsample="resize"``, skips off (colorization style)

Layer schedule for ``encoder_widths = [w1, ..., wS]``::

    e_s = relu(conv(h_{s-1}))               w_{s-1} -> w_s
    h_s = maxpool(e_s) | relu(conv_s2(e_s))  w_s -> w_s
    d   = relu(conv(h_S))                    bottleneck, w_S -> w_S
    for s = S..1:
        u = relu(tconv2x2(d)) | relu(conv(nearest2x(d)))     -> w_s
        u = concat(u, e_s) if skips
        d = relu(conv(u))                                    -> w_s
    out = conv(d)                            w_1 -> output_channels, identity
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, UsageError

DOWNSAMPLE_MODES = ("strided", "maxpool")
UPSAMPLE_MODES = ("resize", "transposed")


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 1
    output_channels: int = 1
    encoder_widths: tuple[int, ...] = (8, 16)
    use_skip_connections: bool = True
    downsample: str = "maxpool"
    upsample: str = "transposed"
    kernel_size: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if not self.encoder_widths or min(self.encoder_widths) < 1:
            raise ConfigError("encoder_widths must be a non-empty list of positive ints")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.downsample not in DOWNSAMPLE_MODES:
            raise ConfigError(f"downsample must be one of {DOWNSAMPLE_MODES}")
        if self.upsample not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample must be one of {UPSAMPLE_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def stages(self) -> int:
        return len(self.encoder_widths)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...], tuple[int, ...]]]:
        """(name, weight shape, bias shape) for every layer, in parameter order."""
        k = self.kernel_size
        ws = self.encoder_widths
        shapes = []
        prev = self.input_channels
        for s, w in enumerate(ws):
            shapes.append((f"enc{s}", (k, k, prev, w), (w,)))
            if self.downsample == "strided":
                shapes.append((f"down{s}", (k, k, w, w), (w,)))
            prev = w
        shapes.append(("bottleneck", (k, k, prev, prev), (prev,)))
        for s in reversed(range(self.stages)):
            w = ws[s]
            if self.upsample == "transposed":
                shapes.append((f"up{s}", (2, 2, prev, w), (w,)))
            else:
                shapes.append((f"up{s}", (k, k, prev, w), (w,)))
            fan = 2 * w if self.use_skip_connections else w
            shapes.append((f"dec{s}", (k, k, fan, w), (w,)))
            prev = w
        shapes.append(("out", (k, k, prev, self.output_channels), (self.output_channels,)))
        return shapes

    def to_json(self) -> str:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls(**json.loads(text))


@dataclass
class Network:
    config: NetworkConfig
    params: list[np.ndarray]  # [W0, b0, W1, b1, ...] in layer order
    version: int = 0

    @property
    def layer_names(self) -> list[str]:
        return [name for name, _, _ in self.config.layer_shapes()]

    def layer(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        i = self.layer_names.index(name)
        return self.params[2 * i], self.params[2 * i + 1]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "Network":
        return Network(self.config, [p.copy() for p in self.params], self.version)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


@dataclass
class GradientTape:
    """Intermediates recorded by :func:`forward` for one backward pass."""

    records: dict = field(default_factory=dict)
    owner: int | None = None
    version: int | None = None
    batched: bool = True
    used: bool = False


def init_network(cfg: NetworkConfig, rng: np.random.Generator) -> Network:
    """Fan-in scaled uniform weights (He-uniform), zero biases."""
    if not isinstance(cfg, NetworkConfig):
        raise ConfigError("cfg must be a NetworkConfig")
    dt = np.dtype(cfg.dtype)
    params = []
    for _, wshape, bshape in cfg.layer_shapes():
        fan_in = wshape[0] * wshape[1] * wshape[2]
        bound = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-bound, bound, size=wshape).astype(dt))
        params.append(np.zeros(bshape, dtype=dt))
    return Network(cfg, params)


# ---------------------------------------------------------------------------
# primitive ops: forward returns (out, cache); backward returns input/param grads


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    p = k // 2
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    if stride > 1:
        win = win[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c), (ho, wo)


def conv_forward(x, wgt, b, stride=1):
    k = wgt.shape[0]
    n = x.shape[0]
    cols, (ho, wo) = _im2col(x, k, stride)
    out = cols @ wgt.reshape(-1, wgt.shape[-1]) + b
    return out.reshape(n, ho, wo, -1), (cols, x.shape, stride)


def conv_backward(gout, wgt, cache):
    cols, xshape, stride = cache
    k, _, cin, cout = wgt.shape
    g2 = gout.reshape(-1, cout)
    gw = (cols.T @ g2).reshape(wgt.shape)
    gb = g2.sum(axis=0)
    n, h, w, _ = xshape
    p = k // 2
    if stride == 1 and cout < cin:
        # correlate with the flipped kernel: one large matmul beats k*k thin ones
        gcols, _ = _im2col(gout, k, 1)
        wf = wgt[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, cin)
        return (gcols @ wf).reshape(xshape), gw, gb
    gpad = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=gout.dtype)
    ho, wo = gout.shape[1], gout.shape[2]
    for di in range(k):
        for dj in range(k):
            tap = (g2 @ wgt[di, dj].T).reshape(n, ho, wo, cin)
            gpad[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += tap
    gx = gpad[:, p:p + h, p:p + w] if p else gpad
    return gx, gw, gb


def tconv_forward(x, wgt, b):
    """Transposed convolution, 2x2 kernel, stride 2 (non-overlapping)."""
    n, h, w, cin = x.shape
    cout = wgt.shape[-1]
    wm = wgt.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    x2 = x.reshape(-1, cin)
    out = (x2 @ wm).reshape(n, h, w, 2, 2, cout).transpose(0, 1, 3, 2, 4, 5)
    return out.reshape(n, 2 * h, 2 * w, cout) + b, x2


def tconv_backward(gout, wgt, x2, xshape):
    n, h, w, cin = xshape
    cout = wgt.shape[-1]
    g = gout.reshape(n, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
    wm = wgt.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    gx = (g @ wm.T).reshape(xshape)
    gw = (x2.T @ g).reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3)
    gb = gout.reshape(-1, cout).sum(axis=0)
    return gx, gw, gb


def maxpool_forward(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(gout, idx, xshape):
    n, h, w, c = xshape
    g = np.zeros(gout.shape + (4,), dtype=gout.dtype)
    np.put_along_axis(g, idx[..., None], gout[..., None], axis=-1)
    g = g.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return g.reshape(xshape)


def upsample_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(gout):
    n, h, w, c = gout.shape
    return gout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------


def _check_input(net: Network, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    batched = x.ndim == 4
    if x.ndim == 3:
        x = x[None]
    elif x.ndim != 4:
        raise DimensionError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")
    cfg = net.config
    if x.shape[-1] != cfg.input_channels:
        raise DimensionError(f"expected {cfg.input_channels} input channels, got {x.shape[-1]}")
    f = 2 ** cfg.stages
    if x.shape[1] % f or x.shape[2] % f:
        raise DimensionError(f"spatial size {x.shape[1:3]} not divisible by {f}")
    return x.astype(net.params[0].dtype, copy=False), batched


def forward(net: Network, x: np.ndarray, tape: GradientTape | None = None) -> np.ndarray:
    """Apply the network to an image or a batch; record intermediates on ``tape``."""
    x, batched = _check_input(net, x)
    cfg = net.config
    P = dict(zip(net.layer_names, zip(net.params[0::2], net.params[1::2])))
    rec = {}
    h = x
    skips = []
    for s in range(cfg.stages):
        z, rec[f"enc{s}"] = conv_forward(h, *P[f"enc{s}"])
        e = np.maximum(z, 0)
        rec[f"enc{s}_relu"] = z > 0
        skips.append(e)
        if cfg.downsample == "maxpool":
            h, rec[f"pool{s}"] = maxpool_forward(e)
            rec[f"pool{s}_shape"] = e.shape
        else:
            z, rec[f"down{s}"] = conv_forward(e, *P[f"down{s}"], stride=2)
            h = np.maximum(z, 0)
            rec[f"down{s}_relu"] = z > 0
    z, rec["bottleneck"] = conv_forward(h, *P["bottleneck"])
    d = np.maximum(z, 0)
    rec["bottleneck_relu"] = z > 0
    for s in reversed(range(cfg.stages)):
        if cfg.upsample == "transposed":
            z, rec[f"up{s}"] = tconv_forward(d, *P[f"up{s}"])
            rec[f"up{s}_shape"] = d.shape
        else:
            z, rec[f"up{s}"] = conv_forward(upsample_forward(d), *P[f"up{s}"])
        u = np.maximum(z, 0)
        rec[f"up{s}_relu"] = z > 0
        if cfg.use_skip_connections:
            u = np.concatenate([u, skips[s]], axis=-1)
        z, rec[f"dec{s}"] = conv_forward(u, *P[f"dec{s}"])
        d = np.maximum(z, 0)
        rec[f"dec{s}_relu"] = z > 0
    out, rec["out"] = conv_forward(d, *P["out"])
    if tape is not None:
        tape.records = rec
        tape.owner = id(net)
        tape.version = net.version
        tape.batched = batched
        tape.used = False
    return out if batched else out[0]


def backward(net: Network, tape: GradientTape, loss_grad: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients of a scalar loss given d(loss)/d(output)."""
    if tape is None or not tape.records:
        raise UsageError("backward needs a tape filled by forward")
    if tape.owner != id(net) or tape.version != net.version:
        raise UsageError("tape is stale: network changed since forward")
    if tape.used:
        raise UsageError("tape was already consumed by a backward pass")
    cfg = net.config
    rec = tape.records
    g = np.asarray(loss_grad, dtype=net.params[0].dtype)
    if not tape.batched:
        g = g[None]
    names = net.layer_names
    P = dict(zip(names, zip(net.params[0::2], net.params[1::2])))
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    expected = rec["out"][1][:3] + (cfg.output_channels,)
    if g.shape != expected:
        raise DimensionError(f"loss gradient shape {g.shape} != output shape {expected}")
    g, gw, gb = conv_backward(g, P["out"][0], rec["out"])
    grads["out"] = (gw, gb)
    skip_grads = [None] * cfg.stages
    for s in range(cfg.stages):
        g = g * rec[f"dec{s}_relu"]
        g, gw, gb = conv_backward(g, P[f"dec{s}"][0], rec[f"dec{s}"])
        grads[f"dec{s}"] = (gw, gb)
        if cfg.use_skip_connections:
            w = cfg.encoder_widths[s]
            g, skip_grads[s] = g[..., :w], g[..., w:]
        g = g * rec[f"up{s}_relu"]
        if cfg.upsample == "transposed":
            g, gw, gb = tconv_backward(g, P[f"up{s}"][0], rec[f"up{s}"], rec[f"up{s}_shape"])
        else:
            g, gw, gb = conv_backward(g, P[f"up{s}"][0], rec[f"up{s}"])
            g = upsample_backward(g)
        grads[f"up{s}"] = (gw, gb)
    g = g * rec["bottleneck_relu"]
    g, gw, gb = conv_backward(g, P["bottleneck"][0], rec["bottleneck"])
    grads["bottleneck"] = (gw, gb)
    for s in reversed(range(cfg.stages)):
        if cfg.downsample == "maxpool":
            g = maxpool_backward(g, rec[f"pool{s}"], rec[f"pool{s}_shape"])
        else:
            g = g * rec[f"down{s}_relu"]
            g, gw, gb = conv_backward(g, P[f"down{s}"][0], rec[f"down{s}"])
            grads[f"down{s}"] = (gw, gb)
        if skip_grads[s] is not None:
            g = g + skip_grads[s]
        g = g * rec[f"enc{s}_relu"]
        g, gw, gb = conv_backward(g, P[f"enc{s}"][0], rec[f"enc{s}"])
        grads[f"enc{s}"] = (gw, gb)
    tape.used = True
    out = []
    for name in names:
        out.extend(grads[name])
    return out


# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None
    t: int = 0


@dataclass(frozen=True)
class AdamHyperparams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def apply_update(net: Network, grads, state: AdamState, hp: AdamHyperparams = AdamHyperparams()):
    """One bias-corrected Adam step, in place. Returns ``(net, state)``."""
    if len(grads) != len(net.params):
        raise DimensionError("gradient list does not match parameter list")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in net.params]
        state.v = [np.zeros_like(p) for p in net.params]
    state.t += 1
    bc1 = 1.0 - hp.beta1 ** state.t
    bc2 = 1.0 - hp.beta2 ** state.t
    for p, g, m, v in zip(net.params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * (g * g)
        p -= (hp.lr * (m / bc1) / (np.sqrt(v / bc2) + hp.eps)).astype(p.dtype)
    net.version += 1
    return net, state


# ---------------------------------------------------------------------------
# checkpoint: magic, u32 version, u32 config length, config JSON, u64 param count,
# then every parameter as little-endian float64 in layer order

MAGIC = b"TSNN"
FORMAT_VERSION = 1


def save_checkpoint(net: Network, path) -> None:
    cfg = net.config.to_json().encode("utf-8")
    flat = np.concatenate([p.ravel() for p in net.params]).astype("<f8")
    Path(path).write_bytes(
        MAGIC
        + struct.pack("<II", FORMAT_VERSION, len(cfg))
        + cfg
        + struct.pack("<Q", flat.size)
        + flat.tobytes()
    )


def load_checkpoint(path) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, clen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = NetworkConfig.from_json(data[12:12 + clen].decode("utf-8"))
    (count,) = struct.unpack_from("<Q", data, 12 + clen)
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=20 + clen)
    dt = np.dtype(cfg.dtype)
    params = []
    pos = 0
    for _, wshape, bshape in cfg.layer_shapes():
        for shape in (wshape, bshape):
            size = int(np.prod(shape))
            params.append(flat[pos:pos + size].reshape(shape).astype(dt))
            pos += size
    if pos != count:
        raise ValueError(f"{path}: parameter count mismatch")
    return Network(cfg, params)
