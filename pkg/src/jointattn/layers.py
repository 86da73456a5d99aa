"""Feed-forward building blocks: 3-d convolution, dense layers and the
frozen two-branch feature extractor that stands in for a pretrained CNN."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError
from .tensor import Tensor


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def init_params(shape, seed, fan_in: int | None = None, fan_out: int | None = None) -> Tensor:
    """Glorot-uniform tensor: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    For matrices ``(out, in)`` and conv kernels ``(out, in, *k)`` the fans
    are inferred from the shape.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise DimensionError(f"init_params needs positive dims, got {shape}")
    if fan_in is None or fan_out is None:
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_out = shape[0] * receptive
        fan_in = (shape[1] if len(shape) > 1 else shape[0]) * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = as_rng(seed)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Ordered registry of parameters and sub-modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def register(self, name: str, value: Tensor) -> Tensor:
        value.name = name
        self._params[name] = value
        return value

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def trainable_parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def set_trainable(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = flag


# ---------------------------------------------------------------------------
# 3-d convolution
# ---------------------------------------------------------------------------


def conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded, stride-1 3-d convolution on channels-last input.

    ``x`` is ``(batch, T, H, W, C_in)``, ``w`` is ``(C_out, C_in, kt, kh, kw)``
    with odd kernel sizes, ``b`` is ``(C_out,)``.  Returns the pre-activation
    ``(batch, T, H, W, C_out)``.

    The kernel is applied as ``kt`` matrix products over an im2col buffer that
    holds the ``kh*kw`` spatial shifts; time is the leading buffer axis so each
    temporal offset is a contiguous slab.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"conv3d expects 5-d input and kernel, got {x.shape} and {w.shape}")
    nb, T, H, W, C = x.shape
    co, ci, kt, kh, kw = w.shape
    if ci != C:
        raise DimensionError(f"conv3d: input has {C} channels, kernel expects {ci}")
    if b.shape != (co,):
        raise DimensionError(f"conv3d: bias shape {b.shape}, expected ({co},)")
    if not (kt % 2 and kh % 2 and kw % 2):
        raise DimensionError(f"conv3d: kernel sizes must be odd, got {(kt, kh, kw)}")
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    shifts = [(dh, dw) for dh in range(kh) for dw in range(kw)]
    width = kh * kw * C
    dtype = np.result_type(x.data, w.data)

    xp = np.pad(x.data.transpose(1, 0, 2, 3, 4), ((pt, pt), (0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((T + 2 * pt, nb, H, W, kh * kw, C), dtype=dtype)
    for j, (dh, dw) in enumerate(shifts):
        cols[:, :, :, :, j, :] = xp[:, :, dh:dh + H, dw:dw + W, :]
    cols = cols.reshape(T + 2 * pt, nb * H * W, width)
    wm = w.data.transpose(2, 3, 4, 1, 0).reshape(kt, width, co)

    rows = T * nb * H * W
    out = np.empty((rows, co), dtype=dtype)
    out[:] = b.data
    for dt in range(kt):
        out += cols[dt:dt + T].reshape(rows, width) @ wm[dt]
    out = out.reshape(T, nb, H, W, co).transpose(1, 0, 2, 3, 4)

    def grad(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(rows, co)
        gw = np.empty((kt, width, co))
        dcols = np.zeros((T + 2 * pt, nb * H * W, width)) if x.requires_grad else None
        for dt in range(kt):
            gw[dt] = cols[dt:dt + T].reshape(rows, width).T @ g2
            if dcols is not None:
                dcols[dt:dt + T] += (g2 @ wm[dt].T).reshape(T, nb * H * W, width)
        gw = gw.reshape(kt, kh, kw, C, co).transpose(4, 3, 0, 1, 2)
        gb = g2.sum(axis=0)
        gx = None
        if dcols is not None:
            dcols = dcols.reshape(T + 2 * pt, nb, H, W, kh * kw, C)
            dxp = np.zeros((T + 2 * pt, nb, H + 2 * ph, W + 2 * pw, C))
            for j, (dh, dw) in enumerate(shifts):
                dxp[:, :, dh:dh + H, dw:dw + W, :] += dcols[:, :, :, :, j, :]
            gx = dxp[pt:pt + T, :, ph:ph + H, pw:pw + W, :].transpose(1, 0, 2, 3, 4)
        return gx, gw, gb

    return tn.make_op("conv3d", np.ascontiguousarray(out), (x, w, b), grad)


class Conv3dLayer(Module):
    def __init__(self, c_in: int, c_out: int, kernel=(3, 3, 3), seed=0, fan_in_only: bool = False):
        super().__init__()
        kernel = tuple(kernel)
        self.kernel = kernel
        shape = (c_out, c_in) + kernel
        if fan_in_only:
            # relu-preserving variance for the frozen stand-in: bound sqrt(6 / fan_in)
            w = init_params(shape, seed, fan_in=c_in * int(np.prod(kernel)), fan_out=0)
        else:
            w = init_params(shape, seed)
        self.weight = self.register("weight", w)
        self.bias = self.register("bias", Tensor(np.zeros(c_out), requires_grad=True))

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        """Channels-last ``(batch, T, H, W, C)`` forward with relu."""
        return tn.relu(conv3d(x, self.weight, self.bias))


def conv3d_forward(x: Tensor, layer: Conv3dLayer) -> Tensor:
    """relu(conv3d(x) + b) for a single ``C_in x T x H x W`` volume."""
    if x.ndim != 4:
        raise DimensionError(f"conv3d_forward expects C x T x H x W, got {x.shape}")
    if x.shape[0] != layer.c_in:
        raise DimensionError(f"conv3d_forward: input has {x.shape[0]} channels, layer expects {layer.c_in}")
    xl = tn.reshape(tn.transpose(x, (1, 2, 3, 0)), (1,) + x.shape[1:] + (x.shape[0],))
    y = layer(xl)
    return tn.transpose(tn.reshape(y, y.shape[1:]), (3, 0, 1, 2))


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------


class DenseLayer(Module):
    def __init__(self, n_in: int, n_out: int, seed=0):
        super().__init__()
        self.weight = self.register("weight", init_params((n_out, n_in), seed))
        self.bias = self.register("bias", Tensor(np.zeros(n_out), requires_grad=True))

    def __call__(self, x: Tensor, activation: str = "none") -> Tensor:
        return dense_forward(x, self, activation)


def dense_forward(x: Tensor, layer: DenseLayer, activation: str = "none") -> Tensor:
    y = tn.linear(x, layer.weight, layer.bias)
    if activation == "relu":
        return tn.relu(y)
    if activation != "none":
        raise ConfigError(f"unknown activation {activation!r}")
    return y


# ---------------------------------------------------------------------------
# Pre-conv extractor
# ---------------------------------------------------------------------------


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 spatial average pooling of ``(batch, T, H, W, C)``."""
    nb, T, H, W, C = x.shape
    y = tn.reshape(x, (nb, T, H // 2, 2, W // 2, 2, C))
    return tn.mean_axis(y, axis=(3, 5))


class PreConvExtractor(Module):
    """Two branches from one 2-d conv trunk.

    The trunk is three conv+pool stages (total downsampling 8); branch 1 is
    its output, branch 2 continues through ``deep_layers`` further convs at
    the same resolution.  Both emit ``K x K x N`` per frame.
    """

    downsample = 8

    def __init__(self, n_channels: int = 32, in_channels: int = 1, trunk_width: int = 16,
                 deep_layers: int = 2, seed=0, trainable: bool = False):
        super().__init__()
        rng = as_rng(seed)
        widths = [in_channels, trunk_width, n_channels, n_channels]
        self.trunk = [
            self.add_module(f"trunk{i}", Conv3dLayer(widths[i], widths[i + 1], (1, 3, 3), rng, fan_in_only=True))
            for i in range(3)
        ]
        self.deep = [
            self.add_module(f"deep{i}", Conv3dLayer(n_channels, n_channels, (1, 3, 3), rng, fan_in_only=True))
            for i in range(deep_layers)
        ]
        self.n_channels = n_channels
        self.in_channels = in_channels
        self.set_trainable(trainable)

    def grid_size(self, height: int, width: int) -> int:
        if height != width:
            raise ConfigError(f"extractor expects square frames, got {height}x{width}")
        if height % self.downsample:
            raise ConfigError(f"frame size {height} is not divisible by {self.downsample}")
        return height // self.downsample

    def __call__(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        """``(T, C, H, W)`` frames -> two ``(T, K*K, N)`` cube sequences."""
        if frames.ndim != 4 or frames.shape[1] != self.in_channels:
            raise DimensionError(f"extractor expects T x {self.in_channels} x H x W, got {frames.shape}")
        T, _, H, W = frames.shape
        k = self.grid_size(H, W)
        x = tn.reshape(tn.transpose(frames, (0, 2, 3, 1)), (1, T, H, W, self.in_channels))
        for layer in self.trunk:
            x = avg_pool2(layer(x))
        shallow = x
        for layer in self.deep:
            x = layer(x)
        n = self.n_channels
        return tn.reshape(shallow, (T, k * k, n)), tn.reshape(x, (T, k * k, n))


def extract_features(frames: Tensor, ex: PreConvExtractor) -> tuple[Tensor, Tensor]:
    if not any(p.requires_grad for _, p in ex.named_parameters()):
        with tn.no_grad():
            return ex(frames)
    return ex(frames)
