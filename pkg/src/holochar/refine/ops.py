"""Tensor layers with explicit forward/backward passes.

Feature maps are (H, W, C) arrays; there is no batch axis (training iterates
over frames).  Convolutions run as im2col + GEMM; the input gradient of a
same-padded 3x3 convolution is computed as another 3x3 convolution with the
spatially flipped, channel-transposed kernel, so both directions hit BLAS.
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError


class Param:
    """One learnable tensor: value plus accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _conv3x3_raw(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 convolution as 9 tap GEMMs with shifted accumulation.

    `taps` is (3, 3, Cin, Cout).  Each tap multiplies the *whole* contiguous
    input once and accumulates into a shifted window of a padded output, so
    no patch matrix is ever materialized (important on small-cache machines).
    """
    h, w, cin = x.shape
    cout = taps.shape[3]
    flat = x.reshape(h * w, cin)
    out_pad = np.zeros((h + 2, w + 2, cout), dtype=x.dtype)
    buf = np.empty((h * w, cout), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            np.matmul(flat, taps[ky, kx], out=buf)
            out_pad[2 - ky : 2 - ky + h, 2 - kx : 2 - kx + w] += buf.reshape(h, w, cout)
    return np.ascontiguousarray(out_pad[1:-1, 1:-1])


def _conv3x3_weight_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """d loss / d taps for _conv3x3_raw: (3, 3, Cin, Cout)."""
    h, w, cin = x.shape
    cout = grad_out.shape[2]
    flat_t = x.reshape(h * w, cin).T
    g_pad = np.zeros((h + 2, w + 2, cout), dtype=grad_out.dtype)
    g_pad[1:-1, 1:-1] = grad_out
    grad = np.empty((3, 3, cin, cout), dtype=grad_out.dtype)
    for ky in range(3):
        for kx in range(3):
            window = np.ascontiguousarray(g_pad[2 - ky : 2 - ky + h, 2 - kx : 2 - kx + w])
            grad[ky, kx] = flat_t @ window.reshape(h * w, cout)
    return grad


class Conv3x3:
    """3x3 convolution, stride 1, zero padding, bias.

    The input gradient is the correlation of the output gradient with the
    spatially flipped, channel-transposed kernel, so both backward products
    reuse the same tap-GEMM core as the forward pass.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32, name: str = "conv"):
        fan_in = 9 * cin
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(3, 3, cin, cout)).astype(dtype)
        self.cin = cin
        self.cout = cout
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(cout, dtype=dtype))
        self._x: np.ndarray | None = None

    def parameters(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[2] != self.cin:
            raise ValidationError(f"{self.weight.name}: expected {self.cin} input channels, got {x.shape[2]}")
        self._x = x
        out = _conv3x3_raw(x, self.weight.value)
        out += self.bias.value
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.bias.grad += grad_out.reshape(-1, self.cout).sum(axis=0)
        self.weight.grad += _conv3x3_weight_grad(self._x, grad_out)
        flipped = np.ascontiguousarray(self.weight.value[::-1, ::-1].transpose(0, 1, 3, 2))
        gx = _conv3x3_raw(grad_out, flipped)
        self._x = None
        return gx


class LeakyReLU:
    def __init__(self, slope: float = 0.2):
        self.slope = slope
        self._keep: np.ndarray | None = None

    def parameters(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._keep = x > 0
        return np.where(self._keep, x, self.slope * x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = np.where(self._keep, grad_out, self.slope * grad_out)
        self._keep = None
        return g


class AvgPool2:
    """2x2 average pooling, stride 2; input dimensions must be even."""

    def parameters(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValidationError(f"pooling needs even dimensions, got {h}x{w}")
        self._shape = (h, w, c)
        return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        h, w, c = self._shape
        g = np.repeat(np.repeat(grad_out, 2, axis=0), 2, axis=1)
        return (g * grad_out.dtype.type(0.25)).astype(grad_out.dtype, copy=False)


class UpsampleNearest2:
    def parameters(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        h, w, c = grad_out.shape
        return grad_out.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))


class PixelShuffle2:
    """Rearrange (H, W, 4C) into (2H, 2W, C)."""

    def parameters(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        h, w, c4 = x.shape
        if c4 % 4:
            raise ValidationError(f"pixel shuffle needs channels divisible by 4, got {c4}")
        c = c4 // 4
        return x.reshape(h, w, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(2 * h, 2 * w, c)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        h2, w2, c = grad_out.shape
        h, w = h2 // 2, w2 // 2
        return grad_out.reshape(h, 2, w, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, 4 * c)
