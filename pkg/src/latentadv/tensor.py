"""Dense array primitives shared by the rest of the package.

Tensors are plain ``numpy.ndarray`` values in float64. Random streams come from
``numpy.random.Generator`` over PCG64, seeded through ``SeedSequence`` so that
streams can be split deterministically for parallel work.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._kernels import col2im_nhwc

DTYPE = np.float64
NORMS = ("linf", "l2")


class ShapeError(ValueError):
    """Operand shapes do not agree."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child streams from ``rng``."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def as_tensor(data, shape=None) -> np.ndarray:
    t = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(shape)
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"input size {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold a channels-last batch ``(N, H, W, C)`` into rows ``(N*H'*W', kh*kw*C)``.

    Column order is (kh, kw, C) so each copied run ``kw*C`` is contiguous.
    """
    n, h, w, c = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (N, H', W', C, kh, kw) -> (N, H', W', kh, kw, C)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back into a channels-last ``x_shape``."""
    n, h, w, c = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    out = col2im_nhwc(np.ascontiguousarray(cols), n, h, w, c, kh, kw, stride, padding, ho, wo)
    if padding:
        out = out[:, padding:-padding, padding:-padding]
    return out


def kernel_matrix(kernels: np.ndarray) -> np.ndarray:
    """``(C_out, C_in, kh, kw)`` kernels as a ``(C_out, kh*kw*C_in)`` matrix matching :func:`im2col`."""
    return kernels.transpose(0, 2, 3, 1).reshape(kernels.shape[0], -1)


def conv2d_batch(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0):
    """Batched cross-correlation on ``(N, C, H, W)``. Returns ``(output, cols)`` so callers may reuse the unfold."""
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects (N,C,H,W) input and 4-D kernels, got {x.shape}, {kernels.shape}")
    cout, cin, kh, kw = kernels.shape
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    n, _, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = im2col(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), kh, kw, stride, padding)
    out = cols @ kernel_matrix(kernels).T
    out += bias
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2), cols


def conv2d(input: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Single-image cross-correlation: ``(C_in, H, W) -> (C_out, H', W')``."""
    if input.ndim != 3:
        raise ShapeError(f"conv2d expects a (C, H, W) input, got {input.shape}")
    return conv2d_batch(input[None], kernels, bias, stride, padding)[0][0]


def sign(t: np.ndarray) -> np.ndarray:
    # np.sign maps 0 to 0, which keeps FGSM a no-op on zero gradients.
    return np.sign(t)


def linf_norm(t: np.ndarray) -> float:
    return float(np.max(np.abs(t))) if np.size(t) else 0.0


def l2_norm(t: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(t, dtype=DTYPE))))


def _check_norm(norm: str) -> None:
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}; expected one of {NORMS}")


def ball_noise(rng: np.random.Generator, shape, eps: float, norm: str, batched: bool = False) -> np.ndarray:
    """Uniform noise in the eps-ball; with ``batched`` each row along axis 0 is its own point."""
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    _check_norm(norm)
    shape = tuple(shape)
    if norm == "linf":
        return rng.uniform(-eps, eps, size=shape)
    rows = shape[0] if batched else 1
    dim = int(np.prod(shape[1:] if batched else shape))
    direction = rng.standard_normal((rows, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = eps * rng.uniform(0.0, 1.0, size=(rows, 1)) ** (1.0 / dim)
    return (direction * radius).reshape(shape)


def sample_uniform_ball(rng: np.random.Generator, center: np.ndarray, eps: float, norm: str = "linf") -> np.ndarray:
    """Draw one point uniformly from the ``norm`` ball of radius ``eps`` around ``center``."""
    center = np.asarray(center, dtype=DTYPE)
    if eps == 0:
        _check_norm(norm)
        return center.copy()
    return center + ball_noise(rng, center.shape, eps, norm)
