"""Layered feed-forward networks with exact reverse-mode gradients.

A network ``f = f_l o ... o f_1`` is a list of layers. Boundary ``i`` is the
activation after layer ``i``; boundary 0 is the input itself. ``h_i`` maps the
input to boundary ``i`` and ``g_i`` maps boundary ``i`` to the logits, so
``forward_from(i, h_i(x))`` reproduces ``f(x)``.

All layer code works on batches with a leading sample axis. Public entry points
also accept a single unbatched sample.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ._kernels import maxpool2_backward, maxpool2_forward
from .tensor import DTYPE, ShapeError, col2im, conv2d_batch, conv_output_size, kernel_matrix

# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"

    @property
    def params(self) -> list[np.ndarray]:
        return []

    def with_params(self, params: list[np.ndarray]) -> "Layer":
        return self

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, x, y, cache, need_dx=True, need_params=True):
        """Return ``(dx, [param grads])`` given the upstream gradient ``dy``."""
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}

    def astype(self, dtype) -> "Layer":
        return self.with_params([p.astype(dtype) for p in self.params]) if self.params else self


@dataclass(frozen=True, eq=False)
class Dense(Layer):
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    kind = "dense"

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"dense weights {self.weights.shape} and bias {self.bias.shape} do not agree")

    @property
    def params(self):
        return [self.weights, self.bias]

    def with_params(self, params):
        w, b = params
        return Dense(w, b)

    def output_shape(self, input_shape):
        if input_shape != (self.weights.shape[1],):
            raise ShapeError(f"dense layer expects input {(self.weights.shape[1],)}, got {input_shape}")
        return (self.weights.shape[0],)

    def forward(self, x):
        return x @ self.weights.T + self.bias, None

    def backward(self, dy, x, y, cache, need_dx=True, need_params=True):
        grads = [dy.T @ x, dy.sum(axis=0)] if need_params else None
        dx = dy @ self.weights if need_dx else None
        return dx, grads

    def config(self):
        return {"kind": self.kind, "in": int(self.weights.shape[1]), "out": int(self.weights.shape[0])}


@dataclass(frozen=True, eq=False)
class Conv2D(Layer):
    kernels: np.ndarray  # (C_out, C_in, kh, kw)
    bias: np.ndarray  # (C_out,)
    stride: int = 1
    padding: int = 0
    kind = "conv2d"

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError(f"conv kernels {self.kernels.shape} and bias {self.bias.shape} do not agree")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"conv needs stride >= 1 and padding >= 0, got {self.stride}, {self.padding}")

    @property
    def params(self):
        return [self.kernels, self.bias]

    def with_params(self, params):
        k, b = params
        return Conv2D(k, b, self.stride, self.padding)

    def output_shape(self, input_shape):
        cout, cin, kh, kw = self.kernels.shape
        if len(input_shape) != 3 or input_shape[0] != cin:
            raise ShapeError(f"conv layer expects ({cin}, H, W) input, got {input_shape}")
        _, h, w = input_shape
        return (cout, conv_output_size(h, kh, self.stride, self.padding), conv_output_size(w, kw, self.stride, self.padding))

    def forward(self, x):
        return conv2d_batch(x, self.kernels, self.bias, self.stride, self.padding)

    def backward(self, dy, x, y, cache, need_dx=True, need_params=True):
        cols = cache
        cout, cin, kh, kw = self.kernels.shape
        dy_rows = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
        grads = None
        if need_params:
            dk = (dy_rows.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
            grads = [np.ascontiguousarray(dk), dy.sum(axis=(0, 2, 3))]
        dx = None
        if need_dx:
            dcols = dy_rows @ kernel_matrix(self.kernels)
            n, _, h, w = x.shape
            dx = col2im(dcols, (n, h, w, cin), kh, kw, self.stride, self.padding).transpose(0, 3, 1, 2)
        return dx, grads

    def config(self):
        cout, cin, kh, kw = self.kernels.shape
        return {"kind": self.kind, "in_channels": int(cin), "out_channels": int(cout),
                "kernel": [int(kh), int(kw)], "stride": self.stride, "padding": self.padding}


@dataclass(frozen=True, eq=False)
class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0), None

    def backward(self, dy, x, y, cache, need_dx=True, need_params=True):
        # subgradient 0 at the kink
        return (dy * (x > 0) if need_dx else None), []


@dataclass(frozen=True, eq=False)
class MaxPool2D(Layer):
    window: int = 2
    stride: int = 2
    kind = "maxpool2d"

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"max-pool expects (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        return (c, conv_output_size(h, self.window, self.stride, 0), conv_output_size(w, self.window, self.stride, 0))

    def _windows(self, x):
        k, s = self.window, self.stride
        n, c, h, w = x.shape
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if k == s and h % k == 0 and w % k == 0:
            return x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.reshape(n, c, ho, wo, k * k)

    def _fast(self, x) -> bool:
        return self.window == self.stride == 2 and x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0

    def forward(self, x):
        if self._fast(x):
            # strict > keeps the first maximal element in row-major window order
            return maxpool2_forward(np.ascontiguousarray(x))
        win = self._windows(x)
        idx = win.argmax(axis=-1)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx

    def backward(self, dy, x, y, cache, need_dx=True, need_params=True):
        if not need_dx:
            return None, []
        idx = cache
        if self._fast(x):
            return maxpool2_backward(np.ascontiguousarray(dy), idx, x.shape[2], x.shape[3]), []
        k, s = self.window, self.stride
        n, c, h, w = x.shape
        ho, wo = dy.shape[2], dy.shape[3]
        dx = np.zeros(x.shape, dtype=dy.dtype)
        ii, jj = np.divmod(idx, k)
        rows = np.arange(ho)[None, None, :, None] * s + ii
        cols = np.arange(wo)[None, None, None, :] * s + jj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (nn, cc, rows, cols), dy)
        return dx, []

    def config(self):
        return {"kind": self.kind, "window": self.window, "stride": self.stride}


@dataclass(frozen=True, eq=False)
class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), None

    def backward(self, dy, x, y, cache, need_dx=True, need_params=True):
        return (dy.reshape(x.shape) if need_dx else None), []


# ---------------------------------------------------------------- loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_per_sample(logits: np.ndarray, labels) -> np.ndarray:
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    return -np.take_along_axis(log_softmax(logits), labels[:, None], axis=1)[:, 0]


def loss_cross_entropy(logits: np.ndarray, label) -> float:
    """Cross-entropy of one logit vector, or the batch mean for a 2-D array."""
    return float(cross_entropy_per_sample(logits, label).mean())


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray, mean: bool = True) -> np.ndarray:
    """Gradient of the batch-mean (or summed) cross-entropy with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels) if mean else p


# ---------------------------------------------------------------- network


@dataclass
class ForwardTrace:
    """Activations at every boundary from ``start`` to the logits, batched."""

    start: int
    batch: list[np.ndarray]
    caches: list = field(repr=False)
    squeeze: bool = False

    @property
    def activations(self) -> list[np.ndarray]:
        return [a[0] for a in self.batch] if self.squeeze else list(self.batch)

    @property
    def logits(self) -> np.ndarray:
        return self.batch[-1][0] if self.squeeze else self.batch[-1]

    @property
    def stop(self) -> int:
        return self.start + len(self.batch) - 1

    def at(self, index: int) -> np.ndarray:
        """Batched activation at boundary ``index``."""
        return self.batch[index - self.start]


@dataclass
class GradientBundle:
    param_grads: list  # per layer: list of arrays (empty for parameter-free layers) or None
    input_grad: np.ndarray | None
    latent_grad: tuple[int, np.ndarray] | None = None


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"network output shape {shapes[-1]} does not match {self.num_classes} classes")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.params:
                return layer.params[0].dtype
        return np.dtype(DTYPE)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def with_parameters(self, params: list[np.ndarray]) -> "Network":
        it = iter(params)
        layers = [layer.with_params([next(it) for _ in layer.params]) if layer.params else layer for layer in self.layers]
        return Network(layers, self.input_shape, self.num_classes)

    def astype(self, dtype) -> "Network":
        return Network([layer.astype(dtype) for layer in self.layers], self.input_shape, self.num_classes)

    def architecture(self) -> dict:
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "layers": [layer.config() for layer in self.layers]}

    def fingerprint(self) -> str:
        h = hashlib.sha256(repr(self.architecture()).encode())
        for p in self.parameters():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def check_index(self, i: int, allow_logits: bool = False) -> int:
        top = self.depth if allow_logits else self.depth - 1
        if not isinstance(i, (int, np.integer)) or not 0 <= i <= top:
            raise ValueError(f"layer index {i} outside [0, {top}] for a {self.depth}-layer network")
        return int(i)

    # ------------------------------------------------------------ passes

    def _batch(self, x, i):
        shape = self.shapes[i]
        x = np.asarray(x, dtype=self.dtype)
        if x.shape == shape:
            return x[None], True
        if x.shape[1:] != shape:
            raise ShapeError(f"boundary {i} expects shape {shape} (optionally batched), got {x.shape}")
        return x, False

    def forward(self, x, start: int = 0, stop: int | None = None) -> ForwardTrace:
        """Run layers ``start+1 .. stop`` on ``x`` (the activation at boundary ``start``).

        ``stop`` defaults to the logits boundary.
        """
        start = self.check_index(start)
        stop = self.depth if stop is None else self.check_index(stop, allow_logits=True)
        if stop < start:
            raise ValueError(f"stop boundary {stop} precedes start {start}")
        xb, squeeze = self._batch(x, start)
        acts, caches = [xb], []
        for layer in self.layers[start:stop]:
            y, cache = layer.forward(acts[-1])
            acts.append(y)
            caches.append(cache)
        return ForwardTrace(start, acts, caches, squeeze)

    def forward_from(self, i: int, latent) -> np.ndarray:
        """Logits of the sub-network ``g_i`` applied to ``latent``."""
        return self.forward(latent, start=i).logits

    def latent(self, x, i: int) -> np.ndarray:
        """``h_i(x)``, batched like ``x``."""
        i = self.check_index(i, allow_logits=True)
        xb, squeeze = self._batch(x, 0)
        for layer in self.layers[:i]:
            xb = layer.forward(xb)[0]
        return xb[0] if squeeze else xb

    def logits(self, x) -> np.ndarray:
        return self.forward(x).logits

    def vjp(self, trace: ForwardTrace, upstream: np.ndarray, top: int | None = None, *,
            need_params: bool = True, need_input: bool = True, latent_at: int | None = None) -> GradientBundle:
        """Pull ``upstream`` (gradient at boundary ``top``) back to the trace start."""
        top = trace.stop if top is None else top
        if not trace.start <= top <= trace.stop:
            raise ValueError(f"boundary {top} is not covered by a trace starting at {trace.start}")
        if latent_at is not None and not trace.start <= latent_at <= top:
            raise ValueError(f"latent index {latent_at} outside [{trace.start}, {top}]")
        upstream = np.asarray(upstream, dtype=self.dtype)
        if trace.squeeze:
            upstream = upstream[None]
        stop = trace.start
        if not need_params and not need_input:
            stop = latent_at if latent_at is not None else top
        param_grads: list = [None] * self.depth
        latent = None
        g = upstream
        if latent_at == top:
            latent = (top, g)
        for k in range(top, stop, -1):
            layer = self.layers[k - 1]
            j = k - trace.start  # position of layer output in trace
            need_dx = k - 1 > stop or (k - 1 == stop and (need_input or latent_at == stop))
            dx, grads = layer.backward(g, trace.batch[j - 1], trace.batch[j], trace.caches[j - 1],
                                       need_dx=need_dx, need_params=need_params)
            param_grads[k - 1] = grads if need_params else None
            g = dx
            if latent_at == k - 1:
                latent = (k - 1, g)
            if g is None:
                break
        input_grad = g if need_input and stop == trace.start else None
        if trace.squeeze:
            input_grad = None if input_grad is None else input_grad[0]
            if latent is not None:
                latent = (latent[0], latent[1][0])
        return GradientBundle(param_grads, input_grad, latent)

    def backward(self, trace: ForwardTrace, label, want_latent_grad_at: int | None = None, *,
                 need_params: bool = True, need_input: bool = True, reduction: str = "mean") -> GradientBundle:
        """Gradients of the cross-entropy of ``trace``'s logits.

        ``reduction="sum"`` differentiates the summed per-sample losses, which gives
        each sample its own exact gradient (what attacks want).
        """
        if trace.stop != self.depth:
            raise ValueError("backward needs a trace that reaches the logits")
        if want_latent_grad_at is not None:
            want_latent_grad_at = self.check_index(want_latent_grad_at)
            if want_latent_grad_at < trace.start:
                raise ValueError(f"latent index {want_latent_grad_at} precedes trace start {trace.start}")
        labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {reduction!r}")
        dlogits = cross_entropy_grad(trace.batch[-1], labels, mean=reduction == "mean")
        return self.vjp(trace, dlogits[0] if trace.squeeze else dlogits, need_params=need_params,
                        need_input=need_input, latent_at=want_latent_grad_at)

    def loss_and_grads(self, x, labels, start: int = 0, **kw):
        trace = self.forward(x, start=start)
        loss = loss_cross_entropy(trace.batch[-1], labels)
        return loss, self.backward(trace, labels, **kw), trace

    # ------------------------------------------------------------ scoring

    def predict(self, x, start: int = 0):
        logits = self.forward(x, start=start).logits
        # argmax returns the lowest index among ties
        return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)

    def predict_batched(self, x, start: int = 0, chunk: int = 500) -> np.ndarray:
        x = np.asarray(x)
        return np.concatenate([np.atleast_1d(self.predict(x[k:k + chunk], start)) for k in range(0, len(x), chunk)])


def predict(net: Network, x):
    return net.predict(x)


def accuracy(net: Network, images, labels, start: int = 0) -> float:
    """Fraction of ``images`` (activations at boundary ``start``) classified as ``labels``."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(net.predict_batched(images, start) == labels))


# ---------------------------------------------------------------- builders


def he_dense(rng: np.random.Generator, n_in: int, n_out: int) -> Dense:
    return Dense(rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in), np.zeros(n_out))


def he_conv(rng: np.random.Generator, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0) -> Conv2D:
    fan_in = c_in * k * k
    return Conv2D(rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in), np.zeros(c_out), stride, padding)


def mlp(rng: np.random.Generator, sizes: list[int]) -> Network:
    """Dense/ReLU stack; ``sizes`` lists input, hidden and class counts."""
    layers: list[Layer] = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(he_dense(rng, a, b))
        if k < len(sizes) - 2:
            layers.append(ReLU())
    return Network(layers, (sizes[0],), sizes[-1])


def mnist_cnn(rng: np.random.Generator, width: float = 1.0) -> Network:
    """Two 5x5 conv/pool stages and a 1024-unit dense layer, the usual small MNIST CNN.

    ``width`` scales every channel/unit count; 1.0 is the standard model.
    """
    c1, c2, d = (max(1, int(round(v * width))) for v in (32, 64, 1024))
    layers = [
        he_conv(rng, 1, c1, 5, padding=2), ReLU(), MaxPool2D(2, 2),
        he_conv(rng, c1, c2, 5, padding=2), ReLU(), MaxPool2D(2, 2),
        Flatten(), he_dense(rng, c2 * 7 * 7, d), ReLU(), he_dense(rng, d, 10),
    ]
    return Network(layers, (1, 28, 28), 10)


LAYER_KINDS = {"dense": Dense, "conv2d": Conv2D, "relu": ReLU, "maxpool2d": MaxPool2D, "flatten": Flatten}


def build_from_architecture(arch: dict, params: list[np.ndarray]) -> Network:
    """Rebuild a network from :meth:`Network.architecture` output and a parameter list."""
    it = iter(params)
    layers: list[Layer] = []
    for cfg in arch["layers"]:
        kind = cfg["kind"]
        if kind == "dense":
            layers.append(Dense(next(it), next(it)))
        elif kind == "conv2d":
            layers.append(Conv2D(next(it), next(it), int(cfg["stride"]), int(cfg["padding"])))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool2d":
            layers.append(MaxPool2D(int(cfg["window"]), int(cfg["stride"])))
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Network(layers, tuple(arch["input_shape"]), int(arch["num_classes"]))


def param_shapes(arch: dict) -> list[tuple]:
    shapes = []
    for cfg in arch["layers"]:
        if cfg["kind"] == "dense":
            shapes += [(cfg["out"], cfg["in"]), (cfg["out"],)]
        elif cfg["kind"] == "conv2d":
            shapes += [(cfg["out_channels"], cfg["in_channels"], *cfg["kernel"]), (cfg["out_channels"],)]
    return shapes
