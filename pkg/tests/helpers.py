"""Small networks shared by the tests."""

import numpy as np

from latentadv.network import Dense, Flatten, MaxPool2D, Network, ReLU, he_conv, he_dense


def small_mixed_net(rng, c_in=2, size=6, classes=4) -> Network:
    """Conv -> ReLU -> MaxPool -> strided Conv -> ReLU -> MaxPool(2, 1) -> Flatten -> Dense."""
    c1 = int(rng.integers(2, 4))
    c2 = int(rng.integers(2, 4))
    layers = [
        he_conv(rng, c_in, c1, 3, stride=1, padding=1), ReLU(), MaxPool2D(2, 2),
        he_conv(rng, c1, c2, 3, stride=2, padding=1), ReLU(), MaxPool2D(2, 1),
        Flatten(), he_dense(rng, c2, classes),
    ]
    net = Network(layers, (c_in, size, size), classes)
    # non-zero biases so their gradients are exercised
    return net.with_parameters([p + 0.1 * rng.standard_normal(p.shape) for p in net.parameters()])


def linear_toy(w=(1.0, -1.0)) -> Network:
    """2-class linear classifier on R^2 with logits (w.x, -w.x)."""
    w = np.asarray(w, dtype=float)
    return Network([Dense(np.stack([w, -w]), np.zeros(2))], (2,), 2)

