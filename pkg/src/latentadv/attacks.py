"""White-box attacks: FGSM, PGD on the input or a latent boundary, and the latent attack.

Every attack works on a batch (leading sample axis) or a single sample and
returns points inside its budget. Input-space results are also clipped to
``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .network import Network
from .tensor import ball_noise, make_rng


@dataclass(frozen=True)
class AttackConfig:
    eps: float
    step_size: float
    steps: int = 40
    norm: str = "linf"
    layer: int | None = None  # None: input surface; i: latent boundary i
    random_start: bool = False
    clamp_input: bool = True

    def __post_init__(self):
        if not np.isfinite(self.eps) or self.eps < 0:
            raise ValueError(f"eps must be finite and non-negative, got {self.eps}")
        if not np.isfinite(self.step_size) or self.step_size <= 0:
            raise ValueError(f"step_size must be finite and positive, got {self.step_size}")
        if int(self.steps) < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be 'linf' or 'l2', got {self.norm!r}")

    @property
    def surface(self) -> str:
        return "input" if self.layer is None else f"latent({self.layer})"

    @property
    def name(self) -> str:
        if self.steps == 1 and self.step_size >= self.eps and not self.random_start and self.norm == "linf":
            base = "fgsm"
        else:
            base = f"pgd{self.steps}" + ("" if self.norm == "linf" else "-l2")
        return base if self.layer is None else f"{base}@{self.layer}"

    def with_budget(self, eps: float) -> "AttackConfig":
        """Same attack with budget ``eps``; the step size keeps its ratio to the budget."""
        ratio = self.step_size / self.eps if self.eps > 0 else 0.25
        return replace(self, eps=float(eps), step_size=float(eps * ratio) if eps > 0 else self.step_size)

    def at_layer(self, layer: int | None) -> "AttackConfig":
        return replace(self, layer=layer)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LatentAttackConfig:
    layer: int
    input_eps: float
    latent_eps: float
    alpha_latent: float | None = None  # default latent_eps / 4
    alpha_input: float | None = None  # default input_eps / 4
    inner_steps: int = 10
    outer_steps: int = 5

    def __post_init__(self):
        for name in ("input_eps", "latent_eps"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        for name in ("alpha_latent", "alpha_input"):
            v = getattr(self, name)
            if v is not None and (not np.isfinite(v) or v <= 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.inner_steps < 1 or self.outer_steps < 1:
            raise ValueError("inner_steps and outer_steps must be >= 1")

    @property
    def step_latent(self) -> float:
        return self.alpha_latent if self.alpha_latent is not None else self.latent_eps / 4

    @property
    def step_input(self) -> float:
        return self.alpha_input if self.alpha_input is not None else self.input_eps / 4

    @property
    def name(self) -> str:
        return f"la@{self.layer}"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- projection


def _rows(t: np.ndarray) -> np.ndarray:
    return t.reshape(t.shape[0], -1)


def project(point, center, eps: float, norm: str = "linf", clamp01: bool = False, batched: bool = False) -> np.ndarray:
    """Project ``point`` onto the ``norm`` ball of radius ``eps`` around ``center``.

    With ``batched`` every row along axis 0 has its own ball. ``clamp01`` clips
    the result to the unit box afterwards.
    """
    point = np.asarray(point)
    center = np.asarray(center)
    if point.shape != center.shape:
        raise ValueError(f"point shape {point.shape} != center shape {center.shape}")
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    if norm == "linf":
        out = np.minimum(np.maximum(point, center - eps), center + eps)
    elif norm == "l2":
        delta = point - center
        flat = _rows(delta) if batched else delta.reshape(1, -1)
        n = np.sqrt(np.sum(flat * flat, axis=1))
        scale = np.where(n > eps, eps / np.where(n > 0, n, 1.0), 1.0)
        if batched:
            scale = scale.reshape((-1,) + (1,) * (delta.ndim - 1))
        else:
            scale = scale[0]
        out = center + (delta * scale).astype(point.dtype, copy=False)
    else:
        raise ValueError(f"norm must be 'linf' or 'l2', got {norm!r}")
    if clamp01:
        out = np.clip(out, 0.0, 1.0)
    return out


# ---------------------------------------------------------------- gradients


def _labels(y, n):
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y


def _as_batch(net: Network, z, index: int):
    z = np.asarray(z, dtype=net.dtype)
    single = z.shape == net.shapes[index]
    return (z[None] if single else z), single


def loss_gradient(net: Network, z: np.ndarray, y: np.ndarray, start: int = 0) -> np.ndarray:
    """Per-sample gradient of the classification loss of ``g_start`` at the batch ``z``."""
    trace = net.forward(z, start=start)
    return net.backward(trace, y, need_params=False, reduction="sum").input_grad


def _ascent_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(grad)
    n = np.sqrt(np.sum(_rows(grad) ** 2, axis=1)).reshape((-1,) + (1,) * (grad.ndim - 1))
    return grad / np.where(n > 0, n, 1.0)


# ---------------------------------------------------------------- attacks


def fgsm(net: Network, x, y, eps: float) -> np.ndarray:
    """One full-budget signed step, clipped to the unit box."""
    xb, single = _as_batch(net, x, 0)
    y = _labels(y, len(xb))
    out = np.clip(xb + eps * np.sign(loss_gradient(net, xb, y)), 0.0, 1.0)
    return out[0] if single else out


def _pgd_core(net: Network, start: int, z0: np.ndarray, y: np.ndarray, cfg: AttackConfig,
              rng: np.random.Generator | None, clamp: bool) -> np.ndarray:
    z = z0
    if cfg.random_start and cfg.eps > 0:
        if rng is None:
            raise ValueError("random_start needs an rng")
        noise = ball_noise(rng, z0.shape, cfg.eps, cfg.norm, batched=True).astype(z0.dtype)
        z = project(z0 + noise, z0, cfg.eps, cfg.norm, clamp, batched=True)
    for _ in range(cfg.steps):
        g = loss_gradient(net, z, y, start)
        z = project(z + cfg.step_size * _ascent_direction(g, cfg.norm), z0, cfg.eps, cfg.norm, clamp, batched=True)
    return z


def pgd(net: Network, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Projected signed-gradient ascent on the input within ``cfg.eps``."""
    if cfg.layer not in (None, 0):
        raise ValueError(f"pgd attacks the input; use pgd_latent for layer {cfg.layer}")
    xb, single = _as_batch(net, x, 0)
    y = _labels(y, len(xb))
    out = _pgd_core(net, 0, xb, y, cfg, rng, cfg.clamp_input)
    return out[0] if single else out


def pgd_latent(net: Network, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None,
               latent: np.ndarray | None = None) -> np.ndarray:
    """PGD on the activation ``h_i(x)`` through the sub-network ``g_i``; returns the perturbed latent.

    Only layer 0 honours ``clamp_input``; latent activations are left unbounded.
    ``latent`` may pass a precomputed ``h_i(x)``.
    """
    if cfg.layer is None:
        raise ValueError("pgd_latent needs cfg.layer")
    i = net.check_index(cfg.layer)
    xb, single = _as_batch(net, x, 0)
    y = _labels(y, len(xb))
    h = net.latent(xb, i) if latent is None else np.asarray(latent, dtype=net.dtype)
    out = _pgd_core(net, i, h, y, cfg, rng, clamp=cfg.clamp_input and i == 0)
    return out[0] if single else out


def latent_attack(net: Network, x, y, cfg: LatentAttackConfig) -> np.ndarray:
    """Alternate latent-space ascent through ``g_m`` with input-space matching through ``h_m``.

    Each outer round pushes the latent of the current iterate towards higher loss
    (``inner_steps`` signed steps, kept within ``latent_eps`` of the clean latent),
    then moves the input to reproduce that latent by signed descent on the squared
    l2 distance, staying within ``input_eps`` of ``x`` and inside the unit box.
    """
    m = cfg.layer
    if not 1 <= m <= net.depth - 1:
        raise ValueError(f"latent attack layer {m} outside [1, {net.depth - 1}]")
    xb, single = _as_batch(net, x, 0)
    y = _labels(y, len(xb))
    h0 = net.latent(xb, m)
    xi = xb
    for _ in range(cfg.outer_steps):
        target = net.latent(xi, m)
        for _ in range(cfg.inner_steps):
            g = loss_gradient(net, target, y, start=m)
            target = project(target + cfg.step_latent * np.sign(g), h0, cfg.latent_eps, "linf", False)
        xa = xi
        for _ in range(cfg.inner_steps):
            trace = net.forward(xa, stop=m)
            diff = trace.at(m) - target
            grad = net.vjp(trace, 2.0 * diff, top=m, need_params=False).input_grad
            xa = project(xa - cfg.step_input * np.sign(grad), xb, cfg.input_eps, "linf", True)
        xi = xa
    return xi[0] if single else xi


# ---------------------------------------------------------------- batch helpers


def run_attack(net: Network, images, labels, cfg, seed: int = 0, chunk: int = 500) -> np.ndarray:
    """Apply ``cfg`` (input ``AttackConfig`` or ``LatentAttackConfig``) over a dataset in chunks.

    Each chunk gets its own child stream of ``seed`` so results do not depend on
    how many chunks ran before.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    outs = []
    for k, lo in enumerate(range(0, len(images), chunk)):
        xb, yb = images[lo:lo + chunk], labels[lo:lo + chunk]
        if isinstance(cfg, LatentAttackConfig):
            outs.append(latent_attack(net, xb, yb, cfg))
        elif cfg.layer is None:
            outs.append(pgd(net, xb, yb, cfg, make_rng(seed * 1_000_003 + k)))
        else:
            outs.append(pgd_latent(net, xb, yb, cfg, make_rng(seed * 1_000_003 + k)))
    return np.concatenate(outs) if outs else images[:0]
