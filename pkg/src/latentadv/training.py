"""Plain-SGD training loops: natural, adversarial (AT), feature-noise (FNT) and latent adversarial (LAT).

LAT fine-tunes with the weighted loss ``omega * J_adv + (1 - omega) * J_latent``
where ``J_adv`` is the loss on an input-space PGD batch and ``J_latent`` the loss
of the sub-network ``g_m`` on PGD-perturbed activations ``h_m(X) + delta``. The
latent budget comes from the displacement the input attack caused at boundary
``m``. FNT replaces the latent attack with Gaussian noise of the same scale.

Random streams are split per purpose (shuffling, input attack, latent
perturbation, layer choice) so that reductions such as LAT with ``omega = 1``
and AT follow bitwise-identical trajectories.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, pgd, pgd_latent
from .data import Dataset, batches
from .network import GradientBundle, Network, cross_entropy_per_sample
from .tensor import make_rng, split_rng

log = logging.getLogger(__name__)

TECHNIQUES = ("natural", "at", "fnt", "lat", "lat-random")


@dataclass(frozen=True)
class TrainConfig:
    technique: str = "natural"
    lr: float = 0.05
    batch_size: int = 50
    epochs: float | None = 1.0
    steps: int | None = None  # overrides epochs when set
    omega: float = 0.2
    layer: int | None = None
    layer_pool: tuple[int, ...] = ()
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(0.3, 0.01, 40, random_start=True))
    # latent PGD template; its budget is replaced per batch, step ratio kept
    latent_attack: AttackConfig = field(default_factory=lambda: AttackConfig(1.0, 0.25, 10, random_start=True))
    eps_scale: float = 1.0
    epsilon_mode: str = "batch"  # or "dataset": use fixed_epsilons
    fixed_epsilons: dict | None = None
    noise_scale: float = 1.0  # FNT sigma as a multiple of the latent budget
    seed: int = 0

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        errs = []
        if self.technique not in TECHNIQUES:
            errs.append(f"technique must be one of {TECHNIQUES}, got {self.technique!r}")
        if not 0.0 <= self.omega <= 1.0:
            errs.append(f"omega must lie in [0, 1], got {self.omega}")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            errs.append(f"lr must be a finite non-negative number, got {self.lr}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps is None and (self.epochs is None or self.epochs <= 0):
            errs.append("either steps or a positive epochs count is required")
        if self.steps is not None and self.steps < 1:
            errs.append(f"steps must be >= 1, got {self.steps}")
        if self.technique in ("fnt", "lat") and self.layer is None:
            errs.append(f"technique {self.technique} needs a layer")
        if self.technique == "lat-random" and not self.layer_pool:
            errs.append("technique lat-random needs a non-empty layer_pool")
        if self.epsilon_mode not in ("batch", "dataset"):
            errs.append(f"epsilon_mode must be 'batch' or 'dataset', got {self.epsilon_mode!r}")
        if self.epsilon_mode == "dataset" and not self.fixed_epsilons:
            errs.append("epsilon_mode 'dataset' needs fixed_epsilons")
        if self.eps_scale < 0 or self.noise_scale < 0:
            errs.append("eps_scale and noise_scale must be non-negative")
        return errs

    def total_steps(self, n: int) -> int:
        if self.steps is not None:
            return int(self.steps)
        return int(math.ceil(self.epochs * math.ceil(n / self.batch_size)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_pool"] = list(self.layer_pool)
        if self.fixed_epsilons is not None:
            d["fixed_epsilons"] = {str(k): v for k, v in self.fixed_epsilons.items()}
        return d


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "step", **r}, sort_keys=True) for r in self.steps]
        lines += [json.dumps({"type": "epoch", **r}, sort_keys=True) for r in self.epochs]
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------- updates


def sgd_update(net: Network, grads: GradientBundle | list, lr: float) -> Network:
    """Return ``net`` with parameters ``theta - lr * grad`` (no momentum)."""
    flat = _flat_param_grads(net, grads)
    params = net.parameters()
    if len(flat) != len(params):
        raise ValueError(f"{len(flat)} gradients for {len(params)} parameters")
    for p, g in zip(params, flat):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if lr == 0:
        return net
    return net.with_parameters([p - lr * g for p, g in zip(params, flat)])


def _flat_param_grads(net: Network, grads) -> list[np.ndarray]:
    per_layer = grads.param_grads if isinstance(grads, GradientBundle) else grads
    out = []
    for layer, g in zip(net.layers, per_layer):
        if not layer.params:
            continue
        if g is None:
            out.extend(np.zeros_like(p) for p in layer.params)
        else:
            out.extend(g)
    return out


def _combine(a: list, b: list, wa: float, wb: float) -> list:
    if wb == 0:
        return a
    if wa == 0:
        return b
    return [wa * x + wb * y for x, y in zip(a, b)]


def _latent_loss_grads(net: Network, x: np.ndarray, y: np.ndarray, m: int, delta: np.ndarray, h_trace=None):
    """Loss of ``g_m(h_m(x) + delta)`` and its parameter gradients; ``delta`` is held constant."""
    trace_h = h_trace or net.forward(x, stop=m)
    trace_g = net.forward(trace_h.at(m) + delta, start=m)
    loss = float(cross_entropy_per_sample(trace_g.logits, y).mean())
    upper = net.backward(trace_g, y, need_input=m > 0)
    grads = list(upper.param_grads)
    if m > 0:
        lower = net.vjp(trace_h, upper.input_grad, top=m, need_input=False)
        for k in range(m):
            grads[k] = lower.param_grads[k]
    return loss, _flat_param_grads(net, grads)


# ---------------------------------------------------------------- loops


def _streams(seed: int):
    shuffle, attack, latent, layer = split_rng(make_rng(seed), 4)
    return shuffle, attack, latent, layer


def _loop(net: Network, dataset: Dataset, cfg: TrainConfig, step_fn, eval_fn=None):
    d = dataset.astype(net.dtype) if dataset.images.dtype != net.dtype else dataset
    total = cfg.total_steps(len(d))
    shuffle_rng, attack_rng, latent_rng, layer_rng = _streams(cfg.seed)
    trainlog = TrainLog()
    step, epoch = 0, 0
    while step < total:
        losses, correct, seen = [], 0, 0
        for xb, yb in batches(d, cfg.batch_size, shuffle_rng, shuffle=True):
            if step >= total:
                break
            net, rec, n_correct = step_fn(net, xb, yb, attack_rng, latent_rng, layer_rng)
            rec = {"step": step, "epoch": epoch, **rec}
            trainlog.steps.append(rec)
            losses.append(rec["loss"])
            correct += n_correct
            seen += len(yb)
            step += 1
        entry = {"epoch": epoch, "steps": len(losses), "mean_loss": float(np.mean(losses)),
                 "batch_accuracy": correct / max(seen, 1)}
        if eval_fn is not None:
            entry.update(eval_fn(net))
        trainlog.epochs.append(entry)
        log.info("epoch %d: %s", epoch, entry)
        epoch += 1
    return net, trainlog


def _plain_step(net, xb, yb, lr):
    loss, gb, trace = net.loss_and_grads(xb, yb, need_input=False)
    correct = int(np.sum(np.argmax(trace.logits, axis=1) == yb))
    return sgd_update(net, gb, lr), loss, correct


def train_natural(net: Network, dataset: Dataset, cfg: TrainConfig, eval_fn=None):
    """Minibatch SGD on the clean cross-entropy."""
    def step_fn(net, xb, yb, *_):
        net, loss, correct = _plain_step(net, xb, yb, cfg.lr)
        return net, {"loss": loss}, correct

    return _loop(net, dataset, cfg, step_fn, eval_fn)


def train_adversarial(net: Network, dataset: Dataset, cfg: TrainConfig, eval_fn=None):
    """Adversarial training: every step trains only on the PGD-perturbed batch."""
    if cfg.attack.layer is not None:
        raise ValueError("adversarial training uses an input-space attack")

    def step_fn(net, xb, yb, attack_rng, *_):
        x_adv = pgd(net, xb, yb, cfg.attack, attack_rng)
        net, loss, correct = _plain_step(net, x_adv, yb, cfg.lr)
        return net, {"loss": loss, "j_adv": loss}, correct

    return _loop(net, dataset, cfg, step_fn, eval_fn)


def batch_latent_epsilon(net: Network, x: np.ndarray, x_adv: np.ndarray, m: int, scale: float = 1.0,
                         h_clean: np.ndarray | None = None) -> float:
    """Mean over the batch of ``||h_m(x) - h_m(x_adv)||_inf``, times ``scale``."""
    h = net.latent(x, m) if h_clean is None else h_clean
    d = np.abs(h - net.latent(x_adv, m)).reshape(len(x), -1).max(axis=1)
    return float(scale * np.mean(d.astype(np.float64)))


def _finetune(net: Network, dataset: Dataset, cfg: TrainConfig, perturb: str, eval_fn=None):
    if cfg.attack.layer is not None:
        raise ValueError("the input-space attack of LAT/FNT must target the input")
    pool = list(cfg.layer_pool) if cfg.technique == "lat-random" else [cfg.layer]
    for m in pool:
        net.check_index(m)
        if m < 1:
            raise ValueError(f"latent layer {m} must be >= 1")
    w = cfg.omega

    def step_fn(net, xb, yb, attack_rng, latent_rng, layer_rng):
        m = pool[int(layer_rng.integers(len(pool)))] if len(pool) > 1 else pool[0]
        x_adv = pgd(net, xb, yb, cfg.attack, attack_rng)
        j_adv, gb_adv, trace_adv = net.loss_and_grads(x_adv, yb, need_input=False)
        g_adv = _flat_param_grads(net, gb_adv)
        trace_h = net.forward(xb, stop=m)
        h = trace_h.at(m)
        if cfg.epsilon_mode == "dataset":
            eps = float(cfg.eps_scale * cfg.fixed_epsilons[m])
        else:
            eps = batch_latent_epsilon(net, xb, x_adv, m, cfg.eps_scale, h_clean=h)
        if perturb == "attack":
            latent_cfg = cfg.latent_attack.with_budget(eps).at_layer(m)
            delta = pgd_latent(net, xb, yb, latent_cfg, latent_rng, latent=h) - h
        else:
            sigma = cfg.noise_scale * eps
            delta = (latent_rng.standard_normal(h.shape) * sigma).astype(h.dtype)
        j_lat, g_lat = _latent_loss_grads(net, xb, yb, m, delta, trace_h)
        j = w * j_adv + (1 - w) * j_lat
        new = sgd_update(net, _regroup(net, _combine(g_adv, g_lat, w, 1 - w)), cfg.lr)
        correct = int(np.sum(np.argmax(trace_adv.logits, axis=1) == yb))
        return new, {"loss": j, "j_adv": j_adv, "j_latent": j_lat, "layer": m, "latent_eps": eps}, correct

    return _loop(net, dataset, cfg, step_fn, eval_fn)


def _regroup(net: Network, flat: list) -> list:
    it = iter(flat)
    return [[next(it) for _ in layer.params] for layer in net.layers]


def finetune_lat(net: Network, dataset: Dataset, cfg: TrainConfig, eval_fn=None):
    """Latent adversarial fine-tuning (``technique`` ``lat`` or ``lat-random``)."""
    if cfg.technique not in ("lat", "lat-random"):
        cfg = replace(cfg, technique="lat")
    return _finetune(net, dataset, cfg, "attack", eval_fn)


def finetune_fnt(net: Network, dataset: Dataset, cfg: TrainConfig, eval_fn=None):
    """Like LAT but the latent perturbation is zero-mean Gaussian noise with sigma = noise_scale * eps."""
    return _finetune(net, dataset, cfg, "noise", eval_fn)


def train(net: Network, dataset: Dataset, cfg: TrainConfig, eval_fn=None):
    """Dispatch on ``cfg.technique``."""
    if cfg.technique == "natural":
        return train_natural(net, dataset, cfg, eval_fn)
    if cfg.technique == "at":
        return train_adversarial(net, dataset, cfg, eval_fn)
    if cfg.technique == "fnt":
        return finetune_fnt(net, dataset, cfg, eval_fn)
    return finetune_lat(net, dataset, cfg, eval_fn)


def budget_ramp(net: Network, dataset: Dataset, cfg: TrainConfig, budgets, steps_per_budget: int,
                attack_steps: int = 7) -> tuple[Network, TrainLog]:
    """Short AT phases at increasing budgets, with a cheap PGD, to start training at ``cfg.attack.eps``.

    Adversarial training at a large budget from a clean start tends to sit at the
    uniform-prediction loss; a few hundred steps at smaller budgets move it off.
    Step size per phase is ``2.5 * eps / attack_steps``.
    """
    budgets = [float(e) for e in budgets]
    if any(not 0 < e for e in budgets) or steps_per_budget < 1 or attack_steps < 1:
        raise ValueError("ramp budgets must be positive with steps_per_budget, attack_steps >= 1")
    merged = TrainLog()
    for k, eps in enumerate(budgets):
        atk = AttackConfig(eps, 2.5 * eps / attack_steps, attack_steps, norm=cfg.attack.norm, random_start=True)
        phase = replace(cfg, technique="at", attack=atk, steps=steps_per_budget, seed=cfg.seed + 2 + k)
        net, phase_log = train_adversarial(net, dataset, phase)
        merged.steps += [{**r, "ramp_eps": eps} for r in phase_log.steps]
    return net, merged
