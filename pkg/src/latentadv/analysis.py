"""Per-layer measurements: latent budgets, local Lipschitz estimates, robustness sweeps, reports.

Indices follow the network boundaries: 0 is the input, ``i`` the activation
after layer ``i``. Sweeps cover ``0 .. depth-1``; index 0 is the whole network.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, pgd_latent, run_attack
from .data import Dataset
from .network import Network, accuracy
from .tensor import make_rng, split_rng

CSV_SCHEMA = ("schema", "latentadv.curves", "1")
CSV_COLUMNS = ("index", "epsilon_i", "subnet_adv_acc", "mean_local_lipschitz")
REPORT_SCHEMA = 1


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _check_nonempty(dataset: Dataset):
    if len(dataset) == 0:
        raise ValueError(f"dataset {dataset.name!r} is empty")


def _cast(net: Network, dataset: Dataset) -> Dataset:
    return dataset if dataset.images.dtype == net.dtype else dataset.astype(net.dtype)


# ---------------------------------------------------------------- layer budgets


@dataclass
class LayerEpsilons:
    epsilons: dict  # boundary index -> eps_i
    scale: float
    source: AttackConfig

    def __getitem__(self, i: int) -> float:
        return self.epsilons[i]

    def to_dict(self) -> dict:
        return {"scale": self.scale, "source": self.source.to_dict(),
                "epsilons": {str(k): v for k, v in sorted(self.epsilons.items())}}


def layer_displacements(net: Network, x: np.ndarray, x_adv: np.ndarray, chunk: int = 500) -> np.ndarray:
    """``(N, depth)`` array of ``||h_i(x) - h_i(x_adv)||_inf`` for boundaries ``0 .. depth-1``."""
    out = np.zeros((len(x), net.depth))
    for lo in range(0, len(x), chunk):
        a = net.forward(x[lo:lo + chunk], stop=net.depth - 1).batch
        b = net.forward(x_adv[lo:lo + chunk], stop=net.depth - 1).batch
        for i, (ha, hb) in enumerate(zip(a, b)):
            d = np.abs(ha - hb).reshape(len(ha), -1).max(axis=1)
            out[lo:lo + len(ha), i] = d
    return out


def compute_layer_epsilons(net: Network, dataset: Dataset, attack: AttackConfig, scale: float = 1.0,
                           seed: int = 0, x_adv: np.ndarray | None = None) -> LayerEpsilons:
    """Scaled mean latent displacement caused by an input attack, per boundary.

    ``x_adv`` may pass adversarial inputs already computed with ``attack``.
    """
    if attack.layer not in (None, 0):
        raise ValueError("layer budgets come from an input-space attack")
    if scale < 0:
        raise ValueError(f"scale must be non-negative, got {scale}")
    _check_nonempty(dataset)
    d = _cast(net, dataset)
    if x_adv is None:
        x_adv = run_attack(net, d.images, d.labels, attack.at_layer(None), seed=seed)
    disp = layer_displacements(net, d.images, x_adv)
    eps = {i: float(scale * disp[:, i].mean()) for i in range(net.depth)}
    return LayerEpsilons(eps, float(scale), attack.at_layer(None))


# ---------------------------------------------------------------- Lipschitz


def _ratios(f_center: np.ndarray, f_nb: np.ndarray, center: np.ndarray, nb: np.ndarray) -> np.ndarray:
    num = np.sqrt(np.sum((f_nb - f_center).reshape(len(f_nb), -1).astype(np.float64) ** 2, axis=1))
    den = np.sqrt(np.sum((nb - center).reshape(len(nb), -1).astype(np.float64) ** 2, axis=1))
    return num / den


def _draw_neighbours(rng: np.random.Generator, center: np.ndarray, eps: float, samples: int) -> np.ndarray:
    nb = center + rng.uniform(-eps, eps, size=(samples,) + center.shape).astype(center.dtype)
    same = np.all((nb == center).reshape(samples, -1), axis=1)
    while same.any():  # practically never; a zero displacement has no ratio
        nb[same] = center + rng.uniform(-eps, eps, size=(int(same.sum()),) + center.shape).astype(center.dtype)
        same = np.all((nb == center).reshape(samples, -1), axis=1)
    return nb


def estimate_local_lipschitz(fn, x, eps: float, samples: int, rng: np.random.Generator,
                             batched: bool = False) -> float:
    """Largest ``||fn(x_j) - fn(x)||_2 / ||x_j - x||_2`` over ``samples`` draws from the linf ball.

    With ``batched`` ``fn`` maps a stack of points (leading axis) in one call.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    x = np.asarray(x, dtype=np.float64)
    nb = _draw_neighbours(rng, x, eps, samples)
    if batched:
        f_nb = np.asarray(fn(nb))
    else:
        f_nb = np.stack([np.asarray(fn(p)) for p in nb])
    f_x = np.asarray(fn(x[None]))[0] if batched else np.asarray(fn(x))
    return float(_ratios(f_x, f_nb, x, nb).max())


@dataclass
class LipschitzReport:
    values: dict  # boundary index -> mean local estimate of g_i (None where eps_i == 0)
    samples: int
    epsilons: dict
    points: int

    def to_dict(self) -> dict:
        return {"samples": self.samples, "points": self.points,
                "epsilons": {str(k): v for k, v in sorted(self.epsilons.items())},
                "values": {str(k): v for k, v in sorted(self.values.items())}}


def sweep_lipschitz(net: Network, dataset: Dataset, epsilons: LayerEpsilons | dict, samples: int = 128,
                    seed: int = 0, indices=None, chunk: int = 4) -> LipschitzReport:
    """Mean over ``dataset`` of the local Lipschitz estimate of ``g_i`` around ``h_i(x)`` with radius ``eps_i``.

    Each boundary draws from its own child stream of ``seed``; points are visited in order.
    """
    _check_nonempty(dataset)
    eps = epsilons.epsilons if isinstance(epsilons, LayerEpsilons) else dict(epsilons)
    indices = sorted(eps) if indices is None else [net.check_index(i) for i in indices]
    d = _cast(net, dataset)
    streams = split_rng(make_rng(seed), net.depth)
    values = {}
    for i in indices:
        if i not in eps:
            raise KeyError(f"no epsilon for boundary {i}")
        e = eps[i]
        if not e > 0:
            values[i] = None
            continue
        rng = streams[i]
        best = []
        for lo in range(0, len(d), chunk):
            h = net.latent(d.images[lo:lo + chunk], i)
            nbs = [_draw_neighbours(rng, hc, e, samples) for hc in h]
            f_nb = net.forward_from(i, np.concatenate(nbs)).reshape(len(h), samples, -1)
            f_h = net.forward_from(i, h)
            for k in range(len(h)):
                best.append(_ratios(f_h[k], f_nb[k], h[k], nbs[k]).max())
        values[i] = float(np.mean(best))
    return LipschitzReport(values, int(samples), {i: eps[i] for i in indices}, len(d))


# ---------------------------------------------------------------- robustness sweeps


def sweep_layer_robustness(net: Network, dataset: Dataset, epsilons: LayerEpsilons | dict,
                           latent_attack_template: AttackConfig | None = None, seed: int = 0,
                           indices=None) -> dict:
    """Accuracy of each ``g_i`` on latents attacked with budget ``eps_i``.

    The template's step size is rescaled to keep its ratio to the budget;
    index 0 is input-space PGD on the whole network (clamped to the unit box).
    Without a template the budgets' source attack is used.
    """
    _check_nonempty(dataset)
    if latent_attack_template is None:
        if not isinstance(epsilons, LayerEpsilons):
            raise ValueError("a plain epsilon map needs an attack template")
        latent_attack_template = epsilons.source
    eps = epsilons.epsilons if isinstance(epsilons, LayerEpsilons) else dict(epsilons)
    indices = sorted(eps) if indices is None else [net.check_index(i) for i in indices]
    d = _cast(net, dataset)
    curve = {}
    for i in indices:
        if i not in eps:
            raise KeyError(f"no epsilon for boundary {i}")
        cfg = latent_attack_template.with_budget(eps[i]).at_layer(i)
        curve[i] = subnet_adversarial_accuracy(net, d, cfg, seed=seed)
    return curve


def subnet_adversarial_accuracy(net: Network, dataset: Dataset, cfg: AttackConfig, seed: int = 0,
                                chunk: int = 500) -> float:
    i = 0 if cfg.layer is None else net.check_index(cfg.layer)
    correct = 0
    for k, lo in enumerate(range(0, len(dataset), chunk)):
        xb, yb = dataset.images[lo:lo + chunk], dataset.labels[lo:lo + chunk]
        z = pgd_latent(net, xb, yb, cfg.at_layer(i), make_rng(seed * 1_000_003 + k))
        correct += int(np.sum(net.predict(z, start=i) == yb))
    return correct / len(dataset)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    clean_accuracy: float
    attacks: list = field(default_factory=list)  # [{"name", "config", "adv_accuracy"}]
    layer_curve: dict | None = None
    epsilons: LayerEpsilons | None = None
    lipschitz: LipschitzReport | None = None
    metadata: dict = field(default_factory=dict)

    def adversarial_accuracy(self, name: str) -> float:
        for entry in self.attacks:
            if entry["name"] == name:
                return entry["adv_accuracy"]
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "metadata": self.metadata,
            "clean_accuracy": self.clean_accuracy,
            "attacks": self.attacks,
            "layer_curve": None if self.layer_curve is None else {str(k): v for k, v in sorted(self.layer_curve.items())},
            "epsilons": None if self.epsilons is None else self.epsilons.to_dict(),
            "lipschitz": None if self.lipschitz is None else self.lipschitz.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def curve_rows(self) -> list[tuple]:
        idx = set()
        for part in (self.layer_curve, self.epsilons and self.epsilons.epsilons, self.lipschitz and self.lipschitz.values):
            if part:
                idx.update(part)
        rows = []
        for i in sorted(idx):
            eps = self.epsilons.epsilons.get(i) if self.epsilons else None
            acc = self.layer_curve.get(i) if self.layer_curve else None
            lip = self.lipschitz.values.get(i) if self.lipschitz else None
            rows.append((i, eps, acc, lip))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_SCHEMA)
        w.writerow(CSV_COLUMNS)
        for row in self.curve_rows():
            w.writerow(["" if v is None else repr(v) for v in row])
        return buf.getvalue()


def _finite(obj):
    # JSON has no NaN/Inf; they become null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def attack_accuracy(net: Network, dataset: Dataset, cfg, seed: int = 0) -> float:
    """Accuracy of ``net`` on ``dataset`` attacked by ``cfg`` (input-space, latent or LA)."""
    d = _cast(net, dataset)
    if isinstance(cfg, AttackConfig) and cfg.layer not in (None, 0):
        return subnet_adversarial_accuracy(net, d, cfg, seed)
    if isinstance(cfg, AttackConfig) and cfg.layer == 0:
        cfg = cfg.at_layer(None)
    x_adv = run_attack(net, d.images, d.labels, cfg, seed=seed)
    return accuracy(net, x_adv, d.labels)


def evaluate(net: Network, dataset: Dataset, attacks=(), *, sweep: AttackConfig | None = None,
             scale: float = 1.0, lipschitz_samples: int = 0, seed: int = 0, config: dict | None = None,
             tool_version: str | None = None) -> EvalReport:
    """Clean accuracy, accuracy under each attack and, if ``sweep`` is given, the per-layer curves.

    ``sweep`` is the input attack whose latent displacement sets the budgets; it
    also serves as the template for the latent attacks.
    """
    from . import __version__

    _check_nonempty(dataset)
    d = _cast(net, dataset)
    report = EvalReport(accuracy(net, d.images, d.labels))
    for cfg in attacks:
        report.attacks.append({"name": cfg.name, "config": cfg.to_dict(),
                               "adv_accuracy": attack_accuracy(net, d, cfg, seed)})
    if sweep is not None:
        report.epsilons = compute_layer_epsilons(net, d, sweep, scale, seed)
        report.layer_curve = sweep_layer_robustness(net, d, report.epsilons, sweep, seed)
        if lipschitz_samples > 0:
            report.lipschitz = sweep_lipschitz(net, d, report.epsilons, lipschitz_samples, seed)
    if config is None:
        config = {"attacks": [c.to_dict() for c in attacks], "sweep": sweep and sweep.to_dict(),
                  "scale": scale, "lipschitz_samples": lipschitz_samples}
    report.metadata = {
        "tool_version": tool_version or __version__,
        "seed": seed,
        "config_hash": config_hash(config),
        "model_hash": net.fingerprint(),
        "dataset": {"name": d.name, "size": len(d), "hash": d.fingerprint()},
    }
    return report


__all__ = [
    "LayerEpsilons", "LipschitzReport", "EvalReport", "compute_layer_epsilons", "estimate_local_lipschitz",
    "sweep_layer_robustness", "sweep_lipschitz", "evaluate", "layer_displacements",
    "attack_accuracy", "subnet_adversarial_accuracy",
]
