"""Command line: ``latentadv {train,finetune,attack,sweep,eval} [options]``.

Every option may also come from a JSON file passed with ``--config`` (keys are
the option names with dashes replaced by underscores); flags given on the
command line win. Each run writes into one directory::

    config.json    resolved options
    report.json    metrics plus tool version, seed, config and model hashes
    curves.csv     per-layer table (sweep only)
    model.ckpt     checkpoint (train / finetune)
    trainlog.jsonl per-step records (train / finetune)

The directory is ``--out`` if given, otherwise ``$LATENTADV_OUTPUT_DIR/<command>-<config hash>``
(``runs/`` when the variable is unset). Failures print one line,
``latentadv: error[<category>]: <message>``, and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import attack_accuracy, compute_layer_epsilons, config_hash, evaluate
from .attacks import AttackConfig, LatentAttackConfig, run_attack
from .data import (CheckpointError, Dataset, FormatError, atomic_write, load_checkpoint, load_mnist_dir,
                   save_checkpoint, synthetic_two_gaussians)
from .network import Network, accuracy, mlp, mnist_cnn
from .tensor import make_rng
from .training import TECHNIQUES, TrainConfig, budget_ramp, train

log = logging.getLogger("latentadv")

ATTACK_METHODS = ("fgsm", "pgd", "la")
EXIT_CODES = {"usage": 2, "config": 3, "io": 4, "format": 5, "runtime": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


# ---------------------------------------------------------------- defaults

COMMON = {"seed": 0, "dataset": "mnist", "data_dir": "data/mnist", "train_limit": None, "test_limit": None,
          "n_per_class": 500, "separation": 4.0, "dim": 2}

DEFAULTS = {
    "train": {**COMMON, "technique": "natural", "arch": "mnist-cnn", "dtype": "float64", "epochs": 1.0,
              "steps": None, "warmup_epochs": 0.0, "ramp_eps": None, "ramp_steps": 100, "ramp_attack_steps": 7,
              "lr": 0.05, "batch_size": 50, "attack_eps": 0.3,
              "attack_steps": 40, "attack_step_size": 0.01, "random_start": True},
    "finetune": {**COMMON, "checkpoint": None, "technique": "lat", "layer": None, "layer_pool": None,
                 "omega": 0.2, "epochs": 2.0, "steps": None, "lr": 0.05, "batch_size": 50,
                 "attack_eps": 0.3, "attack_steps": 40, "attack_step_size": 0.01, "random_start": True,
                 "latent_steps": 10, "eps_scale": 1.0, "noise_scale": 1.0, "epsilon_mode": "batch"},
    "attack": {**COMMON, "checkpoint": None, "method": "pgd", "eps": 0.3, "steps": 40, "step_size": None,
               "norm": "linf", "layer": None, "random_start": False, "latent_eps": None, "eps_scale": 1.0,
               "inner_steps": 10, "outer_steps": 5, "save_examples": False},
    "sweep": {**COMMON, "checkpoint": None, "eps": 0.3, "steps": 40, "step_size": 0.01, "scale": 1.0,
              "lipschitz_samples": 128, "test_limit": 1000},
    "eval": {**COMMON, "checkpoint": None, "attacks": "fgsm,pgd40", "eps": 0.3, "step_size": 0.01,
             "la_latent_eps": None, "sweep": False, "scale": 1.0, "lipschitz_samples": 0},
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _flag(v: str) -> bool:
    low = str(v).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentadv", description="Latent-layer adversarial attacks, training and analysis.")
    p.add_argument("--version", action="version", version=f"latentadv {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, checkpoint=True):
        sp.add_argument("--config", type=Path, help="JSON file with option values")
        sp.add_argument("--out", type=Path, help="run directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--dataset", choices=("mnist", "two-gaussians"))
        sp.add_argument("--data-dir", help="directory holding the MNIST IDX files")
        sp.add_argument("--train-limit", type=int, help="use the first N training samples")
        sp.add_argument("--test-limit", type=int, help="use the first N test samples")
        sp.add_argument("--n-per-class", type=int, help="two-gaussians: samples per class")
        sp.add_argument("--separation", type=float, help="two-gaussians: distance between the means")
        sp.add_argument("--dim", type=int, help="two-gaussians: dimension")
        sp.add_argument("-v", "--verbose", action="store_true")
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path)

    def input_attack(sp):
        sp.add_argument("--attack-eps", type=float)
        sp.add_argument("--attack-steps", type=int)
        sp.add_argument("--attack-step-size", type=float)
        sp.add_argument("--random-start", type=_flag, metavar="BOOL")

    sp = sub.add_parser("train", help="natural or adversarial training from scratch")
    common(sp, checkpoint=False)
    sp.add_argument("--technique", choices=("natural", "at"))
    sp.add_argument("--arch", help="mnist-cnn or mlp:H1,H2,...")
    sp.add_argument("--dtype", choices=("float32", "float64"))
    sp.add_argument("--epochs", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--warmup-epochs", type=float, help="natural epochs before adversarial training")
    sp.add_argument("--ramp-eps", type=_float_list, help="at: budgets of short PGD phases run first, e.g. 0.1,0.2")
    sp.add_argument("--ramp-steps", type=int, help="at: steps per ramp budget")
    sp.add_argument("--ramp-attack-steps", type=int, help="at: PGD steps used during the ramp")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    input_attack(sp)

    sp = sub.add_parser("finetune", help="AT / FNT / LAT / LAT-random fine-tuning of a checkpoint")
    common(sp)
    sp.add_argument("--technique", choices=tuple(t for t in TECHNIQUES if t != "natural"))
    sp.add_argument("--layer", type=int)
    sp.add_argument("--layer-pool", type=_int_list)
    sp.add_argument("--omega", type=float)
    sp.add_argument("--epochs", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--latent-steps", type=int)
    sp.add_argument("--eps-scale", type=float)
    sp.add_argument("--noise-scale", type=float)
    sp.add_argument("--epsilon-mode", choices=("batch", "dataset"))
    input_attack(sp)

    sp = sub.add_parser("attack", help="attack a checkpoint and report adversarial accuracy")
    common(sp)
    sp.add_argument("--method", choices=ATTACK_METHODS)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--step-size", type=float)
    sp.add_argument("--norm", choices=("linf", "l2"))
    sp.add_argument("--layer", type=int, help="pgd: latent boundary; la: matching layer")
    sp.add_argument("--random-start", type=_flag, metavar="BOOL")
    sp.add_argument("--latent-eps", type=float, help="la: latent budget (default: measured from PGD)")
    sp.add_argument("--eps-scale", type=float)
    sp.add_argument("--inner-steps", type=int)
    sp.add_argument("--outer-steps", type=int)
    sp.add_argument("--save-examples", type=_flag, metavar="BOOL")

    sp = sub.add_parser("sweep", help="per-layer budgets, robustness and Lipschitz curves")
    common(sp)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--step-size", type=float)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--lipschitz-samples", type=int)

    sp = sub.add_parser("eval", help="clean and adversarial accuracy for a list of attacks")
    common(sp)
    sp.add_argument("--attacks", help="comma list of fgsm, pgdN, pgdN-l2, la@M")
    sp.add_argument("--eps", type=float)
    sp.add_argument("--step-size", type=float)
    sp.add_argument("--la-latent-eps", type=float)
    sp.add_argument("--sweep", type=_flag, metavar="BOOL")
    sp.add_argument("--scale", type=float)
    sp.add_argument("--lipschitz-samples", type=int)
    return p


# ---------------------------------------------------------------- config resolution


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config is not None:
        if not args.config.exists():
            raise CliError("io", f"config file not found: {args.config}")
        try:
            loaded = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise CliError("config", f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise CliError("config", f"{args.config}: expected a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise CliError("config", f"{args.config}: unknown keys {unknown}")
        cfg.update(loaded)
    for key in cfg:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    for key, v in cfg.items():
        if isinstance(v, Path):
            cfg[key] = str(v)
    if isinstance(cfg.get("layer_pool"), str):
        cfg["layer_pool"] = _int_list(cfg["layer_pool"])
    cfg["command"] = args.command
    return cfg


def run_dir(cfg: dict, out: Path | None) -> Path:
    if out is not None:
        return out
    root = Path(os.environ.get("LATENTADV_OUTPUT_DIR", "runs"))
    return root / f"{cfg['command']}-{config_hash(cfg)}"


def _write_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _metadata(cfg: dict, net: Network) -> dict:
    return {"tool_version": __version__, "seed": cfg["seed"], "config_hash": config_hash(cfg),
            "model_hash": net.fingerprint()}


# ---------------------------------------------------------------- data and models


def load_data(cfg: dict, split: str) -> Dataset:
    if cfg["dataset"] == "mnist":
        try:
            d = load_mnist_dir(cfg["data_dir"], split)
        except FileNotFoundError as exc:
            raise CliError("io", str(exc)) from None
    else:
        # train and test draw from disjoint child streams of the seed
        rng = make_rng(cfg["seed"] * 2 + (split == "test"))
        d = synthetic_two_gaussians(rng, cfg["n_per_class"], cfg["dim"], cfg["separation"])
        order = rng.permutation(len(d))
        d = Dataset(d.images[order], d.labels[order], d.name, d.num_classes)
    limit = cfg["train_limit"] if split == "train" else cfg["test_limit"]
    if limit is not None:
        if limit < 1:
            raise CliError("config", f"{split}_limit must be >= 1, got {limit}")
        d = d.subset(limit)
    return d


def build_network(arch: str, dataset: Dataset, seed: int) -> Network:
    rng = make_rng(seed)
    if arch == "mnist-cnn":
        if dataset.images.shape[1:] != (1, 28, 28):
            raise CliError("config", f"mnist-cnn needs 1x28x28 inputs, dataset has {dataset.images.shape[1:]}")
        return mnist_cnn(rng)
    m = re.fullmatch(r"mlp:([\d,]*)", arch)
    if not m:
        raise CliError("config", f"unknown arch {arch!r}; expected mnist-cnn or mlp:H1,H2,...")
    hidden = _int_list(m.group(1))
    n_in = int(np.prod(dataset.images.shape[1:]))
    net = mlp(rng, [n_in, *hidden, dataset.num_classes])
    if dataset.images.ndim > 2:
        from .network import Flatten
        net = Network([Flatten(), *net.layers], dataset.images.shape[1:], dataset.num_classes)
    return net


def _load_model(cfg: dict):
    if cfg.get("checkpoint") is None:
        raise CliError("config", "--checkpoint is required")
    try:
        ck = load_checkpoint(cfg["checkpoint"])
    except FileNotFoundError as exc:
        raise CliError("io", str(exc)) from None
    return ck


def _input_attack(cfg: dict) -> AttackConfig:
    return AttackConfig(cfg["attack_eps"], cfg["attack_step_size"], cfg["attack_steps"],
                        random_start=bool(cfg["random_start"]))


def _train_config(cfg: dict, technique: str, **extra) -> TrainConfig:
    fields = dict(technique=technique, lr=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                  steps=cfg["steps"], seed=cfg["seed"], **extra)
    try:
        return TrainConfig(attack=_input_attack(cfg), **fields)
    except ValueError as exc:  # TrainConfig lists every violated field
        raise CliError("config", str(exc)) from None


def _write_train_outputs(out: Path, cfg: dict, net: Network, trainlog, test: Dataset, provenance: dict):
    save_checkpoint(net, provenance, out / "model.ckpt")
    atomic_write(out / "trainlog.jsonl", trainlog.to_jsonl().encode())
    report = {"metadata": _metadata(cfg, net), "config": cfg, "test_accuracy": accuracy(net, test.images, test.labels),
              "epochs": trainlog.epochs, "steps": len(trainlog.steps)}
    _write_json(out / "report.json", report)
    return report


# ---------------------------------------------------------------- commands


def cmd_train(cfg: dict, out: Path) -> dict:
    tc = _train_config(cfg, cfg["technique"])
    if cfg["warmup_epochs"] < 0:
        raise CliError("config", f"warmup_epochs must be >= 0, got {cfg['warmup_epochs']}")
    ramp = cfg["ramp_eps"] or []
    if ramp and (min(ramp) <= 0 or cfg["ramp_steps"] < 1 or cfg["ramp_attack_steps"] < 1):
        raise CliError("config", "ramp_eps must be positive, ramp_steps and ramp_attack_steps >= 1")
    data = load_data(cfg, "train")
    test = load_data(cfg, "test")
    net = build_network(cfg["arch"], data, cfg["seed"]).astype(np.dtype(cfg["dtype"]))
    _write_json(out / "config.json", cfg)
    if cfg["warmup_epochs"] > 0 and cfg["technique"] != "natural":
        warm = TrainConfig("natural", lr=tc.lr, batch_size=tc.batch_size, epochs=cfg["warmup_epochs"],
                           seed=cfg["seed"] + 1)
        net, _ = train(net, data, warm)
    if ramp and cfg["technique"] == "at":
        net, _ = budget_ramp(net, data, tc, ramp, cfg["ramp_steps"], cfg["ramp_attack_steps"])
    net, trainlog = train(net, data, tc)
    prov = {"technique": cfg["technique"], "seed": cfg["seed"], "config_hash": config_hash(cfg)}
    return _write_train_outputs(out, cfg, net, trainlog, test, prov)


def cmd_finetune(cfg: dict, out: Path) -> dict:
    ck = _load_model(cfg)
    net = ck.network
    technique = cfg["technique"]
    pool = tuple(cfg["layer_pool"] or ())
    layers = list(pool) if technique == "lat-random" else ([cfg["layer"]] if technique in ("lat", "fnt") else [])
    bad = [m for m in layers if m is None or not 1 <= m <= net.depth - 1]
    if bad:
        raise CliError("config", f"layer(s) {bad} invalid for a {net.depth}-layer network; valid latent layers are 1..{net.depth - 1}")
    extra = dict(omega=cfg["omega"], layer=cfg["layer"] if technique != "lat-random" else None, layer_pool=pool,
                 eps_scale=cfg["eps_scale"], noise_scale=cfg["noise_scale"],
                 latent_attack=AttackConfig(1.0, 0.25, cfg["latent_steps"], random_start=True))
    data = load_data(cfg, "train")
    test = load_data(cfg, "test")
    if cfg["epsilon_mode"] == "dataset" and layers:
        # one budget per layer, measured on the training data before fine-tuning
        eps = compute_layer_epsilons(net, data, _input_attack(cfg), 1.0, cfg["seed"])
        extra.update(epsilon_mode="dataset", fixed_epsilons={m: eps[m] for m in layers})
    tc = _train_config(cfg, technique, **extra)
    _write_json(out / "config.json", cfg)
    net, trainlog = train(net, data, tc)
    prov = {"technique": technique, "seed": cfg["seed"], "config_hash": config_hash(cfg),
            "parent": ck.provenance, "parent_model_hash": ck.network.fingerprint()}
    return _write_train_outputs(out, cfg, net, trainlog, test, prov)


def _latent_eps_from_pgd(net, test, eps, layer, scale, seed):
    src = AttackConfig(eps, eps / 30 if eps > 0 else 0.01, 40)
    return compute_layer_epsilons(net, test, src, scale, seed)[layer]


def cmd_attack(cfg: dict, out: Path) -> dict:
    ck = _load_model(cfg)
    net = ck.network
    test = load_data(cfg, "test").astype(net.dtype)
    method = cfg["method"]
    if method not in ATTACK_METHODS:
        raise CliError("usage", f"unknown attack {method!r}; valid: {', '.join(ATTACK_METHODS)}")
    eps = cfg["eps"]
    try:
        if method == "la":
            layer = cfg["layer"] if cfg["layer"] is not None else 1
            if not 1 <= layer <= net.depth - 1:
                raise CliError("config", f"la layer {layer} outside [1, {net.depth - 1}]")
            latent_eps = cfg["latent_eps"]
            if latent_eps is None:
                latent_eps = _latent_eps_from_pgd(net, test, eps, layer, cfg["eps_scale"], cfg["seed"])
            attack = LatentAttackConfig(layer, eps, latent_eps, inner_steps=cfg["inner_steps"],
                                        outer_steps=cfg["outer_steps"],
                                        alpha_input=None if eps > 0 else 1e-3,
                                        alpha_latent=None if latent_eps > 0 else 1e-3)
        else:
            steps = 1 if method == "fgsm" else cfg["steps"]
            step = cfg["step_size"] if cfg["step_size"] is not None else (eps if method == "fgsm" else eps / 4)
            if cfg["layer"] is not None:
                net.check_index(cfg["layer"])
            attack = AttackConfig(eps, step if step > 0 else 1e-3, steps, cfg["norm"], cfg["layer"],
                                  bool(cfg["random_start"]) and method != "fgsm")
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    _write_json(out / "config.json", cfg)
    clean = accuracy(net, test.images, test.labels)
    adv = attack_accuracy(net, test, attack, cfg["seed"])
    report = {"metadata": _metadata(cfg, net), "config": cfg, "attack": {"name": attack.name, **attack.to_dict()},
              "clean_accuracy": clean, "adv_accuracy": adv, "n": len(test)}
    if cfg["save_examples"] and (isinstance(attack, LatentAttackConfig) or attack.layer is None):
        x_adv = run_attack(net, test.images, test.labels, attack, seed=cfg["seed"])
        np.save(out / "adversarial.npy", x_adv)
    _write_json(out / "report.json", report)
    return report


def parse_attack_list(text: str, eps: float, step_size: float, la_latent_eps=None, net=None, test=None,
                      seed: int = 0) -> list:
    out = []
    for tok in [t.strip() for t in str(text).split(",") if t.strip()]:
        if tok == "fgsm":
            out.append(AttackConfig(eps, max(eps, 1e-3), 1))
        elif m := re.fullmatch(r"pgd(\d+)(-l2)?", tok):
            out.append(AttackConfig(eps, step_size, int(m.group(1)), "l2" if m.group(2) else "linf"))
        elif m := re.fullmatch(r"la@(\d+)", tok):
            layer = int(m.group(1))
            lat = la_latent_eps
            if lat is None:
                lat = _latent_eps_from_pgd(net, test, eps, layer, 1.0, seed)
            out.append(LatentAttackConfig(layer, eps, lat, alpha_input=None if eps > 0 else 1e-3,
                                          alpha_latent=None if lat > 0 else 1e-3))
        else:
            raise CliError("usage", f"unknown attack {tok!r}; valid: fgsm, pgdN, pgdN-l2, la@M")
    return out


def cmd_eval(cfg: dict, out: Path, sweep: bool | None = None) -> dict:
    ck = _load_model(cfg)
    net = ck.network
    test = load_data(cfg, "test").astype(net.dtype)
    sweep = cfg.get("sweep", False) if sweep is None else sweep
    try:
        if cfg["command"] == "sweep":
            attacks = []
            src = AttackConfig(cfg["eps"], cfg["step_size"], cfg["steps"])
        else:
            attacks = parse_attack_list(cfg["attacks"], cfg["eps"], cfg["step_size"], cfg["la_latent_eps"],
                                        net, test, cfg["seed"])
            src = AttackConfig(cfg["eps"], cfg["step_size"], 40) if sweep else None
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    _write_json(out / "config.json", cfg)
    report = evaluate(net, test, attacks, sweep=src, scale=cfg["scale"], lipschitz_samples=cfg["lipschitz_samples"],
                      seed=cfg["seed"], config=cfg)
    atomic_write(out / "report.json", report.to_json().encode())
    if src is not None:
        atomic_write(out / "curves.csv", report.to_csv().encode())
    return report.to_dict()


def cmd_sweep(cfg: dict, out: Path) -> dict:
    return cmd_eval(cfg, out, sweep=True)


COMMANDS = {"train": cmd_train, "finetune": cmd_finetune, "attack": cmd_attack, "sweep": cmd_sweep,
            "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args)
        out = run_dir(cfg, args.out)
        COMMANDS[args.command](cfg, out)
        print(out)
        return 0
    except CliError as exc:
        category, msg = exc.category, str(exc)
    except FileNotFoundError as exc:
        category, msg = "io", str(exc)
    except (FormatError, CheckpointError) as exc:
        category, msg = "format", f"{type(exc).__name__}: {exc}"
    except ValueError as exc:
        category, msg = "config", str(exc)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001
        category, msg = "runtime", f"{type(exc).__name__}: {exc}"
    print(f"latentadv: error[{category}]: {' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
