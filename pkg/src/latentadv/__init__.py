"""Latent-layer adversarial analysis, attacks and training for small numpy classifiers."""

__version__ = "0.1.0"

from .attacks import AttackConfig, LatentAttackConfig, fgsm, latent_attack, pgd, pgd_latent, project, run_attack
from .data import Dataset, load_checkpoint, load_idx, load_mnist_dir, save_checkpoint, synthetic_two_gaussians
from .network import Network, accuracy, mlp, mnist_cnn
from .training import TrainConfig, TrainLog, finetune_fnt, finetune_lat, train, train_adversarial, train_natural

__all__ = [
    "AttackConfig", "LatentAttackConfig", "fgsm", "pgd", "pgd_latent", "latent_attack", "project", "run_attack",
    "Dataset", "load_idx", "load_mnist_dir", "synthetic_two_gaussians", "save_checkpoint", "load_checkpoint",
    "Network", "accuracy", "mlp", "mnist_cnn",
    "TrainConfig", "TrainLog", "train", "train_natural", "train_adversarial", "finetune_lat", "finetune_fnt",
]
