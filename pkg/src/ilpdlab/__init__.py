"""Desk-scale laboratory for transfer-based adversarial attacks built
around intermediate-level feature perturbation decay."""

from .attacks import (
    AttackConfig,
    AttackResult,
    DirectionalGuide,
    compute_guide,
    fgsm,
    ifgsm,
    ila,
    ilpd,
    linbp_ifgsm,
    mifgsm,
    mix_features,
    project_and_clip,
    run_attack,
    with_benign_noise,
    with_momentum,
)
from .data import Dataset, generate_synthetic, load_raw, save_raw, train_test_split
from .engine import (
    BackwardOverrides,
    finite_diff_gradient,
    relu_forward,
    softmax_cross_entropy,
)
from .network import (
    Model,
    ModelSpec,
    Parameters,
    init_params,
    load_model,
    midnet,
    save_model,
    smallnet,
    split,
    train_sgd,
)

__all__ = [
    "AttackConfig", "AttackResult", "BackwardOverrides", "Dataset",
    "DirectionalGuide", "Model", "ModelSpec", "Parameters",
    "compute_guide", "fgsm", "finite_diff_gradient", "generate_synthetic",
    "ifgsm", "ila", "ilpd", "init_params", "linbp_ifgsm", "load_model",
    "load_raw", "midnet", "mifgsm", "mix_features", "project_and_clip",
    "relu_forward", "run_attack", "save_model", "save_raw", "smallnet",
    "softmax_cross_entropy", "split", "train_sgd", "train_test_split",
    "with_benign_noise", "with_momentum",
]

__version__ = "0.1.0"
