"""Orthogonal-gradient training against transferable adversarial attacks.

A small numpy stack: reverse-mode autodiff with double backpropagation,
MLP/CNN classifiers, training with a penalty on the cosine similarity of
input-gradients to a frozen reference model, L-infinity attacks, input
transformation defenses and a transfer-evaluation harness.
"""

from .attacks import AttackSpec, fgsm, ifgsm, mifgsm, pgd, run_attack
from .data import Dataset, gen_synthetic, load_checkpoint, load_idx, parse_config, save_checkpoint
from .defenses import DefenseSpec, bilateral, bit_reduce, jpeg_like, tv_minimize
from .harness import EvalProtocol, FoolingReport, compare_defenses, emit_report, run_transfer, sweep_lambda
from .nn import InitSpec, Model, OptimizerSpec, build_model, cnn_arch, mlp_arch, predict
from .ortho import OrthoConfig, measure_pair_similarity, ortho_loss, train_ordinary, train_orthogonal

__version__ = "0.1.0"
