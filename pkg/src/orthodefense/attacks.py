"""Non-targeted L-infinity gradient attacks: FGSM, I-FGSM, MI-FGSM and PGD.

Images live in [0, 1], so ``eps`` is directly the fraction of the dynamic
range (``eps = 0.03`` is a 3% budget).  All functions work on batches and
return an :class:`AdversarialBatch`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .nn import Model, forward

__all__ = [
    "ATTACKS",
    "AttackSpec",
    "AdversarialBatch",
    "loss_gradient",
    "fgsm",
    "ifgsm",
    "mifgsm",
    "pgd",
    "run_attack",
]

ATTACKS = ("fgsm", "ifgsm", "mifgsm", "pgd")
MAX_EPS = 0.08


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float
    iters: int = 10
    alpha: float | None = None
    mu: float = 1.0
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACKS}")
        if not 0 <= self.epsilon <= MAX_EPS:
            raise ValueError(f"epsilon {self.epsilon} outside [0, {MAX_EPS}]")
        if self.iters < 0:
            raise ValueError("iters must be nonnegative")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")

    @property
    def step_size(self) -> float:
        if self.kind == "fgsm":
            return self.epsilon
        if self.alpha is not None:
            return self.alpha
        if self.kind == "pgd":
            return self.epsilon / 4
        return self.epsilon / max(self.iters, 1)

    def label(self) -> str:
        return self.kind


@dataclass
class AdversarialBatch:
    original: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray

    @property
    def linf(self) -> np.ndarray:
        """Per-image ``max |perturbed - original|``."""
        diff = np.abs(self.perturbed - self.original).reshape(len(self.original), -1)
        return diff.max(axis=1) if diff.size else np.zeros(len(self.original))


def loss_gradient(model: Model, images, labels) -> np.ndarray:
    """Per-image input-gradient of the cross-entropy loss (same shape as ``images``)."""
    graph = Graph()
    x = graph.leaf(np.asarray(images, dtype=np.float64))
    per = ad.softmax_cross_entropy(forward(model, x), labels, reduction="sum")
    return ad.backward(per, [x])[0]


def _project(x, x0, eps):
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def _check(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    return x


def fgsm(model: Model, images, labels, eps: float) -> AdversarialBatch:
    """One signed-gradient step: ``clip01(x + eps * sign(grad))``."""
    x0 = _check(images)
    labels = np.asarray(labels)
    g = loss_gradient(model, x0, labels)
    return AdversarialBatch(x0, np.clip(x0 + eps * np.sign(g), 0.0, 1.0), labels)


def _iterate(model, x0, x, labels, eps, iters, alpha, mu=None):
    momentum = np.zeros_like(x0)
    for _ in range(iters):
        g = loss_gradient(model, x, labels)
        if mu is not None:
            l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
            # an all-zero gradient adds nothing; only the decayed momentum remains
            scaled = np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
            momentum = mu * momentum + scaled
            g = momentum
        x = _project(x + alpha * np.sign(g), x0, eps)
    return x


def _warn_degenerate(iters, alpha, eps):
    if iters == 0:
        warnings.warn("iters = 0: returning the clean input unchanged", stacklevel=3)
    if alpha > eps:
        warnings.warn(f"step size {alpha} exceeds epsilon {eps}", stacklevel=3)


def ifgsm(model: Model, images, labels, eps: float, iters: int = 10, alpha: float | None = None) -> AdversarialBatch:
    """Iterated FGSM, projected onto the eps-ball and [0, 1] after every step."""
    x0 = _check(images)
    labels = np.asarray(labels)
    alpha = eps / max(iters, 1) if alpha is None else alpha
    _warn_degenerate(iters, alpha, eps)
    return AdversarialBatch(x0, _iterate(model, x0, x0.copy(), labels, eps, iters, alpha), labels)


def mifgsm(model: Model, images, labels, eps: float, iters: int = 10, alpha: float | None = None,
           mu: float = 1.0) -> AdversarialBatch:
    """Momentum iterative FGSM with per-image L1-normalized gradients."""
    x0 = _check(images)
    labels = np.asarray(labels)
    alpha = eps / max(iters, 1) if alpha is None else alpha
    _warn_degenerate(iters, alpha, eps)
    return AdversarialBatch(x0, _iterate(model, x0, x0.copy(), labels, eps, iters, alpha, mu=mu), labels)


def pgd(model: Model, images, labels, eps: float, iters: int = 10, alpha: float | None = None,
        random_start: bool = True, seed: int = 0) -> AdversarialBatch:
    """Projected gradient ascent, optionally from a seeded uniform start in the eps-ball."""
    x0 = _check(images)
    labels = np.asarray(labels)
    alpha = eps / 4 if alpha is None else alpha
    _warn_degenerate(iters, alpha, eps)
    x = x0.copy()
    if random_start:
        rng = np.random.default_rng(seed)
        x = np.clip(x0 + rng.uniform(-eps, eps, size=x0.shape), 0.0, 1.0)
    return AdversarialBatch(x0, _iterate(model, x0, x, labels, eps, iters, alpha), labels)


def run_attack(model: Model, images, labels, spec: AttackSpec) -> AdversarialBatch:
    if spec.kind == "fgsm":
        return fgsm(model, images, labels, spec.epsilon)
    if spec.kind == "ifgsm":
        return ifgsm(model, images, labels, spec.epsilon, spec.iters, spec.step_size)
    if spec.kind == "mifgsm":
        return mifgsm(model, images, labels, spec.epsilon, spec.iters, spec.step_size, spec.mu)
    return pgd(model, images, labels, spec.epsilon, spec.iters, spec.step_size, spec.random_start, spec.seed)
