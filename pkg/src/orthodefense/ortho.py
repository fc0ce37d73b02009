"""Orthogonal-gradient training against a frozen reference model.

The penalized objective for a mini-batch of images ``i`` with labels ``l`` is

    P = mean_b CE(M(i), l) + lam * delta
    delta = mean_b < g_ref(i), g_M(i) >

where ``g_X(i)`` is the input-gradient of ``CE(X(i), l)`` flattened and scaled
to unit l2 norm.  ``g_ref`` is a constant; ``g_M`` is differentiated with
respect to M's parameters through a recorded backward pass.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .nn import SGD, InitSpec, Model, OptimizerSpec, accuracy, build_model, forward

__all__ = [
    "NORM_FLOOR",
    "PENALTIES",
    "SimilaritySample",
    "PairSimilarity",
    "OrthoConfig",
    "EpochStats",
    "TrainRecord",
    "TrainingDiverged",
    "input_gradients",
    "similarity",
    "ortho_objective",
    "ortho_loss",
    "ortho_gradients",
    "train_orthogonal",
    "train_ordinary",
    "measure_pair_similarity",
]

NORM_FLOOR = 1e-12
PENALTIES = ("abs", "signed", "square")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"objective became non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class SimilaritySample:
    delta: float
    batch_size: int


@dataclass(frozen=True)
class PairSimilarity:
    mean: float
    std: float
    mean_abs: float
    n: int


def _normalize_rows(g):
    norm = ad.l2_norm(g, axis=1, keepdims=True)
    return ad.div(g, ad.maximum(norm, NORM_FLOOR))


def input_gradients(model: Model, images, labels, params=None, create_graph: bool = False):
    """Unit-norm input-gradients of the per-image loss, shape (b, d).

    Without ``params`` a plain array is returned.  With ``params`` (leaf
    Variables of a graph) the result is a Variable on that graph that can be
    differentiated with respect to those parameters.
    """
    images = np.asarray(images, dtype=np.float64)
    b = images.shape[0]
    if params is None:
        graph = Graph()
        x = graph.leaf(images)
        per = ad.softmax_cross_entropy(forward(model, x), labels, reduction="sum")
        (gx,) = ad.backward(per, [x])
        with ad.no_record():
            return _normalize_rows(ad.constant(gx.reshape(b, -1))).value
    graph = next(iter(params.values())).graph
    x = graph.leaf(images)
    per = ad.softmax_cross_entropy(forward(model, x, params), labels, reduction="sum")
    (gx,) = ad.backward(per, [x], create_graph=create_graph)
    gx = ad.as_variable(gx)
    return _normalize_rows(ad.reshape(gx, (b, -1)))


def similarity(g1, g2) -> SimilaritySample:
    """Mean over rows of the row-wise dot products of two normalized gradient batches."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape or g1.ndim != 2:
        raise ad.ShapeError(f"similarity: shapes {g1.shape} and {g2.shape} differ")
    return SimilaritySample(float(np.mean(np.sum(g1 * g2, axis=1))), g1.shape[0])


def ortho_objective(model: Model, ref: Model | None, images, labels, lam: float, ref_grads=None,
                    penalty: str = "square"):
    """Build the penalized objective on a fresh graph.

    Returns ``(objective, params, delta)`` where ``params`` are the leaf
    Variables of ``model`` and ``delta`` is the similarity Variable (``None``
    when ``lam == 0``, in which case the objective is the plain mean loss).
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    images = np.asarray(images, dtype=np.float64)
    graph = Graph()
    params = model.bind(graph)
    x = graph.leaf(images)
    per = ad.softmax_cross_entropy(forward(model, x, params), labels, reduction="none")
    ce = ad.mean(per)
    if lam == 0:
        return ce, params, None
    if ref_grads is None:
        if ref is None:
            raise ValueError("a reference model is required when lambda > 0")
        ref_grads = input_gradients(ref, images, labels)
    (gx,) = ad.backward(ad.sum(per), [x], create_graph=True)
    g2 = _normalize_rows(ad.reshape(gx, (images.shape[0], -1)))
    delta = ad.mean(ad.sum(ad.mul(g2, ref_grads), axis=1))
    if penalty not in PENALTIES:
        raise ValueError(f"unknown penalty {penalty!r}; expected one of {PENALTIES}")
    term = delta
    if penalty == "abs":
        term = ad.mul(delta, float(np.sign(delta.value)))
    elif penalty == "square":
        term = ad.mul(delta, delta)
    return ad.add(ce, ad.mul(term, float(lam))), params, delta


def ortho_loss(model: Model, ref: Model | None, images, labels, lam: float, penalty: str = "square"):
    """The penalized objective as a scalar Variable."""
    return ortho_objective(model, ref, images, labels, lam, penalty=penalty)[0]


def _penalty_value(delta: float, penalty: str) -> float:
    if penalty == "abs":
        return abs(delta)
    if penalty == "square":
        return delta * delta
    return delta


def _penalty_slope(delta: float, penalty: str) -> float:
    if penalty == "abs":
        return float(np.sign(delta))
    if penalty == "square":
        return 2 * delta
    return 1.0


def _penalty_delta(model, images, labels, ref_grads):
    g2 = input_gradients(model, images, labels)
    return similarity(ref_grads, g2).delta


def ortho_gradients(model: Model, ref: Model | None, images, labels, lam: float,
                    method: str = "exact", ref_grads=None, h: float = 1e-6, penalty: str = "square"):
    """Objective value, parameter gradients and delta for one batch.

    ``method="exact"`` differentiates the recorded backward pass.
    ``method="fd"`` keeps the exact first-order loss gradient but obtains the
    penalty's parameter gradient by central differences of delta, chained
    through the penalty's derivative at the current delta.
    """
    if method not in ("exact", "fd"):
        raise ValueError(f"unknown method {method!r}")
    if penalty not in PENALTIES:
        raise ValueError(f"unknown penalty {penalty!r}; expected one of {PENALTIES}")
    if lam > 0 and ref_grads is None:
        ref_grads = input_gradients(ref, images, labels)
    if method == "exact" or lam == 0:
        obj, params, delta = ortho_objective(model, ref, images, labels, lam, ref_grads, penalty)
        names = list(params)
        grads = ad.backward(obj, [params[n] for n in names])
        dval = float(delta.value) if delta is not None else float("nan")
        return float(obj.value), dict(zip(names, grads)), dval

    ce, params, _ = ortho_objective(model, ref, images, labels, 0.0)
    names = list(params)
    grads = dict(zip(names, ad.backward(ce, [params[n] for n in names])))
    delta = _penalty_delta(model, images, labels, ref_grads)
    slope = lam * _penalty_slope(delta, penalty)
    for name in names:
        base = model.params[name]
        dgrad = np.empty(base.size)
        for k in range(base.size):
            shifted = {}
            for sign in (1.0, -1.0):
                p = base.copy().reshape(-1)
                p[k] += sign * h
                trial = dict(model.params)
                trial[name] = p.reshape(base.shape)
                shifted[sign] = _penalty_delta(model.with_params(trial), images, labels, ref_grads)
            dgrad[k] = (shifted[1.0] - shifted[-1.0]) / (2 * h)
        grads[name] = grads[name] + slope * dgrad.reshape(base.shape)
    return float(ce.value) + lam * _penalty_value(delta, penalty), grads, delta


@dataclass(frozen=True)
class OrthoConfig:
    lam: float = 30.0
    epochs_check: int = 20
    max_epochs: int = 100
    optimizer: OptimizerSpec = OptimizerSpec()
    seed: int = 0
    penalty: str = "square"

    def __post_init__(self):
        if self.penalty not in PENALTIES:
            raise ValueError(f"unknown penalty {self.penalty!r}; expected one of {PENALTIES}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.epochs_check <= 0 or self.max_epochs <= 0:
            raise ValueError("epoch counts must be positive")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    delta: float
    val_acc: float | None
    elapsed: float


@dataclass
class TrainRecord:
    epochs: list[EpochStats] = field(default_factory=list)
    checks: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, acc_prev, acc)
    best_epoch: int = 0
    best_val_acc: float = 0.0

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["epoch", "loss", "delta", "val_acc"])
        for e in self.epochs:
            writer.writerow([
                e.epoch,
                repr(e.loss),
                "" if math.isnan(e.delta) else repr(e.delta),
                "" if e.val_acc is None else repr(e.val_acc),
            ])
        return out.getvalue()


def train_orthogonal(arch, ref: Model | None, train, val, cfg: OrthoConfig,
                     input_shape=None, log=None) -> tuple[Model, TrainRecord]:
    """Train a fresh model on the penalized objective.

    Validation accuracy is checked every ``cfg.epochs_check`` epochs (and at
    the last epoch).  Training stops when a check fails to improve on the
    previous one, or at ``cfg.max_epochs``.  The parameters from the check
    with the highest accuracy are returned; ties go to the later check.

    With ``ref`` given, the mean delta against it is recorded every epoch even
    when ``cfg.lam == 0`` (it then has no effect on the updates).
    """
    train_x, train_y = _xy(train)
    val_x, val_y = _xy(val)
    if len(train_y) == 0 or len(val_y) == 0:
        raise ValueError("training and validation sets must be nonempty")
    if cfg.lam > 0 and ref is None:
        raise ValueError("a reference model is required when lambda > 0")
    if input_shape is None:
        input_shape = train_x.shape[1:]
    model = build_model(arch, InitSpec(seed=cfg.seed), input_shape=input_shape)
    if ref is not None and ref.input_shape != model.input_shape:
        raise ValueError(f"reference input {ref.input_shape} differs from model input {model.input_shape}")

    ref_grads = None
    if ref is not None:
        ref_grads = np.concatenate([
            input_gradients(ref, train_x[s : s + 256], train_y[s : s + 256])
            for s in range(0, len(train_y), 256)
        ])

    opt = SGD(cfg.optimizer)
    rng = np.random.default_rng(cfg.seed)
    b = cfg.optimizer.batch_size
    record = TrainRecord()
    best = model
    acc_prev = acc_now = 0.0
    start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_y))
        losses, deltas, sizes = [], [], []
        for bi, s in enumerate(range(0, len(order), b)):
            idx = order[s : s + b]
            xb, yb = train_x[idx], train_y[idx]
            rg = None if ref_grads is None else ref_grads[idx]
            obj, grads, delta = ortho_gradients(model, ref, xb, yb, cfg.lam, ref_grads=rg, penalty=cfg.penalty)
            if not math.isfinite(obj) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(epoch, bi)
            if rg is not None and cfg.lam == 0:
                delta = similarity(rg, input_gradients(model, xb, yb)).delta
            losses.append(obj - cfg.lam * _penalty_value(delta, cfg.penalty) if cfg.lam else obj)
            deltas.append(delta)
            sizes.append(len(idx))
            model = opt.step(model, grads)
        w = np.asarray(sizes, dtype=np.float64)
        mean_loss = float(np.dot(losses, w) / w.sum())
        mean_delta = float(np.dot(deltas, w) / w.sum()) if ref is not None else float("nan")

        val_acc = None
        stop = False
        if epoch % cfg.epochs_check == 0 or epoch == cfg.max_epochs:
            acc_prev, acc_now = acc_now, accuracy(model, (val_x, val_y))
            val_acc = acc_now
            record.checks.append((epoch, acc_prev, acc_now))
            if acc_now >= record.best_val_acc:
                best, record.best_epoch, record.best_val_acc = model, epoch, acc_now
            stop = acc_now <= acc_prev
        record.epochs.append(EpochStats(epoch, mean_loss, mean_delta, val_acc, time.perf_counter() - start))
        if log is not None:
            log(record.epochs[-1])
        if stop:
            break
    return best, record


def train_ordinary(arch, train, val, cfg: OrthoConfig, input_shape=None, log=None):
    """Plain empirical-risk training (the lambda = 0 case without a reference)."""
    cfg = OrthoConfig(0.0, cfg.epochs_check, cfg.max_epochs, cfg.optimizer, cfg.seed, cfg.penalty)
    return train_orthogonal(arch, None, train, val, cfg, input_shape=input_shape, log=log)


def _xy(data):
    if hasattr(data, "images"):
        return np.asarray(data.images, dtype=np.float64), np.asarray(data.labels)
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def measure_pair_similarity(m1: Model, m2: Model, dataset, n: int) -> PairSimilarity:
    """Delta between two models over ``n`` contiguous batches of ``dataset``."""
    if n <= 0:
        raise ValueError("need at least one batch")
    x, y = _xy(dataset)
    if n > len(y):
        raise ValueError(f"cannot split {len(y)} samples into {n} batches")
    deltas = []
    for idx in np.array_split(np.arange(len(y)), n):
        g1 = input_gradients(m1, x[idx], y[idx])
        g2 = input_gradients(m2, x[idx], y[idx])
        deltas.append(similarity(g1, g2).delta)
    deltas = np.asarray(deltas)
    return PairSimilarity(float(deltas.mean()), float(deltas.std()), float(np.abs(deltas).mean()), n)
