import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from orthodefense import autodiff as ad
from orthodefense.nn import InitSpec, OptimizerSpec, build_model, forward, mlp_arch
from orthodefense.ortho import (
    PENALTIES,
    OrthoConfig,
    TrainingDiverged,
    input_gradients,
    measure_pair_similarity,
    ortho_gradients,
    ortho_loss,
    ortho_objective,
    similarity,
    train_ordinary,
    train_orthogonal,
)


def test_similarity_examples():
    e = np.eye(2)
    assert similarity(e, e).delta == 1.0
    assert similarity(e[:1], e[1:]).delta == 0.0
    s = similarity(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]) / math.sqrt(2))
    assert s.delta == pytest.approx(math.sqrt(2) / 2, abs=1e-12)


def test_similarity_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        similarity(np.ones((2, 3)), np.ones((3, 3)))


def _setup(seed=0, hidden=6, n=5):
    rng = np.random.default_rng(seed)
    shape = (1, 3, 3)
    arch = mlp_arch(shape, 3, hidden)
    m = build_model(arch, InitSpec(seed=seed), input_shape=shape)
    ref = build_model(arch, InitSpec(seed=seed + 100), input_shape=shape)
    x = rng.uniform(size=(n, *shape))
    y = rng.integers(0, 3, size=n)
    return m, ref, x, y


def test_input_gradients_are_unit_rows():
    m, _, x, y = _setup()
    g = input_gradients(m, x, y)
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0, rtol=1e-12)


def test_zero_gradient_is_guarded():
    m, _, x, y = _setup()
    zero = m.with_params({k: np.zeros_like(v) for k, v in m.params.items()})
    g = input_gradients(zero, x, y)
    assert np.all(g == 0) and np.all(np.isfinite(g))


def test_lambda_zero_is_plain_loss():
    m, ref, x, y = _setup()
    plain = ad.softmax_cross_entropy(forward(m, x), y).item()
    assert ortho_loss(m, ref, x, y, 0.0).item() == plain


@pytest.mark.parametrize("penalty", PENALTIES)
def test_self_similarity_adds_lambda(penalty):
    m, _, x, y = _setup()
    obj, _, delta = ortho_objective(m, m, x, y, 7.0, penalty=penalty)
    base = ortho_loss(m, m, x, y, 0.0).item()
    assert delta.item() == pytest.approx(1.0, abs=1e-12)
    assert obj.item() == pytest.approx(base + 7.0, abs=1e-10)


def test_unknown_penalty():
    m, ref, x, y = _setup()
    with pytest.raises(ValueError):
        ortho_objective(m, ref, x, y, 1.0, penalty="cube")


def _objective_fd(m, ref, x, y, lam, penalty, h=1e-6):
    out = {}
    for name, base in m.params.items():
        g = np.empty(base.size)
        for k in range(base.size):
            vals = []
            for s in (1.0, -1.0):
                p = base.copy().reshape(-1)
                p[k] += s * h
                trial = dict(m.params)
                trial[name] = p.reshape(base.shape)
                vals.append(ortho_loss(m.with_params(trial), ref, x, y, lam, penalty).item())
            g[k] = (vals[0] - vals[1]) / (2 * h)
        out[name] = g.reshape(base.shape)
    return out


def _rel(a, b):
    num = max(np.max(np.abs(a[k] - b[k])) for k in a)
    den = max(np.max(np.abs(a[k])) for k in a)
    return num / max(den, 1e-12)


@pytest.mark.parametrize("penalty", PENALTIES)
def test_exact_gradient_matches_finite_differences(penalty):
    m, ref, x, y = _setup(seed=3)
    _, exact, _ = ortho_gradients(m, ref, x, y, 30.0, penalty=penalty)
    assert _rel(exact, _objective_fd(m, ref, x, y, 30.0, penalty)) < 1e-3


@pytest.mark.parametrize("penalty", PENALTIES)
def test_exact_gradient_matches_fallback(penalty):
    m, ref, x, y = _setup(seed=4)
    v1, exact, d1 = ortho_gradients(m, ref, x, y, 30.0, penalty=penalty)
    v2, fd, d2 = ortho_gradients(m, ref, x, y, 30.0, method="fd", penalty=penalty)
    assert d1 == pytest.approx(d2, abs=1e-12)
    assert v1 == pytest.approx(v2, abs=1e-10)
    assert _rel(exact, fd) < 1e-6


def test_reference_receives_no_gradient():
    m, ref, x, y = _setup()
    ref_before = {k: v.copy() for k, v in ref.params.items()}
    ortho_gradients(m, ref, x, y, 5.0)
    for k in ref.params:
        assert ref.params[k].tobytes() == ref_before[k].tobytes()


def _rot(axis, angle):
    return Rotation.from_rotvec(np.asarray(axis, dtype=float) / np.linalg.norm(axis) * angle).as_matrix()


def test_orthogonal_chains_with_equal_products(rng):
    # A = (R1, R2), B = (Q R1, R2 Q^T) with Q a 120 degree rotation:
    # <R, Q R>_F = tr(Q) = 1 + 2 cos(120 deg) = 0, and B2 B1 = R2 Q^T Q R1 = A2 A1.
    r1 = Rotation.random(random_state=1).as_matrix() * 1.5
    r2 = Rotation.random(random_state=2).as_matrix() * 0.5
    q = _rot(rng.normal(size=3), 2 * np.pi / 3)
    a_chain = [r1, r2]
    b_chain = [q @ r1, r2 @ q.T]
    for a, b in zip(a_chain, b_chain):
        assert abs(np.sum(a * b)) < 1e-12
    pts = rng.normal(size=(3, 20))
    np.testing.assert_allclose(b_chain[1] @ (b_chain[0] @ pts), a_chain[1] @ (a_chain[0] @ pts), atol=1e-12)


def test_measure_pair_similarity():
    m, ref, x, y = _setup(n=12)
    same = measure_pair_similarity(m, m, (x, y), 3)
    assert same.mean == pytest.approx(1.0, abs=1e-12) and same.std < 1e-12
    other = measure_pair_similarity(m, ref, (x, y), 4)
    assert abs(other.mean) <= 1 + 1e-9 and other.mean_abs >= abs(other.mean) - 1e-15
    with pytest.raises(ValueError):
        measure_pair_similarity(m, m, (x, y), 0)


def test_lambda_zero_matches_ordinary_training(small_data):
    train, val = small_data
    arch = mlp_arch(train.image_shape, 3, 8)
    cfg = OrthoConfig(0.0, 2, 4, OptimizerSpec(lr=0.02, batch_size=32), seed=5)
    a, _ = train_ordinary(arch, train, val, cfg)
    ref, _ = train_ordinary(arch, train, val, OrthoConfig(0.0, 2, 2, cfg.optimizer, seed=6))
    b, rec = train_orthogonal(arch, ref, train, val, cfg)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert all(-1 <= e.delta <= 1 for e in rec.epochs)


def test_stopping_rule_keeps_later_tie(small_data):
    train, val = small_data
    arch = mlp_arch(train.image_shape, 3, 16)
    cfg = OrthoConfig(0.0, 5, 100, OptimizerSpec(lr=0.05, batch_size=16), seed=1)
    _, rec = train_ordinary(arch, train, val, cfg)
    epochs = [c[0] for c in rec.checks]
    assert epochs == list(range(5, 5 * len(epochs) + 1, 5))
    last_prev, last = rec.checks[-1][1:]
    assert last <= last_prev or epochs[-1] == 100
    assert all(b > a for _, a, b in rec.checks[:-1])
    best = max(acc for _, _, acc in rec.checks)
    assert rec.best_val_acc == best
    assert rec.best_epoch == max(e for e, _, acc in rec.checks if acc == best)


def test_record_csv(small_data):
    train, val = small_data
    arch = mlp_arch(train.image_shape, 3, 8)
    _, rec = train_ordinary(arch, train, val, OrthoConfig(0.0, 2, 3, OptimizerSpec(lr=0.01), seed=0))
    lines = rec.to_csv().splitlines()
    assert lines[0] == "epoch,loss,delta,val_acc"
    assert len(lines) == 1 + len(rec.epochs)
    assert lines[1].split(",")[2] == "" and lines[1].split(",")[3] == ""


def test_divergence_reports_epoch_and_batch(small_data):
    train, val = small_data
    x = train.images.copy()
    x[40] = np.nan
    arch = mlp_arch(train.image_shape, 3, 8)
    cfg = OrthoConfig(0.0, 2, 3, OptimizerSpec(lr=0.01, batch_size=500), seed=0)
    with pytest.raises(TrainingDiverged) as info:
        train_ordinary(arch, (x, train.labels), val, cfg)
    assert (info.value.epoch, info.value.batch) == (1, 0)


def test_orthogonal_training_reduces_similarity(small_data):
    train, val = small_data
    arch = mlp_arch(train.image_shape, 3, 16)
    opt = OptimizerSpec(lr=0.01, batch_size=32)
    ref, _ = train_ordinary(arch, train, val, OrthoConfig(0.0, 10, 20, opt, seed=1))
    ret, _ = train_orthogonal(arch, ref, train, val, OrthoConfig(0.0, 10, 20, opt, seed=2))
    orth, _ = train_orthogonal(arch, ref, train, val, OrthoConfig(30.0, 10, 20, opt, seed=2))
    d_ret = measure_pair_similarity(ref, ret, val, 3).mean_abs
    d_orth = measure_pair_similarity(ref, orth, val, 3).mean_abs
    assert d_orth < 0.5 * d_ret


def test_config_validation():
    with pytest.raises(ValueError):
        OrthoConfig(-1.0)
    with pytest.raises(ValueError):
        OrthoConfig(epochs_check=0)
    with pytest.raises(ValueError):
        OrthoConfig(penalty="cube")
