import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from adkd import engine as E
from adkd.distill import (DistillConfig, attribution_loss, ce_loss, logit_kd_loss,
                          total_loss)
from adkd.engine import Tensor
from adkd.model import Model, ModelConfig
from adkd.trainer import _param_grads, distill_step


def T(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# --- cross-entropy ----------------------------------------------------------------

def test_ce_uniform_is_ln2():
    assert ce_loss(T([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_ce_saturated_correct_is_zero():
    assert ce_loss(T([[20.0, -20.0]]), [0]).item() == pytest.approx(0.0, abs=1e-15)


def test_ce_regression_exact_prediction():
    assert ce_loss(T([[1.5]]), [1.5]).item() == 0.0
    assert ce_loss(T([[1.0], [3.0]]), [0.0, 3.0]).item() == pytest.approx(0.5)


def test_ce_rejects_bad_label():
    with pytest.raises(ValueError):
        ce_loss(T([[0.0, 1.0]]), [2])


def test_ce_minimized_at_label():
    labels = [1]
    best = ce_loss(T([[-5.0, 5.0]]), labels).item()
    for z in ([0.0, 0.0], [5.0, -5.0], [1.0, 2.0]):
        assert ce_loss(T([z]), labels).item() > best


# --- logit KD -------------------------------------------------------------------------

def test_kd_identical_logits_is_zero():
    z = np.array([[0.3, -1.2, 2.0]])
    assert logit_kd_loss(z, T(z), 4.0).item() == pytest.approx(0.0, abs=1e-15)


def test_kd_swapped_two_class_value():
    # oracle: p = sigmoid(1); KL = p ln(p/q) + q ln(q/p) with q = 1 - p
    p = 1 / (1 + math.exp(-1))
    q = 1 - p
    expected = p * math.log(p / q) + q * math.log(q / p)
    got = logit_kd_loss(np.array([[1.0, 0.0]]), T([[0.0, 1.0]]), 1.0).item()
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.4621, abs=5e-5)


def test_kd_shrinks_as_tau_grows():
    zt, zs = np.array([[2.0, -1.0, 0.5]]), np.array([[-0.5, 1.5, 0.0]])
    vals = [logit_kd_loss(zt, T(zs), tau).item() for tau in (1, 4, 16, 64)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-3


def test_kd_direction_is_teacher_first():
    zt, zs = np.array([[3.0, 0.0]]), np.array([[0.0, 0.5]])
    pt = np.exp(zt) / np.exp(zt).sum()
    ps = np.exp(zs) / np.exp(zs).sum()
    expected = float(np.sum(pt * np.log(pt / ps)))
    assert logit_kd_loss(zt, T(zs), 1.0).item() == pytest.approx(expected, abs=1e-12)


def test_kd_has_no_tau_squared_factor():
    zt, zs = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    # at tau=2 the softened logits are [0.5, 0]; the loss must equal tau=1 on those
    assert logit_kd_loss(zt, T(zs), 2.0).item() == pytest.approx(
        logit_kd_loss(zt / 2, T(zs / 2), 1.0).item(), abs=1e-15)


def test_kd_rejects_bad_tau_and_shape():
    with pytest.raises(ValueError):
        logit_kd_loss(np.zeros((1, 2)), T([[0.0, 0.0]]), 0.0)
    with pytest.raises(E.ShapeError):
        logit_kd_loss(np.zeros((1, 3)), T([[0.0, 0.0]]), 1.0)


def test_kd_regression_is_squared_difference():
    assert logit_kd_loss(np.array([[1.0], [2.0]]), T([[0.0], [2.0]]), 4.0).item() == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-6, 6)),
       hnp.arrays(np.float64, (3, 4), elements=st.floats(-6, 6)),
       st.floats(0.1, 50))
def test_kd_nonnegative(zt, zs, tau):
    assert logit_kd_loss(zt, T(zs), tau).item() >= -1e-12


# --- attribution loss ------------------------------------------------------------

def test_attr_identical_is_zero():
    a = unit_rows(np.random.default_rng(0).normal(size=(3, 2, 5)))
    assert attribution_loss(a, T(a)).item() == 0.0


def test_attr_orthogonal_single_view():
    got = attribution_loss(np.array([[[1.0, 0.0]]]), T([[[0.0, 1.0]]])).item()
    assert got == pytest.approx(math.sqrt(2), abs=1e-15)


def test_attr_antipodal_two_views_hits_bound():
    a = unit_rows(np.array([[[1.0, 2.0, 0.5], [0.0, 1.0, 1.0]]]))
    assert attribution_loss(a, T(-a)).item() == pytest.approx(2 * math.sqrt(2), abs=1e-12)


def test_attr_is_batch_mean():
    at = np.array([[[1.0, 0.0]], [[1.0, 0.0]]])
    as_ = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    assert attribution_loss(at, T(as_)).item() == pytest.approx(math.sqrt(2) / 2, abs=1e-15)


def test_attr_length_mismatch():
    with pytest.raises(E.ShapeError):
        attribution_loss(np.ones((1, 2, 3)), T(np.ones((1, 2, 4))))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_attr_bound_random(c, n, seed):
    rng = np.random.default_rng(seed)
    a = unit_rows(rng.normal(size=(2, c, n)) + 1e-3)
    b = unit_rows(rng.normal(size=(2, c, n)) + 1e-3)
    v = attribution_loss(a, T(b)).item()
    assert 0.0 <= v <= 2 * math.sqrt(c) + 1e-12


# --- total ---------------------------------------------------------------------------

def parts(ce, kd, attr):
    return T(ce), T(kd), (None if attr is None else T(attr))


def test_total_arithmetic():
    total, br = total_loss(*parts(1.0, 0.5, 0.02), alpha=0.9, beta=10.0, tau=4.0)
    assert total.item() == pytest.approx(0.75, abs=1e-12)
    assert (br.ce, br.logit_kd, br.attr, br.total) == (1.0, 0.5, 0.02, total.item())
    assert (br.alpha, br.beta, br.tau) == (0.9, 10.0, 4.0)


def test_total_edge_weights():
    total, _ = total_loss(*parts(0.8, 0.3, 0.7), alpha=1.0, beta=0.0, tau=1.0)
    assert total.item() == 0.3
    total, _ = total_loss(*parts(0.8, 0.3, 0.7), alpha=0.0, beta=0.0, tau=1.0)
    assert total.item() == 0.8
    total, br = total_loss(*parts(0.8, 0.3, None), alpha=0.5, beta=10.0, tau=1.0)
    assert br.attr is None and total.item() == pytest.approx(0.55, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 3), st.floats(0, 1), st.floats(0, 100))
def test_total_identity(ce, kd, attr, alpha, beta):
    _, br = total_loss(*parts(ce, kd, attr), alpha=alpha, beta=beta, tau=1.0)
    assert abs(br.total - ((1 - alpha) * ce + alpha * kd + beta * attr)) <= 1e-12 * max(1.0, abs(br.total))


def test_breakdown_json_line():
    _, br = total_loss(*parts(1.0, 0.5, 0.02), alpha=0.9, beta=10.0, tau=4.0)
    row = json.loads(br.to_json(7))
    assert list(row) == ["step", "ce", "logit_kd", "attr", "total"]
    assert row["step"] == 7 and row["attr"] == 0.02


# --- config ------------------------------------------------------------------------------

def test_defaults_match_reference_settings():
    c = DistillConfig()
    assert (c.lr, c.batch_size, c.alpha, c.beta, c.tau, c.ig_steps, c.topk) == (3e-5, 16, 0.9, 10.0, 4.0, 1, None)
    assert c.validate(64) == []


@pytest.mark.parametrize("field,value", [
    ("alpha", 1.5), ("alpha", -0.1), ("beta", -1.0), ("tau", 0.0), ("topk", 0), ("topk", 65),
    ("ig_steps", 0), ("lr", 0.0), ("batch_size", 0), ("epochs", -1), ("seed", 1.5),
    ("attr_layer", "middle"), ("mode", "fast"), ("alpha", float("nan")), ("beta", True),
])
def test_config_rejects(field, value):
    errors = DistillConfig(**{field: value}).validate(64)
    assert len(errors) == 1 and field in errors[0]


# --- gradients through the whole objective -------------------------------------------

def small(layers, seed, d=8):
    return Model(ModelConfig(num_layers=layers, hidden_dim=d, num_heads=2, vocab_size=30, max_len=6,
                             num_labels=2, seed=seed, init_std=0.3))


def batch():
    rng = np.random.default_rng(1)
    ids = rng.integers(4, 30, size=(3, 5))
    ids[:, 0] = 2
    return ids, np.ones((3, 5)), np.array([0, 1, 1])


def test_attribution_term_changes_gradient():
    teacher, student = small(2, 0), small(1, 1)
    ids, mask, labels = batch()
    g = {}
    for beta in (0.0, 10.0):
        loss, _ = distill_step(teacher, student, ids, mask, labels, DistillConfig(beta=beta))
        g[beta] = _param_grads(loss, student)
    assert any(not np.allclose(g[0.0][k], g[10.0][k], rtol=0, atol=1e-12) for k in g[0.0])


def test_total_loss_fd_one_layer_student():
    teacher, student = small(2, 0), small(1, 1)
    ids, mask, labels = batch()
    cfg = DistillConfig(beta=10.0, alpha=0.5, tau=2.0)

    for name in ("layers.0.wq", "layers.0.w2", "head.w", "tok_emb", "pos_emb"):
        def loss(w, name=name):
            saved = student.params[name]
            student.params[name] = w
            try:
                return distill_step(teacher, student, ids, mask, labels, cfg)[0]
            finally:
                student.params[name] = saved
        r = E.finite_difference_check(loss, {"w": student.params[name].data}, "w", step=1e-5, floor=1e-8)
        assert r.max_rel_error < 1e-3, (name, r.max_rel_error)
