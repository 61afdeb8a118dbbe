import numpy as np
import pytest
from hypothesis import given, strategies as st

from rehyat.checks import gradcheck
from rehyat.distill import (
    DistillConfig,
    DistillSample,
    ToySetup,
    build_toy,
    distill_loss,
    grad_phi,
    heldout_loss,
    heldout_samples,
    make_student,
    train_distill,
    write_trace,
)
from rehyat.chunking import make_layout
from rehyat.errors import DivergenceError, ShapeError
from rehyat.numerics import Rng

SMALL = ToySetup(T=4, H=2, W=1, d_model=8, heads=2, T_c=2, T_o=1)


def test_loss_examples():
    y = np.array([[1.0, 2.0]])
    assert distill_loss(y, y) == 0.0
    assert distill_loss(y, np.array([[0.0, 4.0]])) == 1.5
    with pytest.raises(ShapeError):
        distill_loss(y, np.ones((2, 1)))


@given(st.integers(0, 2**32))
def test_loss_symmetric_nonneg(seed):
    g = Rng(seed).generator
    a, b = g.standard_normal((3, 4)), g.standard_normal((3, 4))
    assert distill_loss(a, b) == distill_loss(b, a) >= 0


def test_sample_reproducible():
    a = DistillSample.draw(3, 1, 2, 10, 4)
    b = DistillSample.draw(3, 1, 2, 10, 4)
    c = DistillSample.draw(3, 1, 3, 10, 4)
    assert np.array_equal(a.x, b.x) and not np.array_equal(a.x, c.x)


def test_teacher_student_share_weights():
    teacher, student = build_toy(ToySetup(), 7)
    assert student.weights is teacher.weights and student.ffn is teacher.ffn
    assert student.variant == "hybrid-causal" and teacher.variant == "softmax-full"
    assert student.layout.N == 48 and student.head_dim == 8


def test_single_chunk_student_matches_teacher():
    # one chunk covering everything: the hybrid reduces to softmax and phi is unused
    setup = ToySetup(T=4, H=2, W=1, d_model=8, heads=2, T_c=4, T_o=4)
    teacher, student = build_toy(setup, 0)
    x = DistillSample.draw(0, 0, 0, 8, 8).x
    y_t = teacher.output(x)
    assert distill_loss(y_t, student.output(x)) < 1e-12
    _, grads = grad_phi(student, x, y_t)
    assert not np.any(grads.flat())


def test_gradcheck_block():
    rep = gradcheck(11, instances=2, params_per_instance=20, setup=SMALL)
    assert len(rep.rows) == 40
    assert rep.worst <= 1e-4


def test_gradcheck_attention_match():
    rep = gradcheck(12, instances=2, params_per_instance=20, setup=SMALL, match="attention")
    assert rep.worst <= 1e-4


def test_gradient_scales_with_loss():
    teacher, student = build_toy(SMALL, 3)
    x = DistillSample.draw(3, 0, 0, 8, 8).x
    y_t = teacher.output(x)
    l1, g1 = grad_phi(student, x, y_t)
    l2, g2 = grad_phi(student, x, y_t, scale=2.0)
    assert l2 == pytest.approx(2 * l1, rel=1e-15)
    np.testing.assert_allclose(g2.flat(), 2 * g1.flat(), rtol=1e-14, atol=0)


def test_zero_steps():
    teacher, student = build_toy(SMALL, 1)
    res = train_distill(teacher, student, DistillConfig(steps=0, n_heldout=2))
    assert len(res.trace) == 1 and res.trace[0].train_loss is None
    for a, b in zip(res.phi_q + res.phi_k, student.phi_q + student.phi_k):
        assert all(np.array_equal(a.params()[k], b.params()[k]) for k in a.params())


def test_frozen_weights_and_determinism(tmp_path):
    teacher, student = build_toy(SMALL, 2)
    before = [a.copy() for a in (teacher.weights.w_q, teacher.weights.w_k, teacher.weights.w_v, *teacher.ffn.arrays())]
    phi_before = [m.copy() for m in student.phi_q]
    cfg = DistillConfig(lr=0.05, steps=20, n_heldout=2, eval_every=5)
    r1 = train_distill(teacher, student, cfg)
    r2 = train_distill(teacher, student, cfg)
    after = (teacher.weights.w_q, teacher.weights.w_k, teacher.weights.w_v, *teacher.ffn.arrays())
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert all(np.array_equal(a.w1, b.w1) for a, b in zip(phi_before, student.phi_q))  # input maps untouched
    assert [(r.train_loss, r.heldout_loss) for r in r1.trace] == [(r.train_loss, r.heldout_loss) for r in r2.trace]
    p1, p2 = write_trace(r1, tmp_path / "a.csv"), write_trace(r2, tmp_path / "b.csv")
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "# precision=double" and lines[1] == "step,train_loss,heldout_loss"
    assert len(lines) == 2 + 21


def test_training_reduces_heldout_with_larger_step():
    teacher, student = build_toy(SMALL, 4)
    res = train_distill(teacher, student, DistillConfig(lr=1.0, steps=60, n_heldout=4, eval_every=60))
    assert res.final_heldout < res.initial_heldout


def test_adamw_flag():
    teacher, student = build_toy(SMALL, 5)
    cfg = DistillConfig(lr=1e-2, steps=40, optimizer="adamw", weight_decay=1e-4, n_heldout=4, eval_every=40)
    res = train_distill(teacher, student, cfg)
    assert res.final_heldout < res.initial_heldout


def test_divergence_reports_step(monkeypatch):
    from rehyat import distill

    real = distill.grad_phi
    calls = []

    def flaky(block, x, y, match="block", scale=1.0):
        calls.append(1)
        loss, g = real(block, x, y, match, scale)
        return (float("nan") if len(calls) == 4 else loss), g

    monkeypatch.setattr(distill, "grad_phi", flaky)
    teacher, student = build_toy(SMALL, 6)
    with pytest.raises(DivergenceError) as info:
        train_distill(teacher, student, DistillConfig(steps=10, n_heldout=1))
    assert info.value.step == 3


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(lr=0.0)
    with pytest.raises(ValueError):
        DistillConfig(optimizer="lbfgs")
    with pytest.raises(ValueError):
        DistillConfig(match="ffn")


def test_student_must_share_weights():
    teacher, student = build_toy(SMALL, 7)
    other, _ = build_toy(SMALL, 8)
    impostor = make_student(other, student.layout, Rng(0))
    with pytest.raises(ValueError):
        train_distill(teacher, impostor, DistillConfig(steps=1, n_heldout=1))


def test_heldout_disjoint_from_training():
    cfg = DistillConfig()
    held = heldout_samples(cfg, 8, 8, "double")
    assert all(h.eps_seed != cfg.seed for h in held)
    teacher, student = build_toy(SMALL, 0)
    assert heldout_loss(teacher, student, held[:2], "block") > 0


def test_layout_head_dim_mismatch():
    teacher, _ = build_toy(SMALL, 0)
    with pytest.raises(ShapeError):
        make_student(teacher, make_layout(4, 2, 1, 8, 2, 1), Rng(0))


def test_moving_average_trend_on_toy_run():
    # pinned toy run: the 100-step moving average of training loss must fall between step 50 and step 500
    teacher, student = build_toy(ToySetup(), 7)
    res = train_distill(teacher, student, DistillConfig(steps=500, seed=7))
    losses = np.array(res.train_losses())

    def avg(s):
        return losses[max(0, s - 99):s + 1].mean()

    assert avg(499) < avg(50), f"moving average {avg(499):.4f} at step 500 vs {avg(50):.4f} at step 50"
