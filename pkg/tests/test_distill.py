import math

import numpy as np
import pytest
from oracles import center_step, cross_entropy_sum, ema, mnm_sum, softmax_over_k, teacher_softmax

from findna import ndiff as nd
from findna.distill import (
    CenterState,
    DistillConfig,
    DistillConfigError,
    Distiller,
    append_cls,
    cl_loss,
    cl_loss_value,
    cm_mnm,
    cosine_schedules,
    ema_update,
    gradient_check,
    load_pretrained,
    micro_configs,
    mnm_loss,
    student_cls_softmax,
    teacher_cls_softmax,
    total_loss,
    update_center,
    warmup_cosine_lr,
)
from findna.mixer import MixerConfig
from findna.ndiff import Parameter, Tape, Tensor
from findna.seqcore import NucleotideSequence, encode_one_hot

TAU_S, TAU_T = 0.1, 0.04


def toy_corpus(n, length, seed=0):
    rng = np.random.default_rng(seed)
    return [NucleotideSequence(f"s{i}", "".join(rng.choice(list("ACGT"), length))) for i in range(n)]


def toy_distiller(**kw):
    mcfg = MixerConfig(channels=8, hidden=16, num_layers=1, max_length=34, dropout_rate=0.0)
    return Distiller(mcfg, DistillConfig(num_cls=2, batch_size=4, **kw))


# ---------------------------------------------------------------------------
# equation-level pieces


def test_config_defaults_and_validation():
    c = DistillConfig()
    assert (c.alpha, c.tau_s, c.tau_t, c.num_cls, c.beta) == (0.5, 0.1, 0.04, 10, 0.996)
    assert (c.lambda_start, c.lambda_end, c.warmup_fraction, c.epochs) == (0.996, 1.0, 0.3, 50)
    with pytest.raises(DistillConfigError):
        DistillConfig(tau_s=0.04, tau_t=0.1)
    with pytest.raises(DistillConfigError):
        DistillConfig(alpha=1.0)
    with pytest.raises(DistillConfigError):
        DistillConfig(lambda_start=0.0)
    ablation = cm_mnm(c)
    assert ablation.alpha == 1.0 and not ablation.contrastive


def test_append_cls():
    out = append_cls(encode_one_hot("ACG"), 2)
    assert out.shape == (5, 5)
    np.testing.assert_array_equal(out[:3], encode_one_hot("ACG"))
    np.testing.assert_array_equal(out[3:], 0.0)
    with pytest.raises(DistillConfigError):
        append_cls(encode_one_hot("A"), 0)


def test_student_softmax_examples():
    p = student_cls_softmax(np.array([[0.0], [TAU_S * math.log(3)]]), TAU_S)
    np.testing.assert_allclose(p[:, 0], [0.25, 0.75], atol=1e-15)
    np.testing.assert_allclose(student_cls_softmax(np.full((4, 3), 2.7), TAU_S), 0.25, atol=1e-15)
    P = np.random.default_rng(0).normal(size=(2, 3))
    np.testing.assert_allclose(student_cls_softmax(P, TAU_S), softmax_over_k(P.tolist(), TAU_S), atol=1e-12)
    big = student_cls_softmax(np.random.default_rng(1).normal(size=(5, 2, 7)) * 50, TAU_S)
    np.testing.assert_allclose(big.sum(axis=-2), 1.0, atol=1e-12)


def test_teacher_softmax_examples():
    rng = np.random.default_rng(2)
    Q, xi = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    got = teacher_cls_softmax(Q, xi, TAU_T)
    np.testing.assert_allclose(got, teacher_softmax(Q.tolist(), xi.tolist(), TAU_T), atol=1e-12)
    np.testing.assert_allclose(teacher_cls_softmax(Q, np.zeros_like(xi), TAU_T), student_cls_softmax(Q, TAU_T))
    shift = rng.normal(size=(1, 3))
    np.testing.assert_allclose(teacher_cls_softmax(Q + shift, xi + shift, TAU_T), got, atol=1e-12)


def test_channel_axis_option_normalizes_rows():
    P = np.random.default_rng(3).normal(size=(2, 3))
    np.testing.assert_allclose(student_cls_softmax(P, TAU_S, axis="channels").sum(axis=1), 1.0)


def test_cl_loss_examples():
    rng = np.random.default_rng(4)
    P, Q = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    q_hat = teacher_cls_softmax(Q, np.zeros((2, 3)), TAU_T)
    val = cl_loss(Tensor(P), q_hat, TAU_S).value
    oracle = cross_entropy_sum(q_hat.tolist(), softmax_over_k(P.tolist(), TAU_S))
    assert abs(val - oracle) < 1e-12
    # p = q gives the entropy of q
    p_eq = student_cls_softmax(Q, TAU_S)
    entropy = -np.sum(p_eq * np.log(p_eq))
    assert abs(cl_loss(Tensor(Q), p_eq, TAU_S).value - entropy) < 1e-12
    # one-hot teacher, uniform student: I * log K
    one_hot = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    assert abs(cl_loss(Tensor(np.zeros((2, 3))), one_hot, TAU_S).value - 3 * math.log(2)) < 1e-12
    assert abs(cl_loss_value(np.full((2, 3), 0.5), one_hot) - 3 * math.log(2)) < 1e-12
    with pytest.raises(nd.DimensionError):
        cl_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)), TAU_S)


def test_cl_loss_gradient_flows_to_student_only():
    p = Parameter("P", np.random.default_rng(5).normal(size=(2, 3)))
    tape = Tape()
    q_hat = teacher_cls_softmax(np.ones((2, 3)), np.zeros((2, 3)), TAU_T)
    grads = tape.backward(cl_loss(tape.param(p), q_hat, TAU_S))
    # d/dP of -sum q log softmax(P/tau) over k is (p_hat - q_hat) / tau
    np.testing.assert_allclose(grads["P"], (student_cls_softmax(p.value, TAU_S) - q_hat) / TAU_S, atol=1e-12)


def test_mnm_loss_examples():
    logits = np.array([[[2.0, 0.5, -1.0, 0.0, 0.3], [0.0, 0.0, 0.0, 0.0, 0.0], [1.0, -2.0, 0.5, 3.0, 0.0],
                        [0.1, 0.2, 0.3, 0.4, 0.5]]])
    targets = np.zeros((1, 4, 5))
    targets[0, 0, 2] = 1.0  # G at a masked row
    targets[0, 2, 3] = 1.0  # T at a masked row
    lp = nd.log_softmax(Tensor(logits), axis=-1)
    got = mnm_loss(lp, targets, "sum", "mean").value
    assert abs(got - mnm_sum(logits[0].tolist(), targets[0].tolist())) < 1e-12
    assert mnm_loss(lp, np.zeros((1, 4, 5))).value == 0.0
    eps = 0.01
    probs = np.array([[1 - eps, eps / 4, eps / 4, eps / 4, eps / 4]])
    single = mnm_loss(Tensor(np.log(probs)), np.array([[1.0, 0, 0, 0, 0]]), "sum", "sum").value
    assert abs(single + math.log(1 - eps)) < 1e-15
    with pytest.raises(nd.DimensionError):
        mnm_loss(lp, np.zeros((1, 3, 5)))


def test_mnm_position_mean_option():
    lp = nd.log_softmax(Tensor(np.random.default_rng(6).normal(size=(1, 4, 5))), axis=-1)
    t = np.zeros((1, 4, 5))
    t[0, 1, 0] = t[0, 3, 1] = 1.0
    s = mnm_loss(lp, t, "sum").value
    assert abs(mnm_loss(lp, t, "mean").value - s / 2) < 1e-12


def test_update_center_examples():
    rng = np.random.default_rng(7)
    xi = rng.normal(size=(2, 3))
    batch = rng.normal(size=(4, 2, 3))
    got = update_center(CenterState(xi, 0.996), batch).xi
    np.testing.assert_allclose(got, center_step(xi.tolist(), batch.tolist(), 0.996), atol=1e-12)
    np.testing.assert_array_equal(update_center(CenterState(xi, 1.0), batch).xi, xi)
    np.testing.assert_allclose(update_center(CenterState(xi, 0.0), batch).xi, batch.mean(axis=0), atol=1e-15)
    with pytest.raises(DistillConfigError):
        update_center(CenterState(xi), np.zeros((0, 2, 3)))


def test_center_closed_form_over_100_steps():
    rng = np.random.default_rng(8)
    xi0, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    state = CenterState(xi0, 0.9)
    for _ in range(100):
        state = update_center(state, np.stack([c, c]))
    np.testing.assert_allclose(state.xi, c + 0.9**100 * (xi0 - c), atol=1e-12)


def test_ema_examples():
    rng = np.random.default_rng(9)
    t0, s0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

    def pair():
        return {"w": Parameter("w", t0.copy())}, {"w": Parameter("w", s0.copy())}

    t, s = pair()
    ema_update(t, s, 0.996)
    np.testing.assert_allclose(t["w"].value.ravel(), ema(t0.ravel(), s0.ravel(), 0.996), atol=1e-15)
    t, s = pair()
    ema_update(t, s, 1.0)
    np.testing.assert_array_equal(t["w"].value, t0)
    t, s = pair()
    ema_update(t, s, 0.0)
    np.testing.assert_array_equal(t["w"].value, s0)
    with pytest.raises(DistillConfigError):
        ema_update({"a": Parameter("a", t0)}, {"b": Parameter("b", s0)}, 0.5)


def test_total_loss():
    assert total_loss(3.0, 5.0, 1.0) == 3.0
    assert total_loss(3.0, 5.0, 0.0) == 5.0
    assert total_loss(3.0, 5.0, 0.5) == 4.0
    # linear in (mnm, cl) at fixed alpha
    a, b = (1.5, -2.0), (0.25, 4.0)
    lhs = total_loss(a[0] + 2 * b[0], a[1] + 2 * b[1], 0.3)
    assert abs(lhs - (total_loss(*a, 0.3) + 2 * total_loss(*b, 0.3))) < 1e-12


def test_schedules():
    cfg = DistillConfig(lr=1e-3)
    lr0, lam0 = cosine_schedules(0, 100, cfg)
    assert lr0 == 0.0 and lam0 == 0.996
    assert cosine_schedules(30, 100, cfg)[0] == pytest.approx(1e-3)
    assert abs(cosine_schedules(99, 100, cfg)[1] - 1.0) < 1e-4
    lams = [cosine_schedules(s, 100, cfg)[1] for s in range(100)]
    assert all(b >= a for a, b in zip(lams, lams[1:]))
    assert warmup_cosine_lr(15, 100, 1.0, 0.3) == pytest.approx(0.5)
    with pytest.raises(DistillConfigError):
        cosine_schedules(100, 100, cfg)


# ---------------------------------------------------------------------------
# trainer


def test_gradient_check_micro():
    rep = gradient_check(*micro_configs())
    assert rep.passed, rep.lines()


def test_lambda_one_leaves_teacher_bitwise_unchanged():
    d = toy_distiller(lambda_start=1.0, lambda_end=1.0)
    before = {n: p.value.copy() for n, p in d.teacher.params.items()}
    d.train_step(toy_corpus(4, 32), 0, 10)
    for n, p in d.teacher.params.items():
        np.testing.assert_array_equal(p.value, before[n])


def test_teacher_moves_toward_student_convexly():
    d = toy_distiller()
    batch = toy_corpus(4, 32)
    for step in range(3):
        pre = {n: p.value.copy() for n, p in d.teacher.params.items()}
        d.train_step(batch, step, 10)
        for n, p in d.teacher.params.items():
            s = d.student.params[n].value
            lo, hi = np.minimum(pre[n], s), np.maximum(pre[n], s)
            assert np.all((p.value >= lo - 1e-15) & (p.value <= hi + 1e-15)), n


def test_no_gradient_reaches_teacher(monkeypatch):
    d = toy_distiller()
    teacher_ids = {id(p) for p in d.teacher.params.values()}
    seen = []
    original = Tape.param

    def spy(self, p):
        if self.recording:
            seen.append(id(p))
        return original(self, p)

    monkeypatch.setattr(Tape, "param", spy)
    d.train_step(toy_corpus(4, 32), 0, 10)
    assert seen and not teacher_ids & set(seen)
    for p in d.teacher.params.values():
        assert not p.grad.any()


def test_loss_decreases_on_fixed_batch():
    d = toy_distiller(lr=1e-3, warmup_fraction=0.0)
    batch = toy_corpus(4, 32, seed=1)
    totals = []
    for step in range(50):
        # identical views every step so only the parameters change
        totals.append(d.train_step(batch, 0, 50).total)
    smooth = np.convolve(totals, np.ones(5) / 5, mode="valid")
    assert smooth[-1] < smooth[0]
    assert np.mean(np.diff(smooth) < 0) > 0.8


def test_training_is_deterministic():
    corpus = toy_corpus(8, 32)
    a = toy_distiller().fit(corpus, epochs=1)
    b = toy_distiller().fit(corpus, epochs=1)
    assert [r.row() for r in a] == [r.row() for r in b]


def test_workers_match_single_worker_closely():
    corpus = toy_corpus(4, 32)
    one = toy_distiller().train_step(corpus, 0, 10)
    mcfg = MixerConfig(channels=8, hidden=16, num_layers=1, max_length=34, dropout_rate=0.0)
    two = Distiller(mcfg, DistillConfig(num_cls=2, batch_size=4), workers=2).train_step(corpus, 0, 10)
    assert two.total == pytest.approx(one.total, rel=1e-12)


def test_cm_mnm_trains_without_teacher():
    mcfg = MixerConfig(channels=8, hidden=16, num_layers=1, max_length=34, dropout_rate=0.0)
    d = Distiller(mcfg, cm_mnm(DistillConfig(num_cls=2, batch_size=4)))
    rec = d.train_step(toy_corpus(4, 32), 0, 10)
    assert rec.cl == 0.0 and rec.total == rec.mnm


def test_mixed_lengths_rejected():
    d = toy_distiller()
    with pytest.raises(DistillConfigError):
        d.train_step(toy_corpus(2, 32) + toy_corpus(2, 30), 0, 10)


def test_checkpoint_round_trip(tmp_path):
    d = toy_distiller()
    d.fit(toy_corpus(8, 32), epochs=1)
    d.save(tmp_path / "c.ckpt", {"note": "x"})
    pre = load_pretrained(tmp_path / "c.ckpt")
    assert pre.step == 2 and pre.meta["note"] == "x"
    np.testing.assert_array_equal(pre.center, d.center.xi)
    for n, p in d.teacher.params.items():
        np.testing.assert_array_equal(pre.teacher.params[n].value, p.value)
    x = np.stack([encode_one_hot("ACGT" * 8)])
    a = d.teacher.forward(Tape(record=False), x)[1].value
    np.testing.assert_array_equal(pre.network("teacher").forward(Tape(record=False), x)[1].value, a)
