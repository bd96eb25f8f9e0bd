import csv
import math

import numpy as np
import pytest
from helpers import noise_clip, untrained_asr, untrained_srm

from aro_lab import diffgraph as dg
from aro_lab.attack import (
    AROAttack,
    AttackConfig,
    adam_step,
    cosine_similarity,
    eot_noise_objective,
    ifgsm_step,
    loss_adv,
    loss_ar,
    loss_total,
    project_constraint,
    run_attack,
    write_trace_csv,
)
from aro_lab.audio import AudioClip, Perturbation, distortion_db
from aro_lab.corpus import make_triples
from aro_lab.ctc import ctc_loss
from aro_lab.exceptions import DegenerateRepresentationError, InfeasibleTargetError
from aro_lab.models import RepresentationExtractor
from aro_lab.optim import AdamState
from aro_lab.validation import encode_text


class LinearPool:
    """Pooled 'representation' = mean over rows of the samples viewed as (n, 4)."""

    def pooled(self, samples):
        node = samples if isinstance(samples, dg.Node) else dg.constant(
            getattr(samples, "samples", samples))
        return dg.mean(dg.reshape(node, (-1, 4)), axis=0)


@pytest.fixture(scope="module")
def tiny():
    f = untrained_asr("A")
    E = RepresentationExtractor(untrained_srm(), layer=1).fit()
    x = noise_clip(1600, seed=1, amp=0.4, clip_id="src")
    x_t = noise_clip(2000, seed=2, amp=0.3, clip_id="tgt")
    return f, E, x, x_t


# --- config ------------------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(alpha=0), dict(beta=-1), dict(max_iters=0),
                                 dict(init_scale=-1), dict(eot_samples=-1),
                                 dict(optimizer="sgd")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        AttackConfig(**bad)


# --- loss_adv ----------------------------------------------------------------------


def test_loss_adv_zero_delta_regularizer_is_zero(tiny):
    f, _, x, _ = tiny
    zero = np.zeros(len(x))
    assert loss_adv(f, x, zero, "ab", lambda_reg=1.0).item() == loss_adv(f, x, zero, "ab", 0.0).item()


def test_loss_adv_lambda_zero_is_bare_ctc(tiny):
    f, _, x, _ = tiny
    delta = np.random.default_rng(0).uniform(-0.01, 0.01, len(x))
    bare = ctc_loss(f.forward(np.clip(x.samples + delta, -1, 1)), encode_text("ab")).item()
    assert loss_adv(f, x, delta, "ab", 0.0).item() == bare
    reg = loss_adv(f, x, delta, "ab", 0.5).item()
    assert reg == pytest.approx(bare + 0.5 * np.sum(delta**2), rel=1e-12)


def test_loss_adv_gradient(tiny):
    f, _, x, _ = tiny
    delta = np.random.default_rng(1).uniform(-0.01, 0.01, len(x))
    err = dg.finite_diff_check(lambda d: loss_adv(f, x, d, "cab", 0.01), delta)
    assert err < 1e-4


def test_loss_adv_infeasible(tiny):
    f, _, x, _ = tiny
    with pytest.raises(InfeasibleTargetError):
        loss_adv(f, x, np.zeros(len(x)), "a" * 40, 0.0)


# --- loss_ar -----------------------------------------------------------------------


def test_cosine_examples():
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([2, 0], [5, 0]) == 1.0
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(DegenerateRepresentationError):
        cosine_similarity([0, 0], [1, 0])


def test_cosine_scale_invariant():
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=8), rng.normal(size=8)
    for c in (1e-3, 0.5, 7.0, 1e4):
        assert cosine_similarity(c * u, v) == pytest.approx(cosine_similarity(u, v), abs=1e-15)


def test_loss_ar_identity_is_zero(tiny):
    _, E, x, _ = tiny
    assert loss_ar(E, x, np.zeros(len(x)), x).item() == pytest.approx(0.0, abs=1e-15)


def _pattern_clip(pattern, rows=50):
    return AudioClip("p", 8000, np.tile(np.asarray(pattern, float), rows))


def test_loss_ar_opposite_and_orthogonal():
    E = LinearPool()
    x = _pattern_clip([0.2, -0.1, 0.3, 0.05])
    zero = np.zeros(len(x))
    opposite = x.with_samples(-x.samples)
    assert loss_ar(E, x, zero, opposite).item() == pytest.approx(2.0, abs=1e-15)
    a, b = _pattern_clip([0.3, 0, 0, 0]), _pattern_clip([0, 0.3, 0, 0])
    assert loss_ar(E, a, zero, b).item() == pytest.approx(1.0, abs=1e-15)


def test_loss_ar_zero_representation():
    E = LinearPool()
    x = _pattern_clip([0.2, 0.1, 0.3, 0.05])
    with pytest.raises(DegenerateRepresentationError):
        loss_ar(E, x, np.zeros(len(x)), _pattern_clip([0.0, 0.0, 0.0, 0.0]))


def test_loss_ar_range_and_gradient(tiny):
    _, E, x, x_t = tiny
    rng = np.random.default_rng(2)
    for _ in range(5):
        delta = rng.uniform(-0.3, 0.3, len(x))
        assert 0.0 <= loss_ar(E, x, delta, x_t).item() <= 2.0
    delta = rng.uniform(-0.01, 0.01, len(x))
    assert dg.finite_diff_check(lambda d: loss_ar(E, x, d, x_t), delta) < 1e-4


# --- loss_total --------------------------------------------------------------------


def test_loss_total_beta_zero_equals_loss_adv(tiny):
    f, E, x, x_t = tiny
    delta = np.random.default_rng(3).uniform(-0.01, 0.01, len(x))
    cfg = AttackConfig(beta=0.0)
    assert loss_total(f, E, x, delta, "ab", x_t, cfg).item() == loss_adv(f, x, delta, "ab").item()


@pytest.mark.parametrize("beta", [0.0, 1.0, 180.0])
def test_gradient_additivity(tiny, beta):
    f, E, x, x_t = tiny
    delta = np.random.default_rng(4).uniform(-0.01, 0.01, len(x))
    cfg = AttackConfig(beta=beta)
    _, g_tot = dg.grad(lambda d: loss_total(f, E, x, d, "ab", x_t, cfg), delta)
    _, g_adv = dg.grad(lambda d: loss_adv(f, x, d, "ab", cfg.lambda_reg), delta)
    _, g_ar = dg.grad(lambda d: loss_ar(E, x, d, x_t), delta)
    expected = g_adv + beta * g_ar
    assert np.max(np.abs(g_tot - expected)) <= 1e-10 * np.max(np.abs(expected))


# --- optimizers and projection ----------------------------------------------------------


def test_ifgsm_examples():
    np.testing.assert_array_equal(ifgsm_step(np.zeros(4), np.ones(4), 0.001), np.full(4, -0.001))
    d = np.array([0.1, -0.2, 0.3])
    np.testing.assert_array_equal(ifgsm_step(d, np.zeros(3), 0.5), d)
    g = np.random.default_rng(0).normal(size=50)
    assert np.max(np.abs(ifgsm_step(d[:1].repeat(50), g, 0.01) - d[0])) <= 0.01


def test_adam_examples():
    g = np.array([3.0, -0.5, 1e-3, 0.0])
    state = AdamState.zeros_like(g)
    new_state, x1 = adam_step(state, np.zeros(4), g, 0.001)
    np.testing.assert_allclose(x1[:3], -0.001 * np.sign(g[:3]), rtol=1e-4)
    assert x1[3] == 0.0
    _, still = adam_step(AdamState.zeros_like(g), np.ones(4), np.zeros(4), 0.1)
    np.testing.assert_array_equal(still, np.ones(4))
    again = adam_step(state, np.zeros(4), g, 0.001)
    np.testing.assert_array_equal(again[1], x1)
    assert state.step == 0 and new_state.step == 1


def test_project_examples():
    x = AudioClip("x", 8000, [0.0, 1.0, -0.5])
    d20 = np.array([0.1, 0.0, 0.0])  # -20 dB
    np.testing.assert_array_equal(project_constraint(d20, x, -15.0), d20)
    d10 = np.array([0.0, -10 ** (-0.5), 0.0])  # -10 dB
    out = project_constraint(d10, x, -20.0)
    np.testing.assert_allclose(out, d10 * 10 ** (-0.5), rtol=1e-12)
    assert distortion_db(Perturbation(out), x) <= -20.0
    assert distortion_db(Perturbation(out), x) == pytest.approx(-20.0, abs=1e-9)
    np.testing.assert_array_equal(project_constraint(np.zeros(3), x, -20.0), np.zeros(3))


def test_project_never_overshoots():
    rng = np.random.default_rng(5)
    for _ in range(200):
        x = AudioClip("x", 8000, rng.uniform(-1, 1, 64))
        tau = rng.uniform(-40, 0)
        d = project_constraint(rng.normal(size=64), x, tau)
        assert distortion_db(Perturbation(d), x) <= tau


# --- driver -----------------------------------------------------------------------


def test_run_attack_invariants(tiny):
    f, E, x, x_t = tiny
    cfg = AttackConfig(max_iters=6, beta=5.0, alpha=0.01, tau=-12.0)
    r = run_attack(x, "abc", x_t, f, E, cfg, seed=3)
    assert r.iterations_run == len(r.loss_trace) == len(r.distortion_trace) == 6
    assert r.distortion <= -12.0
    assert all(np.isfinite(v) for row in r.loss_trace for v in row)
    assert all(0 <= row[1] <= 2 for row in r.loss_trace)
    # the emitted perturbation sits on the 16-bit grid
    scaled = r.delta.delta * 32768
    np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-6)
    again = run_attack(x, "abc", x_t, f, E, cfg, seed=3)
    assert np.array_equal(again.delta.delta, r.delta.delta)
    assert again.loss_trace == r.loss_trace


def test_beta_zero_matches_absent_term(tiny):
    f, E, x, x_t = tiny
    cfg = AttackConfig(max_iters=5, beta=0.0, alpha=0.01)
    with_term = run_attack(x, "abc", x_t, f, E, cfg, seed=1)
    without = run_attack(x, "abc", x_t, f, None, cfg, seed=1)
    assert np.array_equal(with_term.delta.delta, without.delta.delta)
    assert [r[0] for r in with_term.loss_trace] == [r[0] for r in without.loss_trace]
    assert all(r[1] is None for r in without.loss_trace)


def test_sign_descent_steps_are_bounded(tiny):
    f, _, x, _ = tiny
    cfg = AttackConfig(max_iters=1, optimizer="sign_descent", alpha=0.002, init_scale=0.0,
                       tau=0.0, early_stop=False)
    r = run_attack(x, "abc", None, f, None, cfg, seed=0)
    assert 0.0 < np.max(np.abs(r.delta.delta)) <= 0.002


def test_run_attack_infeasible(tiny):
    f, _, x, _ = tiny
    with pytest.raises(InfeasibleTargetError):
        run_attack(x, "ab" * 20, None, f, None, AttackConfig(max_iters=1), seed=0)


def test_trace_csv(tiny, tmp_path):
    f, E, x, x_t = tiny
    r = run_attack(x, "ab", x_t, f, None, AttackConfig(max_iters=3, early_stop=False), seed=0)
    write_trace_csv(r, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iter", "L_adv", "L_AR", "L_tot", "Q_dB"]
    assert len(rows) == 4 and rows[1][2] == ""
    assert float(rows[3][1]) == r.loss_trace[2][0]


# --- EoT ---------------------------------------------------------------------------


def test_eot_degenerate_equals_loss_adv(tiny):
    f, _, x, _ = tiny
    delta = np.random.default_rng(6).uniform(-0.01, 0.01, len(x))
    eot = eot_noise_objective(f, x, delta, "ab", 1, -math.inf, seed=0, lambda_reg=0.01)
    assert eot.item() == loss_adv(f, x, delta, "ab", 0.01).item()


def test_eot_deterministic_and_plugs_in(tiny):
    f, E, x, x_t = tiny
    delta = np.zeros(len(x))
    a = eot_noise_objective(f, x, delta, "ab", 4, -30.0, seed=5).item()
    b = eot_noise_objective(f, x, delta, "ab", 4, -30.0, seed=5).item()
    assert a == b
    cfg = AttackConfig(max_iters=3, eot_samples=2, beta=1.0, early_stop=False)
    r1 = run_attack(x, "ab", x_t, f, E, cfg, seed=2)
    r2 = run_attack(x, "ab", x_t, f, E, cfg, seed=2)
    assert np.array_equal(r1.delta.delta, r2.delta.delta)
    with pytest.raises(ValueError):
        eot_noise_objective(f, x, delta, "ab", 0, -30.0, seed=5)


# --- estimator front door ----------------------------------------------------------


def test_aro_attack_estimator(tiny, corpus):
    f, E, _, _ = tiny
    est = AROAttack(surrogate=f, srm=E.srm, max_iters=2, beta=1.0)
    assert est.get_params()["beta"] == 1.0
    triples = make_triples(corpus[:30], 6, 0)[:2]
    out = est.fit().transform(triples)
    assert [c.id for c in out] == [t.id for t in triples]
    assert len(est.results_) == 2
    with pytest.raises(ValueError):
        AROAttack().fit()


# --- trained-surrogate behaviour -----------------------------------------------------


@pytest.mark.slow
def test_converged_attack_is_fragile_to_noise(corpus, trained):
    f = trained["A"]
    cfg = AttackConfig(beta=0.0)
    for tr in make_triples(corpus, 50, 0)[:10]:
        r = run_attack(tr.source.clip, tr.target_text, None, f, None, cfg, seed=0)
        if r.success:
            break
    assert r.success
    x = tr.source.clip
    clean = loss_adv(f, x, r.delta, tr.target_text, cfg.lambda_reg).item()
    noisy = eot_noise_objective(f, x, r.delta, tr.target_text, 4, -20.0, seed=0,
                                lambda_reg=cfg.lambda_reg).item()
    assert noisy >= clean
