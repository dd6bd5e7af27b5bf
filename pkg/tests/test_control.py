import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopexo.control import (CondensedModel, KoopmanMpc, MpcConfig, PidController, condense,
                             mpc_step, pid_step)
from koopexo.koopman import ModelInputError, ScalingSpec, init_model, lift, predict_multistep
from koopexo.qp import solve_box_qp


def chain_model(a=1.0, g=0.5, n_emg=0, emg_gain=0.0):
    """d = 2 model with constant second observable: x' = a x + g u + emg_gain * s."""
    m = init_model(2, n_emg, (3,), 0, ScalingSpec(20.0, np.ones(n_emg), 5.0, 1.0))
    m.weights[-1][:] = 0.0
    m.biases[-1][:] = 0.0
    m.A = np.diag([a, 1.0])
    m.B1 = np.array([[g], [0.0]])
    m.B2 = np.zeros((2, n_emg))
    if n_emg:
        m.B2[0, 0] = emg_gain
    return m


def random_model(seed=0, d=6):
    m = init_model(d, 2, (8,), seed)
    rng = np.random.default_rng(seed)
    m.A = 0.9 * np.eye(d) + 0.05 * rng.standard_normal((d, d))
    m.B1 = 0.2 * rng.standard_normal((d, 1))
    m.B2 = 0.2 * rng.standard_normal((d, 2))
    return m


# --- condensing ------------------------------------------------------------------

def test_no_input_path_gives_pure_penalty():
    m = random_model()
    m.B1[:] = 0.0
    cfg = MpcConfig()
    qp = condense(m, lift(m, 5.0), np.full(10, 6.0), np.zeros((10, 2)), cfg)
    assert np.allclose(qp.H, 2 * cfg.r * np.eye(10))
    assert np.allclose(solve_box_qp(qp).u, 0.0)


def test_one_step_closed_form():
    a, g, q, r = 0.9, 0.4, 1.0, 0.25
    m = chain_model(a, g)
    x0, xr = 5.0, 5.1
    cfg = MpcConfig(horizon=1, q=q, r=r)
    u = solve_box_qp(condense(m, lift(m, x0), [xr], np.zeros((1, 0)), cfg)).u[0]
    assert u == pytest.approx(q * g * (xr - a * x0) / (q * g * g + r), abs=1e-9)


def test_emg_moves_linear_term_only():
    m = random_model(1)
    z0 = lift(m, 5.0)
    ref = np.full(10, 5.2)
    a = condense(m, z0, ref, np.zeros((10, 2)))
    b = condense(m, z0, ref, np.ones((10, 2)))
    assert np.array_equal(a.H, b.H)
    assert not np.allclose(a.f, b.f)


def test_condensed_prediction_matches_rollout():
    m = random_model(2)
    cm = CondensedModel(m, 10)
    rng = np.random.default_rng(0)
    u = rng.uniform(-1, 1, 10)
    s = rng.uniform(0, 1, (10, 2))
    z0 = lift(m, 5.3)
    traj = predict_multistep(m, 5.3, np.column_stack([u, s]))
    assert np.allclose(cm.G @ u + cm.free_response(z0, s), traj[1:, 0], atol=1e-12)


def test_condense_rejects_non_finite_state():
    m = random_model()
    z0 = lift(m, 5.0)
    z0[3] = np.nan
    with pytest.raises(ModelInputError):
        condense(m, z0, np.zeros(10), np.zeros((10, 2)))


def test_horizon_beyond_emg_lead_rejected():
    with pytest.raises(ValueError):
        MpcConfig(horizon=11)
    with pytest.raises(ValueError):
        MpcConfig(r=0.0)


# --- controller ------------------------------------------------------------------------

def test_reference_on_free_response_gives_zero_duty():
    m = random_model(3)
    cm = CondensedModel(m, 10)
    x = 5.2
    free = cm.free_response(lift(m, x), np.zeros((10, 2)))
    ref_deg = np.concatenate([[x], free]) * 20.0
    duty = mpc_step(m, MpcConfig(), x * 20.0, ref_deg, np.zeros((1, 2)))
    assert abs(duty) < 1e-6


def test_step_up_pushes_duty_up():
    m = chain_model(1.0, 0.3)
    duty = mpc_step(m, MpcConfig(), 100.0, np.full(11, 110.0), np.zeros((1, 0)))
    assert duty > 0
    assert mpc_step(m, MpcConfig(), 100.0, np.full(11, 90.0), np.zeros((1, 0))) < 0


def test_preview_reads_only_measured_samples():
    m = chain_model(n_emg=2)
    ctrl = KoopmanMpc(m)
    k = 25
    hist = np.arange(40.0)[:, None].repeat(2, axis=1)
    prev = ctrl.emg_preview(k, hist)
    assert np.array_equal(prev[:, 0], np.arange(k - 10, k))
    # a history that already contains later samples changes nothing
    assert np.array_equal(prev, ctrl.emg_preview(k, hist[:k + 1]))
    early = ctrl.emg_preview(3, hist[:4])
    assert not early[:7].any() and np.array_equal(early[7:, 0], [0.0, 1.0, 2.0])


def test_emg_feedforward_anticipates_assistance():
    # positive EMG drive raises the predicted angle, so the controller asks for less duty
    m = chain_model(1.0, 0.3, n_emg=2, emg_gain=0.2)
    ctrl = KoopmanMpc(m)
    quiet = ctrl.step(20, 100.0, np.full(11, 104.0), np.zeros((21, 2)))
    ctrl.reset()
    busy = ctrl.step(20, 100.0, np.full(11, 104.0), np.ones((21, 2)))
    assert busy < quiet


def test_perfect_model_closed_loop_converges():
    m = chain_model(1.0, 0.5)
    ctrl = KoopmanMpc(m)
    x = 5.0
    target = 5.6
    errors = []
    for k in range(100):
        u = ctrl.step(k, x * 20.0, np.full(11, target * 20.0), np.zeros((k + 1, 0)))
        assert -1.0 <= u <= 1.0
        x = x + 0.5 * u
        errors.append(abs(x - target))
    assert errors[-1] < 1e-3


def test_solver_fault_holds_previous_duty():
    m = chain_model(1.0, 0.3)
    ctrl = KoopmanMpc(m, MpcConfig(max_iter=0))
    ctrl.last_duty = 0.37
    duty = ctrl.step(0, 100.0, np.full(11, 110.0), np.zeros((1, 0)))
    assert duty == 0.37
    assert ctrl.faults == 1 and ctrl.last_info["fault"]


def test_step_records_diagnostics():
    m = random_model(4)
    ctrl = KoopmanMpc(m)
    ctrl.step(12, 100.0, np.full(11, 105.0), np.zeros((13, 2)))
    info = ctrl.last_info
    assert info["kkt_residual"] <= 1e-6
    assert info["wall_time"] > 0 and not info["fault"]


def test_default_size_step_within_tick():
    m = init_model(96, 2, seed=0)
    ctrl = KoopmanMpc(m)
    ctrl.step(0, 100.0, np.full(11, 105.0), np.zeros((1, 2)))
    times = []
    for k in range(1, 50):
        ctrl.step(k, 100.0 + 0.1 * k, np.full(11, 105.0), np.zeros((k + 1, 2)))
        times.append(ctrl.last_info["wall_time"])
    assert max(times) < 0.02


# --- PID ------------------------------------------------------------------------------

def test_pid_zero_error_zero_duty():
    pid = PidController()
    assert all(pid.update(0.0) == 0.0 for _ in range(10))


def test_pid_proportional_only():
    assert pid_step(PidController(kp=0.05, ki=0.0, kd=0.0), 10.0) == 0.5


def test_pid_integral_accumulates():
    pid = PidController(kp=0.0, ki=1.0, kd=0.0)
    for _ in range(5):
        out = pid.update(1.0)
    assert out == pytest.approx(5 * 0.02)


def test_pid_anti_windup():
    pid = PidController()
    outs = [pid.update(80.0) for _ in range(200)]
    assert outs[-1] == 1.0
    frozen = pid.integral
    pid.update(80.0)
    assert pid.integral == frozen
    # release: leaves saturation promptly once the error changes sign
    assert pid.update(-10.0) < 1.0


def test_pid_integral_clamp():
    pid = PidController(kp=0.0, ki=0.001, kd=0.0, i_max=1.0)
    for _ in range(200):
        pid.update(10.0)
    assert pid.integral == 1.0


def test_pid_derivative_on_smoothed_error():
    pid = PidController(kp=0.0, ki=0.0, kd=1.0, alpha=0.2)
    pid.update(0.0)
    # smoothed error jumps by alpha * 1, derivative = 0.2 / dt
    assert pid.update(1.0) == pytest.approx(min(1.0, 0.2 / 0.02))
    pid = PidController(kp=0.0, ki=0.0, kd=0.01, alpha=0.2)
    pid.update(0.0)
    assert pid.update(1.0) == pytest.approx(0.1)


@settings(max_examples=100, deadline=None)
@given(errs=st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=50))
def test_pid_output_always_clamped(errs):
    pid = PidController()
    for e in errs:
        assert -1.0 <= pid.update(e) <= 1.0
