import numpy as np
import pytest

from conftest import heldout_rmse, linear_system_dataset
from koopexo.koopman import init_model, loss
from koopexo.plant import ActuatorGeometry, EpisodeLog, PlantParams, Reference, simulate_episode
from koopexo.control import PidController
from koopexo.training import (Adam, DatasetError, TrainConfig, TrainingFault, build_dataset,
                              fit_scaling, noam_rate, prediction_errors, split_heldout, train)


def fake_episode(n=3000, theta=None, emg=None):
    rng = np.random.default_rng(n)
    return EpisodeLog(
        theta=np.full(n, 105.0) if theta is None else theta,
        ref=np.full(n, 105.0),
        duty=rng.uniform(-1, 1, n),
        emg=rng.uniform(0, 2, (n, 2)) if emg is None else emg,
        mode="active",
    )


@pytest.fixture(scope="module")
def pid_episodes():
    p, g = PlantParams(), ActuatorGeometry()
    return [simulate_episode(p, g, PidController(), Reference(), 20.0, s, mode)
            for s, mode in enumerate(["passive", "active"])]


# --- dataset --------------------------------------------------------------------

def test_window_count():
    ds = build_dataset([fake_episode()])
    assert len(ds) == (3000 - 10 - 16) // 8 + 1
    assert ds.X.shape == (len(ds), 16) and ds.U.shape == (len(ds), 15, 3)


def test_angle_scaled_by_twenty():
    ds = build_dataset([fake_episode(theta=np.full(3000, 120.0))])
    assert np.all(ds.X == 6.0)


def test_zero_emg_channel_passes_through():
    emg = np.zeros((3000, 2))
    emg[:, 0] = np.linspace(0, 4, 3000)
    ep = fake_episode(emg=emg)
    sc = fit_scaling([ep])
    assert sc.emg_scale[1] == 1.0 and sc.emg_scale[0] == 4.0
    ds = build_dataset([ep], sc)
    assert not ds.U[..., 2].any()
    assert ds.U[..., 1].max() <= 1.0


def test_emg_inputs_delay_aligned():
    emg = np.zeros((300, 2))
    emg[:, 0] = np.arange(300)
    ep = fake_episode(300, emg=emg)
    sc = fit_scaling([ep])
    ds = build_dataset([ep], sc, stride=1)
    # first window starts at tick 10, whose EMG input is the envelope of tick 0
    assert ds.U[0, 0, 1] == 0.0
    assert ds.U[0, 5, 1] * sc.emg_scale[0] == pytest.approx(5.0)
    assert np.array_equal(ds.U[0, :, 0], ep.duty[10:25])


def test_short_episodes_skipped():
    ds = build_dataset([fake_episode(25), fake_episode(400)])
    assert ds.skipped == 1
    assert len(ds) == (400 - 26) // 8 + 1


def test_empty_dataset_rejected():
    ds = build_dataset([fake_episode(20)])
    assert len(ds) == 0
    with pytest.raises(DatasetError):
        train(ds)


def test_no_emg_dataset_has_duty_only():
    ds = build_dataset([fake_episode()], include_emg=False)
    assert ds.m == 1


# --- optimiser pieces -------------------------------------------------------------

def test_noam_rate_shape():
    peak = 96 ** -0.5 * 400 ** -0.5
    assert noam_rate(400) == pytest.approx(peak)
    assert noam_rate(100) == pytest.approx(peak * 100 / 400)
    assert noam_rate(1600) == pytest.approx(peak / 2)
    assert noam_rate(0) == noam_rate(1)


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    opt = Adam(p)
    opt.step(p, {"w": np.array([3.0, -0.1, 0.0])}, 0.01)
    assert np.allclose(p["w"], [0.99, -1.99, 0.5], atol=1e-8)


def test_heldout_split_is_disjoint_and_tenth():
    tr, ho = split_heldout(200, 0.1, 3)
    assert len(ho) == 20 and len(tr) == 180
    assert not set(tr) & set(ho)


# --- training ----------------------------------------------------------------------

def test_training_deterministic():
    ds = linear_system_dataset(ticks=600)
    cfg = TrainConfig(d=4, hidden=(6,), epochs=3, seed=5)
    a, b = train(ds, cfg).model, train(ds, cfg).model
    for k, v in a.get_params().items():
        assert np.array_equal(v, b.get_params()[k])


def test_loss_decreases_on_simulated_data(pid_episodes):
    ds = build_dataset(pid_episodes)
    cfg = TrainConfig(epochs=200 // int(np.ceil(0.9 * len(ds) / 64)) + 1, seed=0)
    result = train(ds, cfg)
    curve = np.array(result.curve)[:200, 2]
    assert len(curve) == 200
    smooth = np.convolve(curve, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < 0.5 * smooth[0]


def test_best_model_is_returned():
    ds = linear_system_dataset(ticks=600)
    result = train(ds, TrainConfig(d=4, hidden=(6,), epochs=5, seed=1))
    _, ho = split_heldout(len(ds), 0.1, 1)
    held = loss(result.model, ds.X[ho], ds.U[ho]) / len(ho)
    assert held == pytest.approx(result.best_heldout, rel=1e-12)
    epoch_ends = [row[3] for row in result.curve if not np.isnan(row[3])]
    assert result.best_heldout == min(epoch_ends)


def test_divergence_reports_step():
    ds = linear_system_dataset(ticks=600)
    model = init_model(4, 0, (6,), 0, ds.scaling)
    model.A *= 40.0
    with pytest.raises(TrainingFault) as info:
        train(ds, TrainConfig(d=4, hidden=(6,), epochs=1), model)
    assert info.value.step == 1


def test_linear_system_recovered():
    ds = linear_system_dataset()
    cfg = TrainConfig(d=4, hidden=(32, 32), epochs=1000, lr_factor=0.5, seed=0)
    model = train(ds, cfg).model
    assert heldout_rmse(model, ds, cfg.heldout_frac, cfg.seed) < 1e-3


def test_prediction_errors_shape(pid_episodes):
    model = init_model(8, 2, (8,), 0, fit_scaling(pid_episodes))
    errs = prediction_errors(model, pid_episodes)
    assert errs.shape[1] == 16
    assert np.all(errs >= 0)
    # identity dynamics with zero input gain predict a constant angle
    ds = build_dataset(pid_episodes, model.scaling, 17, stride=8)
    assert errs[0, 3] == pytest.approx(abs(ds.X[0, 4] - ds.X[0, 0]) * 20.0)
