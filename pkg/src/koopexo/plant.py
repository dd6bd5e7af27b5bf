"""Simulated knee / soft pneumatic actuator plant with synthetic EMG.

The plant stands in for a seated participant wearing the exoskeleton.  Knee
angle is in degrees throughout the public API; the rigid-body update works in
radians internally.
"""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import signal

DT = 0.02
EMG_FS = 2000.0
SAMPLES_PER_TICK = 40  # raw EMG samples per 20 ms tick
CARRIER_BAND = (20.0, 450.0)  # spectral support of the synthetic muscle signal (Hz)
JOINT_MIN = 80.0
JOINT_MAX = 160.0
DEADLINE_S = 0.020
SUBSTEPS = 10  # rigid-body substeps per tick; pressure is held over the tick

# Anchors of the actuator torque curve (16 pouches, l1=101 mm, l2=70 mm, l3=20 mm).
ANCHOR_TORQUE_NM = 17.0
ANCHOR_PRESSURE_KPA = 30.0
ANCHOR_ANGLE_DEG = 20.0
POUCH_LENGTHS_MM = (101.0, 70.0, 20.0)


class PlantRangeError(ValueError):
    """An angle fell outside the actuator's movable range."""


class PlantInputError(ValueError):
    """A command was outside its admissible range."""


class NumericFault(ArithmeticError):
    """A non-finite value appeared in the simulated state."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class ActuatorGeometry:
    c20: float = ANCHOR_TORQUE_NM / ANCHOR_PRESSURE_KPA
    lam: float = math.log(2.0) / 80.0
    theta_min: float = 10.0
    theta_max: float = 350.0
    knee_offset: float = 60.0

    def __post_init__(self):
        if not (self.c20 > 0 and self.lam > 0):
            raise ValueError("c20 and lam must be positive")
        if not self.theta_min < self.theta_max:
            raise ValueError("theta_min must be below theta_max")


@dataclass(frozen=True)
class PlantParams:
    J: float = 0.12
    b: float = 3.0
    mgl: float = 8.0
    theta0: float = 90.0
    k_pump: float = 800.0
    k_leak: float = 20.0
    p_min: float = -80.0
    p_max: float = 80.0
    tau_ext_max: float = 12.0
    tau_flex_max: float = 12.0
    emg_gain: tuple[float, float] = (1.0, 1.0)
    emg_noise_std: float = 0.02
    delay: float = 0.200
    # seeded low-pass disturbance torque (tone, tremor); std in Nm, time constant in s
    dist_std: float = 0.2
    dist_tau: float = 0.5

    def __post_init__(self):
        if not self.J > 0:
            raise ValueError("inertia J must be positive")
        if self.b < 0:
            raise ValueError("damping b must be non-negative")
        if not self.p_min < self.p_max:
            raise ValueError("p_min must be below p_max")

    @property
    def delay_ticks(self) -> int:
        return int(round(self.delay / DT))


@dataclass(frozen=True)
class PatientPolicy:
    """Simulated participant effort in active mode.

    The participant sees the reference ``lead`` seconds ahead and pushes toward
    it: effort is ``gain * (ref - theta0)`` (holding the shank up along the
    reference) plus ``feedback * (ref - theta)``.  ``wander`` modulates the
    effort with a slow seeded random process, so muscle torque is not a fixed
    function of angle and reference.
    """

    gain: float = 0.006
    feedback: float = 0.002
    saturation: float = 0.6
    rate_limit: float = 0.05
    lead: float = 0.2
    wander: float = 0.3
    wander_tau: float = 2.0


@dataclass(frozen=True)
class PlantState:
    theta_knee: float
    omega: float = 0.0
    pressure: float = 0.0
    activation_ext: float = 0.0
    activation_flex: float = 0.0
    # commanded activations still travelling through the electromechanical delay
    pending: tuple = field(default=(), compare=False, repr=False)


def torque_coefficient(geom: ActuatorGeometry, theta_act):
    """Torque per unit pressure (Nm/kPa) at actuator angle ``theta_act`` (deg)."""
    th = np.asarray(theta_act, dtype=float)
    if np.any(th < geom.theta_min):
        raise PlantRangeError(f"actuator angle {th.min():g} below theta_min={geom.theta_min:g}")
    if np.any(th > geom.theta_max):
        raise PlantRangeError(f"actuator angle {th.max():g} above theta_max={geom.theta_max:g}")
    c = geom.c20 * np.exp(-geom.lam * (th - ANCHOR_ANGLE_DEG))
    return float(c) if c.ndim == 0 else c


def knee_to_actuator_angle(geom: ActuatorGeometry, theta_knee):
    return theta_knee - geom.knee_offset


def step_pressure(params: PlantParams, p: float, duty: float, dt: float = DT) -> float:
    if not abs(duty) <= 1.0:
        raise PlantInputError(f"duty {duty!r} outside [-1, 1]")
    p_next = p + dt * (params.k_pump * duty - params.k_leak * p)
    return min(max(p_next, params.p_min), params.p_max)


def muscle_torque(params: PlantParams, a_ext: float, a_flex: float) -> float:
    return params.tau_ext_max * a_ext - params.tau_flex_max * a_flex


def knee_acceleration(params: PlantParams, geom: ActuatorGeometry, theta: float,
                      omega: float, pressure: float, tau_m: float) -> float:
    """Angular acceleration in deg/s^2 for angle/velocity in deg and deg/s."""
    act = theta - geom.knee_offset
    if not geom.theta_min <= act <= geom.theta_max:
        torque_coefficient(geom, act)  # raises with the violated bound
    c = geom.c20 * math.exp(-geom.lam * (act - ANCHOR_ANGLE_DEG))
    th = math.radians(theta - params.theta0)
    w = math.radians(omega)
    torque = -params.b * w - params.mgl * math.sin(th) + c * pressure + tau_m
    return math.degrees(torque / params.J)


def _apply_stops(theta: float, omega: float) -> tuple[float, float]:
    if theta <= JOINT_MIN:
        return JOINT_MIN, max(omega, 0.0)
    if theta >= JOINT_MAX:
        return JOINT_MAX, min(omega, 0.0)
    return theta, omega


def initial_state(params: PlantParams, theta_knee: float | None = None) -> PlantState:
    theta = params.theta0 if theta_knee is None else theta_knee
    pending = ((0.0, 0.0),) * params.delay_ticks
    return PlantState(theta, 0.0, 0.0, 0.0, 0.0, pending)


def step_dynamics(params: PlantParams, geom: ActuatorGeometry, state: PlantState,
                  duty: float, dt: float = DT, command: tuple[float, float] = (0.0, 0.0),
                  step: int | None = None, disturbance: float = 0.0) -> PlantState:
    """Advance the coupled knee/actuator system by one control tick.

    Pressure is advanced first so the duty of tick ``k`` acts on the angle of
    tick ``k+1``; the joint then takes ``SUBSTEPS`` semi-implicit Euler steps
    under that pressure.  ``command`` is the commanded (ext, flex) activation; it
    reaches the joint ``params.delay_ticks`` ticks later.
    """
    values = (state.theta_knee, state.omega, state.pressure, duty, *command)
    if not all(math.isfinite(v) for v in values):
        raise NumericFault("non-finite plant state or input", step)

    queue = deque(state.pending)
    queue.append((float(command[0]), float(command[1])))
    a_ext, a_flex = queue.popleft()

    p = step_pressure(params, state.pressure, duty, dt)
    tau = muscle_torque(params, a_ext, a_flex) + disturbance
    theta, omega = state.theta_knee, state.omega
    h = dt / SUBSTEPS
    for _ in range(SUBSTEPS):
        omega = omega + h * knee_acceleration(params, geom, theta, omega, p, tau)
        theta = theta + h * omega
        theta, omega = _apply_stops(theta, omega)
    if not (math.isfinite(theta) and math.isfinite(omega)):
        raise NumericFault("plant diverged", step)
    return PlantState(theta, omega, p, a_ext, a_flex, tuple(queue))


# --- synthetic EMG --------------------------------------------------------

class EmgSynthesizer:
    """Pre-drawn carrier and sensor noise for one episode.

    Each raw sample is ``gain * a_cmd * carrier + noise`` where the carrier is
    band-limited Gaussian noise scaled to unit variance over the
    episode.  Everything random is fixed at construction, so frames can be
    produced tick by tick while the episode runs.
    """

    def __init__(self, params: PlantParams, n_ticks: int, seed: int, n_channels: int = 2):
        rng = np.random.default_rng(seed)
        n = n_ticks * SAMPLES_PER_TICK
        sos = signal.butter(4, CARRIER_BAND, btype="bandpass", fs=EMG_FS, output="sos")
        warm = 2000
        white = rng.standard_normal((n_channels, n + warm))
        carrier = signal.sosfilt(sos, white, axis=1)[:, warm:]
        std = carrier.std(axis=1, keepdims=True)
        self.carrier = carrier / np.where(std > 0, std, 1.0)
        self.noise = params.emg_noise_std * rng.standard_normal((n_channels, n))
        self.gain = np.asarray(params.emg_gain, dtype=float)[:n_channels]
        self.n_ticks = n_ticks

    def frame(self, tick: int, activation) -> np.ndarray:
        """Raw samples (channels x 40) for one control tick."""
        sl = slice(tick * SAMPLES_PER_TICK, (tick + 1) * SAMPLES_PER_TICK)
        a = np.asarray(activation, dtype=float)[:, None]
        return self.gain[:, None] * a * self.carrier[:, sl] + self.noise[:, sl]


def synthesize_emg(params: PlantParams, activations, rng_seed: int) -> np.ndarray:
    """Raw 2000 Hz EMG for commanded activations given per control tick.

    ``activations`` has shape (ticks, channels); the result has shape
    (channels, ticks * 40).
    """
    act = np.asarray(activations, dtype=float)
    if act.ndim == 1:
        act = act[:, None]
    if np.any(act < 0) or np.any(act > 1):
        raise PlantInputError("activations must lie in [0, 1]")
    n_ticks, n_ch = act.shape
    synth = EmgSynthesizer(params, n_ticks, rng_seed, n_ch)
    held = np.repeat(act.T, SAMPLES_PER_TICK, axis=1)
    return synth.gain[:, None] * held * synth.carrier + synth.noise


# --- references and episodes ------------------------------------------------

@dataclass(frozen=True)
class Reference:
    """Sinusoid between ``low`` and ``high`` degrees, or a constant if equal."""

    frequency: float = 0.2
    low: float = 90.0
    high: float = 120.0

    def __call__(self, t):
        mid = 0.5 * (self.low + self.high)
        amp = 0.5 * (self.high - self.low)
        return mid + amp * np.sin(2 * np.pi * self.frequency * np.asarray(t, dtype=float))


@dataclass
class EpisodeLog:
    theta: np.ndarray
    ref: np.ndarray
    duty: np.ndarray
    emg: np.ndarray  # (ticks, channels)
    mode: str
    qp_iters: np.ndarray | None = None
    kkt_residual: np.ndarray | None = None
    deadline_miss: np.ndarray | None = None
    # in-memory only: not written to the log file
    wall_time: np.ndarray | None = None
    tau_muscle: np.ndarray | None = None
    activation_cmd: np.ndarray | None = None

    def __len__(self):
        return len(self.theta)

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self)) * DT


Controller = Callable[[int, float, np.ndarray, np.ndarray], float]


def perturbed_params(base: PlantParams, seed: int, spread: float = 0.3) -> PlantParams:
    """Subject-specific plant: the participant's parameters scaled by U(1-spread, 1+spread).

    Shank inertia, joint damping, limb weight, muscle strength and EMG gain
    vary between people; the pump and the pouch leak belong to the shared
    device and are left unchanged.
    """
    rng = np.random.default_rng(seed)
    f = rng.uniform(1 - spread, 1 + spread, size=6).tolist()
    return replace(
        base,
        J=base.J * f[0], b=base.b * f[1], mgl=base.mgl * f[2],
        tau_ext_max=base.tau_ext_max * f[3], tau_flex_max=base.tau_flex_max * f[4],
        emg_gain=tuple(float(g) * f[5] for g in base.emg_gain),
    )


def simulate_episode(params: PlantParams, geom: ActuatorGeometry, controller, reference,
                     duration: float, rng_seed: int, mode: str = "passive",
                     patient: PatientPolicy | None = None, theta_init: float | None = None,
                     emg_pipeline=None) -> EpisodeLog:
    """Run one closed-loop episode at the 20 ms control tick.

    ``controller(k, theta_k, ref_preview, emg_history)`` returns the duty for
    tick ``k``; it may expose ``last_info`` (dict with ``qp_iters`` and
    ``kkt_residual``).  ``ref_preview`` holds the reference from tick ``k``
    onwards, ``emg_history`` the envelopes of ticks ``0..k``.
    """
    from .emg import EmgPipeline

    if mode not in ("passive", "active"):
        raise ValueError(f"unknown mode {mode!r}")
    n = int(round(duration / DT))
    if abs(n * DT - duration) > 1e-9:
        raise ValueError("duration must be a multiple of the 20 ms tick")
    patient = patient or PatientPolicy()
    rng = np.random.default_rng(rng_seed)
    synth = EmgSynthesizer(params, n, int(rng.integers(2**31)), 2)
    pipe = emg_pipeline or EmgPipeline(n_channels=2)
    wander = rng.standard_normal(n)
    shocks = rng.standard_normal(n)

    horizon = 64
    t_all = np.arange(n + horizon + int(round(patient.lead / DT)) + 1) * DT
    ref_all = np.asarray(reference(t_all), dtype=float)

    theta = np.empty(n)
    duty = np.empty(n)
    emg = np.zeros((n, 2))
    qp_iters = np.zeros(n, dtype=int)
    kkt = np.zeros(n)
    miss = np.zeros(n, dtype=int)
    wall = np.zeros(n)
    tau = np.zeros(n)
    acts = np.zeros((n, 2))

    state = initial_state(params, theta_init)
    a_cmd = np.zeros(2)
    mod = 0.0
    dist = 0.0
    beta = DT / params.dist_tau
    alpha = DT / patient.wander_tau
    lead = int(round(patient.lead / DT))
    for k in range(n):
        theta[k] = state.theta_knee
        if mode == "active":
            mod = (1 - alpha) * mod + math.sqrt(2 * alpha) * wander[k]
            scale = max(0.0, 1.0 + patient.wander * mod)
            r_ahead = ref_all[k + lead]
            effort = scale * (patient.gain * (r_ahead - params.theta0)
                              + patient.feedback * (r_ahead - state.theta_knee))
            target = np.clip([effort, -effort], 0.0, patient.saturation)
            a_cmd = a_cmd + np.clip(target - a_cmd, -patient.rate_limit, patient.rate_limit)
        acts[k] = a_cmd
        emg[k] = pipe.process(synth.frame(k, a_cmd))

        t0 = time.perf_counter()
        u = float(controller(k, state.theta_knee, ref_all[k:k + horizon], emg[:k + 1]))
        wall[k] = time.perf_counter() - t0
        miss[k] = int(wall[k] > DEADLINE_S)
        info = getattr(controller, "last_info", None)
        if info:
            qp_iters[k] = info.get("qp_iters", 0)
            kkt[k] = info.get("kkt_residual", 0.0)
        if not abs(u) <= 1.0:
            raise PlantInputError(f"controller returned duty {u!r} at tick {k}")
        duty[k] = u
        dist = (1 - beta) * dist + params.dist_std * math.sqrt(2 * beta) * shocks[k]
        state = step_dynamics(params, geom, state, u, DT, (a_cmd[0], a_cmd[1]), step=k,
                              disturbance=dist)
        tau[k] = muscle_torque(params, state.activation_ext, state.activation_flex)

    return EpisodeLog(theta, ref_all[:n].copy(), duty, emg, mode, qp_iters, kkt, miss,
                      wall, tau, acts)
