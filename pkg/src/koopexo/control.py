"""Koopman MPC with EMG feed-forward, and the PID baseline."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .emg import DEFAULT_DELTA
from .koopman import KoopmanModel, ModelInputError, lift
from .plant import DT
from .qp import QpProblem, SolverFault, solve_box_qp


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 10
    q: float = 1.0
    r: float = 0.25
    u_min: float = -1.0
    u_max: float = 1.0
    tol: float = 1e-6
    max_iter: int = 200
    delta: int = DEFAULT_DELTA

    def __post_init__(self):
        if not (self.q > 0 and self.r > 0):
            raise ValueError("q and r must be positive")
        if self.horizon > self.delta:
            raise ValueError("horizon longer than the EMG lead would read unmeasured EMG")


class CondensedModel:
    """Input-to-output maps of the lifted model over a fixed horizon.

    ``free_state[t] = C A^(t+1)`` so the free response is ``free_state @ z0``;
    ``markov[i] = C A^i B1`` and ``emg_markov[i] = C A^i B2``.
    """

    def __init__(self, model: KoopmanModel, horizon: int):
        n = horizon
        d = model.d
        self.model = model
        self.horizon = n
        rows = np.empty((n + 1, d))
        rows[0] = model.C[0]
        for t in range(1, n + 1):
            rows[t] = rows[t - 1] @ model.A
        self.free_state = rows[1:]
        self.markov = rows[:n] @ model.B1[:, 0]
        self.emg_markov = rows[:n] @ model.B2
        G = np.zeros((n, n))
        for t in range(n):
            G[t, :t + 1] = self.markov[t::-1]
        self.G = G

    def free_response(self, z0, emg_preview) -> np.ndarray:
        """Output over the horizon with zero duty, including EMG feed-forward."""
        x = self.free_state @ z0
        if self.emg_markov.shape[1]:
            # contrib[j, i] = C A^i B2 s_j, which reaches output j + i
            contrib = np.asarray(emg_preview, dtype=float) @ self.emg_markov.T
            for j in range(self.horizon):
                x[j:] += contrib[j, : self.horizon - j]
        return x


def condense(model: KoopmanModel, z0, ref, emg_preview, config: MpcConfig = MpcConfig(),
             condensed: CondensedModel | None = None) -> QpProblem:
    """Eliminate the lifted states: cost becomes 1/2 u'Hu + f'u over the duty sequence.

    ``ref`` holds the scaled reference for ticks k+1..k+N; ``emg_preview`` the
    scaled, delay-aligned EMG inputs for ticks k..k+N-1.
    """
    z0 = np.asarray(z0, dtype=float)
    if not np.all(np.isfinite(z0)):
        raise ModelInputError("non-finite lifted state")
    cm = condensed or CondensedModel(model, config.horizon)
    n = config.horizon
    G = cm.G
    x_free = cm.free_response(z0, emg_preview)
    H = 2.0 * (config.q * G.T @ G + config.r * np.eye(n))
    f = 2.0 * config.q * G.T @ (x_free - np.asarray(ref, dtype=float))
    return QpProblem(H, f, np.full(n, config.u_min), np.full(n, config.u_max))


class KoopmanMpc:
    """Receding-horizon controller; callable as ``ctrl(k, theta, ref_preview, emg_history)``."""

    def __init__(self, model: KoopmanModel, config: MpcConfig = MpcConfig()):
        self.model = model
        self.config = config
        self.cm = CondensedModel(model, config.horizon)
        n = config.horizon
        G = self.cm.G
        self.H = 2.0 * (config.q * G.T @ G + config.r * np.eye(n))
        self.lo = np.full(n, config.u_min)
        self.hi = np.full(n, config.u_max)
        self.reset()

    def reset(self):
        self.prev = np.zeros(self.config.horizon)
        self.last_duty = 0.0
        self.last_info = {}
        self.faults = 0

    def emg_preview(self, k: int, emg_history) -> np.ndarray:
        """Scaled EMG inputs u2_{k+t} = s_{k+t-delta}, t = 0..N-1 (zero before tick 0)."""
        n_emg = self.model.m - 1
        out = np.zeros((self.config.horizon, n_emg))
        if n_emg == 0:
            return out
        hist = np.asarray(emg_history, dtype=float)
        for t in range(self.config.horizon):
            j = k + t - self.config.delta
            if 0 <= j < len(hist) and j <= k:
                out[t] = hist[j]
        return self.model.scaling.scale_emg(out)

    def step(self, k: int, theta_deg: float, ref_deg, emg_history) -> float:
        t0 = time.perf_counter()
        sc = self.model.scaling
        n = self.config.horizon
        z0 = lift(self.model, sc.scale_angle(theta_deg))
        ref = sc.scale_angle(np.asarray(ref_deg, dtype=float)[1:n + 1])
        x_free = self.cm.free_response(z0, self.emg_preview(k, emg_history))
        f = 2.0 * self.config.q * self.cm.G.T @ (x_free - ref)
        warm = np.concatenate([self.prev[1:], self.prev[-1:]])
        try:
            sol = solve_box_qp(QpProblem(self.H, f, self.lo, self.hi), self.config.tol,
                               self.config.max_iter, warm)
            u = sol.u
            duty = float(np.clip(u[0], self.config.u_min, self.config.u_max))
            info = {"qp_iters": sol.iterations, "kkt_residual": sol.residual, "fault": False}
            self.prev = u
        except SolverFault as exc:
            duty = self.last_duty
            info = {"qp_iters": exc.iterations, "kkt_residual": exc.residual, "fault": True}
            self.faults += 1
        info["wall_time"] = time.perf_counter() - t0
        self.last_info = info
        self.last_duty = duty
        return duty

    __call__ = step


def mpc_step(model: KoopmanModel, config: MpcConfig, theta_deg: float, ref_deg, emg_history,
             k: int | None = None) -> float:
    """One-shot KMPC law (no warm start); ``emg_history`` ends at the current tick."""
    hist = np.asarray(emg_history, dtype=float)
    k = len(hist) - 1 if k is None else k
    return KoopmanMpc(model, config).step(k, theta_deg, ref_deg, hist)


class PidController:
    """PID on the angle error (degrees).

    The integral is bounded by ``i_max`` and stops growing once the output
    saturates.  The derivative acts on a first-order smoothed error.
    """

    def __init__(self, kp: float = 0.02, ki: float = 0.4, kd: float = 0.004,
                 i_max: float = 50.0, alpha: float = 0.2, dt: float = DT,
                 out_min: float = -1.0, out_max: float = 1.0):
        self.kp, self.ki, self.kd = kp, ki, kd
        self.i_max = i_max
        self.alpha = alpha
        self.dt = dt
        self.out_min, self.out_max = out_min, out_max
        self.reset()

    def reset(self):
        self.integral = 0.0
        self.filtered = None
        self.prev_error = 0.0
        self.last_info = {}

    def update(self, error: float) -> float:
        if self.filtered is None:
            self.filtered = error
        prev = self.filtered
        self.filtered = self.alpha * error + (1 - self.alpha) * self.filtered
        deriv = (self.filtered - prev) / self.dt
        self.prev_error = error

        p = self.kp * error
        d = self.kd * deriv
        trial = self.integral + error * self.dt
        trial = min(max(trial, -self.i_max), self.i_max)
        if self.ki > 0:
            # integrate only until the output reaches its limit; never unwind against the error
            if error > 0:
                trial = min(trial, max(self.integral, (self.out_max - p - d) / self.ki))
            elif error < 0:
                trial = max(trial, min(self.integral, (self.out_min - p - d) / self.ki))
        self.integral = trial
        out = p + self.ki * self.integral + d
        return min(max(out, self.out_min), self.out_max)

    def __call__(self, k: int, theta_deg: float, ref_deg, emg_history) -> float:
        return self.update(float(ref_deg[0]) - theta_deg)


def pid_step(state: PidController, error: float, dt: float = DT) -> float:
    state.dt = dt
    return state.update(error)
