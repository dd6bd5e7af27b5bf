"""Dataset construction and Adam/Noam training of the Koopman model."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .emg import DEFAULT_DELTA, align_delay
from .koopman import KoopmanModel, ScalingSpec, init_model, lift, loss, loss_and_gradients

log = logging.getLogger(__name__)

N_B = 16


class TrainingFault(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class DatasetError(ValueError):
    pass


@dataclass
class TrainingSet:
    X: np.ndarray  # (M, N_b) scaled angles
    U: np.ndarray  # (M, N_b - 1, m): [duty, emg...]
    scaling: ScalingSpec
    episode: np.ndarray  # source episode of each batch
    skipped: int = 0

    def __len__(self):
        return len(self.X)

    @property
    def m(self) -> int:
        return self.U.shape[-1]

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.X[idx], self.U[idx], self.scaling, self.episode[idx], self.skipped)


@dataclass
class TrainConfig:
    gamma: float = 0.9
    d: int = 96
    hidden: tuple = (128, 128)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    model_size: int = 96
    warmup: int = 400
    lr_factor: float = 0.2  # peak rate ~1e-3; larger peaks make A unstable mid-training
    minibatch: int = 64
    epochs: int = 300
    heldout_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class TrainResult:
    model: KoopmanModel
    curve: list = field(default_factory=list)  # (step, lr, train_loss, heldout_loss)
    best_epoch: int = 0
    best_heldout: float = float("inf")


def fit_scaling(episodes, include_emg: bool = True, angle_divisor: float = 20.0) -> ScalingSpec:
    """Scaling constants from training episodes: EMG max-abs per channel, encoder input spread."""
    x = np.concatenate([np.asarray(ep.theta) / angle_divisor for ep in episodes])
    if include_emg:
        emg = np.concatenate([np.asarray(ep.emg) for ep in episodes])
        scale = np.max(np.abs(emg), axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        scale = np.zeros(0)
    spread = float(x.std()) if x.std() > 0 else 1.0
    return ScalingSpec(angle_divisor, scale, float(x.mean()), spread)


def episode_inputs(ep, scaling: ScalingSpec, delta: int = DEFAULT_DELTA) -> np.ndarray:
    """Per-tick model inputs [duty, emg_{k-delta}...] for one episode."""
    duty = np.asarray(ep.duty, dtype=float)[:, None]
    if len(scaling.emg_scale) == 0:
        return duty
    emg = align_delay(scaling.scale_emg(ep.emg), delta)
    return np.hstack([duty, emg])


def build_dataset(episodes, scaling: ScalingSpec | None = None, n_b: int = N_B,
                  delta: int = DEFAULT_DELTA, stride: int | None = None,
                  include_emg: bool = True) -> TrainingSet:
    """Slice episodes into overlapping windows of ``n_b`` ticks.

    Windows start at tick ``delta`` so every EMG input is a measured sample.
    Passive and active episodes are pooled.
    """
    stride = stride or max(1, n_b // 2)
    episodes = list(episodes)
    if scaling is None:
        scaling = fit_scaling(episodes, include_emg)
    Xs, Us, src = [], [], []
    skipped = 0
    for i, ep in enumerate(episodes):
        T = len(ep.theta)
        if T < n_b + delta:
            skipped += 1
            continue
        x = scaling.scale_angle(ep.theta)
        u = episode_inputs(ep, scaling, delta)
        starts = delta + stride * np.arange((T - delta - n_b) // stride + 1)
        idx = starts[:, None] + np.arange(n_b)[None, :]
        Xs.append(x[idx])
        Us.append(u[idx[:, :-1]])
        src.append(np.full(len(starts), i))
    if skipped:
        log.warning("skipped %d episode(s) shorter than N_b + delta", skipped)
    if not Xs:
        m = 1 + len(scaling.emg_scale)
        return TrainingSet(np.zeros((0, n_b)), np.zeros((0, n_b - 1, m)), scaling,
                           np.zeros(0, dtype=int), skipped)
    return TrainingSet(np.concatenate(Xs), np.concatenate(Us), scaling, np.concatenate(src), skipped)


def noam_rate(step: int, model_size: int = 96, warmup: int = 400, factor: float = 1.0) -> float:
    step = max(step, 1)
    return factor * model_size ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def split_heldout(n: int, frac: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_held = min(int(round(frac * n)), n - 1) if n > 1 else 0
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def train(dataset: TrainingSet, config: TrainConfig | None = None,
          model: KoopmanModel | None = None) -> TrainResult:
    """Fit encoder, A and B by minimising the discounted multi-step loss.

    Returns the parameters with the lowest held-out loss seen at an epoch end.
    """
    cfg = config or TrainConfig()
    if len(dataset) == 0:
        raise DatasetError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    train_idx, held_idx = split_heldout(len(dataset), cfg.heldout_frac, cfg.seed)
    if model is None:
        model = init_model(cfg.d, dataset.m - 1, cfg.hidden, cfg.seed, dataset.scaling)
    params = model.get_params()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)

    Xtr, Utr = dataset.X[train_idx], dataset.U[train_idx]
    Xho, Uho = dataset.X[held_idx], dataset.U[held_idx]
    eval_X, eval_U = (Xho, Uho) if len(held_idx) else (Xtr, Utr)

    result = TrainResult(model.copy())
    step = 0
    n_tr = len(Xtr)
    mb = min(cfg.minibatch, n_tr)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_tr)
        for start in range(0, n_tr, mb):
            idx = order[start:start + mb]
            step += 1
            value, grads = loss_and_gradients(model, Xtr[idx], Utr[idx], cfg.gamma)
            per_batch = value / len(idx)
            if not np.isfinite(per_batch) or per_batch > 1e6:
                raise TrainingFault(f"training diverged (loss {per_batch:g})", step)
            lr = noam_rate(step, cfg.model_size, cfg.warmup, cfg.lr_factor)
            opt.step(params, grads, lr)
            result.curve.append([step, lr, per_batch, float("nan")])
        held = loss(model, eval_X, eval_U, cfg.gamma) / len(eval_X)
        result.curve[-1][3] = held
        if held < result.best_heldout:
            result.best_heldout = held
            result.best_epoch = epoch
            result.model = model.copy()
    log.info("trained %d steps, best held-out loss %.3g at epoch %d",
             step, result.best_heldout, result.best_epoch)
    return result


def prediction_errors(model: KoopmanModel, episodes, horizon: int = N_B,
                      delta: int = DEFAULT_DELTA, stride: int | None = None) -> np.ndarray:
    """Absolute angle prediction error (degrees) for 1..horizon steps ahead.

    Returns an array (windows, horizon) computed on windows of ``horizon + 1``
    ticks using the model's own scaling.
    """
    ds = build_dataset(episodes, model.scaling, horizon + 1, delta, stride or horizon // 2,
                       include_emg=model.m > 1)
    zk = lift(model, ds.X[:, 0])
    B = model.B
    errs = np.empty((len(ds), horizon))
    for k in range(horizon):
        zk = zk @ model.A.T + ds.U[:, k] @ B.T
        errs[:, k] = np.abs(zk[:, 0] - ds.X[:, k + 1]) * model.scaling.angle_divisor
    return errs
