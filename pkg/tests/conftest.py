"""Shared oracles for the test suite."""
import itertools

import numpy as np
import pytest

from koopexo.koopman import ScalingSpec, gradients, lift, loss
from koopexo.qp import QpProblem
from koopexo.training import TrainingSet, split_heldout


def linear_system_dataset(seed=0, ticks=3000, a=0.95, b=0.1, n_b=16, stride=8):
    """Windows from the lifted-linear system z = [x, 1], x' = a x + (1-a) 5 + b u."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1, 1, ticks)
    x = np.empty(ticks)
    x[0] = 5.0
    for k in range(ticks - 1):
        x[k + 1] = a * x[k] + (1 - a) * 5.0 + b * u[k]
    idx = np.arange(0, ticks - n_b, stride)[:, None] + np.arange(n_b)
    scaling = ScalingSpec(20.0, np.zeros(0), float(x.mean()), float(x.std()))
    return TrainingSet(x[idx], u[idx[:, :-1]][..., None], scaling, np.zeros(len(idx), dtype=int))


def heldout_rmse(model, ds, frac, seed):
    """Scaled-state RMSE of open-loop predictions over each held-out window."""
    _, held = split_heldout(len(ds), frac, seed)
    z = lift(model, ds.X[held, 0])
    err = []
    for k in range(ds.X.shape[1] - 1):
        z = z @ model.A.T + ds.U[held, k] @ model.B.T
        err.append(z[:, 0] - ds.X[held, k + 1])
    return float(np.sqrt(np.mean(np.square(err))))


def fd_check(model, X, U, h=1e-5):
    """Max relative error of analytic gradients against central differences."""
    grads = gradients(model, X, U)
    params = model.get_params()
    worst = 0.0
    for name, arr in params.items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss(model, X, U)
            arr[idx] = old - h
            lm = loss(model, X, U)
            arr[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        err = np.abs(num - grads[name]) / np.maximum(1e-6, np.abs(num) + np.abs(grads[name]))
        worst = max(worst, float(err.max()))
    return worst


def random_problem(rng, n):
    M = rng.standard_normal((n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    f = 3.0 * rng.standard_normal(n)
    return QpProblem(H, f, -np.ones(n), np.ones(n))


def grid_oracle(qp, res=0.005):
    """Exact minimiser over the full-resolution grid of the box.

    The first n-1 coordinates are enumerated; for each, the best grid value of
    the last coordinate is one of the two grid points bracketing its convex
    one-dimensional minimiser.
    """
    n = len(qp.f)
    H, f = qp.H, qp.f
    axis = np.linspace(-1, 1, int(round(2 / res)) + 1)
    head = np.array(list(itertools.product(axis, repeat=n - 1)), dtype=float)
    head = head.reshape(len(axis) ** (n - 1), n - 1)
    last = np.clip(-(f[-1] + head @ H[-1, :-1]) / H[-1, -1], -1, 1)
    k = np.clip(np.floor((last + 1) / res).astype(int), 0, len(axis) - 2)
    best, best_obj = None, np.inf
    for cand in (axis[k], axis[k + 1]):
        pts = np.column_stack([head, cand])
        obj = 0.5 * np.einsum("ij,jk,ik->i", pts, H, pts) + pts @ f
        i = int(np.argmin(obj))
        if obj[i] < best_obj:
            best, best_obj = pts[i], obj[i]
    return best


def gain_db(filt, f, fs=2000.0):
    # independent evaluator: polynomial evaluation of each section on the unit circle
    z = np.exp(2j * np.pi * f / fs)
    h = 1.0 + 0j
    for b0, b1, b2, a0, a1, a2 in filt.sos:
        h *= np.polyval([b0, b1, b2], z) / np.polyval([a0, a1, a2], z)
    return 20 * np.log10(abs(h))


TINY_CONFIG = """\
episodes = 1
duration = 10
subjects = 2
heldout_episodes = 1
train.epochs = 2
train.d = 8
train.hidden = 16, 16
grid = 0.2:90:120, 0.25:90:120
"""


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A complete miniature pipeline run: (config path, output dir)."""
    from koopexo.cli import main

    root = tmp_path_factory.mktemp("tiny")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    out = root / "out"
    assert main(["all", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out
