"""Deep Koopman model of the knee/exoskeleton system.

The lifted state is ``z = [x, encoder(x)]`` with ``x`` the scaled knee angle,
so the output map is the fixed selector ``C = [1, 0, ..., 0]``.  Inputs enter
linearly: ``z' = A z + B1 duty + B2 emg``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"KOOPEXO\x00"
FORMAT_VERSION = 1
PARAM_NAMES_TAIL = ("A", "B1", "B2")


class ModelInputError(ValueError):
    pass


class GradientFault(ArithmeticError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block {block}")
        self.block = block


class ModelFormatError(ValueError):
    pass


@dataclass
class ScalingSpec:
    """Fixed data scaling shared by training and control."""

    angle_divisor: float = 20.0
    emg_scale: np.ndarray = field(default_factory=lambda: np.ones(2))
    # affine normalization of the encoder input (scaled angle)
    x_center: float = 5.25
    x_spread: float = 0.75

    def scale_angle(self, theta_deg):
        return np.asarray(theta_deg, dtype=float) / self.angle_divisor

    def unscale_angle(self, x):
        return np.asarray(x, dtype=float) * self.angle_divisor

    def scale_emg(self, emg):
        return np.asarray(emg, dtype=float) / self.emg_scale


@dataclass
class KoopmanModel:
    weights: list  # encoder weight matrices, (out, in)
    biases: list
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    scaling: ScalingSpec = field(default_factory=ScalingSpec)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return 1 + self.B2.shape[1]

    @property
    def B(self) -> np.ndarray:
        return np.hstack([self.B1, self.B2])

    @property
    def C(self) -> np.ndarray:
        c = np.zeros((1, self.d))
        c[0, 0] = 1.0
        return c

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"W{i + 1}", f"b{i + 1}"]
        return names + list(PARAM_NAMES_TAIL)

    def get_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i + 1}"] = w
            out[f"b{i + 1}"] = b
        out.update(A=self.A, B1=self.B1, B2=self.B2)
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        n = len(self.weights)
        self.weights = [params[f"W{i + 1}"] for i in range(n)]
        self.biases = [params[f"b{i + 1}"] for i in range(n)]
        self.A, self.B1, self.B2 = params["A"], params["B1"], params["B2"]

    def copy(self) -> "KoopmanModel":
        sc = self.scaling
        return KoopmanModel(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.A.copy(), self.B1.copy(), self.B2.copy(),
            ScalingSpec(sc.angle_divisor, np.array(sc.emg_scale, dtype=float), sc.x_center, sc.x_spread),
        )


def init_model(d: int = 96, n_emg: int = 2, hidden=(128, 128), seed: int = 0,
               scaling: ScalingSpec | None = None) -> KoopmanModel:
    """Identity A, zero B, fan-in scaled encoder weights."""
    rng = np.random.default_rng(seed)
    sizes = [1, *hidden, d - 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    scaling = scaling or ScalingSpec(emg_scale=np.ones(n_emg))
    return KoopmanModel(weights, biases, np.eye(d), np.zeros((d, 1)), np.zeros((d, n_emg)), scaling)


def _encode(model: KoopmanModel, x: np.ndarray):
    """Forward pass of the encoder on a flat array of scaled angles; keeps activations."""
    sc = model.scaling
    h = ((x - sc.x_center) / sc.x_spread)[:, None]
    acts = [h]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def lift(model: KoopmanModel, x) -> np.ndarray:
    """Lifted state(s) for scaled angle(s) ``x``; the last axis has length d."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ModelInputError("lift requires finite scaled angles")
    flat = x.reshape(-1)
    enc = _encode(model, flat)[-1]
    z = np.concatenate([flat[:, None], enc], axis=1)
    return z.reshape(x.shape + (model.d,))


def predict_multistep(model: KoopmanModel, x1: float, inputs) -> np.ndarray:
    """Lifted trajectory z_1..z_k from one scaled angle and inputs u_1..u_{k-1}.

    ``inputs`` has shape (k-1, m) with columns [duty, emg...].
    """
    U = np.asarray(inputs, dtype=float).reshape(-1, model.m)
    B = model.B
    z = np.empty((len(U) + 1, model.d))
    z[0] = lift(model, x1)
    for t, u in enumerate(U):
        z[t + 1] = model.A @ z[t] + B @ u
    return z


def _rollout(model: KoopmanModel, X: np.ndarray, U: np.ndarray):
    M, nb = X.shape
    acts = _encode(model, X.reshape(-1))
    phi = np.concatenate([X.reshape(-1, 1), acts[-1]], axis=1).reshape(M, nb, model.d)
    B = model.B
    zhat = np.empty_like(phi)
    zhat[:, 0] = phi[:, 0]
    for k in range(1, nb):
        zhat[:, k] = zhat[:, k - 1] @ model.A.T + U[:, k - 1] @ B.T
    return acts, phi, zhat


def loss(model: KoopmanModel, X, U, gamma: float = 0.9) -> float:
    """Discounted multi-step lifted prediction loss summed over batches.

    ``X`` is (M, N_b) scaled angles, ``U`` is (M, N_b - 1, m).
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    _, phi, zhat = _rollout(model, X, U)
    w = gamma ** np.arange(X.shape[1])
    r = zhat - phi
    return float(np.sum(w * np.sum(r * r, axis=(0, 2))))


def loss_and_gradients(model: KoopmanModel, X, U, gamma: float = 0.9):
    """Loss and exact reverse-mode gradients w.r.t. encoder, A, B1 and B2."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    M, nb = X.shape
    acts, phi, zhat = _rollout(model, X, U)
    w = gamma ** np.arange(nb)
    r = zhat - phi
    value = float(np.sum(w * np.sum(r * r, axis=(0, 2))))

    direct = 2.0 * w[None, :, None] * r
    g = np.zeros_like(zhat)
    g[:, nb - 1] = direct[:, nb - 1]
    for k in range(nb - 2, -1, -1):
        g[:, k] = direct[:, k] + g[:, k + 1] @ model.A
    # g[:, k] is dL/dzhat_k; zhat_{k+1} = A zhat_k + B u_k
    g_next = g[:, 1:].reshape(-1, model.d)
    gA = g_next.T @ zhat[:, :-1].reshape(-1, model.d)
    gB = g_next.T @ U.reshape(-1, U.shape[-1])

    gphi = -direct
    gphi[:, 0] += g[:, 0]
    delta = gphi.reshape(M * nb, model.d)[:, 1:]

    grads = {}
    n = len(model.weights)
    for i in range(n - 1, -1, -1):
        grads[f"W{i + 1}"] = delta.T @ acts[i]
        grads[f"b{i + 1}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (1.0 - acts[i] ** 2)
    grads["A"] = gA
    grads["B1"] = gB[:, :1]
    grads["B2"] = gB[:, 1:]
    for name, arr in grads.items():
        if not np.all(np.isfinite(arr)):
            raise GradientFault(name)
    return value, grads


def gradients(model: KoopmanModel, X, U, gamma: float = 0.9) -> dict[str, np.ndarray]:
    return loss_and_gradients(model, X, U, gamma)[1]


# --- persistence ---------------------------------------------------------

def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<II", *(a.shape if a.ndim == 2 else (a.shape[0], 1))) + a.tobytes()


def model_to_bytes(model: KoopmanModel) -> bytes:
    sc = model.scaling
    out = [MAGIC, struct.pack("<IIII", FORMAT_VERSION, model.d, model.m, len(model.weights))]
    out.append(struct.pack("<ddd", sc.angle_divisor, sc.x_center, sc.x_spread))
    out.append(np.ascontiguousarray(sc.emg_scale, dtype="<f8").tobytes())
    for w, b in zip(model.weights, model.biases):
        out.append(_pack_array(w))
        out.append(_pack_array(b))
    for a in (model.A, model.B1, model.B2):
        out.append(_pack_array(a))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"model file truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def array(self, what: str, shape=None) -> np.ndarray:
        rows, cols = struct.unpack("<II", self.take(8, f"{what} shape"))
        if shape is not None and (rows, cols) != shape:
            raise ModelFormatError(f"{what} has shape {(rows, cols)}, expected {shape}")
        buf = self.take(8 * rows * cols, what)
        return np.frombuffer(buf, dtype="<f8").reshape(rows, cols).astype(float)


def model_from_bytes(data: bytes) -> KoopmanModel:
    rd = _Reader(data)
    if rd.take(len(MAGIC), "magic") != MAGIC:
        raise ModelFormatError("bad magic header")
    version, d, m, n_layers = struct.unpack("<IIII", rd.take(16, "header"))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"version {version} unsupported (expected {FORMAT_VERSION})")
    divisor, center, spread = struct.unpack("<ddd", rd.take(24, "scaling"))
    emg_scale = np.frombuffer(rd.take(8 * (m - 1), "emg_scale"), dtype="<f8").astype(float)
    weights, biases = [], []
    for i in range(n_layers):
        weights.append(rd.array(f"W{i + 1}"))
        biases.append(rd.array(f"b{i + 1}").reshape(-1))
    A = rd.array("A", (d, d))
    B1 = rd.array("B1", (d, 1))
    B2 = rd.array("B2", (d, m - 1))
    if rd.pos != len(data):
        raise ModelFormatError("trailing bytes after B2")
    if weights[-1].shape[0] != d - 1:
        raise ModelFormatError(f"encoder output {weights[-1].shape[0]} does not match d-1={d - 1}")
    return KoopmanModel(weights, biases, A, B1, B2.reshape(d, m - 1),
                        ScalingSpec(divisor, emg_scale, center, spread))


def save_model(model: KoopmanModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> KoopmanModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
