"""Small differentiable models with hand-written backprop: linear, one hidden
layer tanh MLP, and a gated recurrent cell for the history aggregate."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

MAGIC = b"FAOIPARM"
FORMAT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class ParamVector:
    """Flat float64 array with named, reshaped views."""

    def __init__(self, layout: Sequence[tuple[str, tuple[int, ...]]], data: Optional[np.ndarray] = None):
        self.layout = [(str(n), tuple(int(d) for d in shp)) for n, shp in layout]
        self._slices = {}
        off = 0
        for name, shp in self.layout:
            if name in self._slices:
                raise ValueError(f"duplicate slice {name!r}")
            size = int(np.prod(shp)) if shp else 1
            self._slices[name] = (off, off + size, shp)
            off += size
        if data is None:
            data = np.zeros(off)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (off,):
            raise ValueError(f"expected {off} values, got shape {data.shape}")
        self.data = data

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def __getitem__(self, name: str) -> np.ndarray:
        a, b, shp = self._slices[name]
        return self.data[a:b].reshape(shp)

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.data.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))


def _uniform_init(layout, fan_ins: dict, rng: np.random.Generator) -> ParamVector:
    p = ParamVector(layout)
    for name, shp in p.layout:
        bound = 1.0 / np.sqrt(fan_ins[name])
        p[name] = rng.uniform(-bound, bound, size=shp)
    return p


# --- linear ---------------------------------------------------------------

def linear_params(n_in: int, n_out: int, rng: Optional[np.random.Generator] = None) -> ParamVector:
    layout = [("W", (n_out, n_in)), ("b", (n_out,))]
    if rng is None:
        return ParamVector(layout)
    return _uniform_init(layout, {"W": n_in, "b": n_in}, rng)


def linear_forward(x: np.ndarray, p: ParamVector) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p["W"].shape[1]:
        raise ValueError("input dimension mismatch")
    return x @ p["W"].T + p["b"]


def linear_backward(x: np.ndarray, p: ParamVector, dout: np.ndarray) -> tuple[ParamVector, np.ndarray]:
    x2 = np.atleast_2d(x)
    d2 = np.atleast_2d(dout)
    g = p.zeros_like()
    g["W"] = d2.T @ x2
    g["b"] = d2.sum(axis=0)
    return g, (d2 @ p["W"]).reshape(np.shape(x))


# --- MLP ------------------------------------------------------------------

def mlp_params(n_in: int, n_hidden: int, n_out: int, rng: Optional[np.random.Generator] = None) -> ParamVector:
    layout = [("W1", (n_hidden, n_in)), ("b1", (n_hidden,)), ("W2", (n_out, n_hidden)), ("b2", (n_out,))]
    if rng is None:
        return ParamVector(layout)
    return _uniform_init(layout, {"W1": n_in, "b1": n_in, "W2": n_hidden, "b2": n_hidden}, rng)


def mlp_forward(x: np.ndarray, p: ParamVector, cache: Optional[dict] = None) -> np.ndarray:
    """tanh hidden layer, linear head; x may be (in,) or (batch, in)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p["W1"].shape[1]:
        raise ValueError("input dimension mismatch")
    hid = np.tanh(x @ p["W1"].T + p["b1"])
    out = hid @ p["W2"].T + p["b2"]
    if cache is not None:
        cache["x"], cache["hid"] = x, hid
    return out


def mlp_backward(cache: dict, p: ParamVector, dout: np.ndarray) -> tuple[ParamVector, np.ndarray]:
    x, hid = np.atleast_2d(cache["x"]), np.atleast_2d(cache["hid"])
    d = np.atleast_2d(dout)
    g = p.zeros_like()
    g["W2"] = d.T @ hid
    g["b2"] = d.sum(axis=0)
    dpre = (d @ p["W2"]) * (1.0 - hid * hid)
    g["W1"] = dpre.T @ x
    g["b1"] = dpre.sum(axis=0)
    dx = dpre @ p["W1"]
    return g, dx.reshape(np.shape(cache["x"]))


# --- GRU ------------------------------------------------------------------

GRU_GATES = ("z", "r", "h")
# float64 tanh saturates to exactly 1; keep the state strictly inside the open cube
H_MAX = float(np.nextafter(1.0, 0.0))


def gru_params(n_in: int, n_hidden: int, rng: Optional[np.random.Generator] = None) -> ParamVector:
    layout = []
    fans = {}
    for g in GRU_GATES:
        layout += [(f"W{g}", (n_hidden, n_in)), (f"U{g}", (n_hidden, n_hidden)), (f"b{g}", (n_hidden,))]
        fans.update({f"W{g}": n_in, f"U{g}": n_hidden, f"b{g}": n_hidden})
    if rng is None:
        return ParamVector(layout)
    return _uniform_init(layout, fans, rng)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_step(x: np.ndarray, h: np.ndarray, p: ParamVector, cache: Optional[dict] = None) -> np.ndarray:
    """z = s(Wz x + Uz h + bz), r = s(Wr x + Ur h + br),
    c = tanh(Wh x + Uh (r*h) + bh), h' = z*h + (1-z)*c."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    if x.shape != (p["Wz"].shape[1],) or h.shape != (p["Uz"].shape[0],):
        raise ValueError("GRU dimension mismatch")
    z = _sigmoid(p["Wz"] @ x + p["Uz"] @ h + p["bz"])
    r = _sigmoid(p["Wr"] @ x + p["Ur"] @ h + p["br"])
    c = np.tanh(p["Wh"] @ x + p["Uh"] @ (r * h) + p["bh"])
    h_new = np.clip(z * h + (1.0 - z) * c, -H_MAX, H_MAX)
    if cache is not None:
        cache.update(x=x, h=h, z=z, r=r, c=c)
    return h_new


def gru_backward(cache: dict, p: ParamVector, dh_new: np.ndarray) -> tuple[ParamVector, np.ndarray, np.ndarray]:
    """Gradients w.r.t. parameters, input and previous state."""
    x, h, z, r, c = (cache[k] for k in ("x", "h", "z", "r", "c"))
    g = p.zeros_like()
    dz = dh_new * (h - c)
    dc = dh_new * (1.0 - z)
    dh = dh_new * z
    dpre_c = dc * (1.0 - c * c)
    g["Wh"] = np.outer(dpre_c, x)
    g["Uh"] = np.outer(dpre_c, r * h)
    g["bh"] = dpre_c
    drh = p["Uh"].T @ dpre_c
    dr = drh * h
    dh += drh * r
    dpre_z = dz * z * (1.0 - z)
    dpre_r = dr * r * (1.0 - r)
    g["Wz"] = np.outer(dpre_z, x)
    g["Uz"] = np.outer(dpre_z, h)
    g["bz"] = dpre_z
    g["Wr"] = np.outer(dpre_r, x)
    g["Ur"] = np.outer(dpre_r, h)
    g["br"] = dpre_r
    dx = p["Wz"].T @ dpre_z + p["Wr"].T @ dpre_r + p["Wh"].T @ dpre_c
    dh += p["Uz"].T @ dpre_z + p["Ur"].T @ dpre_r
    return g, dx, dh


# --- losses ---------------------------------------------------------------

def td_loss(q_params: ParamVector, features: np.ndarray, actions: np.ndarray,
            targets: np.ndarray) -> tuple[float, ParamVector, np.ndarray]:
    """0.5 * mean((Q(x)[a] - y)^2) for an MLP Q-head; returns (loss, grad, dx)."""
    cache: dict = {}
    q = mlp_forward(features, q_params, cache)
    idx = np.arange(len(actions))
    err = q[idx, actions] - targets
    loss = 0.5 * float(np.mean(err * err))
    dq = np.zeros_like(q)
    dq[idx, actions] = err / len(actions)
    grad, dx = mlp_backward(cache, q_params, dq)
    return loss, grad, dx


def td_loss_with_history(gru_p: ParamVector, q_params: ParamVector, embed: np.ndarray,
                         h_prev: np.ndarray, local: np.ndarray, actions: np.ndarray,
                         targets: np.ndarray) -> tuple[float, ParamVector, ParamVector]:
    """TD loss where the Q-head input is [local features, gru_step(embed, h_prev)],
    backpropagated one step into the recurrent cell (h_prev held fixed)."""
    B = len(actions)
    hs, caches = [], []
    for b in range(B):
        cache: dict = {}
        hs.append(gru_step(embed[b], h_prev[b], gru_p, cache))
        caches.append(cache)
    feats = np.concatenate([local, np.array(hs)], axis=1)
    loss, g_q, dx = td_loss(q_params, feats, actions, targets)
    g_gru = gru_p.zeros_like()
    n_loc = local.shape[1]
    for b in range(B):
        gb, _, _ = gru_backward(caches[b], gru_p, dx[b, n_loc:])
        g_gru.data += gb.data
    return loss, g_gru, g_q


# --- finite-difference checking ------------------------------------------

def central_difference(f, params: ParamVector, step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of the scalar ``f()`` w.r.t. ``params.data`` (mutated in place, then restored)."""
    out = np.empty(params.size)
    for i in range(params.size):
        old = params.data[i]
        params.data[i] = old + step
        hi = f()
        params.data[i] = old - step
        lo = f()
        params.data[i] = old
        out[i] = (hi - lo) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor); the floor keeps near-zero entries from dominating."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


# --- updates and storage --------------------------------------------------

def sgd_update(params: ParamVector, grad: ParamVector, lr: float, clip: Optional[float] = None) -> None:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not grad.is_finite():
        raise NonFiniteError("gradient contains NaN or Inf")
    step = grad.data
    if clip is not None:
        norm = float(np.linalg.norm(step))
        if norm > clip:
            step = step * (clip / norm)
    params.data -= lr * step
    if not params.is_finite():
        raise NonFiniteError("parameters became non-finite")


def save_params(path, params: ParamVector) -> None:
    header = json.dumps({"version": FORMAT_VERSION, "dtype": "<f8",
                         "slices": [[n, list(s)] for n, s in params.layout]}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(params.data.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError("not a parameter file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        header = json.loads(fh.read(hlen))
        data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    layout = [(n, tuple(s)) for n, s in header["slices"]]
    return ParamVector(layout, data)


@dataclass
class AdamState:
    """Adam moments for one ParamVector (optional alternative to plain SGD)."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_params(cls, p: ParamVector) -> "AdamState":
        return cls(np.zeros(p.size), np.zeros(p.size))


def adam_update(params: ParamVector, grad: ParamVector, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not grad.is_finite():
        raise NonFiniteError("gradient contains NaN or Inf")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad.data
    state.v = beta2 * state.v + (1 - beta2) * grad.data ** 2
    mh = state.m / (1 - beta1 ** state.t)
    vh = state.v / (1 - beta2 ** state.t)
    params.data -= lr * mh / (np.sqrt(vh) + eps)
    if not params.is_finite():
        raise NonFiniteError("parameters became non-finite")
