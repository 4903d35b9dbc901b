"""Dueling Q-network with an LSTM front end, written directly in numpy.

Topology::

    load history (t_step x N) -> LSTM -> last hidden state --+
    scalar features (3 + N) ---------------------------------+-> FC+ReLU -> FC+ReLU -> FC+ReLU -> A (N+1)
                                                                                   -> FC+ReLU -> V (1)
    Q = V + A - mean(A)

Everything operates on minibatches: ``scalars`` has shape ``(B, 3 + N)`` and
``history`` has shape ``(B, t_step, N)``.  The LSTM runs over the rows of
the history oldest-first and starts from a zero state on every call.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

FORMAT_VERSION = 1
_MAGIC = b"MECQ"

Grads = Dict[str, np.ndarray]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass(frozen=True)
class NetShape:
    n_edges: int
    t_step: int
    lstm_hidden: int = 32
    fc1: int = 128
    fc2: int = 64
    head: int = 32

    @property
    def n_scalars(self) -> int:
        return 3 + self.n_edges

    @property
    def n_actions(self) -> int:
        return self.n_edges + 1

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        h, n = self.lstm_hidden, self.n_edges
        return [
            ("lstm_Wx", (n, 4 * h)),
            ("lstm_Wh", (h, 4 * h)),
            ("lstm_b", (4 * h,)),
            ("fc1_W", (self.n_scalars + h, self.fc1)),
            ("fc1_b", (self.fc1,)),
            ("fc2_W", (self.fc1, self.fc2)),
            ("fc2_b", (self.fc2,)),
            ("A1_W", (self.fc2, self.head)),
            ("A1_b", (self.head,)),
            ("A_W", (self.head, self.n_actions)),
            ("A_b", (self.n_actions,)),
            ("V1_W", (self.fc2, self.head)),
            ("V1_b", (self.head,)),
            ("V_W", (self.head, 1)),
            ("V_b", (1,)),
        ]


class NetParams:
    """All trainable arrays of one network, in a fixed layer order.

    LSTM gate blocks are packed along the last axis as input, forget, output,
    candidate.
    """

    def __init__(self, shape: NetShape, arrays: "OrderedDict[str, np.ndarray]"):
        self.shape = shape
        expected = shape.param_shapes()
        if [k for k, _ in expected] != list(arrays):
            raise ValueError("parameter names/order do not match the network shape")
        for name, shp in expected:
            if arrays[name].shape != shp:
                raise ValueError(f"{name}: expected shape {shp}, got {arrays[name].shape}")
        self.arrays = arrays

    @classmethod
    def initialize(cls, shape: NetShape, rng: np.random.Generator) -> "NetParams":
        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shp in shape.param_shapes():
            if len(shp) == 1:
                arrays[name] = np.zeros(shp)
            else:
                bound = 1.0 / np.sqrt(shp[0])
                arrays[name] = rng.uniform(-bound, bound, size=shp)
        h = shape.lstm_hidden
        arrays["lstm_b"][h:2 * h] = 1.0
        return cls(shape, arrays)

    @classmethod
    def zeros_like(cls, other: "NetParams") -> "NetParams":
        return cls(other.shape, OrderedDict((k, np.zeros_like(v)) for k, v in other.arrays.items()))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays.items())

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    # serialization ---------------------------------------------------------------
    def to_bytes(self) -> bytes:
        header = json.dumps({
            "version": FORMAT_VERSION,
            "shape": [self.shape.n_edges, self.shape.t_step, self.shape.lstm_hidden,
                      self.shape.fc1, self.shape.fc2, self.shape.head],
        }).encode()
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        buf.write(header)
        for _, arr in self.arrays.items():
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NetParams":
        if blob[:4] != _MAGIC:
            raise ValueError("not a serialized parameter blob")
        version, hlen = struct.unpack_from("<HI", blob, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format version {version}")
        off = 4 + struct.calcsize("<HI")
        header = json.loads(blob[off:off + hlen])
        off += hlen
        shape = NetShape(*header["shape"])
        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shp in shape.param_shapes():
            count = int(np.prod(shp))
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shp).copy()
            off += 8 * count
        if off != len(blob):
            raise ValueError("trailing bytes in parameter blob")
        return cls(shape, arrays)


def clone_params(params: NetParams) -> NetParams:
    return NetParams(params.shape, OrderedDict((k, v.copy()) for k, v in params.arrays.items()))


def copy_into(src: NetParams, dst: NetParams) -> None:
    if src.shape != dst.shape:
        raise ValueError("cannot copy between networks of different shape")
    for k, v in src.arrays.items():
        np.copyto(dst.arrays[k], v)


# forward / backward ---------------------------------------------------------------

@dataclass
class ForwardTrace:
    scalars: np.ndarray
    history: np.ndarray
    hs: List[np.ndarray]   # hidden states h_0..h_T
    cs: List[np.ndarray]   # cell states c_0..c_T
    gates: List[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]  # (i, f, o, g) per step
    x1: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    za: np.ndarray
    ha: np.ndarray
    zv: np.ndarray
    hv: np.ndarray
    advantage: np.ndarray
    value: np.ndarray


def _check_inputs(params: NetParams, scalars: np.ndarray, history: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    s = params.shape
    scalars = np.asarray(scalars, dtype=float)
    history = np.asarray(history, dtype=float)
    if scalars.ndim == 1:
        scalars = scalars[None, :]
    if history.ndim == 2:
        history = history[None, :, :]
    if scalars.shape[1:] != (s.n_scalars,):
        raise ValueError(f"scalar features must have {s.n_scalars} columns, got shape {scalars.shape}")
    if history.shape[1:] != (s.t_step, s.n_edges):
        raise ValueError(f"history must be {s.t_step}x{s.n_edges} per sample, got shape {history.shape}")
    if scalars.shape[0] != history.shape[0]:
        raise ValueError("scalar and history batches differ in size")
    return scalars, history


def forward(params: NetParams, scalars: np.ndarray, history: np.ndarray) -> Tuple[np.ndarray, ForwardTrace]:
    """Return ``(Q, trace)`` with ``Q`` of shape ``(B, N + 1)``."""
    scalars, history = _check_inputs(params, scalars, history)
    p = params.arrays
    batch = scalars.shape[0]
    h = params.shape.lstm_hidden
    Wx, Wh, b = p["lstm_Wx"], p["lstm_Wh"], p["lstm_b"]

    h_t = np.zeros((batch, h))
    c_t = np.zeros((batch, h))
    hs, cs, gates = [h_t], [c_t], []
    # input projections for every step at once
    xproj = history @ Wx + b
    for k in range(params.shape.t_step):
        z = xproj[:, k, :] + h_t @ Wh
        ifo = _sigmoid(z[:, :3 * h])
        i, f, o = ifo[:, :h], ifo[:, h:2 * h], ifo[:, 2 * h:]
        g = np.tanh(z[:, 3 * h:])
        c_t = f * c_t + i * g
        h_t = o * np.tanh(c_t)
        hs.append(h_t)
        cs.append(c_t)
        gates.append((i, f, o, g))

    x1 = np.concatenate([scalars, h_t], axis=1)
    z1 = x1 @ p["fc1_W"] + p["fc1_b"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ p["fc2_W"] + p["fc2_b"]
    a2 = np.maximum(z2, 0.0)
    za = a2 @ p["A1_W"] + p["A1_b"]
    ha = np.maximum(za, 0.0)
    zv = a2 @ p["V1_W"] + p["V1_b"]
    hv = np.maximum(zv, 0.0)
    adv = ha @ p["A_W"] + p["A_b"]
    val = hv @ p["V_W"] + p["V_b"]
    q = val + adv - adv.mean(axis=1, keepdims=True)
    return q, ForwardTrace(scalars, history, hs, cs, gates, x1, z1, a1, z2, a2, za, ha, zv, hv, adv, val)


def q_values(params: NetParams, scalars: np.ndarray, history: np.ndarray) -> np.ndarray:
    return forward(params, scalars, history)[0]


def dueling_combine(advantage: np.ndarray, value: np.ndarray) -> np.ndarray:
    advantage = np.atleast_2d(advantage)
    value = np.reshape(value, (-1, 1))
    return value + advantage - advantage.mean(axis=1, keepdims=True)


def backward(params: NetParams, trace: ForwardTrace, dq: np.ndarray) -> Grads:
    """Gradients of ``sum(dq * Q)`` with respect to every parameter."""
    p = params.arrays
    dq = np.asarray(dq, dtype=float)
    if dq.shape != trace.advantage.shape:
        raise ValueError(f"loss gradient must have shape {trace.advantage.shape}, got {dq.shape}")
    g: Grads = {}
    d_adv = dq - dq.mean(axis=1, keepdims=True)
    d_val = dq.sum(axis=1, keepdims=True)
    g["A_W"] = trace.ha.T @ d_adv
    g["A_b"] = d_adv.sum(axis=0)
    g["V_W"] = trace.hv.T @ d_val
    g["V_b"] = d_val.sum(axis=0)
    dza = (d_adv @ p["A_W"].T) * (trace.za > 0)
    dzv = (d_val @ p["V_W"].T) * (trace.zv > 0)
    g["A1_W"] = trace.a2.T @ dza
    g["A1_b"] = dza.sum(axis=0)
    g["V1_W"] = trace.a2.T @ dzv
    g["V1_b"] = dzv.sum(axis=0)

    dz2 = (dza @ p["A1_W"].T + dzv @ p["V1_W"].T) * (trace.z2 > 0)
    g["fc2_W"] = trace.a1.T @ dz2
    g["fc2_b"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p["fc2_W"].T) * (trace.z1 > 0)
    g["fc1_W"] = trace.x1.T @ dz1
    g["fc1_b"] = dz1.sum(axis=0)
    dx1 = dz1 @ p["fc1_W"].T

    n_sc = params.shape.n_scalars
    Wh = p["lstm_Wh"]
    dWx = np.zeros_like(p["lstm_Wx"])
    dWh = np.zeros_like(Wh)
    db = np.zeros_like(p["lstm_b"])
    dh = dx1[:, n_sc:]
    dc = np.zeros_like(dh)
    for k in range(params.shape.t_step - 1, -1, -1):
        i, f, o, gg = trace.gates[k]
        c_prev, c_k = trace.cs[k], trace.cs[k + 1]
        tc = np.tanh(c_k)
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            do * o * (1.0 - o),
            dc * i * (1.0 - gg * gg),
        ], axis=1)
        dWx += trace.history[:, k, :].T @ dz
        dWh += trace.hs[k].T @ dz
        db += dz.sum(axis=0)
        dh = dz @ Wh.T
        dc = dc * f
    g["lstm_Wx"] = dWx
    g["lstm_Wh"] = dWh
    g["lstm_b"] = db
    return {name: g[name] for name, _ in params.shape.param_shapes()}


# optimizers -----------------------------------------------------------------------

def _check_grads(params: NetParams, grads: Grads) -> None:
    for name, arr in params.arrays.items():
        if name not in grads:
            raise ValueError(f"missing gradient for {name}")
        if grads[name].shape != arr.shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, expected {arr.shape}")
        if not np.all(np.isfinite(grads[name])):
            bad = int(np.sum(~np.isfinite(grads[name])))
            raise FloatingPointError(f"non-finite gradient for {name} ({bad} entries)")


def sgd_step(params: NetParams, grads: Grads, learning_rate: float) -> None:
    _check_grads(params, grads)
    for name, arr in params.arrays.items():
        arr -= learning_rate * grads[name]


class SGD:
    def __init__(self, learning_rate: float = 1e-3):
        self.learning_rate = learning_rate

    def step(self, params: NetParams, grads: Grads) -> None:
        sgd_step(params, grads, self.learning_rate)


class Adam:
    """Bias-corrected first/second moment scaling of the gradient step."""

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: Optional[Grads] = None
        self.v: Optional[Grads] = None

    def step(self, params: NetParams, grads: Grads) -> None:
        _check_grads(params, grads)
        if self.m is None:
            self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.learning_rate * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, arr in params.arrays.items():
            gr = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * gr
            v *= b2
            v += (1.0 - b2) * gr * gr
            arr -= lr_t * m / (np.sqrt(v) + self.eps)


def make_optimizer(kind: str, learning_rate: float):
    if kind == "sgd":
        return SGD(learning_rate)
    if kind == "adam":
        return Adam(learning_rate)
    raise ValueError(f"unknown optimizer {kind!r}")
