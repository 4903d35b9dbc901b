"""Messages exchanged between devices and their training edge node.

Wire format: every frame is ``<u32 body length><body>`` where the body starts
with ``<u8 version><u8 kind>``.  All integers and floats are little-endian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Set, Tuple, Union

import numpy as np

from .agent import Experience, Trainer, store, train_step
from .env import ActionChoice, Observation
from .neural import NetParams

WIRE_VERSION = 1
_REQUEST, _RESPONSE, _UPLOAD = 1, 2, 3


@dataclass(frozen=True)
class ParameterRequest:
    device: int


@dataclass(frozen=True)
class ParameterResponse:
    device: int
    params_blob: bytes

    def params(self) -> NetParams:
        return NetParams.from_bytes(self.params_blob)


@dataclass(frozen=True)
class ExperienceUpload:
    device: int
    experience: Experience


Message = Union[ParameterRequest, ParameterResponse, ExperienceUpload]


def _pack_obs(obs: Observation) -> bytes:
    n = len(obs.edge_queue_bits)
    t_step = obs.load_history.shape[0]
    head = struct.pack("<dqqHH", obs.task_size_bits, obs.comp_wait_slots, obs.tran_wait_slots, n, t_step)
    return (head + np.asarray(obs.edge_queue_bits, dtype="<f8").tobytes()
            + np.asarray(obs.load_history, dtype="<f8").tobytes())


def _unpack_obs(buf: bytes, off: int) -> Tuple[Observation, int]:
    size, dc, dt, n, t_step = struct.unpack_from("<dqqHH", buf, off)
    off += struct.calcsize("<dqqHH")
    q = np.frombuffer(buf, dtype="<f8", count=n, offset=off).copy()
    off += 8 * n
    h = np.frombuffer(buf, dtype="<f8", count=t_step * n, offset=off).reshape(t_step, n).copy()
    off += 8 * t_step * n
    return Observation(size, int(dc), int(dt), q, h), off


def encode(msg: Message) -> bytes:
    if isinstance(msg, ParameterRequest):
        body = struct.pack("<BBI", WIRE_VERSION, _REQUEST, msg.device)
    elif isinstance(msg, ParameterResponse):
        body = struct.pack("<BBII", WIRE_VERSION, _RESPONSE, msg.device, len(msg.params_blob)) + msg.params_blob
    elif isinstance(msg, ExperienceUpload):
        e = msg.experience
        # metadata, then state, action, cost, next_state, terminal
        body = (struct.pack("<BBIqq", WIRE_VERSION, _UPLOAD, msg.device, e.episode, e.birth_slot)
                + _pack_obs(e.state)
                + struct.pack("<Hd", e.action.index, e.cost)
                + _pack_obs(e.next_state)
                + struct.pack("<?", e.terminal))
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    return struct.pack("<I", len(body)) + body


def decode(frame: bytes) -> Message:
    (length,) = struct.unpack_from("<I", frame, 0)
    if length != len(frame) - 4:
        raise ValueError("frame length prefix does not match payload")
    version, kind = struct.unpack_from("<BB", frame, 4)
    if version != WIRE_VERSION:
        raise ValueError(f"unsupported message version {version}")
    off = 6
    if kind == _REQUEST:
        (device,) = struct.unpack_from("<I", frame, off)
        return ParameterRequest(device)
    if kind == _RESPONSE:
        device, n = struct.unpack_from("<II", frame, off)
        off += 8
        return ParameterResponse(device, bytes(frame[off:off + n]))
    if kind == _UPLOAD:
        device, episode, birth = struct.unpack_from("<Iqq", frame, off)
        off += struct.calcsize("<Iqq")
        state, off = _unpack_obs(frame, off)
        a_idx, cost = struct.unpack_from("<Hd", frame, off)
        off += struct.calcsize("<Hd")
        nxt, off = _unpack_obs(frame, off)
        (terminal,) = struct.unpack_from("<?", frame, off)
        action = ActionChoice.from_index(a_idx, len(state.edge_queue_bits))
        return ExperienceUpload(device, Experience(state, action, cost, nxt, terminal, device, episode, birth))
    raise ValueError(f"unknown message kind {kind}")


class EdgeTrainerHub:
    """The training side of one edge node, serving the devices assigned to it."""

    def __init__(self, edge: int, trainers: Dict[int, Trainer]):
        self.edge = edge
        self.trainers = trainers
        self._seen: Set[Tuple[int, int, int]] = set()
        self.losses: Dict[int, list] = {m: [] for m in trainers}

    @property
    def devices(self) -> Iterable[int]:
        return self.trainers.keys()

    def route_message(self, msg: Message) -> Optional[Message]:
        if msg.device not in self.trainers:
            raise KeyError(f"device {msg.device} is not served by edge node {self.edge}")
        trainer = self.trainers[msg.device]
        if isinstance(msg, ParameterRequest):
            return ParameterResponse(msg.device, trainer.eval_net.to_bytes())
        if isinstance(msg, ExperienceUpload):
            key = (msg.device, msg.experience.episode, msg.experience.birth_slot)
            if key in self._seen:
                return None
            self._seen.add(key)
            store(trainer.memory, msg.experience)
            loss = train_step(trainer)
            if loss is not None:
                self.losses[msg.device].append(loss)
            return None
        raise TypeError(f"edge node cannot handle {type(msg).__name__}")


class InProcessChannel:
    """Immediate delivery to the hubs, optionally round-tripping through the wire format."""

    def __init__(self, hubs: Dict[int, EdgeTrainerHub], wire: bool = True):
        self.hubs = hubs
        self.wire = wire
        self.sent = 0

    def send(self, edge: int, msg: Message) -> Optional[Message]:
        self.sent += 1
        if self.wire:
            msg = decode(encode(msg))
        reply = self.hubs[edge].route_message(msg)
        if reply is not None and self.wire:
            reply = decode(encode(reply))
        return reply
