import numpy as np
import pytest

from mecoffload.agent import Experience, Normalizer, Trainer
from mecoffload.env import ActionChoice, Observation
from mecoffload.messages import (
    EdgeTrainerHub, ExperienceUpload, InProcessChannel, ParameterRequest, ParameterResponse, decode, encode,
)
from mecoffload.neural import NetShape, q_values

SHAPE = NetShape(2, 3, 4, 8, 8, 4)
NORM = Normalizer(5e6, 10, 10)


def obs(seed):
    rng = np.random.default_rng(seed)
    return Observation(float(rng.uniform(1e6, 5e6)), int(rng.integers(10)), int(rng.integers(10)),
                       rng.uniform(0, 1e7, 2), rng.integers(0, 10, (3, 2)).astype(float))


def upload(device=0, birth=1, episode=1, seed=0):
    e = Experience(obs(seed), ActionChoice(False, 1), 4.0, obs(seed + 1), False, device, episode, birth)
    return ExperienceUpload(device, e)


def hub(batch_size=1):
    return EdgeTrainerHub(0, {0: Trainer(SHAPE, NORM, np.random.default_rng(0), batch_size=batch_size)})


def test_request_round_trip():
    msg = ParameterRequest(7)
    frame = encode(msg)
    assert int.from_bytes(frame[:4], "little") == len(frame) - 4
    assert decode(frame) == msg


def test_upload_round_trip():
    msg = upload(device=3, birth=42, episode=5)
    back = decode(encode(msg))
    e, f = msg.experience, back.experience
    assert back.device == 3 and f.key == (3, 5, 42)
    assert f.state == e.state and f.next_state == e.next_state
    assert f.action == e.action and f.cost == e.cost and f.terminal == e.terminal


def test_bad_frames():
    frame = encode(ParameterRequest(1))
    with pytest.raises(ValueError):
        decode(frame + b"\0")
    with pytest.raises(ValueError):
        decode(frame[:4] + bytes([99]) + frame[5:])
    with pytest.raises(TypeError):
        encode("hello")


def test_response_params_match_trainer():
    h = hub()
    ch = InProcessChannel({0: h})
    reply = ch.send(0, ParameterRequest(0))
    assert isinstance(reply, ParameterResponse)
    o = obs(3)
    sc, hist = NORM.encode(o)
    np.testing.assert_array_equal(q_values(reply.params(), sc, hist), q_values(h.trainers[0].eval_net, sc, hist))


def test_duplicate_upload_ignored():
    h = hub()
    ch = InProcessChannel({0: h})
    ch.send(0, upload())
    ch.send(0, upload())
    tr = h.trainers[0]
    assert len(tr.memory) == 1 and tr.update_count == 1
    ch.send(0, upload(birth=2))
    assert len(tr.memory) == 2


def test_upload_before_request_trains():
    h = hub()
    assert h.route_message(upload()) is None
    assert h.trainers[0].update_count == 1 and len(h.losses[0]) == 1


def test_unknown_device_rejected():
    with pytest.raises(KeyError):
        hub().route_message(ParameterRequest(5))
