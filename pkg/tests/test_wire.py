import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from foamfed.federation.wire import (CLIENT_TO_SERVER, HEADER, MAGIC, MAX_PAYLOAD, SERVER_TO_CLIENT, Error,
                                     EvaluateInstruction, EvaluateResult, FitInstruction, FitResult, JoinAck,
                                     JoinRequest, MsgType, ProtocolError, Shutdown, decode_frame, decode_message,
                                     encode_frame, encode_message, load_checkpoint, params_from_bytes, save_checkpoint,
                                     serialize_params)
from foamfed.metrics import RoundMetrics

names = st.text(st.characters(min_codepoint=0x20, max_codepoint=0x2FF, blacklist_characters="\x7f"),
                min_size=1, max_size=12)
tensors = st.integers(0, 3).flatmap(
    lambda rank: arrays(np.float32, st.tuples(*[st.integers(0, 4)] * rank),
                        elements=st.floats(width=32, allow_nan=False)))
param_dicts = st.dictionaries(names, tensors, max_size=5)
metrics = st.builds(RoundMetrics, *[st.floats(0, 1)] * 4)


def same_params(a, b):
    return list(a) == list(b) and all(a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)


def test_empty_params_are_four_bytes():
    assert serialize_params({}) == b"\x00\x00\x00\x00"


def test_single_tensor_layout():
    raw = serialize_params({"w": np.array([1.0, 2.0], np.float32)})
    assert len(raw) == 4 + 2 + 1 + 1 + 1 + 4 + 8
    assert raw == (struct.pack("<I", 1) + struct.pack("<H", 1) + b"w" + bytes([0, 1]) + struct.pack("<I", 2)
                   + np.array([1.0, 2.0], "<f4").tobytes())


@settings(max_examples=200)
@given(param_dicts)
def test_params_roundtrip_bit_exact(p):
    assert same_params(params_from_bytes(serialize_params(p)), p)


def test_trailing_bytes_rejected():
    with pytest.raises(ProtocolError):
        params_from_bytes(serialize_params({"a": np.zeros(2, np.float32)}) + b"\x00")


def test_checkpoint_file_roundtrip(tmp_path):
    p = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    path = save_checkpoint(tmp_path / "x.fp", p)
    assert same_params(load_checkpoint(path), p)


def test_header_is_big_endian_with_magic():
    frame = encode_frame(MsgType.JOIN_REQUEST, b"ab")
    assert frame == b"FFL1" + b"\x01" + (2).to_bytes(8, "big") + b"ab"
    assert HEADER.size == 13


@settings(max_examples=1000)
@given(st.sampled_from(list(MsgType)), st.binary(max_size=64))
def test_frame_roundtrip(t, payload):
    assert decode_frame(encode_frame(t, payload)) == (t, payload)


@settings(max_examples=300)
@given(st.sampled_from(list(MsgType)), st.binary(min_size=1, max_size=64), st.data())
def test_truncated_frames_rejected(t, payload, data):
    frame = encode_frame(t, payload)
    cut = data.draw(st.integers(0, len(frame) - 1))
    with pytest.raises(ProtocolError):
        decode_frame(frame[:cut])


@given(st.binary(min_size=4, max_size=4).filter(lambda m: m != MAGIC), st.binary(max_size=16))
def test_bad_magic_rejected(magic, payload):
    with pytest.raises(ProtocolError):
        decode_frame(magic + encode_frame(MsgType.ERROR, payload)[4:])


def test_oversized_and_unknown_type_rejected():
    with pytest.raises(ProtocolError):
        decode_frame(HEADER.pack(MAGIC, 0x03, MAX_PAYLOAD + 1))
    with pytest.raises(ProtocolError):
        decode_frame(HEADER.pack(MAGIC, 0x42, 0))


def roundtrip(msg):
    t, payload = decode_frame(encode_message(msg))
    return decode_message(t, payload)


@settings(max_examples=50)
@given(param_dicts, metrics, st.integers(0, 2**31), st.integers(1, 2**40))
def test_message_roundtrips(p, m, rnd, n):
    cfg = {"epochs": 3, "lr": 0.5}
    out = roundtrip(FitInstruction(rnd, p, cfg))
    assert out.round == rnd and out.config == cfg and same_params(out.params, p)
    out = roundtrip(FitResult(rnd, p, n, m))
    assert (out.round, out.num_samples, out.metrics) == (rnd, n, m) and same_params(out.params, p)
    out = roundtrip(EvaluateInstruction(rnd, 7, p))
    assert (out.round, out.n_samples) == (rnd, 7) and same_params(out.params, p)
    assert roundtrip(EvaluateResult(rnd, n, m)) == EvaluateResult(rnd, n, m)
    assert same_params(roundtrip(Shutdown(p)).params, p)


def test_small_messages_roundtrip():
    assert roundtrip(JoinRequest("plant-a")) == JoinRequest("plant-a")
    assert roundtrip(JoinAck(3)) == JoinAck(3)
    assert roundtrip(Error("boom")) == Error("boom")


@settings(max_examples=1000)
@given(st.sampled_from(list(MsgType)), st.binary(max_size=80))
def test_random_payloads_never_escape_as_other_errors(t, payload):
    try:
        decode_message(t, payload)
    except ProtocolError:
        pass


@settings(max_examples=300)
@given(param_dicts, metrics, st.data())
def test_mutated_valid_payloads_fail_cleanly(p, m, data):
    frame = encode_message(FitResult(1, p, 3, m))
    payload = bytearray(frame[HEADER.size:])
    for _ in range(data.draw(st.integers(1, 4))):
        i = data.draw(st.integers(0, len(payload) - 1))
        payload[i] = data.draw(st.integers(0, 255))
    try:
        decode_message(MsgType.FIT_RESULT, bytes(payload))
    except ProtocolError:
        pass


def test_direction_whitelists_are_disjoint_apart_from_error():
    assert CLIENT_TO_SERVER & SERVER_TO_CLIENT == {MsgType.ERROR}
    assert MsgType.SHUTDOWN not in CLIENT_TO_SERVER
    assert MsgType.FIT_INSTRUCTION not in CLIENT_TO_SERVER
