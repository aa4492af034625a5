import pytest
from hypothesis import given, strategies as st

from lightfaas.model import (
    ComponentKind, ComponentRecord, ConfigError, EndpointSet, FunctionSpec, MalformedRecord,
    SandboxRecord, SchedulingConfig, ceil_div, decode_sandbox, decode_sandboxes, encode_sandbox,
    encode_sandboxes, parse_config, parse_duration,
)


def oracle_bytes(sid: int, ip: str, port: int, worker: int) -> bytes:
    """Independent big-endian layout built digit by digit."""
    out = bytearray()
    for shift in range(56, -8, -8):
        out.append((sid >> shift) & 0xFF)
    out += bytes(int(p) for p in ip.split("."))
    out += bytes([port >> 8, port & 0xFF, worker >> 8, worker & 0xFF])
    return bytes(out)


def test_codec_known_vector():
    rec = SandboxRecord(1, "10.0.0.2", 8080, 3)
    assert encode_sandbox(rec).hex() == "0000000000000001" "0a000002" "1f90" "0003"
    assert decode_sandbox(bytes.fromhex("00000000000000010a0000021f900003")) == rec


@pytest.mark.parametrize("n", [0, 15, 17, 32])
def test_codec_rejects_wrong_length(n):
    with pytest.raises(MalformedRecord):
        decode_sandbox(b"\x00" * n)


def test_record_list_length_must_be_multiple():
    with pytest.raises(MalformedRecord):
        decode_sandboxes(b"\x00" * 33)
    assert decode_sandboxes(b"") == []


records = st.builds(
    SandboxRecord,
    st.integers(0, 2**64 - 1),
    st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t))),
    st.integers(0, 65535),
    st.integers(0, 65535),
)


@given(records)
def test_codec_matches_oracle_and_roundtrips(rec):
    b = encode_sandbox(rec)
    assert b == oracle_bytes(rec.id, rec.ip, rec.port, rec.worker_index)
    assert decode_sandbox(b) == rec


@given(st.lists(records, max_size=20))
def test_endpoint_set_roundtrip(recs):
    es = EndpointSet("f", 7, tuple(recs))
    assert EndpointSet.from_dict(es.to_dict()) == es
    assert decode_sandboxes(encode_sandboxes(recs)) == recs


def test_function_spec_bytes_roundtrip():
    spec = FunctionSpec("f", "sleep:5", 9000, SchedulingConfig(concurrency_target=4, max_scale=3))
    assert FunctionSpec.from_bytes(spec.to_bytes()) == spec


def test_component_identity_ignores_index():
    a = ComponentRecord(ComponentKind.WORKER_NODE, "w0", "127.0.0.1", 1, 1000, 2048, index=0)
    b = ComponentRecord.from_dict({**a.to_dict(), "index": 5})
    assert a.same_identity(b) and a != b


@pytest.mark.parametrize("text,expected", [("5", 5.0), ("250ms", 0.25), ("2m", 120.0), ("1.5s", 1.5), ("1h", 3600.0)])
def test_parse_duration(text, expected):
    assert parse_duration(text) == pytest.approx(expected)


def test_parse_config_defaults_and_comments():
    cfg = parse_config("# nothing\n\nconcurrency_target = 4  # inline\nstable_window = 30s\nmax_scale = none\n")
    assert cfg == SchedulingConfig(concurrency_target=4, stable_window=30.0, max_scale=None)
    assert parse_config("") == SchedulingConfig()


def test_parse_config_overrides_win():
    cfg = parse_config("min_scale = 1\n", overrides={"min_scale": "3"})
    assert cfg.min_scale == 3


@pytest.mark.parametrize("text", [
    "bogus = 1",
    "concurrency_target",
    "concurrency_target = many",
    "concurrency_target = 0",
    "panic_window = 90\nstable_window = 60",
    "min_scale = 5\nmax_scale = 2",
    "stable_window = soon",
])
def test_parse_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@given(st.integers(0, 10**9), st.integers(1, 10**6))
def test_ceil_div(a, b):
    assert ceil_div(a, b) == (a + b - 1) // b
