from __future__ import annotations

import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings
from hypothesis import strategies as st

from spo2warn.artifact import ModelArtifact, fingerprint
from spo2warn.explain import UnsupportedAttributionError
from spo2warn.models.baseline import LogisticModel
from spo2warn.models.boosting import LEAF, GBTConfig, GBTModel, RegressionTree
from spo2warn.pipeline import NormalizationStats, impute_windows
from spo2warn.serve import EndpointError, Session, StreamHandler, parse_endpoint
from spo2warn.serve.app import create_app
from spo2warn.serve.server import serve_stdio

STATS = NormalizationStats(np.full(60, 96.0), np.full(60, 2.0))


def _gbt():
    # drop in the final minute raises risk
    tree = RegressionTree(
        np.array([59, LEAF, LEAF]), np.array([-1.0, 0.0, 0.0]), np.array([1, LEAF, LEAF]),
        np.array([2, LEAF, LEAF]), np.array([0.0, 2.0, -2.0]), np.array([2.0, 1.0, 1.0]),
    )
    return GBTModel(-1.0, [tree], GBTConfig())


def _art(model):
    bg = np.random.default_rng(0).normal(size=(8, 60))
    return ModelArtifact(model, STATS, 0, fingerprint(b"x"), bg)


@pytest.fixture
def gbt_art():
    return _art(_gbt())


@pytest.fixture
def logistic_art():
    return _art(LogisticModel(np.linspace(-0.1, 0.1, 60), -3.0))


def _line(**rec):
    return json.dumps(rec)


# session buffer


def test_first_sample_pads_missing_history():
    s = Session("a")
    buf = s.push(3, 97.0)
    assert np.isnan(buf[:-1]).all() and buf[-1] == 97.0


def test_skipped_minutes_become_missing():
    s = Session("a")
    s.push(0, 97.0)
    buf = s.push(3, 95.0)
    assert buf[-4] == 97.0 and np.isnan(buf[-3:-1]).all() and buf[-1] == 95.0
    assert np.isnan(s.push(200, None)).all()


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(1, 70), st.one_of(st.none(), st.floats(60, 100))), min_size=1, max_size=40))
def test_buffer_equals_batch_window(steps):
    s = Session("a")
    trace: dict[int, float] = {}
    minute = -1
    for gap, value in steps:
        minute += gap
        buf = s.push(minute, value)
        if value is not None:
            trace[minute] = value
    expect = np.array([trace.get(m, np.nan) for m in range(minute - 59, minute + 1)])
    np.testing.assert_array_equal(buf, expect)


def test_out_of_order_leaves_state_unchanged(gbt_art):
    h = StreamHandler(gbt_art)
    h.handle_line(_line(session="s", minute=5, spo2=97.0))
    before = h.sessions["s"].buffer.copy()
    for minute in (5, 2):
        out = json.loads(h.handle_line(_line(session="s", minute=minute, spo2=80.0)))
        assert "not after" in out["error"] and out["session"] == "s" and out["minute"] == minute
    assert np.array_equal(h.sessions["s"].buffer, before, equal_nan=True)
    assert h.sessions["s"].last_minute == 5


def test_risk_matches_batch_prediction(gbt_art):
    h = StreamHandler(gbt_art)
    rng = np.random.default_rng(1)
    values = [None if rng.random() < 0.2 else float(rng.uniform(85, 100)) for _ in range(90)]
    for minute, v in enumerate(values):
        out = json.loads(h.handle_line(_line(session="s", minute=minute, spo2=v)))
        raw = np.array([np.nan if x is None else x for x in values[max(0, minute - 59): minute + 1]])
        raw = np.r_[np.full(60 - raw.size, np.nan), raw]
        feats = (impute_windows(raw[None, :])[0] - STATS.mean) / STATS.std
        assert out["risk"] == gbt_art.model.predict_risk(feats[None, :])[0]


def test_sessions_are_isolated(gbt_art):
    h = StreamHandler(gbt_art)
    a = json.loads(h.handle_line(_line(session="a", minute=0, spo2=99.0)))
    h.handle_line(_line(session="b", minute=0, spo2=60.0))
    again = StreamHandler(gbt_art).handle_line(_line(session="a", minute=0, spo2=99.0))
    assert a == json.loads(again)
    assert set(h.sessions) == {"a", "b"}
    assert h.drop("a") and not h.drop("a")


# protocol


@pytest.mark.parametrize(
    "line, needle",
    [
        ("{not json", "malformed line"),
        ("[1, 2]", "malformed line"),
        (_line(session="s", minute=-1, spo2=97.0), "minute"),
        (_line(session="s", minute=1.5, spo2=97.0), "minute"),
        (_line(session="s", minute=1, spo2=101.0), "spo2"),
        (_line(session="s", minute=1), "spo2"),
        (_line(session="", minute=1, spo2=97.0), "session"),
        (_line(session="s", minute=1, spo2=97.0, extra=1), "extra"),
        (_line(session="s", minute=1, spo2=97.0, attrib="yes"), "attrib"),
    ],
)
def test_invalid_lines_get_error_records(gbt_art, line, needle):
    h = StreamHandler(gbt_art)
    out = json.loads(h.handle_line(line))
    assert needle in out["error"]
    assert out["line"] == line
    assert h.sessions == {}


def test_error_echo_is_truncated(gbt_art):
    line = _line(session="s" * 600, minute=0, spo2=97.0)
    out = json.loads(StreamHandler(gbt_art).handle_line(line))
    assert out["line"] == line[:512] + "..."


def test_blank_lines_are_skipped(gbt_art):
    assert StreamHandler(gbt_art).handle_line("   \n") is None


def test_missing_sample_is_accepted(gbt_art):
    out = json.loads(StreamHandler(gbt_art).handle_line(_line(session="s", minute=0, spo2=None)))
    assert 0.0 < out["risk"] < 1.0 and "top_attributions" not in out


# attribution


def test_attrib_flag_is_sticky(gbt_art):
    h = StreamHandler(gbt_art)
    first = json.loads(h.handle_line(_line(session="s", minute=0, spo2=97.0, attrib=True)))
    second = json.loads(h.handle_line(_line(session="s", minute=1, spo2=88.0)))
    third = json.loads(h.handle_line(_line(session="s", minute=2, spo2=88.0, attrib=False)))
    assert len(first["top_attributions"]) == 3
    top = second["top_attributions"][0]
    assert top == {"minute": 1, "offset": 0, "value": top["value"]} and top["value"] > 0
    assert "top_attributions" not in third


def test_server_default_attrib(gbt_art):
    out = json.loads(StreamHandler(gbt_art, attrib=True).handle_line(_line(session="s", minute=0, spo2=97.0)))
    assert "top_attributions" in out


def test_attrib_unsupported_kind(logistic_art):
    with pytest.raises(UnsupportedAttributionError, match="logistic"):
        StreamHandler(logistic_art, attrib=True)
    h = StreamHandler(logistic_art)
    out = json.loads(h.handle_line(_line(session="s", minute=0, spo2=97.0, attrib=True)))
    assert "not supported" in out["error"] and h.sessions == {}


# transports


@pytest.mark.parametrize(
    "spec, scheme, host, port, path",
    [
        ("stdio", "stdio", "", 0, ""),
        ("-", "stdio", "", 0, ""),
        ("tcp://127.0.0.1:7000", "tcp", "127.0.0.1", 7000, ""),
        ("http://localhost:0", "http", "localhost", 0, ""),
        ("unix:///tmp/x.sock", "unix", "", 0, "/tmp/x.sock"),
    ],
)
def test_parse_endpoint(spec, scheme, host, port, path):
    ep = parse_endpoint(spec)
    assert (ep.scheme, ep.host, ep.port, ep.path) == (scheme, host, port, path)


@pytest.mark.parametrize("spec", ["tcp://host", "tcp://:80", "ftp://x:1", "unix://", "tcp://h:99999"])
def test_bad_endpoints(spec):
    with pytest.raises(EndpointError):
        parse_endpoint(spec)


def test_stdio_one_response_per_line(gbt_art):
    stdin = io.StringIO(_line(session="s", minute=0, spo2=97.0) + "\n\n" + "oops\n" + _line(session="s", minute=1, spo2=None) + "\n")
    stdout = io.StringIO()
    assert serve_stdio(StreamHandler(gbt_art), stdin, stdout) == 0
    lines = [json.loads(l) for l in stdout.getvalue().splitlines()]
    assert [("risk" in l, "error" in l) for l in lines] == [(True, False), (False, True), (True, False)]


# HTTP


def test_http_routes(gbt_art):
    client = TestClient(create_app(gbt_art))
    assert client.get("/healthz").json() == {"status": "ok"}
    info = client.get("/v1/model").json()
    assert info["model_kind"] == "gbt" and info["attrib_default"] is False

    ok = client.post("/v1/samples", json={"session": "s", "minute": 3, "spo2": 97.0})
    assert ok.status_code == 200 and set(ok.json()) == {"session", "minute", "risk"}
    stale = client.post("/v1/samples", json={"session": "s", "minute": 3, "spo2": 97.0})
    assert stale.status_code == 409 and "not after" in stale.json()["error"]
    assert client.post("/v1/samples", json={"session": "s", "minute": 4}).status_code == 422

    body = _line(session="t", minute=0, spo2=97.0) + "\n" + "bad\n" + _line(session="t", minute=1, spo2=96.0) + "\n"
    resp = client.post("/v1/stream", content=body)
    assert resp.headers["content-type"].startswith("application/x-ndjson")
    out = [json.loads(l) for l in resp.text.splitlines()]
    assert len(out) == 3 and "error" in out[1]
    direct = StreamHandler(gbt_art)
    assert [json.loads(direct.handle_line(l)) for l in body.splitlines()] == out

    assert client.delete("/v1/sessions/t").json() == {"session": "t", "dropped": True}
    assert client.delete("/v1/sessions/t").status_code == 404


def test_interleaved_sessions_match_sequential(gbt_art):
    rng = np.random.default_rng(2)
    streams = {s: [(m, float(rng.uniform(80, 100))) for m in range(0, 120, int(rng.integers(1, 4)))] for s in "abc"}
    sequential = StreamHandler(gbt_art)
    expect = {s: [sequential.handle_line(_line(session=s, minute=m, spo2=v)) for m, v in recs] for s, recs in streams.items()}
    mixed = StreamHandler(gbt_art)
    got = {s: [] for s in streams}
    queues = {s: list(recs) for s, recs in streams.items()}
    while any(queues.values()):
        s = rng.choice([k for k, q in queues.items() if q])
        m, v = queues[s].pop(0)
        got[s].append(mixed.handle_line(_line(session=s, minute=m, spo2=v)))
    assert got == expect


def test_soak_keeps_buffer_bounded(gbt_art):
    h = StreamHandler(gbt_art)
    h.handle_line(_line(session="s", minute=0, spo2=97.0))
    buf = h.sessions["s"].buffer
    for m in range(1, 1000):
        h.handle_line(_line(session="s", minute=m, spo2=None if m % 7 == 0 else 96.0))
    assert h.sessions["s"].buffer is buf and buf.shape == (60,)
    assert len(h.sessions) == 1
