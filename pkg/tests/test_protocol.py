import random
import socket

import pytest
from hypothesis import given
from hypothesis import strategies as st

from minifed.model import MonitorRecord
from minifed.protocol import (
    ACK,
    FrameConnectionError,
    FrameDecoder,
    FrameError,
    MonitorCodecError,
    ProtocolError,
    Request,
    Response,
    decode_frames,
    decode_monitor_record,
    decode_request,
    decode_response,
    encode_monitor_record,
    encode_request,
    encode_response,
    frame_read,
    frame_write,
)

header_names = st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-",
                       min_size=1, max_size=12).filter(lambda n: n.lower() not in
                                                       ("authorization", "content-length",
                                                        "location", "x-cache"))
header_values = st.text(st.characters(blacklist_characters="\r\n", blacklist_categories=("Cs",)),
                        max_size=20)
headers = st.lists(st.tuples(header_names, header_values), max_size=4).map(tuple)
paths = st.lists(st.text(alphabet="abc/._-%09", min_size=1, max_size=6), min_size=1, max_size=4) \
    .map(lambda cs: "/" + "/".join(cs))


class TestRequest:
    def test_decode_get(self):
        assert decode_request(b"GET /ligo/a OSDF-MINI/1\r\n\r\n") == Request("GET", "/ligo/a")

    def test_encode_locate(self):
        assert encode_request(Request("LOCATE", "/nova/f")) == b"LOCATE /nova/f OSDF-MINI/1\r\n\r\n"

    def test_stats_has_empty_path(self):
        assert encode_request(Request("STATS")) == b"STATS  OSDF-MINI/1\r\n\r\n"
        assert decode_request(b"STATS  OSDF-MINI/1\r\n\r\n") == Request("STATS")

    def test_headers(self):
        raw = b"GET /a OSDF-MINI/1\r\nAuthorization: Bearer t\r\nX-Client: me\r\n\r\n"
        req = decode_request(raw)
        assert req.header("authorization") == "Bearer t"
        assert req.headers == (("Authorization", "Bearer t"), ("X-Client", "me"))
        assert encode_request(req) == raw

    def test_unknown_method(self):
        with pytest.raises(ProtocolError, match="unknown method"):
            decode_request(b"PUT /x OSDF-MINI/1\r\n\r\n")

    def test_error_carries_offset(self):
        with pytest.raises(ProtocolError) as err:
            decode_request(b"GET /a OSDF-MINI/1\r\nBad Header\r\n\r\n")
        assert err.value.offset == 20

    @given(st.sampled_from(["GET", "LOCATE"]), paths, headers)
    def test_round_trip(self, method, path, hdrs):
        req = Request(method, path, hdrs)
        assert decode_request(encode_request(req)) == req


class TestResponse:
    def test_encode_200(self):
        assert encode_response(Response(200, (("Content-Length", "2"),), b"ab")) == \
            b"OSDF-MINI/1 200 OK\r\nContent-Length: 2\r\n\r\nab"

    def test_encode_302(self):
        assert encode_response(Response.redirect("h:1")) == \
            b"OSDF-MINI/1 302 Found\r\nLocation: h:1\r\n\r\n"

    def test_short_body(self):
        with pytest.raises(ProtocolError):
            decode_response(b"OSDF-MINI/1 200 OK\r\nContent-Length: 5\r\n\r\nab")

    def test_reason_text_is_not_part_of_value(self):
        assert decode_response(b"OSDF-MINI/1 404 Gone Fishing\r\n\r\n") == Response(404)

    @given(st.binary(max_size=300), headers, st.sampled_from(["HIT", "MISS", None]))
    def test_round_trip_200(self, body, hdrs, xc):
        extra = hdrs + ((("X-Cache", xc),) if xc else ())
        resp = Response.ok(body, *extra)
        assert decode_response(encode_response(resp)) == resp

    @given(st.sampled_from([401, 403, 404, 500]), headers)
    def test_round_trip_errors(self, code, hdrs):
        resp = Response(code, hdrs)
        assert decode_response(encode_response(resp)) == resp

    @pytest.mark.parametrize("resp", [
        Response(200, (), b"x"),
        Response(404, (), b"x"),
        Response(302),
        Response(418),
        Response(200, (("Content-Length", "1"), ("X-Cache", "MAYBE")), b"x"),
    ])
    def test_encode_rejects_invalid(self, resp):
        with pytest.raises(ProtocolError):
            encode_response(resp)


# (bytes, decoder, error class); documented in docs/protocol.md
MALFORMED = [
    (b"PUT /x OSDF-MINI/1\r\n\r\n", decode_request, ProtocolError),
    (b"GET /x HTTP/1.1\r\n\r\n", decode_request, ProtocolError),
    (b"GET /x OSDF-MINI/1\r\n", decode_request, ProtocolError),
    (b"GET /x OSDF-MINI/1\r\nNoColon\r\n\r\n", decode_request, ProtocolError),
    (b"GET /x OSDF-MINI/1\r\nBad Name: v\r\n\r\n", decode_request, ProtocolError),
    (b"GET /x OSDF-MINI/1\r\nName:v\r\n\r\n", decode_request, ProtocolError),
    (b"GET /x OSDF-MINI/1\r\nAuthorization: a\r\nAuthorization: b\r\n\r\n", decode_request, ProtocolError),
    (b"GET x OSDF-MINI/1\r\n\r\n", decode_request, ProtocolError),
    (b"STATS /x OSDF-MINI/1\r\n\r\n", decode_request, ProtocolError),
    (b"GET  /x OSDF-MINI/1\r\n\r\n", decode_request, ProtocolError),
    (b"GET /x OSDF-MINI/1\r\n\r\nbody", decode_request, ProtocolError),
    (b"GET /\xff OSDF-MINI/1\r\n\r\n", decode_request, ProtocolError),
    (b"OSDF-MINI/2 200 OK\r\nContent-Length: 0\r\n\r\n", decode_response, ProtocolError),
    (b"OSDF-MINI/1 299 Odd\r\n\r\n", decode_response, ProtocolError),
    (b"OSDF-MINI/1 200 OK\r\n\r\n", decode_response, ProtocolError),
    (b"OSDF-MINI/1 200 OK\r\nContent-Length: 3\r\n\r\nab", decode_response, ProtocolError),
    (b"OSDF-MINI/1 200 OK\r\nContent-Length: 1\r\n\r\nab", decode_response, ProtocolError),
    (b"OSDF-MINI/1 200 OK\r\nContent-Length: x\r\n\r\n", decode_response, ProtocolError),
    (b"OSDF-MINI/1 302 Found\r\n\r\n", decode_response, ProtocolError),
    (b"OSDF-MINI/1 404 Not Found\r\n\r\nab", decode_response, ProtocolError),
    (b"not json", decode_monitor_record, MonitorCodecError),
    (b"[]", decode_monitor_record, MonitorCodecError),
    (b'{"stream":"g"}', decode_monitor_record, MonitorCodecError),
    (b'{"stream":"q","ts_ms":1,"host":"h","component":"cache","event":"hit","path":"/a",'
     b'"bytes":1,"client":"","xfer_id":"x"}', decode_monitor_record, MonitorCodecError),
    (b'{"stream":"f","ts_ms":1,"host":"h","component":"cache","event":"hit","path":"/a",'
     b'"bytes":1,"client":"","xfer_id":"x"}', decode_monitor_record, MonitorCodecError),
    (b'{"stream":"g","ts_ms":1,"host":"h","component":"cache","path":"/a",'
     b'"bytes":1,"client":"","xfer_id":"x"}', decode_monitor_record, MonitorCodecError),
    (b'{"stream":"g","ts_ms":"1","host":"h","component":"cache","event":"hit","path":"/a",'
     b'"bytes":1,"client":"","xfer_id":"x"}', decode_monitor_record, MonitorCodecError),
    (b'{"stream":"g","ts_ms":1,"host":"h","component":"cache","event":"hit","path":"/a",'
     b'"bytes":1,"client":"","xfer_id":"x","extra":1}', decode_monitor_record, MonitorCodecError),
    (b" " * 8193, decode_monitor_record, MonitorCodecError),
    (b"\xff\xfe", decode_monitor_record, MonitorCodecError),
    (b"\x01\x00\x00\x00", decode_frames, FrameError),
    (b"\x00\x00\x00\x05abc", decode_frames, FrameConnectionError),
    (b"\x00\x00", decode_frames, FrameConnectionError),
]


@pytest.mark.parametrize("data, decoder, error", MALFORMED)
def test_malformed_corpus(data, decoder, error):
    with pytest.raises(error):
        decoder(data)


def test_corpus_is_large_enough():
    assert len(MALFORMED) >= 20


def make_record(**kw):
    d = dict(stream="g", ts_ms=1700000000000, host="cache-a", component="cache", event="hit",
             path="/ligo/a", bytes=100, client="1.2.3.4", xfer_id="abc")
    d.update(kw)
    return MonitorRecord(**d)


class TestMonitorCodec:
    def test_round_trip(self):
        rec = make_record()
        assert decode_monitor_record(encode_monitor_record(rec)) == rec

    def test_missing_event(self):
        import json
        d = json.loads(encode_monitor_record(make_record()))
        del d["event"]
        with pytest.raises(MonitorCodecError, match="event"):
            decode_monitor_record(json.dumps(d).encode())

    def test_f_record_with_hit(self):
        with pytest.raises(MonitorCodecError):
            decode_monitor_record(encode_monitor_record(make_record()).replace(b'"g"', b'"f"'))

    def test_oversize_encode(self):
        with pytest.raises(MonitorCodecError):
            encode_monitor_record(make_record(client="x" * 9000))

    def test_field_names(self):
        import json
        rec = make_record(stream="f", event="close", duration_ms=4)
        assert set(json.loads(encode_monitor_record(rec))) == {
            "stream", "ts_ms", "host", "component", "event", "path", "bytes", "duration_ms",
            "client", "xfer_id"}


class TestFraming:
    def test_example(self):
        assert frame_write(b"{}") == bytes.fromhex("00000002 7B7D")

    def test_empty(self):
        assert frame_write(b"") == b"\x00\x00\x00\x00"

    def test_oversize(self):
        class Big(bytes):
            def __len__(self):
                return 1 << 24
        with pytest.raises(FrameError):
            frame_write(Big())

    def test_concatenated(self):
        payloads = [b"a", b"", b"xyz" * 100]
        assert decode_frames(b"".join(frame_write(p) for p in payloads)) == payloads

    def test_incremental(self):
        dec = FrameDecoder()
        data = frame_write(b"hello") + frame_write(b"w")
        out = []
        for i in range(len(data)):
            out += dec.feed(data[i:i + 1])
        assert out == [b"hello", b"w"]

    def test_random_round_trips(self):
        rng = random.Random(1)
        payloads = [rng.randbytes(rng.randint(0, 64)) for _ in range(10_000)]
        assert decode_frames(b"".join(frame_write(p) for p in payloads)) == payloads

    def test_socket_read_and_short_read(self):
        a, b = socket.socketpair()
        with a, b:
            a.sendall(frame_write(b"ok") + b"\x00\x00\x00\x09abc")
            a.shutdown(socket.SHUT_WR)
            assert frame_read(b) == b"ok"
            with pytest.raises(FrameConnectionError):
                frame_read(b)

    def test_ack_byte(self):
        assert ACK == b"\x06"
