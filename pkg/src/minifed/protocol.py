"""Byte-exact codecs: data-protocol requests/responses, monitor datagrams, TCP frames.

See docs/protocol.md for the grammar and hex dumps.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from typing import Optional

from .model import MonitorRecord

VERSION = "OSDF-MINI/1"
METHODS = ("GET", "LOCATE", "STATS")
REASONS = {
    200: "OK",
    302: "Found",
    401: "Unauthorized",
    403: "Forbidden",
    404: "Not Found",
    500: "Internal Error",
}
CRLF = b"\r\n"
HEAD_END = b"\r\n\r\n"
MAX_HEAD = 16 * 1024
MAX_DATAGRAM = 8192
MAX_FRAME = 1 << 24
ACK = b"\x06"

_HEADER_NAME = re.compile(r"[A-Za-z0-9-]+\Z")
_FRAME_LEN = struct.Struct(">I")


class ProtocolError(ValueError):
    """Malformed request or response; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MonitorCodecError(ValueError):
    pass


class FrameError(ValueError):
    pass


class FrameConnectionError(ConnectionError):
    """Stream ended in the middle of a frame or ack."""


Headers = tuple[tuple[str, str], ...]


def _get(headers: Headers, name: str) -> Optional[str]:
    name = name.lower()
    for k, v in headers:
        if k.lower() == name:
            return v
    return None


def _count(headers: Headers, name: str) -> int:
    name = name.lower()
    return sum(1 for k, _ in headers if k.lower() == name)


def _check_headers(headers: Headers) -> None:
    for name, value in headers:
        if not isinstance(name, str) or not _HEADER_NAME.match(name):
            raise ProtocolError(f"bad header name {name!r}")
        if not isinstance(value, str) or "\r" in value or "\n" in value:
            raise ProtocolError(f"bad header value for {name!r}")


@dataclass(frozen=True)
class Request:
    method: str
    path: str = ""
    headers: Headers = ()

    def header(self, name: str) -> Optional[str]:
        return _get(self.headers, name)


@dataclass(frozen=True)
class Response:
    code: int
    headers: Headers = ()
    body: bytes = b""

    def header(self, name: str) -> Optional[str]:
        return _get(self.headers, name)

    @classmethod
    def ok(cls, body: bytes, *extra: tuple[str, str]) -> "Response":
        return cls(200, (("Content-Length", str(len(body))),) + tuple(extra), body)

    @classmethod
    def ok_json(cls, obj) -> "Response":
        body = json.dumps(obj, sort_keys=True).encode("utf-8")
        return cls.ok(body, ("Content-Type", "application/json"))

    @classmethod
    def redirect(cls, location: str) -> "Response":
        return cls(302, (("Location", location),))

    @classmethod
    def status(cls, code: int) -> "Response":
        return cls(code)

    def json(self):
        return json.loads(self.body.decode("utf-8"))


# -- requests ------------------------------------------------------------------

def _check_request(req: Request) -> None:
    if req.method not in METHODS:
        raise ProtocolError(f"unknown method {req.method!r}")
    if req.method == "STATS":
        if req.path:
            raise ProtocolError("STATS carries no path")
    elif not req.path.startswith("/") or any(c in req.path for c in " \r\n\t"):
        raise ProtocolError(f"bad path {req.path!r}")
    _check_headers(req.headers)
    if _count(req.headers, "Authorization") > 1:
        raise ProtocolError("more than one Authorization header")


def encode_request(req: Request) -> bytes:
    _check_request(req)
    lines = [f"{req.method} {req.path} {VERSION}"]
    lines += [f"{k}: {v}" for k, v in req.headers]
    return ("\r\n".join(lines) + "\r\n\r\n").encode("utf-8")


def _split_head(data: bytes) -> tuple[list[tuple[int, str]], int]:
    """Split a message head into (offset, line) pairs; returns the body offset."""
    end = data.find(HEAD_END)
    if end < 0:
        raise ProtocolError("head not terminated by CRLF CRLF", len(data))
    lines, pos = [], 0
    for raw in data[:end].split(CRLF):
        try:
            lines.append((pos, raw.decode("utf-8")))
        except UnicodeDecodeError as exc:
            raise ProtocolError("head is not UTF-8", pos + exc.start) from None
        pos += len(raw) + 2
    return lines, end + 4


def _parse_headers(lines: list[tuple[int, str]]) -> Headers:
    headers = []
    for off, line in lines:
        name, sep, value = line.partition(":")
        if not sep or not _HEADER_NAME.match(name):
            raise ProtocolError(f"malformed header line {line!r}", off)
        if not value.startswith(" "):
            raise ProtocolError("header separator must be ': '", off + len(name))
        headers.append((name, value[1:]))
    return tuple(headers)


def decode_request(data: bytes) -> Request:
    lines, body_at = _split_head(data)
    if body_at != len(data):
        raise ProtocolError("trailing bytes after request head", body_at)
    off, line = lines[0]
    parts = line.split(" ")
    if len(parts) != 3:
        raise ProtocolError(f"malformed request line {line!r}", off)
    method, path, version = parts
    if method not in METHODS:
        raise ProtocolError(f"unknown method {method!r}", off)
    if version != VERSION:
        raise ProtocolError(f"bad version tag {version!r}", off + len(method) + len(path) + 2)
    headers = _parse_headers(lines[1:])
    req = Request(method, path, headers)
    try:
        _check_request(req)
    except ProtocolError as exc:
        raise ProtocolError(str(exc).rsplit(" (at", 1)[0], off + len(method) + 1) from None
    return req


# -- responses -----------------------------------------------------------------

def _check_response(resp: Response) -> None:
    if resp.code not in REASONS:
        raise ProtocolError(f"unknown status code {resp.code}")
    _check_headers(resp.headers)
    length = resp.header("Content-Length")
    if length is not None:
        if not length.isdigit() or _count(resp.headers, "Content-Length") != 1:
            raise ProtocolError(f"bad Content-Length {length!r}")
        if int(length) != len(resp.body):
            raise ProtocolError("Content-Length does not match body length")
    if resp.code == 200:
        if length is None:
            raise ProtocolError("200 response requires Content-Length")
        xc = resp.header("X-Cache")
        if xc is not None and xc not in ("HIT", "MISS"):
            raise ProtocolError(f"bad X-Cache value {xc!r}")
    elif resp.body:
        raise ProtocolError(f"{resp.code} response must have an empty body")
    if resp.code == 302 and not resp.header("Location"):
        raise ProtocolError("302 response requires Location")


def encode_response(resp: Response) -> bytes:
    _check_response(resp)
    lines = [f"{VERSION} {resp.code} {REASONS[resp.code]}"]
    lines += [f"{k}: {v}" for k, v in resp.headers]
    return ("\r\n".join(lines) + "\r\n\r\n").encode("utf-8") + resp.body


def decode_response(data: bytes) -> Response:
    lines, body_at = _split_head(data)
    off, line = lines[0]
    version, _, rest = line.partition(" ")
    if version != VERSION:
        raise ProtocolError(f"bad version tag {version!r}", off)
    code_text, _, _reason = rest.partition(" ")
    if not code_text.isdigit() or int(code_text) not in REASONS:
        raise ProtocolError(f"bad status code {code_text!r}", off + len(version) + 1)
    headers = _parse_headers(lines[1:])
    length = _get(headers, "Content-Length")
    available = len(data) - body_at
    if length is not None:
        if not length.isdigit():
            raise ProtocolError(f"bad Content-Length {length!r}", body_at)
        if int(length) != available:
            raise ProtocolError(
                f"Content-Length {length} but {available} body bytes available", body_at)
    elif available:
        raise ProtocolError("body without Content-Length", body_at)
    resp = Response(int(code_text), headers, data[body_at:])
    try:
        _check_response(resp)
    except ProtocolError as exc:
        raise ProtocolError(str(exc).rsplit(" (at", 1)[0], body_at) from None
    return resp


# -- socket helpers --------------------------------------------------------------

def read_head(sock) -> bytes:
    """Read from ``sock`` up to and including the blank line ending a head."""
    buf = b""
    while HEAD_END not in buf:
        chunk = sock.recv(4096)
        if not chunk:
            raise ProtocolError("connection closed before end of head", len(buf))
        buf += chunk
        if len(buf) > MAX_HEAD and HEAD_END not in buf:
            raise ProtocolError("head too large", MAX_HEAD)
    return buf


def read_response(sock) -> Response:
    buf = read_head(sock)
    end = buf.index(HEAD_END) + 4
    lines, _ = _split_head(buf[:end])
    length = _get(_parse_headers(lines[1:]), "Content-Length")
    need = int(length) if length and length.isdigit() else 0
    body = buf[end:]
    while len(body) < need:
        chunk = sock.recv(min(1 << 20, need - len(body)))
        if not chunk:
            break
        body += chunk
    return decode_response(buf[:end] + body)


# -- monitoring datagrams ----------------------------------------------------------

_RECORD_FIELDS = ("stream", "ts_ms", "host", "component", "event", "path", "bytes",
                  "client", "xfer_id")
_OPTIONAL_FIELDS = ("duration_ms",)


def record_to_dict(rec: MonitorRecord) -> dict:
    out = {name: getattr(rec, name) for name in _RECORD_FIELDS}
    if rec.duration_ms is not None:
        out["duration_ms"] = rec.duration_ms
    return out


def encode_monitor_record(rec: MonitorRecord) -> bytes:
    data = json.dumps(record_to_dict(rec), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False).encode("utf-8")
    if len(data) > MAX_DATAGRAM:
        raise MonitorCodecError(f"encoded record is {len(data)} bytes (limit {MAX_DATAGRAM})")
    return data


def record_from_dict(obj) -> MonitorRecord:
    if not isinstance(obj, dict):
        raise MonitorCodecError("record must be a JSON object")
    missing = [k for k in _RECORD_FIELDS if k not in obj]
    if missing:
        raise MonitorCodecError(f"missing field(s): {', '.join(missing)}")
    unknown = set(obj) - set(_RECORD_FIELDS) - set(_OPTIONAL_FIELDS)
    if unknown:
        raise MonitorCodecError(f"unknown field(s): {', '.join(sorted(unknown))}")
    if obj["stream"] not in ("f", "g"):
        raise MonitorCodecError(f"unknown stream tag {obj['stream']!r}")
    try:
        return MonitorRecord(**obj)
    except (TypeError, ValueError) as exc:
        raise MonitorCodecError(str(exc)) from None


def decode_monitor_record(data: bytes) -> MonitorRecord:
    if len(data) > MAX_DATAGRAM:
        raise MonitorCodecError(f"datagram is {len(data)} bytes (limit {MAX_DATAGRAM})")
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MonitorCodecError(f"not UTF-8 JSON: {exc}") from None
    return record_from_dict(obj)


# -- framing --------------------------------------------------------------------------

def frame_write(payload: bytes) -> bytes:
    if len(payload) >= MAX_FRAME:
        raise FrameError(f"payload of {len(payload)} bytes exceeds frame limit")
    return _FRAME_LEN.pack(len(payload)) + payload


def read_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise FrameConnectionError(f"short read: wanted {n} bytes, got {len(buf)}")
        buf += chunk
    return bytes(buf)


def frame_read(sock) -> bytes:
    (length,) = _FRAME_LEN.unpack(read_exact(sock, 4))
    if length >= MAX_FRAME:
        raise FrameError(f"declared frame length {length} exceeds limit")
    return read_exact(sock, length)


class FrameDecoder:
    """Incremental decoder for a byte stream of concatenated frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        frames = []
        while len(self._buf) >= 4:
            (length,) = _FRAME_LEN.unpack_from(self._buf)
            if length >= MAX_FRAME:
                raise FrameError(f"declared frame length {length} exceeds limit")
            if len(self._buf) < 4 + length:
                break
            frames.append(bytes(self._buf[4:4 + length]))
            del self._buf[:4 + length]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


def decode_frames(data: bytes) -> list[bytes]:
    """Decode a complete buffer of frames; trailing partial data is an error."""
    dec = FrameDecoder()
    frames = dec.feed(data)
    if dec.pending:
        raise FrameConnectionError(f"{dec.pending} bytes of incomplete frame")
    return frames
