"""Minimal SIP / SIP-T, ISUP and Megaco Notify models.

Only what the gateways need: parse and serialize, pull the ISUP message
out of a SIP-T body, and reduce a message to the bytes that stay the same
end to end so that both media gateways hash identical input.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from typing import Iterable, Sequence, Union

SIP_VERSION = "SIP/2.0"
ISUP_CONTENT_TYPE = "application/isup"

# RFC 3261 compact header forms
_COMPACT = {
    "f": "from", "t": "to", "i": "call-id", "v": "via", "c": "content-type",
    "l": "content-length", "m": "contact", "k": "supported", "s": "subject",
    "e": "content-encoding",
}
# fields covered by the end-to-end hash; everything else may be rewritten in transit
CANONICAL_HEADERS = ("from", "to", "call-id", "cseq")


class SignallingError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def header_key(name: str) -> str:
    n = name.strip().lower()
    return _COMPACT.get(n, n)


@dataclass(frozen=True)
class SipMessage:
    """A SIP request (``method`` set) or response (``status`` set)."""

    method: str | None = None
    uri: str | None = None
    status: int | None = None
    reason: str = ""
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "headers", tuple((str(n), str(v)) for n, v in self.headers))
        object.__setattr__(self, "body", bytes(self.body))
        if (self.method is None) == (self.status is None):
            raise SignallingError("start-line", "message must be either a request or a response")
        if self.method is not None and (not self.method or not self.uri):
            raise SignallingError("start-line", "request needs a method and a Request-URI")
        if self.status is not None and not 100 <= self.status <= 699:
            raise SignallingError("start-line", f"status code out of range: {self.status}")
        for name in ("From", "To", "Call-ID", "CSeq"):
            values = self.get_all(name)
            if not values:
                raise SignallingError(name, "mandatory header missing")
            if len(values) > 1:
                raise SignallingError(name, "header repeated")
        if not self.get("Call-ID").strip():
            raise SignallingError("Call-ID", "empty")
        self.cseq  # validates
        if not self.get_all("Via"):
            raise SignallingError("Via", "at least one Via header required")
        if self.body and not self.get("Content-Type"):
            raise SignallingError("Content-Type", "body present without Content-Type")

    @property
    def is_request(self) -> bool:
        return self.method is not None

    @property
    def start_line(self) -> str:
        if self.is_request:
            return f"{self.method} {self.uri} {SIP_VERSION}"
        return f"{SIP_VERSION} {self.status} {self.reason}".rstrip()

    def get_all(self, name: str) -> list[str]:
        key = header_key(name)
        return [v for n, v in self.headers if header_key(n) == key]

    def get(self, name: str, default: str | None = None) -> str | None:
        values = self.get_all(name)
        return values[0] if values else default

    @property
    def cseq(self) -> tuple[int, str]:
        raw = (self.get("CSeq") or "").split()
        if len(raw) != 2 or not raw[0].isdigit():
            raise SignallingError("CSeq", f"expected '<number> <METHOD>', got {self.get('CSeq')!r}")
        return int(raw[0]), raw[1]

    @property
    def content_type(self) -> str:
        ct = self.get("Content-Type") or ""
        return ct.split(";")[0].strip().lower()

    def with_headers(self, headers: Iterable[tuple[str, str]]) -> "SipMessage":
        return replace(self, headers=tuple(headers))

    def with_header(self, name: str, value: str) -> "SipMessage":
        """Replace every occurrence of ``name`` (or append it) with one value."""
        key = header_key(name)
        out, done = [], False
        for n, v in self.headers:
            if header_key(n) == key:
                if not done:
                    out.append((n, value))
                    done = True
            else:
                out.append((n, v))
        if not done:
            out.append((name, value))
        return self.with_headers(out)

    def with_body(self, body: bytes, content_type: str | None = None) -> "SipMessage":
        m = self
        if content_type is not None:
            m = m.with_header("Content-Type", content_type)
        hdrs = tuple(h for h in m.headers if header_key(h[0]) != "content-length")
        return replace(m, headers=hdrs + (("Content-Length", str(len(body))),), body=body)

    def prepend_header(self, name: str, value: str) -> "SipMessage":
        return self.with_headers(((name, value),) + self.headers)


def parse_sip(data: bytes | str) -> SipMessage:
    if isinstance(data, str):
        data = data.encode("utf-8")
    if not data.strip():
        raise SignallingError("message", "empty input")
    head, sep, body = data.partition(b"\r\n\r\n")
    if not sep:
        head, sep, body = data.partition(b"\n\n")
    try:
        text = head.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SignallingError("message", f"header section is not UTF-8: {exc}") from exc
    lines = text.replace("\r\n", "\n").split("\n")
    start = lines[0].strip()
    headers: list[list[str]] = []
    for line in lines[1:]:
        if not line:
            continue
        if line[0] in " \t":
            if not headers:
                raise SignallingError("header", "continuation line before any header")
            headers[-1][1] += " " + line.strip()
            continue
        name, colon, value = line.partition(":")
        if not colon or not name.strip() or " " in name.strip():
            raise SignallingError("header", f"malformed header line {line!r}")
        headers.append([name.strip(), value.strip()])

    parts = start.split(" ", 2)
    kw: dict = {}
    if parts[0] == SIP_VERSION:
        if len(parts) < 2 or not parts[1].isdigit() or len(parts[1]) != 3:
            raise SignallingError("start-line", f"bad status line {start!r}")
        kw = dict(status=int(parts[1]), reason=parts[2] if len(parts) > 2 else "")
    else:
        if len(parts) != 3 or parts[2] != SIP_VERSION or not re.fullmatch(r"[A-Za-z]+", parts[0]):
            raise SignallingError("start-line", f"bad request line {start!r}")
        kw = dict(method=parts[0], uri=parts[1])

    for name, value in headers:
        if header_key(name) == "content-length":
            if not value.isdigit():
                raise SignallingError("Content-Length", f"not a number: {value!r}")
            n = int(value)
            if n > len(body):
                raise SignallingError("Content-Length", f"declares {n} bytes, only {len(body)} present")
            body = body[:n]
    return SipMessage(headers=tuple((n, v) for n, v in headers), body=body, **kw)


def serialize_sip(m: SipMessage) -> bytes:
    head = m.start_line + "\r\n" + "".join(f"{n}: {v}\r\n" for n, v in m.headers) + "\r\n"
    return head.encode("utf-8") + m.body


class IsupType(enum.IntEnum):
    IAM = 0x01
    ACM = 0x06
    ANM = 0x09
    REL = 0x0C
    RLC = 0x10


# (fixed mandatory octets, mandatory variable parameters)
_ISUP_LAYOUT = {
    IsupType.IAM: (5, 1),
    IsupType.ACM: (2, 0),
    IsupType.ANM: (0, 0),
    IsupType.REL: (0, 1),
    IsupType.RLC: (0, 0),
}


def _isup_extent(mtype: IsupType, data: bytes) -> int:
    """Walk the fixed, pointer-addressed and optional parts; return bytes used."""
    fixed, nvar = _ISUP_LAYOUT[mtype]
    pos = 3 + fixed
    if len(data) < pos + nvar + 1:
        raise SignallingError(f"ISUP {mtype.name}", "truncated before parameter pointers")
    extent = pos + nvar + 1
    for i in range(nvar):
        at = pos + i
        if data[at] == 0:
            raise SignallingError(f"ISUP {mtype.name}", f"mandatory variable parameter {i} has null pointer")
        target = at + data[at]
        if target >= len(data) or target + 1 + data[target] > len(data):
            raise SignallingError(f"ISUP {mtype.name}", f"mandatory variable parameter {i} truncated")
        extent = max(extent, target + 1 + data[target])
    at = pos + nvar
    if data[at]:
        p = at + data[at]
        while True:
            if p >= len(data):
                raise SignallingError(f"ISUP {mtype.name}", "optional part missing end-of-parameters octet")
            if data[p] == 0:
                extent = max(extent, p + 1)
                break
            if p + 1 >= len(data) or p + 2 + data[p + 1] > len(data):
                raise SignallingError(f"ISUP {mtype.name}", f"optional parameter {data[p]:#04x} truncated")
            p += 2 + data[p + 1]
    return extent


@dataclass(frozen=True)
class IsupMessage:
    msg_type: IsupType
    cic: int
    params: bytes = b"\x00"

    def __post_init__(self):
        try:
            object.__setattr__(self, "msg_type", IsupType(self.msg_type))
        except ValueError:
            raise SignallingError("ISUP message type", f"unsupported code {self.msg_type!r}") from None
        if not 0 <= self.cic < 4096:
            raise SignallingError("ISUP CIC", f"must fit 12 bits: {self.cic}")
        object.__setattr__(self, "params", bytes(self.params))
        data = serialize_isup(self)
        extent = _isup_extent(self.msg_type, data)
        if extent != len(data):
            raise SignallingError(f"ISUP {self.msg_type.name}", f"{len(data) - extent} trailing bytes")


def serialize_isup(m: IsupMessage) -> bytes:
    return bytes((m.cic & 0xFF, m.cic >> 8, int(m.msg_type))) + m.params


def parse_isup(data: bytes) -> IsupMessage:
    data = bytes(data)
    if len(data) < 3:
        raise SignallingError("ISUP", f"message too short ({len(data)} bytes)")
    if data[1] & 0xF0:
        raise SignallingError("ISUP CIC", "spare bits set")
    cic = data[0] | (data[1] << 8)
    return IsupMessage(data[2], cic, data[3:])


def _bcd(digits: str) -> tuple[int, bytes]:
    if not digits.isdigit():
        raise ValueError(f"address digits must be decimal: {digits!r}")
    padded = digits + ("0" if len(digits) % 2 else "")
    out = bytes(int(padded[i]) | (int(padded[i + 1]) << 4) for i in range(0, len(padded), 2))
    return len(digits) % 2, out


def _address(digits: str, nai: int = 0x03) -> bytes:
    odd, bcd = _bcd(digits)
    return bytes(((odd << 7) | nai, 0x10)) + bcd


def build_iam(cic: int, called: str, calling: str | None = None) -> IsupMessage:
    fixed = bytes((0x00, 0x60, 0x01, 0x0A, 0x00))
    cpn = _address(called)
    optional = b""
    if calling:
        cgpn = _address(calling)
        optional = bytes((0x0A, len(cgpn))) + cgpn + b"\x00"
    ptr_opt = (1 + 1 + len(cpn)) if optional else 0
    return IsupMessage(IsupType.IAM, cic, fixed + bytes((2, ptr_opt, len(cpn))) + cpn + optional)


def build_acm(cic: int) -> IsupMessage:
    return IsupMessage(IsupType.ACM, cic, bytes((0x16, 0x14, 0x00)))


def build_anm(cic: int) -> IsupMessage:
    return IsupMessage(IsupType.ANM, cic, b"\x00")


def build_rel(cic: int, cause: int = 16) -> IsupMessage:
    return IsupMessage(IsupType.REL, cic, bytes((0x02, 0x00, 0x02, 0x80, 0x80 | (cause & 0x7F))))


def build_rlc(cic: int) -> IsupMessage:
    return IsupMessage(IsupType.RLC, cic, b"\x00")


def isup_body(m: IsupMessage) -> bytes:
    return serialize_isup(m).hex().upper().encode("ascii")


def _isup_from_hex(part: bytes) -> IsupMessage:
    text = re.sub(rb"\s+", b"", part)
    try:
        raw = bytes.fromhex(text.decode("ascii"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise SignallingError("ISUP body", f"not valid hex: {exc}") from exc
    return parse_isup(raw)


def _multipart_parts(m: SipMessage) -> list[tuple[str, bytes]]:
    ct = m.get("Content-Type") or ""
    match = re.search(r'boundary="?([^";]+)"?', ct)
    if not match:
        raise SignallingError("Content-Type", "multipart body without boundary")
    delim = b"--" + match.group(1).encode()
    parts = []
    for chunk in m.body.split(delim)[1:]:
        if chunk.startswith(b"--"):
            break
        chunk = chunk.lstrip(b"\r\n")
        head, _, content = chunk.partition(b"\r\n\r\n")
        ptype = ""
        for line in head.decode("utf-8", "replace").split("\r\n"):
            name, _, value = line.partition(":")
            if header_key(name) == "content-type":
                ptype = value.split(";")[0].strip().lower()
        parts.append((ptype, content[:-2] if content.endswith(b"\r\n") else content))
    return parts


def extract_isup_body(m: SipMessage) -> IsupMessage | None:
    """The ISUP message carried by a SIP-T body, or None when there is none."""
    ct = m.content_type
    if ct == ISUP_CONTENT_TYPE:
        return _isup_from_hex(m.body)
    if ct == "multipart/mixed":
        for ptype, content in _multipart_parts(m):
            if ptype == ISUP_CONTENT_TYPE:
                return _isup_from_hex(content)
    return None


SignallingMessage = Union[SipMessage, IsupMessage]


def canonical_bytes(m: SignallingMessage) -> bytes:
    """Bytes that survive legitimate in-transit edits; what the SB hashes.

    SIP: start line plus From, To, Call-ID and CSeq values and the body.
    Via, Record-Route, Max-Forwards, Contact and the rest are left out.
    ISUP: the whole serialized message.
    """
    if isinstance(m, IsupMessage):
        return serialize_isup(m)
    if not isinstance(m, SipMessage):
        raise TypeError(f"not a signalling message: {type(m).__name__}")
    lines = [m.start_line]
    for name in CANONICAL_HEADERS:
        lines.append(f"{name}:{m.get(name).strip()}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("utf-8") + m.body


def is_teardown(m: SignallingMessage) -> bool:
    if isinstance(m, IsupMessage):
        return m.msg_type is IsupType.REL
    return m.is_request and m.method == "BYE"


def describe(m: SignallingMessage) -> str:
    if isinstance(m, IsupMessage):
        return f"ISUP {m.msg_type.name}"
    return f"SIP {m.method}" if m.is_request else f"SIP {m.status}"


def make_request(method: str, uri: str, *, from_: str, to: str, call_id: str, cseq: int,
                 via: Sequence[str], extra: Sequence[tuple[str, str]] = (),
                 body: bytes = b"", content_type: str | None = None) -> SipMessage:
    headers = [("Via", v) for v in via]
    headers += [("Max-Forwards", "70"), ("From", from_), ("To", to), ("Call-ID", call_id),
                ("CSeq", f"{cseq} {method}")]
    headers += list(extra)
    if content_type:
        headers.append(("Content-Type", content_type))
    headers.append(("Content-Length", str(len(body))))
    return SipMessage(method=method, uri=uri, headers=tuple(headers), body=body)


_REASONS = {100: "Trying", 180: "Ringing", 183: "Session Progress", 200: "OK"}


def make_response(request: SipMessage, status: int, *, to_tag: str | None = None,
                  body: bytes = b"", content_type: str | None = None) -> SipMessage:
    """Response copying Via, From, To, Call-ID and CSeq from ``request``."""
    headers = [("Via", v) for v in request.get_all("Via")]
    to = request.get("To")
    if to_tag and ";tag=" not in to:
        to = f"{to};tag={to_tag}"
    headers += [("From", request.get("From")), ("To", to), ("Call-ID", request.get("Call-ID")),
                ("CSeq", request.get("CSeq"))]
    if content_type:
        headers.append(("Content-Type", content_type))
    headers.append(("Content-Length", str(len(body))))
    return SipMessage(status=status, reason=_REASONS.get(status, ""), headers=tuple(headers), body=body)


class NotifyEvent(enum.Enum):
    TOKEN_OK = "tokok"
    TOKEN_FAIL = "tokfail"


class MgcReply(enum.Enum):
    CONTINUE = "Continue"
    SUBTRACT = "Subtract"


@dataclass(frozen=True)
class MegacoNotify:
    termination_id: str
    event: NotifyEvent
    window: int

    def __post_init__(self):
        if not self.termination_id or re.search(r"[\s{}=]", self.termination_id):
            raise SignallingError("TerminationID", f"invalid {self.termination_id!r}")
        if not 0 <= self.window <= 0xFFFFFFFF:
            raise SignallingError("window", "out of 32-bit range")

    def encode(self, transaction_id: int = 1, mid: str = "[mg]") -> str:
        return (f"MEGACO/1 {mid}\n"
                f"Transaction = {transaction_id} {{ Context = - {{ Notify = {self.termination_id} {{ "
                f"ObservedEvents = {self.window} {{ pps/{self.event.value} }} }} }} }}\n")


_NOTIFY_RE = re.compile(
    r"MEGACO/1\s+(?P<mid>\S+)\s+Transaction\s*=\s*(?P<tid>\d+)\s*\{\s*Context\s*=\s*-\s*\{\s*"
    r"Notify\s*=\s*(?P<term>[^\s{}=]+)\s*\{\s*ObservedEvents\s*=\s*(?P<win>\d+)\s*\{\s*"
    r"pps/(?P<ev>\w+)\s*\}\s*\}\s*\}\s*\}\s*$")


def parse_notify(text: str) -> tuple[int, MegacoNotify]:
    """Returns ``(transaction_id, notify)``."""
    m = _NOTIFY_RE.match(text.strip())
    if not m:
        raise SignallingError("Megaco", "not a Notify command")
    try:
        event = NotifyEvent(m.group("ev"))
    except ValueError:
        raise SignallingError("ObservedEvents", f"unknown event {m.group('ev')!r}") from None
    return int(m.group("tid")), MegacoNotify(m.group("term"), event, int(m.group("win")))
