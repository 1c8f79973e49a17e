"""IP-leg transports carrying tagged datagrams between the two gateways.

Datagram kinds: ``M`` media packet, ``S`` SIP message, ``E`` end-of-window
marker (simulator bookkeeping, never touched by the adversary).
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from collections import deque
from typing import Callable, Iterable

from ..covert_channel import SimPacket
from .. import signalling as sig

MEDIA = b"M"
SIP = b"S"
MARK = b"E"

Transform = Callable[[bytes], Iterable[bytes]]


def media(p: SimPacket) -> bytes:
    return MEDIA + p.to_bytes()


def sip(m: sig.SipMessage) -> bytes:
    return SIP + sig.serialize_sip(m)


def mark(window: int) -> bytes:
    return MARK + struct.pack(">I", window)


def decode(datagram: bytes):
    kind, body = datagram[:1], datagram[1:]
    if kind == MEDIA:
        return kind, SimPacket.from_bytes(body)
    if kind == SIP:
        return kind, sig.parse_sip(body)
    if kind == MARK:
        return kind, struct.unpack(">I", body)[0]
    raise ValueError(f"unknown datagram kind {kind!r}")


class Channel:
    """Base: applies the transform chain (proxies, adversary) on send."""

    name = "base"

    def __init__(self, transforms: Iterable[Transform] = ()):
        self.transforms = list(transforms)
        self.sent_voice_bytes = 0

    def _apply(self, datagram: bytes) -> list[bytes]:
        out = [datagram]
        if datagram[:1] == MARK:
            return out
        for t in self.transforms:
            out = [d for item in out for d in t(item)]
        return out

    def send(self, datagram: bytes) -> None:
        if datagram[:1] == MEDIA:
            self.sent_voice_bytes += len(datagram) - 1 - SimPacket._RTP.size
        for d in self._apply(datagram):
            self._put(d)

    def _put(self, datagram: bytes) -> None:
        raise NotImplementedError

    def recv(self, timeout: float = 5.0) -> bytes | None:
        raise NotImplementedError

    def recv_until_mark(self, window: int, timeout: float = 5.0) -> list[bytes]:
        items = []
        while True:
            d = self.recv(timeout)
            if d is None:
                raise TimeoutError(f"{self.name} channel: end of window {window} never arrived")
            if d[:1] == MARK and struct.unpack(">I", d[1:])[0] == window:
                return items
            items.append(d)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MemoryChannel(Channel):
    name = "memory"

    def __init__(self, transforms: Iterable[Transform] = ()):
        super().__init__(transforms)
        self._q: deque[bytes] = deque()

    def _put(self, datagram: bytes) -> None:
        self._q.append(datagram)

    def recv(self, timeout: float = 5.0) -> bytes | None:
        return self._q.popleft() if self._q else None


class UdpChannel(Channel):
    """Loopback UDP; a reader thread hands datagrams over through a queue."""

    name = "udp"

    def __init__(self, transforms: Iterable[Transform] = (), host: str = "127.0.0.1"):
        super().__init__(transforms)
        self._rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._rx.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
        self._rx.bind((host, 0))
        self._rx.settimeout(0.2)
        self._tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.addr = self._rx.getsockname()
        self._q: queue.Queue[bytes] = queue.Queue()
        self._stop = threading.Event()
        self._error: OSError | None = None
        self._reader = threading.Thread(target=self._read, name=f"udp-rx-{self.addr[1]}", daemon=True)
        self._reader.start()

    def _read(self) -> None:
        while not self._stop.is_set():
            try:
                data, _ = self._rx.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError as exc:
                if not self._stop.is_set():
                    self._error = exc
                return
            self._q.put(data)

    def _put(self, datagram: bytes) -> None:
        self._tx.sendto(datagram, self.addr)

    def recv(self, timeout: float = 5.0) -> bytes | None:
        if self._error is not None:
            raise self._error
        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._stop.set()
        self._reader.join(timeout=2.0)
        self._rx.close()
        self._tx.close()


class SipProxy:
    """Honest stateless proxy hop: edits only headers proxies may rewrite."""

    def __init__(self, host: str):
        self.host = host
        self.count = 0

    def __call__(self, datagram: bytes) -> list[bytes]:
        if datagram[:1] != SIP:
            return [datagram]
        m = sig.parse_sip(datagram[1:])
        if m.is_request:
            self.count += 1
            m = m.prepend_header("Via", f"SIP/2.0/UDP {self.host};branch=z9hG4bK-{self.host}-{self.count}")
            m = m.prepend_header("Record-Route", f"<sip:{self.host};lr>")
            mf = m.get("Max-Forwards")
            if mf is not None and mf.isdigit():
                m = m.with_header("Max-Forwards", str(int(mf) - 1))
        else:
            vias = m.get_all("Via")
            if vias and self.host in vias[0]:
                out, dropped = [], False
                for n, v in m.headers:
                    if not dropped and sig.header_key(n) == "via":
                        dropped = True
                        continue
                    out.append((n, v))
                m = m.with_headers(out)
        return [sip(m)]


def make_channel(kind: str, transforms: Iterable[Transform] = ()) -> Channel:
    if kind == "memory":
        return MemoryChannel(transforms)
    if kind == "udp":
        return UdpChannel(transforms)
    raise ValueError(f"unknown channel kind {kind!r}")
