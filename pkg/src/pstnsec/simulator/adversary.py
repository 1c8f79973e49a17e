"""Active attacker on the IP leg.

Actions are applied to datagrams as they cross a channel. Voice tampering,
header corruption and replay are persistent from their start window on,
modelling an attacker who controls the path rather than a one-off glitch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .. import audio_watermark as aw
from .. import g711
from .. import signalling as sig
from ..covert_channel import SimPacket
from . import channel as ch


class ActionKind(enum.Enum):
    NONE = "none"
    FLIP_VOICE_BITS = "flip_voice_bits"
    REPLACE_SIGNALLING = "replace_signalling"
    INJECT_TEARDOWN = "inject_teardown"
    REPLAY_WINDOW = "replay_window"
    CORRUPT_COVERT_HEADER = "corrupt_covert_header"
    DROP_PACKETS = "drop_packets"


@dataclass(frozen=True)
class AdversaryAction:
    """One attacker behaviour.

    Parameters by kind:
      flip_voice_bits        rate (fraction of carrier cells), window (first window)
      replace_signalling     target ("INVITE", "183", "200 BYE", ...), header + value, or forged
      inject_teardown        window (forged BYE sent just before it)
      replay_window          index (recorded window replayed from index+1 on)
      corrupt_covert_header  packet (index within each window), window
      drop_packets           rate, window
    """

    kind: ActionKind
    rate: float = 1.0
    window: int = 1
    target: str = ""
    header: str = ""
    value: str = ""
    forged: bytes = b""
    index: int = 1
    packet: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ActionKind(self.kind))
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must be within [0, 1]: {self.rate}")
        if self.window < 1 or self.index < 1:
            raise ValueError("window numbers start at 1")
        if not 0 <= self.packet < aw.WINDOW_FRAMES:
            raise ValueError(f"packet index must be below {aw.WINDOW_FRAMES}")
        if self.kind is ActionKind.REPLACE_SIGNALLING and not self.target:
            raise ValueError("replace_signalling needs a target message")
        if self.kind is ActionKind.REPLACE_SIGNALLING and not (self.forged or self.header):
            raise ValueError("replace_signalling needs a header to change or forged bytes")

    @classmethod
    def from_dict(cls, d: dict) -> "AdversaryAction":
        d = dict(d)
        if "forged" in d and isinstance(d["forged"], str):
            d["forged"] = d["forged"].encode("utf-8")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown adversary parameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        default = AdversaryAction(ActionKind.NONE)
        for name in self.__dataclass_fields__:
            if name == "kind":
                continue
            v = getattr(self, name)
            if v != getattr(default, name):
                out[name] = v.decode("utf-8", "replace") if isinstance(v, bytes) else v
        return out


def _message_keys(m: sig.SipMessage) -> tuple[str, ...]:
    """Names an action can target: ``INVITE``, ``200`` or ``200 BYE`` (status and CSeq method)."""
    if m.is_request:
        return (m.method,)
    return (str(m.status), f"{m.status} {m.cseq[1]}")


def flip_carriers(samples: np.ndarray, delta: int) -> np.ndarray:
    """Move samples to the nearest point of the opposite QIM lattice."""
    x = samples.astype(np.int64)
    bits = aw.qim_decode(x, delta)
    return aw.qim_quantize(x, 1 - bits, delta)


@dataclass
class Adversary:
    """Applies ``actions`` to one direction of the IP leg."""

    actions: list
    seed: int = 0
    delta: int = aw.DEFAULT_DELTA
    log: list = field(default_factory=list)
    tampered: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.packets_seen = 0
        self.replay: dict[int, SimPacket] = {}
        self.invite: sig.SipMessage | None = None
        self.replaced: set[int] = set()
        self.injected: set[int] = set()
        self.carriers = np.zeros(aw.FRAME_SAMPLES, dtype=bool)
        self.carriers[0::2] = True  # both layers: i % 4 in {0, 2}

    def _note(self, window: int, what: str) -> None:
        self.log.append((window, what))

    def __call__(self, datagram: bytes) -> list[bytes]:
        kind = datagram[:1]
        if kind == ch.SIP:
            return self._signalling(datagram)
        if kind == ch.MEDIA:
            return self._media(datagram)
        return [datagram]

    def _signalling(self, datagram: bytes) -> list[bytes]:
        m = sig.parse_sip(datagram[1:])
        if m.is_request and m.method == "INVITE":
            self.invite = m
        window = self.packets_seen // aw.WINDOW_FRAMES + 1
        for i, a in enumerate(self.actions):
            if a.kind is not ActionKind.REPLACE_SIGNALLING or i in self.replaced:
                continue
            if a.target not in _message_keys(m):
                continue
            self.replaced.add(i)
            if a.forged:
                self.tampered += 1
                self._note(window, f"replace_signalling:{a.target}")
                return [ch.SIP + a.forged]
            if a.header.lower() == "body":
                m = m.with_body(a.value.encode("utf-8"))
                self.tampered += 1
            else:
                m = m.with_header(a.header, a.value)
                # rewriting Via, Record-Route and the like is what proxies do anyway
                if sig.header_key(a.header) in sig.CANONICAL_HEADERS:
                    self.tampered += 1
            self._note(window, f"replace_signalling:{a.target}:{a.header}")
            return [ch.sip(m)]
        return [datagram]

    def forged_bye(self) -> sig.SipMessage:
        inv = self.invite
        if inv is None:
            raise RuntimeError("no INVITE observed; cannot forge a BYE")
        cseq = inv.cseq[0] + 100
        iam = sig.extract_isup_body(inv)
        rel = sig.build_rel(iam.cic if iam is not None else 0)
        return sig.make_request(
            "BYE", inv.uri, from_=inv.get("From"), to=inv.get("To"), call_id=inv.get("Call-ID"),
            cseq=cseq, via=["SIP/2.0/UDP attacker.invalid;branch=z9hG4bK-forged"],
            body=sig.isup_body(rel), content_type=sig.ISUP_CONTENT_TYPE)

    def _media(self, datagram: bytes) -> list[bytes]:
        p = SimPacket.from_bytes(datagram[1:])
        window = self.packets_seen // aw.WINDOW_FRAMES + 1
        pkt = self.packets_seen % aw.WINDOW_FRAMES
        self.packets_seen += 1
        out: list[bytes] = []
        for i, a in enumerate(self.actions):
            if a.kind is ActionKind.INJECT_TEARDOWN and a.window == window and i not in self.injected:
                self.injected.add(i)
                self.tampered += 1
                self._note(window, "inject_teardown")
                out.append(ch.sip(self.forged_bye()))

        for a in self.actions:
            k = a.kind
            if k is ActionKind.REPLAY_WINDOW:
                if window == a.index:
                    self.replay[pkt] = p
                elif window > a.index and pkt in self.replay:
                    old = self.replay[pkt]
                    p = replace(old, seq=p.seq, timestamp=p.timestamp, ip_id=(p.ip_id & ~0b111) | (old.ip_id & 0b111))
                    self.tampered += 1
                    if pkt == 0:
                        self._note(window, f"replay_window:{a.index}")
            elif k is ActionKind.FLIP_VOICE_BITS and window >= a.window:
                mask = self.carriers & (self.rng.random(aw.FRAME_SAMPLES) < a.rate)
                if mask.any():
                    pcm = g711.decode(np.frombuffer(p.payload, dtype=np.uint8)).astype(np.int64)
                    pcm[mask] = flip_carriers(pcm[mask], self.delta)
                    p = replace(p, payload=g711.encode(pcm).tobytes())
                    self.tampered += 1
                    if pkt == 0:
                        self._note(window, f"flip_voice_bits:{a.rate}")
            elif k is ActionKind.CORRUPT_COVERT_HEADER and window >= a.window and pkt == a.packet:
                p = replace(p, padding=not p.padding, extension=not p.extension,
                            ip_id=p.ip_id ^ 0b111, udp_checksum=p.udp_checksum ^ 1)
                self.tampered += 1
                self._note(window, f"corrupt_covert_header:{a.packet}")
            elif k is ActionKind.DROP_PACKETS and window >= a.window:
                if self.rng.random() < a.rate:
                    self._note(window, f"drop:{pkt}")
                    return out
        out.append(ch.media(p))
        return out
