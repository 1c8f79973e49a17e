"""Media gateway (MG) and controller (MGC) logic for one media direction.

The sending gateway hashes signalling into its SB, derives a token per
voice window and hides it in watermark layer 2, with the covert PDU headers
riding in the packet headers. The receiving gateway extracts the token,
recomputes it from its own SB and the received voice, and reports the
comparison to its MGC with a Megaco Notify. The MGC keeps or drops the
call based on the Level of Trust (LoT).
"""

from __future__ import annotations

import enum
import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import audio_watermark as aw
from . import g711
from . import signalling as sig
from .covert_channel import (CovertDecoder, CovertEncoder, CovertError, CovertPdu, PayloadType,
                             SimPacket, decode_pdus, encode_pdus, from_bits, to_bits)
from .token_core import (SignallingHashBuffer, Token, TokenParams, VerifyResult,
                         build_token, hash, verify_token)

log = logging.getLogger(__name__)

LOSS_TOLERANCE = 0.95


class Phase(enum.Enum):
    SETUP = "Setup"
    ACTIVE = "Active"
    TEARDOWN_PENDING = "TeardownPending"
    TERMINATED = "Terminated"


class Role(enum.Enum):
    SENDER = "Sender"
    RECEIVER = "Receiver"


class MgcDecision(enum.Enum):
    CONTINUE = "Continue"
    TEARDOWN = "Teardown"


class WindowResult(enum.Enum):
    MATCH = "Match"
    MISMATCH = "Mismatch"
    SKIPPED = "Skipped"


@dataclass(frozen=True)
class LotPolicy:
    initial: int = 3
    maximum: int = 10
    reward: int = 1
    penalty: int = 2
    threshold: int = 0

    def __post_init__(self):
        if not self.threshold <= self.initial <= self.maximum:
            raise ValueError("LoT must satisfy threshold <= initial <= maximum")
        if self.reward < 0 or self.penalty <= 0:
            raise ValueError("LoT reward must be >= 0 and penalty > 0")

    def update(self, lot: int, result: VerifyResult) -> int:
        if result is VerifyResult.MATCH:
            return min(lot + self.reward, self.maximum)
        return max(lot - self.penalty, 0)


def mgc_decide(lot: int, threshold: int = 0) -> MgcDecision:
    return MgcDecision.TEARDOWN if lot <= threshold else MgcDecision.CONTINUE


class LogicalClock:
    """Simulation clock: window n carries timestamp base + n, checked exactly."""

    tolerance = 0

    def __init__(self, base: int = 0):
        self.base = base

    def __call__(self, window: int) -> int:
        return (self.base + window) & 0xFFFFFFFF


class WallClock:
    tolerance = 30

    def __call__(self, window: int) -> int:
        return int(time.time()) & 0xFFFFFFFF


@dataclass
class PendingTeardown:
    messages: list
    sb_before: SignallingHashBuffer
    phase_before: Phase


@dataclass
class GatewayState:
    role: Role
    lot: int
    sb: SignallingHashBuffer = field(default_factory=SignallingHashBuffer)
    phase: Phase = Phase.SETUP
    pending: PendingTeardown | None = None
    windows: int = 0
    next_seq: int = 1

    @property
    def media_flowing(self) -> bool:
        return self.phase in (Phase.ACTIVE, Phase.TEARDOWN_PENDING)


@dataclass(frozen=True)
class RtpStream:
    """Stream parameters both gateways agree on at call setup."""

    ssrc: int = 0
    seq0: int = 0
    ts0: int = 0
    ip_id0: int = 0


@dataclass
class WindowRecord:
    window: int
    vf_prefix: str
    r: int | None
    result: WindowResult
    lot: int
    decision: MgcDecision
    post_auth: list = field(default_factory=list)
    info: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def log_line(self) -> str:
        r = f"{self.r:08x}" if self.r is not None else "-"
        pa = ",".join(self.post_auth) or "-"
        ev = ",".join(self.events) or "-"
        return (f"window={self.window} vf={self.vf_prefix} r={r} result={self.result.value} "
                f"lot={self.lot} decision={self.decision.value} post_auth={pa} events={ev}")

    def to_dict(self) -> dict:
        return {
            "window": self.window, "vf": self.vf_prefix, "r": self.r,
            "result": self.result.value, "lot": self.lot, "decision": self.decision.value,
            "post_auth": list(self.post_auth), "info": [from_bits(b).hex() for b in self.info],
            "events": list(self.events),
        }


def parse_log_line(line: str) -> dict:
    rec = dict(kv.split("=", 1) for kv in line.split())
    return {
        "window": int(rec["window"]), "vf": rec["vf"],
        "r": None if rec["r"] == "-" else int(rec["r"], 16),
        "result": rec["result"], "lot": int(rec["lot"]), "decision": rec["decision"],
        "post_auth": [] if rec.get("post_auth", "-") == "-" else rec["post_auth"].split(","),
        "events": [] if rec.get("events", "-") == "-" else rec["events"].split(","),
    }


def _is_answer(m: sig.SignallingMessage) -> bool:
    if isinstance(m, sig.IsupMessage):
        return m.msg_type is sig.IsupType.ANM
    return (not m.is_request) and 200 <= m.status < 300 and m.cseq[1] == "INVITE"


class MediaGateway:
    """An MG/MGC pair handling one direction of the call's media."""

    def __init__(self, role: Role, *, gateway_id: int, peer_id: int, password: bytes,
                 policy: LotPolicy = LotPolicy(), delta: int = aw.DEFAULT_DELTA,
                 chain_k: int = 4, rng: Callable[[], int] | None = None,
                 clock=None, stream: RtpStream = RtpStream(), termination_id: str = "rtp/1",
                 name: str = "mg"):
        self.state = GatewayState(role, policy.initial)
        self.policy = policy
        self.gateway_id = gateway_id
        self.peer_id = peer_id
        self.password = password
        self.layer = aw.WatermarkLayer(aw.Layer.GATEWAY, delta)
        self.clock = clock or LogicalClock()
        self.stream = stream
        self.termination_id = termination_id
        self.name = name
        if rng is None:
            gen = np.random.default_rng()
            rng = lambda: int(gen.integers(0, 1 << 32))  # noqa: E731
        self.rng = rng
        self.encoder = CovertEncoder(chain_k)
        self.decoder = CovertDecoder(chain_k)
        self.notify_queue: deque[str] = deque()
        self.transaction = 0
        self.records: list[WindowRecord] = []
        self.signalling_log: list[str] = []
        self.decision = MgcDecision.CONTINUE
        self.last_window: aw.VoiceWindow | None = None
        self.replies: list[tuple[int, sig.MgcReply]] = []
        self.open_requests: set[tuple] = set()

    # -- signalling -------------------------------------------------------

    def on_signalling(self, m: sig.SignallingMessage, direction: str = "in") -> GatewayState:
        """Hash ``m`` (and any SIP-T ISUP payload) into the SB.

        Teardown requests move the call to TeardownPending; media keeps
        flowing until they are authenticated.
        """
        st = self.state
        if st.phase is Phase.TERMINATED:
            log.warning("%s: %s after termination dropped", self.name, sig.describe(m))
            self.signalling_log.append(f"dropped {direction} {sig.describe(m)}")
            return st
        if isinstance(m, sig.SipMessage):
            key = (m.get("Call-ID"),) + m.cseq
            if m.is_request and direction == "out":
                self.open_requests.add(key)
            elif not m.is_request and direction == "in" and key not in self.open_requests:
                # no client transaction to match: discard, as a SIP UA would
                log.warning("%s: stray %s for %s discarded", self.name, sig.describe(m), key)
                self.signalling_log.append(f"stray {direction} {sig.describe(m)}")
                return st
        parts: list[sig.SignallingMessage] = [m]
        if isinstance(m, sig.SipMessage):
            try:
                isup = sig.extract_isup_body(m)
            except sig.SignallingError as exc:
                # the SIP message itself still counts; its body just carries no ISUP
                log.warning("%s: bad SIP-T body in %s: %s", self.name, sig.describe(m), exc)
                self.signalling_log.append(f"isup_parse_fault {direction} {exc.field}")
                isup = None
            if isup is not None:
                parts.append(isup)
        sb_before = st.sb
        for part in parts:
            st.sb = st.sb.store(st.next_seq, hash(sig.canonical_bytes(part)))
            st.next_seq += 1
            self.signalling_log.append(f"{direction} {sig.describe(part)} #{st.next_seq - 1}")

        if any(sig.is_teardown(p) for p in parts):
            if st.phase is Phase.TEARDOWN_PENDING:
                st.pending.messages.append(m)
            else:
                st.pending = PendingTeardown([m], sb_before, st.phase)
                st.phase = Phase.TEARDOWN_PENDING
        elif st.phase is Phase.SETUP and any(_is_answer(p) for p in parts):
            st.phase = Phase.ACTIVE
        return st

    # -- sender -----------------------------------------------------------

    def _packets(self, count: int) -> list[SimPacket]:
        """Empty RTP packets for window ``count`` (0-based); payloads come later."""
        base = count * aw.WINDOW_FRAMES
        s = self.stream
        return [
            SimPacket(seq=(s.seq0 + base + i) & 0xFFFF,
                      timestamp=(s.ts0 + (base + i) * aw.FRAME_SAMPLES) & 0xFFFFFFFF,
                      payload=b"", ip_id=(s.ip_id0 + base + i) & 0xFFFF, ssrc=s.ssrc)
            for i in range(aw.WINDOW_FRAMES)
        ]

    def send_window(self, w: aw.VoiceWindow, info: Sequence[bytes] = ()
                    ) -> tuple[aw.VoiceWindow, list[SimPacket], Token]:
        """Steps (1)-(3): feature, token, embed; returns marked window and packets."""
        st = self.state
        if not st.media_flowing:
            raise RuntimeError(f"{self.name}: no media in phase {st.phase.value}")
        if not len(st.sb):
            raise RuntimeError(f"{self.name}: no signalling hashed yet, cannot build tokens")
        w = aw.adda_roundtrip(w)  # PSTN side is G.711 already; idempotent then
        st.windows += 1
        vf = aw.voice_feature(w)
        params = TokenParams(self.rng() & 0xFFFFFFFF, self.clock(st.windows), self.gateway_id,
                             self.password)
        token = build_token(st.sb.chain_digest(), vf.digest, params)
        pdus = self.encoder.submit(CovertPdu.security(to_bits(token.to_bytes())))
        for data in info:
            pdus += self.encoder.submit(CovertPdu.informational(to_bits(data)))
        marked, packets = encode_pdus(pdus, w, self.layer, self._packets(st.windows - 1))
        codes = g711.encode(marked.flat).reshape(aw.WINDOW_FRAMES, aw.FRAME_SAMPLES)
        packets = [replace(p, payload=codes[i].tobytes()) for i, p in enumerate(packets)]
        if st.phase is Phase.TEARDOWN_PENDING:
            # this window's token covers the teardown; media retention ends here
            st.phase = Phase.TERMINATED
            st.pending = None
        return marked, packets, token

    # -- receiver ---------------------------------------------------------

    def window_from_packets(self, packets: Sequence[SimPacket], count: int
                            ) -> tuple[aw.VoiceWindow, list[SimPacket | None]]:
        """Place packets of window ``count`` (0-based) by sequence number; gaps stay silent."""
        slots: list[SimPacket | None] = [None] * aw.WINDOW_FRAMES
        base = count * aw.WINDOW_FRAMES
        for p in packets:
            idx = (p.seq - self.stream.seq0 - base) & 0xFFFF
            if idx < aw.WINDOW_FRAMES and slots[idx] is None:
                slots[idx] = p
        frames = np.zeros((aw.WINDOW_FRAMES, aw.FRAME_SAMPLES), dtype=np.int16)
        for i, p in enumerate(slots):
            if p is not None and len(p.payload) == aw.FRAME_SAMPLES:
                frames[i] = g711.decode(np.frombuffer(p.payload, dtype=np.uint8))
        return aw.VoiceWindow(frames, count + 1), slots

    def _verify(self, w: aw.VoiceWindow, packets: Sequence[SimPacket]):
        """Steps (4)-(6). Returns (result, token or None, post-auth results, info, events)."""
        st = self.state
        events: list[str] = []
        post_auth: list[str] = []
        info: list = []
        try:
            pdus = decode_pdus(w, self.layer, packets)
        except CovertError as exc:
            self.decoder.mark_lost()
            return VerifyResult.MISMATCH, None, post_auth, info, [f"covert_error:{type(exc).__name__}"]
        first = pdus[0] if pdus else None
        if (first is None or first.header.payload_type is not PayloadType.SECURITY
                or first.is_post_auth):
            self.decoder.mark_lost()
            return VerifyResult.MISMATCH, None, post_auth, info, ["no_token_pdu"]
        token = Token.from_bytes(from_bits(first.payload))
        vf = aw.voice_feature(w)
        result = verify_token(token, st.sb.chain_digest(), vf.digest, self.password, self.peer_id)
        expected_ts = self.clock(st.windows)
        if abs(((token.ts - expected_ts + 0x80000000) & 0xFFFFFFFF) - 0x80000000) > self.clock.tolerance:
            result = VerifyResult.MISMATCH
            events.append("stale_ts")
        for pdu in pdus:
            outcome = self.decoder.accept(pdu)
            if pdu.header.payload_type is PayloadType.INFORMATIONAL:
                info.append(pdu.payload)
            if outcome is not None:
                post_auth.append(outcome.value)
                if outcome is VerifyResult.MISMATCH:
                    result = VerifyResult.MISMATCH
        return result, token, post_auth, info, events

    def receive_window(self, packets: Sequence[SimPacket]) -> tuple[WindowRecord, sig.MegacoNotify | None]:
        """Steps (4)-(7) for the next window of the stream."""
        st = self.state
        if not st.media_flowing:
            raise RuntimeError(f"{self.name}: no media in phase {st.phase.value}")
        count = st.windows
        st.windows += 1
        w, slots = self.window_from_packets(packets, count)
        self.last_window = w
        received = sum(p is not None for p in slots)
        events: list[str] = []
        token = None
        post_auth: list[str] = []
        info: list = []
        vf_prefix = aw.voice_feature(w).digest[:4].hex()
        if received < aw.WINDOW_FRAMES:
            events.append(f"lost={aw.WINDOW_FRAMES - received}")
        if received == aw.WINDOW_FRAMES:
            verdict, token, post_auth, info, ev = self._verify(w, [p for p in slots])
            events += ev
            result = WindowResult(verdict.value)
        elif received >= LOSS_TOLERANCE * aw.WINDOW_FRAMES:
            self.decoder.mark_lost()
            result = WindowResult.SKIPPED
        else:
            self.decoder.mark_lost()
            result = WindowResult.MISMATCH

        notify = None
        if result is not WindowResult.SKIPPED:
            verdict = VerifyResult(result.value)
            st.lot = self.policy.update(st.lot, verdict)
            event = sig.NotifyEvent.TOKEN_OK if verdict is VerifyResult.MATCH else sig.NotifyEvent.TOKEN_FAIL
            notify = sig.MegacoNotify(self.termination_id, event, st.windows)
            self.transaction += 1
            self.notify_queue.append(notify.encode(self.transaction, f"[{self.name}]"))
        decision = self.mgc_process()

        if decision is MgcDecision.TEARDOWN:
            if st.phase is not Phase.TERMINATED:
                st.phase = Phase.TERMINATED
                events.append("mgc_teardown")
        elif st.phase is Phase.TEARDOWN_PENDING and result is not WindowResult.SKIPPED:
            events.append(self.authenticate_teardown(VerifyResult(result.value)))

        rec = WindowRecord(st.windows, vf_prefix, token.r if token else None, result, st.lot,
                           decision, post_auth, info, events)
        self.records.append(rec)
        return rec, notify

    def mgc_process(self) -> MgcDecision:
        """MGC side: consume queued Notify commands in order and decide."""
        while self.notify_queue:
            tid, _notify = sig.parse_notify(self.notify_queue.popleft())
            self.decision = mgc_decide(self.state.lot, self.policy.threshold)
            # Subtract removes the termination from the context, which ends the media
            reply = sig.MgcReply.SUBTRACT if self.decision is MgcDecision.TEARDOWN else sig.MgcReply.CONTINUE
            self.replies.append((tid, reply))
            if self.decision is MgcDecision.TEARDOWN:
                self.notify_queue.clear()
                break
        return self.decision

    def authenticate_teardown(self, verdict: VerifyResult) -> str:
        """Resolve a pending teardown with the first window verified after it."""
        st = self.state
        if st.phase is not Phase.TEARDOWN_PENDING or st.pending is None:
            raise RuntimeError("no teardown pending")
        pending = st.pending
        st.pending = None
        if verdict is VerifyResult.MATCH:
            st.phase = Phase.TERMINATED
            return "teardown_authenticated"
        # the peer's token does not cover the teardown: treat it as forged
        st.sb = pending.sb_before
        st.next_seq = (pending.sb_before.last_seq or 0) + 1
        st.phase = pending.phase_before
        self.signalling_log.append(f"rollback to #{st.next_seq - 1}")
        log.warning("%s: unauthenticated teardown discarded, SB rolled back", self.name)
        return "teardown_rollback"

    def event_log(self) -> str:
        return "".join(r.log_line() + "\n" for r in self.records)
