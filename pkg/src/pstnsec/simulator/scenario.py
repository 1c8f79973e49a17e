"""End-to-end PSTN -> MG_A -> IP leg -> MG_B -> PSTN call simulation."""

from __future__ import annotations

import enum
import json
import logging
import os
import sys
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .. import audio_watermark as aw
from .. import signalling as sig
from ..gateway import (LogicalClock, LotPolicy, MediaGateway, MgcDecision, Phase, Role, RtpStream,
                       WindowResult)
from . import channel as ch
from .adversary import ActionKind, Adversary, AdversaryAction
from .endpoint import PstnEndpoint, endpoint_send, endpoint_verify
from .speech import SAMPLE_RATE, synthetic_speech

SEED_ENV = "PSTNSEC_SEED"
CALIBRATED_DELTAS = (2048, 4096)
SIPT_CONTENT_TYPE = sig.ISUP_CONTENT_TYPE + "; version=itu-t92+"

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class Outcome(enum.Enum):
    COMPLETED_CLEAN = "CompletedClean"
    DETECTED_AND_TORN_DOWN = "DetectedAndTornDown"
    GRACEFUL_TEARDOWN = "GracefulTeardown"
    UNDETECTED = "Undetected"


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 1
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


@dataclass
class ScenarioConfig:
    duration: int = 10
    seed: int = field(default_factory=default_seed)
    audio: str = "synthetic"
    raw_audio: bool = False
    adversary: list = field(default_factory=list)
    lot: LotPolicy = field(default_factory=LotPolicy)
    delta: int = aw.DEFAULT_DELTA
    k: int = 4
    channel: str = "memory"
    proxy_hops: int = 1
    hangup_at: int | None = None
    info_every: int = 0
    ts_base: int = 1_600_000_000
    gateway_pass: bytes = b"mg-shared-secret"
    endpoint_pass: bytes = b"pstn-pair-secret"
    caller_id: int = 0x00A11CE0
    callee_id: int = 0x00B0B000
    gateway_a_id: int = 0x0A0A0A0A
    gateway_b_id: int = 0x0B0B0B0B
    expect: str | None = None

    def validate(self) -> "ScenarioConfig":
        if self.duration < 1:
            raise ConfigError("duration must be a positive number of windows")
        if self.delta not in CALIBRATED_DELTAS:
            raise ConfigError(f"delta {self.delta} not in calibrated set {CALIBRATED_DELTAS}")
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if self.channel not in ("memory", "udp"):
            raise ConfigError(f"channel must be 'memory' or 'udp', got {self.channel!r}")
        if self.proxy_hops < 0:
            raise ConfigError("proxy_hops must be >= 0")
        if self.hangup_at is not None and not 1 <= self.hangup_at <= self.duration:
            raise ConfigError("hangup_at must lie within the call duration")
        if self.info_every < 0:
            raise ConfigError("info_every must be >= 0")
        if self.expect is not None and self.expect not in {o.value for o in Outcome}:
            raise ConfigError(f"unknown expected outcome {self.expect!r}")
        self.adversary = [a if isinstance(a, AdversaryAction) else AdversaryAction.from_dict(a)
                          for a in self.adversary]
        if self.audio != "synthetic" and not Path(self.audio).is_file():
            raise ConfigError(f"audio file not found: {self.audio}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lot"] = asdict(self.lot)
        d["adversary"] = [a.to_dict() for a in self.adversary]
        d["gateway_pass"] = self.gateway_pass.decode("utf-8", "replace")
        d["endpoint_pass"] = self.endpoint_pass.decode("utf-8", "replace")
        return d


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, base=path.parent)


def config_from_dict(data: dict, base: Path | None = None) -> ScenarioConfig:
    data = dict(data)
    known = set(ScenarioConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "lot" in data:
        try:
            data["lot"] = LotPolicy(**data["lot"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"lot: {exc}") from exc
    for key in ("gateway_pass", "endpoint_pass"):
        if isinstance(data.get(key), str):
            data[key] = data[key].encode("utf-8")
    if base is not None and data.get("audio", "synthetic") != "synthetic":
        p = Path(data["audio"])
        data["audio"] = str(p if p.is_absolute() else base / p)
    try:
        cfg = ScenarioConfig(**data)
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def read_pcm(path: str | Path, raw: bool = False) -> np.ndarray:
    """Mono 16-bit 8 kHz WAV, or raw little-endian int16 samples."""
    path = Path(path)
    if raw:
        return np.frombuffer(path.read_bytes(), dtype="<i2").astype(np.int16)
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2 or wf.getframerate() != SAMPLE_RATE:
            raise ConfigError(f"{path}: need mono 16-bit {SAMPLE_RATE} Hz PCM, got "
                              f"{wf.getnchannels()} ch / {8 * wf.getsampwidth()} bit / {wf.getframerate()} Hz")
        return np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2").astype(np.int16)


def write_pcm(path: str | Path, samples: np.ndarray, raw: bool = False) -> None:
    data = np.asarray(samples, dtype="<i2").tobytes()
    if raw:
        Path(path).write_bytes(data)
        return
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(data)


def _rng_stream(seq: np.random.SeedSequence):
    gen = np.random.default_rng(seq)
    return lambda: int(gen.integers(0, 1 << 32))


@dataclass
class ScenarioReport:
    config: dict
    outcome: str
    outcome_window: int | None
    windows: list
    signalling: dict
    covert: dict
    bandwidth: dict
    events: list
    event_log: list = field(default_factory=list)

    @property
    def lot_trace(self) -> list[int]:
        return [w["gateway"]["lot"] for w in self.windows]

    @property
    def decisions(self) -> list[str]:
        return [w["gateway"]["decision"] for w in self.windows]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lot_trace"] = self.lot_trace
        d["decisions"] = self.decisions
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        g = [w["gateway"]["result"] for w in self.windows]
        e = [w["endpoint"] for w in self.windows]
        lines = [
            f"outcome: {self.outcome}" + (f" (window {self.outcome_window})" if self.outcome_window else ""),
            f"windows: {len(self.windows)}  gateway Match {g.count('Match')} / Mismatch {g.count('Mismatch')}"
            f" / Skipped {g.count('Skipped')}",
            f"endpoint layer-1: Match {e.count('Match')} / Mismatch {e.count('Mismatch')} / Skipped {e.count('Skipped')}",
            f"LoT trace: {' '.join(map(str, self.lot_trace))}",
            f"SB digests equal: {self.signalling['equal']}",
            f"post-auth: sent {self.covert['post_auth_sent']}, checked {self.covert['post_auth_checked']},"
            f" failed {self.covert['post_auth_failures']}",
            f"voice bytes on wire {self.bandwidth['voice_bytes']} / baseline {self.bandwidth['baseline_bytes']}",
        ]
        if self.events:
            lines.append("events: " + "; ".join(f"w{w}:{ev}" for w, ev in self.events))
        return "\n".join(lines) + "\n"


class _Call:
    """Wiring of the two PSTN endpoints, two MG/MGC pairs and the IP leg."""

    CIC = 101

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).spawn(6)
        stream_rng = np.random.default_rng(seeds[4])
        stream = RtpStream(ssrc=int(stream_rng.integers(0, 1 << 32)),
                           seq0=int(stream_rng.integers(0, 1 << 16)),
                           ts0=int(stream_rng.integers(0, 1 << 32)),
                           ip_id0=int(stream_rng.integers(0, 1 << 16)))
        clock = LogicalClock(cfg.ts_base)
        common = dict(password=cfg.gateway_pass, policy=cfg.lot, delta=cfg.delta, chain_k=cfg.k,
                      clock=clock, stream=stream)
        self.mg_a = MediaGateway(Role.SENDER, gateway_id=cfg.gateway_a_id, peer_id=cfg.gateway_b_id,
                                 rng=_rng_stream(seeds[0]), name="mg-a", **common)
        self.mg_b = MediaGateway(Role.RECEIVER, gateway_id=cfg.gateway_b_id, peer_id=cfg.gateway_a_id,
                                 rng=_rng_stream(seeds[1]), name="mg-b", **common)
        self.ep_a = PstnEndpoint(cfg.caller_id, cfg.endpoint_pass, peer_id=cfg.callee_id,
                                 delta=cfg.delta, ts_base=cfg.ts_base, rng=_rng_stream(seeds[2]))
        self.ep_b = PstnEndpoint(cfg.callee_id, cfg.endpoint_pass, peer_id=cfg.caller_id,
                                 delta=cfg.delta, ts_base=cfg.ts_base)
        adv_seeds = seeds[3].spawn(2)
        self.adv_ab = Adversary(list(cfg.adversary), seed=int(adv_seeds[0].generate_state(1)[0]),
                                delta=cfg.delta)
        self.adv_ba = Adversary([a for a in cfg.adversary if a.kind is ActionKind.REPLACE_SIGNALLING],
                                seed=int(adv_seeds[1].generate_state(1)[0]), delta=cfg.delta)
        proxies_ab = [ch.SipProxy(f"proxy{i}.transit.example") for i in range(cfg.proxy_hops)]
        proxies_ba = [ch.SipProxy(f"proxy{i}.transit.example") for i in reversed(range(cfg.proxy_hops))]
        # the attacker sits between the proxies and the far gateway
        self.ab = ch.make_channel(cfg.channel, proxies_ab + [self.adv_ab])
        self.ba = ch.make_channel(cfg.channel, proxies_ba + [self.adv_ba])
        self.audio = self._load_audio(seeds[5])
        self.events: list = []
        self.seen_by_b: dict[str, sig.SipMessage] = {}
        self.release_due: sig.SipMessage | None = None

    def _load_audio(self, seq) -> np.ndarray:
        need = self.cfg.duration * aw.WINDOW_SAMPLES
        if self.cfg.audio == "synthetic":
            return synthetic_speech(need / SAMPLE_RATE, seed=int(seq.generate_state(1)[0]))
        pcm = read_pcm(self.cfg.audio, self.cfg.raw_audio)
        if pcm.size < need:
            pcm = np.resize(pcm, need) if pcm.size else np.zeros(need, dtype=np.int16)
        return pcm[:need]

    def close(self):
        self.ab.close()
        self.ba.close()

    # signalling helpers
    def _deliver(self, chan: ch.Channel, window: int, to: MediaGateway) -> list:
        """Flush ``chan`` up to the end-of-window marker; SIP goes to ``to``."""
        chan.send(ch.mark(window))
        media = []
        for d in chan.recv_until_mark(window):
            try:
                kind, obj = ch.decode(d)
            except ValueError as exc:
                self.events.append((window, f"{to.name}:unparsable_datagram"))
                log.warning("%s: dropping unparsable datagram: %s", to.name, exc)
                continue
            if kind == ch.SIP:
                self._signal_in(to, obj)
            elif kind == ch.MEDIA:
                media.append(obj)
        if to is self.mg_b and self.release_due is not None:
            self._release_complete(window)
        return media

    def _signal_in(self, mg: MediaGateway, m: sig.SipMessage) -> None:
        if mg is self.mg_b and m.is_request:
            self.seen_by_b[m.method] = m
        mg.on_signalling(m, "in")
        if mg is self.mg_b and m.is_request and m.method == "BYE" and mg.state.phase is Phase.TEARDOWN_PENDING:
            self.release_due = m

    def _release_complete(self, window: int) -> None:
        """MG_B answers BYE/REL with 200/RLC at once; media is retained until authenticated."""
        bye, self.release_due = self.release_due, None
        rlc = sig.make_response(bye, 200, body=sig.isup_body(sig.build_rlc(self.CIC)),
                                content_type=SIPT_CONTENT_TYPE)
        self._send_sip(self.mg_b, self.ba, rlc)
        self._deliver(self.ba, window, self.mg_a)

    def _send_sip(self, mg: MediaGateway, chan: ch.Channel, m: sig.SipMessage) -> None:
        mg.on_signalling(m, "out")
        chan.send(ch.sip(m))

    def setup(self) -> None:
        iam = sig.build_iam(self.CIC, called="4825551000", calling="4822553000")
        self.invite = sig.make_request(
            "INVITE", "sip:+4825551000@mg-b.example", from_="<sip:+4822553000@mg-a.example>;tag=a1",
            to="<sip:+4825551000@mg-b.example>", call_id=f"call-{self.cfg.seed}@mg-a.example", cseq=1,
            via=["SIP/2.0/UDP mg-a.example;branch=z9hG4bK-a1"], extra=[("Contact", "<sip:mg-a.example>")],
            body=sig.isup_body(iam), content_type=SIPT_CONTENT_TYPE)
        self._send_sip(self.mg_a, self.ab, self.invite)
        self._deliver(self.ab, 0, self.mg_b)
        invite_b = self.seen_by_b.get("INVITE")
        if invite_b is None:
            raise RuntimeError("INVITE never reached the terminating gateway")
        for status, isup in ((183, sig.build_acm(self.CIC)), (200, sig.build_anm(self.CIC))):
            resp = sig.make_response(invite_b, status, to_tag="b1", body=sig.isup_body(isup),
                                     content_type=SIPT_CONTENT_TYPE)
            self._send_sip(self.mg_b, self.ba, resp)
            self._deliver(self.ba, 0, self.mg_a)
        self._send_sip(self.mg_a, self.ab, self._in_dialog("ACK", 1, "a2"))
        self._deliver(self.ab, 0, self.mg_b)

    def _in_dialog(self, method: str, cseq: int, branch: str, body: bytes = b"",
                   content_type: str | None = None) -> sig.SipMessage:
        inv = self.invite
        return sig.make_request(method, inv.uri, from_=inv.get("From"), to=inv.get("To") + ";tag=b1",
                                call_id=inv.get("Call-ID"), cseq=cseq,
                                via=[f"SIP/2.0/UDP mg-a.example;branch=z9hG4bK-{branch}"],
                                body=body, content_type=content_type)

    def hangup(self, window: int) -> None:
        """Caller hangs up before ``window``: REL from the PSTN, BYE with SIP-T body onto the IP leg."""
        bye = self._in_dialog("BYE", 2, "a3", sig.isup_body(sig.build_rel(self.CIC)), SIPT_CONTENT_TYPE)
        self._send_sip(self.mg_a, self.ab, bye)
        self._deliver(self.ab, window, self.mg_b)


def run_scenario(cfg: ScenarioConfig) -> ScenarioReport:
    cfg.validate()
    call = _Call(cfg)
    try:
        return _run(call)
    finally:
        call.close()


def _run(call: _Call) -> ScenarioReport:
    cfg = call.cfg
    call.setup()

    hangup_window = cfg.hangup_at if cfg.hangup_at is not None else cfg.duration
    outcome = None
    outcome_window = None
    windows: list[dict] = []
    wire_bytes = 0
    frames_sent = 0
    teardown_authenticated_at = None

    for n in range(1, cfg.duration + 1):
        if call.mg_a.state.phase is Phase.TERMINATED:
            break
        if not call.mg_a.state.media_flowing:
            # the answer never matched our INVITE transaction, so no media leaves A
            call.events.append((n, "mg-a:no_answer"))
            break
        if n == hangup_window:
            call.hangup(n)
        speech = aw.VoiceWindow(call.audio[(n - 1) * aw.WINDOW_SAMPLES:n * aw.WINDOW_SAMPLES], n)
        from_a = endpoint_send(call.ep_a, speech)
        info = ()
        if cfg.info_every and n % cfg.info_every == 0:
            info = (n.to_bytes(4, "big") + frames_sent.to_bytes(4, "big"),)
        _marked, packets, token = call.mg_a.send_window(from_a, info)
        for p in packets:
            call.ab.send(ch.media(p))
        frames_sent += len(packets)
        received = call._deliver(call.ab, n, call.mg_b)

        if not call.mg_b.state.media_flowing:
            call.events.append((n, "mg-b:media_not_accepted"))
            break
        rec, _notify = call.mg_b.receive_window(received)
        wire_bytes += sum(len(p.payload) for p in received)
        w_b = call.mg_b.last_window
        if rec.result is WindowResult.SKIPPED or len(received) < aw.WINDOW_FRAMES:
            call.ep_b.next_ts()
            ep_result = "Skipped"
        elif rec.decision is MgcDecision.TEARDOWN:
            ep_result = "Skipped"  # media is not forwarded after the MGC drops the call
            call.ep_b.next_ts()
        else:
            ep_result = endpoint_verify(call.ep_b, aw.adda_roundtrip(w_b)).value
        adv = [what for w, what in call.adv_ab.log + call.adv_ba.log if w == n]
        windows.append({"window": n, "gateway": rec.to_dict(), "endpoint": ep_result,
                        "adversary": sorted(set(adv))})
        for ev in rec.events:
            if ev in ("teardown_rollback", "teardown_authenticated", "mgc_teardown"):
                call.events.append((n, ev))

        if rec.decision is MgcDecision.TEARDOWN:
            outcome, outcome_window = Outcome.DETECTED_AND_TORN_DOWN, n
            break
        if "teardown_authenticated" in rec.events:
            teardown_authenticated_at = n
            break

    if outcome is None:
        tampered = call.adv_ab.tampered + call.adv_ba.tampered
        detected = any(w["gateway"]["result"] == "Mismatch" or w["endpoint"] == "Mismatch"
                       for w in windows) or any(ev == "teardown_rollback" for _, ev in call.events)
        if call.mg_b.state.phase is not Phase.TERMINATED:
            call.events.append((len(windows), "mg-b:media_timeout"))
            outcome, outcome_window = Outcome.DETECTED_AND_TORN_DOWN, len(windows)
        elif tampered and not detected:
            outcome = Outcome.UNDETECTED
        elif cfg.hangup_at is not None and teardown_authenticated_at is not None \
                and teardown_authenticated_at < cfg.duration:
            outcome, outcome_window = Outcome.GRACEFUL_TEARDOWN, teardown_authenticated_at
        else:
            outcome = Outcome.COMPLETED_CLEAN

    sb_a = [d.hex() for _, d in call.mg_a.state.sb.entries]
    sb_b = [d.hex() for _, d in call.mg_b.state.sb.entries]
    failures = sum(w["gateway"]["post_auth"].count("Mismatch") for w in windows)
    report = ScenarioReport(
        config=cfg.to_dict(),
        outcome=outcome.value,
        outcome_window=outcome_window,
        windows=windows,
        signalling={"sb_a": sb_a, "sb_b": sb_b, "equal": sb_a == sb_b,
                    "log_a": call.mg_a.signalling_log, "log_b": call.mg_b.signalling_log},
        covert={"pdus_sent": call.mg_a.encoder.sent, "post_auth_sent": call.mg_a.encoder.post_auth_sent,
                "pdus_received": call.mg_b.decoder.received,
                "post_auth_checked": call.mg_b.decoder.post_auth_checked, "post_auth_failures": failures,
                "header_bits_per_pdu": 6},
        bandwidth={"voice_bytes": call.ab.sent_voice_bytes, "baseline_bytes": frames_sent * aw.FRAME_SAMPLES,
                   "received_voice_bytes": wire_bytes},
        events=[list(e) for e in call.events],
        event_log=call.mg_b.event_log().splitlines(),
    )
    return report


def expectation_met(report: ScenarioReport, expect: str | None) -> bool:
    return expect is None or report.outcome == expect
