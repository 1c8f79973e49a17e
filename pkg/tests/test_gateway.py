import itertools

import numpy as np
import pytest

import oracles
from pstnsec import audio_watermark as aw
from pstnsec import covert_channel as cc
from pstnsec import g711
from pstnsec import signalling as sig
from pstnsec.gateway import (LogicalClock, LotPolicy, MediaGateway, MgcDecision, Phase, Role, RtpStream,
                             WallClock, WindowResult, mgc_decide, parse_log_line)
from pstnsec.simulator.speech import synthetic_speech
from pstnsec.token_core import VerifyResult

CIC = 5


def counter_rng(start=1):
    it = itertools.count(start)
    return lambda: next(it)


def make_pair(policy=LotPolicy(), stream=RtpStream(ssrc=9, seq0=65500, ts0=1, ip_id0=65530)):
    clock = LogicalClock(1000)
    a = MediaGateway(Role.SENDER, gateway_id=1, peer_id=2, password=b"gw-password", policy=policy,
                     rng=counter_rng(), clock=clock, stream=stream, name="a")
    b = MediaGateway(Role.RECEIVER, gateway_id=2, peer_id=1, password=b"gw-password", policy=policy,
                     rng=counter_rng(), clock=clock, stream=stream, name="b")
    return a, b


def invite():
    return sig.make_request("INVITE", "sip:x@b", from_="<sip:y@a>;tag=1", to="<sip:x@b>", call_id="c1",
                            cseq=1, via=["SIP/2.0/UDP a"], body=sig.isup_body(sig.build_iam(CIC, "123")),
                            content_type=sig.ISUP_CONTENT_TYPE)


def answer(inv):
    return sig.make_response(inv, 200, to_tag="2", body=sig.isup_body(sig.build_anm(CIC)),
                             content_type=sig.ISUP_CONTENT_TYPE)


def bye(cseq=2):
    return sig.make_request("BYE", "sip:x@b", from_="<sip:y@a>;tag=1", to="<sip:x@b>;tag=2", call_id="c1",
                            cseq=cseq, via=["SIP/2.0/UDP a"], body=sig.isup_body(sig.build_rel(CIC)),
                            content_type=sig.ISUP_CONTENT_TYPE)


def establish(a, b):
    inv = invite()
    a.on_signalling(inv, "out")
    b.on_signalling(inv, "in")
    ok = answer(inv)
    b.on_signalling(ok, "out")
    a.on_signalling(ok, "in")


def speech_windows(n, seed=3):
    sp = synthetic_speech(float(n), seed=seed)
    return [aw.VoiceWindow(sp[i * aw.WINDOW_SAMPLES:(i + 1) * aw.WINDOW_SAMPLES], i + 1) for i in range(n)]


def transfer(a, b, w, tamper=None):
    _, packets, token = a.send_window(w)
    if tamper:
        packets = tamper(packets)
    rec, notify = b.receive_window(packets)
    return rec, notify, token


def test_lot_policy_oracle():
    p = LotPolicy()
    lot, trace = p.initial, []
    for _ in range(10):
        lot = p.update(lot, VerifyResult.MATCH)
        trace.append(lot)
    assert trace == [4, 5, 6, 7, 8, 9, 10, 10, 10, 10]
    assert p.update(3, VerifyResult.MISMATCH) == 1
    assert p.update(1, VerifyResult.MISMATCH) == 0
    assert p.update(0, VerifyResult.MISMATCH) == 0
    with pytest.raises(ValueError):
        LotPolicy(initial=11)
    with pytest.raises(ValueError):
        LotPolicy(penalty=0)


def test_mgc_decide():
    assert mgc_decide(0) is MgcDecision.TEARDOWN
    assert mgc_decide(1) is MgcDecision.CONTINUE


def test_signalling_phases():
    a, _ = make_pair()
    inv = invite()
    a.on_signalling(inv, "out")
    assert a.state.phase is Phase.SETUP and len(a.state.sb) == 2  # SIP and its ISUP IAM
    assert a.state.sb.lookup(1) == oracles.sha256(sig.canonical_bytes(inv))
    assert a.state.sb.lookup(2) == oracles.sha256(sig.serialize_isup(sig.build_iam(CIC, "123")))
    a.on_signalling(answer(inv), "in")
    assert a.state.phase is Phase.ACTIVE
    a.on_signalling(bye(), "out")
    assert a.state.phase is Phase.TEARDOWN_PENDING and a.state.media_flowing
    n = len(a.state.sb)
    a.on_signalling(bye(3), "out")
    assert a.state.phase is Phase.TEARDOWN_PENDING and len(a.state.sb) == n + 2


def _isup_only(mtype):
    return {"iam": sig.build_iam(CIC, "1"), "anm": sig.build_anm(CIC), "rel": sig.build_rel(CIC),
            "acm": sig.build_acm(CIC)}[mtype]


TRANSITIONS = {
    # (phase, message) -> phase
    (Phase.SETUP, "invite"): Phase.SETUP,
    (Phase.SETUP, "acm"): Phase.SETUP,
    (Phase.SETUP, "anm"): Phase.ACTIVE,
    (Phase.SETUP, "ok"): Phase.ACTIVE,
    (Phase.SETUP, "bye"): Phase.TEARDOWN_PENDING,
    (Phase.SETUP, "rel"): Phase.TEARDOWN_PENDING,
    (Phase.ACTIVE, "invite"): Phase.ACTIVE,
    (Phase.ACTIVE, "acm"): Phase.ACTIVE,
    (Phase.ACTIVE, "anm"): Phase.ACTIVE,
    (Phase.ACTIVE, "ok"): Phase.ACTIVE,
    (Phase.ACTIVE, "bye"): Phase.TEARDOWN_PENDING,
    (Phase.ACTIVE, "rel"): Phase.TEARDOWN_PENDING,
    (Phase.TEARDOWN_PENDING, "invite"): Phase.TEARDOWN_PENDING,
    (Phase.TEARDOWN_PENDING, "acm"): Phase.TEARDOWN_PENDING,
    (Phase.TEARDOWN_PENDING, "anm"): Phase.TEARDOWN_PENDING,
    (Phase.TEARDOWN_PENDING, "ok"): Phase.TEARDOWN_PENDING,
    (Phase.TEARDOWN_PENDING, "bye"): Phase.TEARDOWN_PENDING,
    (Phase.TEARDOWN_PENDING, "rel"): Phase.TEARDOWN_PENDING,
}


def message(kind):
    if kind == "invite":
        return invite()
    if kind == "ok":
        return answer(invite())
    if kind == "bye":
        return bye()
    return _isup_only(kind)


@pytest.mark.parametrize("order", list(itertools.product(["invite", "acm", "anm", "ok", "bye", "rel"], repeat=3)))
def test_transition_table(order):
    a, _ = make_pair()
    a.open_requests.add(("c1", 1, "INVITE"))  # as if our INVITE were outstanding
    for kind in order:
        before = a.state.phase
        n = len(a.state.sb)
        a.on_signalling(message(kind), "in")
        assert a.state.phase is TRANSITIONS[(before, kind)]
        assert len(a.state.sb) > n


def test_terminated_is_absorbing(caplog):
    a, b = make_pair()
    establish(a, b)
    a.on_signalling(bye(), "out")
    a.send_window(aw.VoiceWindow.silence())
    assert a.state.phase is Phase.TERMINATED
    n = len(a.state.sb)
    a.on_signalling(invite(), "in")
    assert a.state.phase is Phase.TERMINATED and len(a.state.sb) == n
    assert "after termination dropped" in caplog.text
    with pytest.raises(RuntimeError):
        a.send_window(aw.VoiceWindow.silence())


def test_stray_response_discarded():
    a, _ = make_pair()
    ok = answer(invite())
    a.on_signalling(ok, "in")
    assert len(a.state.sb) == 0 and a.state.phase is Phase.SETUP
    assert a.signalling_log == ["stray in SIP 200"]
    a.on_signalling(invite(), "out")
    a.on_signalling(ok, "in")
    assert len(a.state.sb) == 4 and a.state.phase is Phase.ACTIVE


def test_bad_sipt_body_hashes_sip_only():
    a, _ = make_pair()
    m = invite().with_body(b"NOTHEX")
    a.on_signalling(m)
    assert len(a.state.sb) == 1
    assert any("isup_parse_fault" in line for line in a.signalling_log)


def test_send_needs_signalling_and_media():
    a, _ = make_pair()
    with pytest.raises(RuntimeError):
        a.send_window(aw.VoiceWindow.silence())
    a.state.phase = Phase.ACTIVE
    with pytest.raises(RuntimeError):
        a.send_window(aw.VoiceWindow.silence())


def test_clean_call_lot_trace():
    a, b = make_pair()
    establish(a, b)
    lots = []
    for w in speech_windows(10):
        rec, notify, _ = transfer(a, b, w)
        assert rec.result is WindowResult.MATCH
        assert notify.event is sig.NotifyEvent.TOKEN_OK
        lots.append(rec.lot)
    assert lots == [4, 5, 6, 7, 8, 9, 10, 10, 10, 10]
    assert [r for _, r in b.replies] == [sig.MgcReply.CONTINUE] * 10


def test_fresh_r_per_window():
    a, b = make_pair()
    establish(a, b)
    w = aw.adda_roundtrip(speech_windows(1)[0])
    t1 = transfer(a, b, w)[2]
    t2 = transfer(a, b, w)[2]
    assert (t1.r, t2.r) == (1, 2) and t1.mac != t2.mac
    assert b.records[0].r == 1 and b.records[1].r == 2


def test_sb_difference_mismatches_everything():
    a, b = make_pair()
    establish(a, b)
    b.on_signalling(sig.build_acm(CIC), "in")  # never seen by the sender
    assert b.state.sb.chain_digest() != a.state.sb.chain_digest()
    results = [transfer(a, b, w)[0] for w in speech_windows(2)]
    assert [r.result for r in results] == [WindowResult.MISMATCH] * 2
    assert [r.lot for r in results] == [1, 0]
    assert [r.decision for r in results] == [MgcDecision.CONTINUE, MgcDecision.TEARDOWN]
    assert b.state.phase is Phase.TERMINATED
    assert b.replies[-1][1] is sig.MgcReply.SUBTRACT


def _flip_sample(index):
    def tamper(packets):
        frame, pos = divmod(index, aw.FRAME_SAMPLES)
        p = packets[frame]
        pcm = g711.decode(np.frombuffer(p.payload, dtype=np.uint8)).astype(np.int64)
        bit = aw.qim_decode(pcm[pos:pos + 1], aw.DEFAULT_DELTA)
        pcm[pos] = aw.qim_quantize(pcm[pos:pos + 1], 1 - bit, aw.DEFAULT_DELTA)[0]
        out = list(packets)
        out[frame] = cc.replace(p, payload=g711.encode(pcm).tobytes())
        return out
    return tamper


def test_single_cell_tamper_hits_one_window():
    a, b = make_pair()
    establish(a, b)
    ws = speech_windows(6)
    target = int(aw.layer_positions(aw.Layer.GATEWAY)[100])  # inside the 128 token bits
    got = [transfer(a, b, w, _flip_sample(target) if i == 3 else None)[0] for i, w in enumerate(ws)]
    # window 4 is hit; windows 3 and 5 are clean, and the post-auth PDU riding in
    # window 6 covers window 4's payload, so the chain flags it again there
    assert [r.result for r in got] == [WindowResult.MATCH] * 3 + [WindowResult.MISMATCH, WindowResult.MATCH,
                                                                 WindowResult.MISMATCH]
    assert got[2].post_auth == ["Match"] and got[5].post_auth == ["Mismatch"]


def test_voice_feature_tamper_detected():
    a, b = make_pair()
    establish(a, b)

    def louder(packets):
        out = list(packets)
        pcm = g711.decode(np.frombuffer(out[7].payload, dtype=np.uint8)).astype(np.int64)
        pcm[1::2] = np.clip(pcm[1::2] * 4 + 3000, -32768, 32767)
        out[7] = cc.replace(out[7], payload=g711.encode(pcm).tobytes())
        return out

    assert transfer(a, b, speech_windows(1)[0], louder)[0].result is WindowResult.MISMATCH


def test_legit_teardown_authenticated():
    a, b = make_pair()
    establish(a, b)
    ws = speech_windows(3)
    transfer(a, b, ws[0])
    m = bye()
    a.on_signalling(m, "out")
    b.on_signalling(m, "in")
    assert b.state.phase is Phase.TEARDOWN_PENDING
    rec = transfer(a, b, ws[1])[0]
    assert rec.result is WindowResult.MATCH and "teardown_authenticated" in rec.events
    assert a.state.phase is Phase.TERMINATED and b.state.phase is Phase.TERMINATED
    assert a.state.sb == b.state.sb


def test_forged_teardown_rolled_back():
    a, b = make_pair()
    establish(a, b)
    ws = speech_windows(4)
    transfer(a, b, ws[0])
    snapshot, seq = b.state.sb, b.state.next_seq
    b.on_signalling(bye(99), "in")  # the sender never produced this
    rec = transfer(a, b, ws[1])[0]
    assert rec.result is WindowResult.MISMATCH and "teardown_rollback" in rec.events
    assert b.state.phase is Phase.ACTIVE
    assert b.state.sb == snapshot and b.state.sb.chain_digest() == snapshot.chain_digest()
    assert b.state.next_seq == seq
    assert rec.lot == 2  # 4 - 2
    assert transfer(a, b, ws[2])[0].result is WindowResult.MATCH


def test_loss_policy():
    a, b = make_pair()
    establish(a, b)
    ws = speech_windows(3)
    rec = transfer(a, b, ws[0], lambda ps: ps[:48])[0]  # 96% received
    assert rec.result is WindowResult.SKIPPED and rec.lot == 3
    rec = transfer(a, b, ws[1], lambda ps: ps[:47])[0]
    assert rec.result is WindowResult.MISMATCH and rec.lot == 1
    assert transfer(a, b, ws[2])[0].result is WindowResult.MATCH


def test_reordered_packets_placed_by_seq():
    a, b = make_pair()  # seq0 near wrap-around on purpose
    establish(a, b)
    rec = transfer(a, b, speech_windows(1)[0], lambda ps: list(reversed(ps)))[0]
    assert rec.result is WindowResult.MATCH


def test_post_auth_mismatch_counts():
    a, b = make_pair()
    establish(a, b)
    ws = speech_windows(3)
    # corrupt the stored chain on the receiver so the next post-auth check fails
    transfer(a, b, ws[0])
    b.decoder.chain.payloads[0] = (0,) * 128
    transfer(a, b, ws[1])
    rec = transfer(a, b, ws[2])[0]
    assert rec.post_auth == ["Mismatch"] and rec.result is WindowResult.MISMATCH


def test_stale_timestamp():
    a, b = make_pair()
    establish(a, b)
    b.clock = LogicalClock(1001)  # receiver's clock runs one window ahead
    rec = transfer(a, b, speech_windows(1)[0])[0]
    assert "stale_ts" in rec.events and rec.result is WindowResult.MISMATCH


def test_wall_clock_tolerance():
    assert WallClock.tolerance == 30 and LogicalClock.tolerance == 0
    assert LogicalClock(0xFFFFFFFF)(1) == 0


def test_event_log_roundtrip():
    a, b = make_pair()
    establish(a, b)
    for w in speech_windows(4):
        transfer(a, b, w)
    lines = b.event_log().splitlines()
    assert len(lines) == 4
    parsed = [parse_log_line(line) for line in lines]
    assert [p["lot"] for p in parsed] == [4, 5, 6, 7]
    assert [p["post_auth"] for p in parsed] == [[], [], ["Match"], []]
    assert parsed[0]["r"] == 1 and len(parsed[0]["vf"]) == 8
