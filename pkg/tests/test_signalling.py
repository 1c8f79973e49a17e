import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pstnsec import signalling as sig
from pstnsec.signalling import IsupType, SignallingError

INVITE = (
    b"INVITE sip:+4825551000@mg-b.example SIP/2.0\r\n"
    b"Via: SIP/2.0/UDP mg-a.example;branch=z9hG4bK-1\r\n"
    b"Max-Forwards: 70\r\n"
    b"From: <sip:+4822553000@mg-a.example>;tag=a1\r\n"
    b"To: <sip:+4825551000@mg-b.example>\r\n"
    b"Call-ID: abc123@mg-a.example\r\n"
    b"CSeq: 1 INVITE\r\n"
    b"Content-Type: application/isup; version=itu-t92+\r\n"
    b"Content-Length: 12\r\n"
    b"\r\n"
    b"650009010203"
)

BUILDERS = {
    IsupType.IAM: lambda cic: sig.build_iam(cic, "4825551000", "4822553000"),
    IsupType.ACM: sig.build_acm,
    IsupType.ANM: sig.build_anm,
    IsupType.REL: sig.build_rel,
    IsupType.RLC: sig.build_rlc,
}


def test_parse_basic_request():
    m = sig.parse_sip(INVITE)
    assert m.is_request and m.method == "INVITE"
    assert m.cseq == (1, "INVITE")
    assert m.content_type == "application/isup"
    assert m.body == b"650009010203"
    assert sig.parse_sip(sig.serialize_sip(m)) == m


def test_lf_only_and_folding_and_compact():
    raw = (b"INVITE sip:x@y SIP/2.0\n"
           b"v: SIP/2.0/UDP h;branch=z9hG4bK-2\n"
           b"f: <sip:a@b>\n ;tag=9\n"
           b"t: <sip:x@y>\n"
           b"i: cid\n"
           b"CSeq: 4 INVITE\n\n")
    m = sig.parse_sip(raw)
    assert m.get("From") == "<sip:a@b> ;tag=9"
    assert m.get("Call-ID") == "cid"
    assert m.get_all("via") == ["SIP/2.0/UDP h;branch=z9hG4bK-2"]


def test_response_parse():
    raw = (b"SIP/2.0 183 Session Progress\r\nVia: SIP/2.0/UDP h\r\nFrom: a\r\nTo: b;tag=1\r\n"
           b"Call-ID: c\r\nCSeq: 1 INVITE\r\nContent-Length: 0\r\n\r\n")
    m = sig.parse_sip(raw)
    assert not m.is_request and m.status == 183 and m.reason == "Session Progress"


@pytest.mark.parametrize("raw, field", [
    (b"", "message"),
    (b"INVITE sip:x SIP/3.0\r\n\r\n", "start-line"),
    (b"SIP/2.0 99 Low\r\n\r\n", "start-line"),
    (b"SIP/2.0 abc OK\r\n\r\n", "start-line"),
    (INVITE.replace(b"Call-ID: abc123@mg-a.example\r\n", b""), "Call-ID"),
    (INVITE.replace(b"CSeq: 1 INVITE", b"CSeq: one INVITE"), "CSeq"),
    (INVITE.replace(b"To: <sip:", b"To: <sip:a>\r\nTo: <sip:"), "To"),
    (INVITE.replace(b"Via: SIP/2.0/UDP mg-a.example;branch=z9hG4bK-1\r\n", b""), "Via"),
    (INVITE.replace(b"Content-Length: 12", b"Content-Length: 40"), "Content-Length"),
    (INVITE.replace(b"Content-Length: 12", b"Content-Length: x"), "Content-Length"),
    (INVITE.replace(b"Max-Forwards: 70", b"Max Forwards 70"), "header"),
    (INVITE.replace(b"Content-Type: application/isup; version=itu-t92+\r\n", b""), "Content-Type"),
    (INVITE.replace(b"Call-ID: abc123@mg-a.example", b"Call-ID:  "), "Call-ID"),
    (b"\xff\xfe INVITE\r\n\r\n", "message"),
])
def test_torture_rejections(raw, field):
    with pytest.raises(SignallingError) as ei:
        sig.parse_sip(raw)
    assert ei.value.field == field


def test_body_truncated_to_content_length():
    m = sig.parse_sip(INVITE + b"TRAILING")
    assert m.body == b"650009010203"


def test_truncation_sweep_never_crashes():
    for n in range(len(INVITE)):
        try:
            sig.parse_sip(INVITE[:n])
        except SignallingError:
            pass


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=300))
def test_fuzz_only_signalling_errors(data):
    try:
        sig.parse_sip(data)
    except SignallingError:
        pass


@pytest.mark.parametrize("mtype", list(IsupType))
def test_isup_roundtrip_and_truncation(mtype):
    m = BUILDERS[mtype](0x123)
    raw = sig.serialize_isup(m)
    assert raw[:3] == bytes((0x23, 0x01, int(mtype)))
    assert sig.parse_isup(raw) == m
    for n in range(len(raw)):
        with pytest.raises(SignallingError):
            sig.parse_isup(raw[:n])
    with pytest.raises(SignallingError):
        sig.parse_isup(raw + b"\x99")


def test_isup_field_checks():
    with pytest.raises(SignallingError):
        sig.parse_isup(bytes((1, 0x10, 0x09, 0)))  # CIC spare bits
    with pytest.raises(SignallingError):
        sig.parse_isup(bytes((1, 0, 0x77, 0)))
    with pytest.raises(SignallingError):
        sig.IsupMessage(IsupType.ANM, 5000)
    iam = sig.build_iam(1, "12345")
    assert iam.params[5:8] == bytes((2, 0, 5))  # no optional part
    assert iam.params[8:] == bytes((0x83, 0x10, 0x21, 0x43, 0x05))  # odd, BCD nibbles swapped


@pytest.mark.parametrize("mtype", list(IsupType))
def test_sipt_body_roundtrip(mtype):
    isup = BUILDERS[mtype](77)
    req = sig.make_request("INFO", "sip:x@y", from_="<sip:a@b>;tag=1", to="<sip:x@y>", call_id="c",
                           cseq=3, via=["SIP/2.0/UDP h"], body=sig.isup_body(isup),
                           content_type=sig.ISUP_CONTENT_TYPE)
    back = sig.parse_sip(sig.serialize_sip(req))
    assert sig.extract_isup_body(back) == isup


def test_multipart_body():
    isup = sig.build_rel(9)
    body = (b"--XYZ\r\nContent-Type: application/sdp\r\n\r\nv=0\r\n"
            b"--XYZ\r\nContent-Type: application/isup; version=itu-t92+\r\n\r\n" + sig.isup_body(isup) +
            b"\r\n--XYZ--\r\n")
    m = sig.parse_sip(INVITE).with_body(body, 'multipart/mixed; boundary="XYZ"')
    assert sig.extract_isup_body(m) == isup
    with pytest.raises(SignallingError):
        sig.extract_isup_body(m.with_body(body, "multipart/mixed"))


def test_bad_hex_body():
    m = sig.parse_sip(INVITE).with_body(b"ZZZZ")
    with pytest.raises(SignallingError):
        sig.extract_isup_body(m)
    assert sig.extract_isup_body(m.with_body(b"v=0", "application/sdp")) is None


def test_canonical_bytes_ignore_transit_headers():
    m = sig.parse_sip(INVITE)
    base = sig.canonical_bytes(m)
    assert base.startswith(b"INVITE sip:+4825551000@mg-b.example SIP/2.0\r\nfrom:")
    routed = (m.prepend_header("Via", "SIP/2.0/UDP p1;branch=z9hG4bK-p")
              .prepend_header("Record-Route", "<sip:p1;lr>").with_header("Max-Forwards", "69")
              .with_header("Contact", "<sip:elsewhere>"))
    assert sig.canonical_bytes(routed) == base
    # header name case and compact forms do not matter either
    compact = sig.parse_sip(INVITE.replace(b"From:", b"f:").replace(b"Call-ID:", b"call-id:"))
    assert sig.canonical_bytes(compact) == base
    for name, value in (("From", "<sip:x@evil>;tag=a1"), ("To", "<sip:y@evil>"),
                        ("Call-ID", "other"), ("CSeq", "2 INVITE")):
        assert sig.canonical_bytes(m.with_header(name, value)) != base
    assert sig.canonical_bytes(m.with_body(b"650009010204")) != base


def test_teardown_and_describe():
    bye = sig.make_request("BYE", "sip:x", from_="a", to="b", call_id="c", cseq=2, via=["v"])
    assert sig.is_teardown(bye) and sig.is_teardown(sig.build_rel(1))
    assert not sig.is_teardown(sig.build_rlc(1))
    assert sig.describe(bye) == "SIP BYE" and sig.describe(sig.build_anm(1)) == "ISUP ANM"
    resp = sig.make_response(bye, 200, to_tag="t")
    assert resp.status == 200 and resp.get("To") == "b;tag=t" and resp.cseq == (2, "BYE")


def test_megaco_notify_roundtrip():
    n = sig.MegacoNotify("rtp/1", sig.NotifyEvent.TOKEN_FAIL, 12)
    text = n.encode(7, "[mg-b]")
    assert "pps/tokfail" in text
    assert sig.parse_notify(text) == (7, n)
    with pytest.raises(SignallingError):
        sig.parse_notify(text.replace("tokfail", "bogus"))
    with pytest.raises(SignallingError):
        sig.parse_notify("MEGACO/1 [x]\nTransaction = 1 { }")
    with pytest.raises(SignallingError):
        sig.MegacoNotify("bad id", sig.NotifyEvent.TOKEN_OK, 1)
