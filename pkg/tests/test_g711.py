import numpy as np

import oracles
from pstnsec import g711

ALL = np.arange(-32768, 32768, dtype=np.int64)


def test_encode_matches_audioop_for_every_sample():
    ours = g711.encode(ALL).tobytes()
    assert ours == oracles.ulaw_encode([int(v) for v in ALL])


def test_decode_matches_audioop_for_every_code():
    codes = np.arange(256, dtype=np.uint8)
    assert list(g711.decode(codes)) == oracles.ulaw_decode(codes.tobytes())


def test_roundtrip_idempotent():
    once = g711.roundtrip(ALL)
    assert np.array_equal(g711.roundtrip(once), once)
    assert g711.roundtrip(np.array([0]))[0] == 0


def test_dtypes():
    assert g711.encode(np.zeros(3, dtype=np.int16)).dtype == np.uint8
    assert g711.decode(np.zeros(3, dtype=np.uint8)).dtype == np.int16
