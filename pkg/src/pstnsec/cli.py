"""Command line entry point: ``pstnsec run|calibrate-delta|embed|extract|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import audio_watermark as aw
from .gateway import parse_log_line
from .simulator import scenario as sc

log = logging.getLogger("pstnsec")


def _window_count(samples: np.ndarray) -> int:
    n = samples.size // aw.WINDOW_SAMPLES
    if n == 0:
        raise SystemExit(f"need at least {aw.WINDOW_SAMPLES} samples (one 1 s window), got {samples.size}")
    return n


def cmd_run(args) -> int:
    try:
        cfg = sc.load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.channel is not None:
            cfg.channel = args.channel
        cfg.validate()
    except sc.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    report = sc.run_scenario(cfg)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.event_log:
        Path(args.event_log).write_text("".join(line + "\n" for line in report.event_log))
    sys.stdout.write(report.summary())
    if not sc.expectation_met(report, cfg.expect):
        print(f"expected outcome {cfg.expect}, got {report.outcome}", file=sys.stderr)
        return 1
    return 0


def cmd_calibrate(args) -> int:
    samples = sc.read_pcm(args.audio, args.raw)
    _window_count(samples)
    chosen, results = aw.calibrate_delta(samples, seed=args.seed, passes=args.passes,
                                         worst_case=not args.corpus_only)
    for delta in sorted(results):
        print(f"delta={delta:5d} errors={results[delta]}")
    if chosen is None:
        print("no candidate step survives", file=sys.stderr)
        return 1
    print(f"chosen delta={chosen}")
    return 0


def _layer(args) -> aw.WatermarkLayer:
    return aw.WatermarkLayer(aw.Layer(args.layer), args.delta)


def cmd_embed(args) -> int:
    samples = sc.read_pcm(args.input, args.raw)
    n = _window_count(samples)
    payload = bytes.fromhex(args.hex)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    if bits.size > aw.LAYER_CAPACITY:
        print(f"payload of {bits.size} bits exceeds layer capacity {aw.LAYER_CAPACITY}", file=sys.stderr)
        return 2
    out = samples.copy()
    layer = _layer(args)
    for i in range(n):
        sl = slice(i * aw.WINDOW_SAMPLES, (i + 1) * aw.WINDOW_SAMPLES)
        w = aw.adda_roundtrip(aw.VoiceWindow(samples[sl], i + 1))
        out[sl] = aw.embed_bits(w, layer, bits).flat
    sc.write_pcm(args.output, out, args.raw)
    print(f"embedded {bits.size} bits into {n} window(s) on layer {args.layer}")
    return 0


def cmd_extract(args) -> int:
    samples = sc.read_pcm(args.input, args.raw)
    n = _window_count(samples)
    layer = _layer(args)
    for i in range(n):
        w = aw.VoiceWindow(samples[i * aw.WINDOW_SAMPLES:(i + 1) * aw.WINDOW_SAMPLES], i + 1)
        bits = aw.extract_bits(w, layer, 8 * args.nbytes)
        print(f"{i + 1}\t{np.packbits(bits).tobytes().hex()}")
    return 0


def cmd_report(args) -> int:
    text = Path(args.log).read_text()
    if text.lstrip().startswith("{"):
        report = sc.ScenarioReport(**{k: v for k, v in json.loads(text).items()
                                      if k in sc.ScenarioReport.__dataclass_fields__})
        sys.stdout.write(report.summary())
        return 0
    counts: dict[str, int] = {}
    last = None
    for no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            last = parse_log_line(line)
        except (KeyError, ValueError):
            print(f"malformed event log line {no}: {line[:60]!r}", file=sys.stderr)
            return 1
        counts[last["result"]] = counts.get(last["result"], 0) + 1
    if last is None:
        print("empty event log", file=sys.stderr)
        return 1
    print("windows: " + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    print(f"last window {last['window']}: lot={last['lot']} decision={last['decision']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pstnsec", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a call scenario")
    r.add_argument("config", help="scenario TOML file")
    r.add_argument("-o", "--out", help="write the JSON report here instead of stdout")
    r.add_argument("--event-log", help="also write the receiving gateway's per-window records")
    r.add_argument("--seed", type=int, help=f"override seed (default: config, then ${sc.SEED_ENV})")
    r.add_argument("--channel", choices=("memory", "udp"))
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate-delta", help="pick the smallest QIM step that survives μ-law round trips")
    c.add_argument("audio")
    c.add_argument("--raw", action="store_true", help="input is raw little-endian int16")
    c.add_argument("--passes", type=int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--corpus-only", action="store_true", help="skip the exhaustive int16 sweep")
    c.set_defaults(func=cmd_calibrate)

    for name, func in (("embed", cmd_embed), ("extract", cmd_extract)):
        e = sub.add_parser(name, help=f"{name} a payload in every 1 s window of a file")
        e.add_argument("input")
        if name == "embed":
            e.add_argument("output")
            e.add_argument("--hex", required=True, help="payload bytes as hex")
        else:
            e.add_argument("--nbytes", type=int, default=16)
        e.add_argument("--layer", type=int, choices=(1, 2), default=1)
        e.add_argument("--delta", type=int, default=aw.DEFAULT_DELTA)
        e.add_argument("--raw", action="store_true")
        e.set_defaults(func=func)

    rep = sub.add_parser("report", help="summarize a JSON report or a gateway event log")
    rep.add_argument("log")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
