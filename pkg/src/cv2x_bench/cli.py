"""Command-line entry point: scenario/matrix runners, log analysis, and the
real-socket agent subcommands."""

from __future__ import annotations

import argparse
import json
import sys
import threading
from pathlib import Path

from . import analysis, scenario
from .agents import (ProcessingDelay, run_real_relay, run_real_sensor,
                     run_real_vehicle)
from .broker import Broker
from .loadgen import blast_udp


def _host_port(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"{text!r} is not host:port")
    return host, int(port)


def _fmt_ms(ns: float) -> str:
    return f"{ns / 1e6:.3f} ms"


def _print_stats(name: str, stats: analysis.LatencyStats) -> None:
    print(f"{name}: n={stats.n} mean={_fmt_ms(stats.mean_ns)} "
          f"p95={_fmt_ms(stats.p95_ns)} p99={_fmt_ms(stats.p99_ns)}")


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = scenario.load_config(args.config)
    result = scenario.run_scenario(cfg, out_dir=args.out)
    print(f"scenario {result.name}: sent={result.sensor_sent} "
          f"records={len(result.records)}")
    if result.records:
        for metric in ("ul", "dl", "e2e"):
            _print_stats(metric, result.stats(metric))
    if result.log_path is not None:
        print(f"log: {result.log_path}")
    return 0


def _cmd_matrix(args: argparse.Namespace) -> int:
    matrix = scenario.load_matrix_config(args.config)
    result = scenario.run_matrix(matrix, args.out)
    for name, res in result.results.items():
        _print_stats(name, res.stats("e2e"))
    print(f"stats: {result.stats_csv}")
    for name, error in result.failures.items():
        print(f"FAILED {name}: {error}", file=sys.stderr)
    return 1 if result.failures else 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    records = analysis.ingest(args.log)
    if not records:
        print("no records in log", file=sys.stderr)
        return 1
    stats = analysis.summarize(records, args.metric)
    name = Path(args.log).stem
    _print_stats(f"{name} [{args.metric}]", stats)
    if args.out:
        analysis.emit_report({name: stats}, args.out)
        analysis.write_per_packet_csv(
            records, Path(args.out) / f"per_packet_{analysis.safe_name(name)}.csv")
        analysis.emit_per_packet_chart(name, records, args.out)
        print(f"report written to {args.out}")
    return 0


def _cmd_init_matrix(args: argparse.Namespace) -> int:
    matrix = scenario.table1_matrix()
    Path(args.out).write_text(
        json.dumps(scenario.matrix_to_obj(matrix), indent=2) + "\n",
        encoding="utf-8")
    print(f"wrote built-in matrix to {args.out}")
    return 0


def _cmd_broker(args: argparse.Namespace) -> int:
    host, port = args.listen
    broker = Broker(host, port)
    broker.start()
    print(f"broker listening on {broker.host}:{broker.port}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
    return 0


def _cmd_sensor(args: argparse.Namespace) -> int:
    host, port = args.connect
    sent = run_real_sensor(host, port, frame_size_bytes=args.size,
                           rate_hz=args.rate, duration_s=args.duration,
                           source_id=args.source_id, topic=args.topic)
    print(f"sensor sent {sent} frames")
    return 0


def _cmd_relay(args: argparse.Namespace) -> int:
    host, port = args.connect
    stop = threading.Event()
    timer = threading.Timer(args.duration, stop.set) if args.duration else None
    if timer:
        timer.start()
    processing = ProcessingDelay(constant_ns=round(args.proc_ms * 1e6))
    try:
        forwarded, corrupt = run_real_relay(host, port, stop=stop,
                                            sub_topic=args.sub, pub_topic=args.pub,
                                            processing=processing)
    except KeyboardInterrupt:
        stop.set()
        forwarded = corrupt = -1
    finally:
        if timer:
            timer.cancel()
    print(f"relay forwarded {forwarded} frames, dropped {corrupt} corrupt")
    return 0


def _cmd_vehicle(args: argparse.Namespace) -> int:
    host, port = args.connect
    stop = threading.Event()
    timer = threading.Timer(args.duration, stop.set) if args.duration else None
    if timer:
        timer.start()
    sink = analysis.RecordWriter(args.log)
    try:
        records = run_real_vehicle(host, port, stop=stop, topic=args.topic,
                                   sink=sink, expected=args.expected)
    except KeyboardInterrupt:
        stop.set()
        records = []
    finally:
        sink.close()
        if timer:
            timer.cancel()
    print(f"vehicle logged {len(records)} records to {args.log}")
    return 0


def _cmd_loadgen(args: argparse.Namespace) -> int:
    sent = blast_udp(args.target, round(args.rate_mbps * 1e6), args.duration,
                     packet_size_bytes=args.size)
    print(f"loadgen sent {sent} datagrams")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cv2x-bench",
        description="Desk-scale C-V2X messaging testbed and analysis tool")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="directory for log + config echo")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("matrix", help="run an experiment matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_matrix)

    p = sub.add_parser("analyze", help="summarize a packet log")
    p.add_argument("--log", required=True)
    p.add_argument("--metric", choices=["ul", "dl", "e2e"], default="e2e")
    p.add_argument("--out", default=None, help="directory for CSV/SVG report")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("init-matrix", help="write the built-in matrix config")
    p.add_argument("--out", default="table1_matrix.json")
    p.set_defaults(func=_cmd_init_matrix)

    p = sub.add_parser("broker", help="run the pub-sub broker")
    p.add_argument("--listen", type=_host_port, default=("127.0.0.1", 4222))
    p.set_defaults(func=_cmd_broker)

    p = sub.add_parser("sensor", help="real-socket sensor agent")
    p.add_argument("--connect", type=_host_port, required=True)
    p.add_argument("--size", type=int, default=1000, help="frame size in bytes")
    p.add_argument("--rate", type=float, default=10.0, help="messages per second")
    p.add_argument("--duration", type=float, default=10.0, help="seconds")
    p.add_argument("--topic", default="UL")
    p.add_argument("--source-id", type=int, default=1)
    p.set_defaults(func=_cmd_sensor)

    p = sub.add_parser("relay", help="real-socket edge relay agent")
    p.add_argument("--connect", type=_host_port, required=True)
    p.add_argument("--sub", default="UL")
    p.add_argument("--pub", default="DL")
    p.add_argument("--proc-ms", type=float, default=0.0)
    p.add_argument("--duration", type=float, default=0.0,
                   help="stop after this many seconds (0 = run until ^C)")
    p.set_defaults(func=_cmd_relay)

    p = sub.add_parser("vehicle", help="real-socket vehicle agent")
    p.add_argument("--connect", type=_host_port, required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--topic", default="DL")
    p.add_argument("--duration", type=float, default=0.0)
    p.add_argument("--expected", type=int, default=None)
    p.set_defaults(func=_cmd_vehicle)

    p = sub.add_parser("loadgen", help="real-socket UDP background load")
    p.add_argument("--target", type=_host_port, required=True)
    p.add_argument("--rate-mbps", type=float, required=True)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--size", type=int, default=1400)
    p.set_defaults(func=_cmd_loadgen)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (scenario.ConfigError, analysis.IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
