"""Command-line entry point.

Subcommands: synth, convert, surface, run, verify, bench. Options can
come from a flat key-value config file (``--config``); explicit flags
win. Exit codes: 0 success, 2 usage or config error, 3 ran but produced
nothing, 1 internal error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import detect, events, matching, pipeline, surface


class UsageError(Exception):
    pass


class EmptyResult(Exception):
    pass


# ---------------------------------------------------------------------------
# flag value parsers (shared by flags and config files)


def _geometry(text: str) -> events.SensorGeometry:
    try:
        w, h = text.lower().split("x")
        return events.SensorGeometry(int(w), int(h))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad geometry {text!r}: {exc}")


def _velocity(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"velocity must be vx,vy, got {text!r}")
    return float(parts[0]), float(parts[1])


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"bad boolean {text!r}")


_CONVERTERS = {}


def _opt(sub, name, conv, default, help, **kwargs):
    """Register an option whose default can come from the config file."""
    _CONVERTERS.setdefault(sub.prog.split()[-1], {})[name] = (conv, default)
    flag = "--" + name
    if conv is _bool:
        sub.add_argument(flag, dest=name.replace("-", "_"), default=None,
                         action="store_const", const=True, help=help)
    else:
        sub.add_argument(flag, dest=name.replace("-", "_"), default=None,
                         type=conv, help=help, **kwargs)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evfront",
        description="Event-camera frontend: surfaces, keypoints, matching.")
    parser.add_argument("--config", help="flat key=value option file; "
                        "explicit flags take precedence")
    subs = parser.add_subparsers(dest="command", required=True)

    s = subs.add_parser("synth", help="generate a synthetic event stream")
    _opt(s, "pattern", str, "vertical-edge",
         "vertical-edge or grid-of-corners")
    _opt(s, "velocity", _velocity, (100.0, 0.0), "pattern speed, px/s as vx,vy")
    _opt(s, "duration", float, 1.0, "seconds of stream")
    _opt(s, "geometry", _geometry, events.SensorGeometry(64, 64),
         "sensor size WxH")
    _opt(s, "start-time", int, 0, "timestamp of t=0, microseconds")
    _opt(s, "grid-pitch", int, 16, "corner grid spacing, px")
    _opt(s, "square-side", int, 6, "corner grid square side, px")
    s.add_argument("--output", "-o", required=True, help="binary-v1 out path")

    s = subs.add_parser("convert", help="convert between event formats")
    s.add_argument("--input", "-i", required=True)
    s.add_argument("--output", "-o", required=True)
    _opt(s, "from-format", str, None, "binary-v1 or csv")
    _opt(s, "to-format", str, None, "binary-v1 or csv")
    _opt(s, "geometry", _geometry, None, "sensor size WxH (csv input only)")

    s = subs.add_parser("surface", help="build and export one surface stack")
    s.add_argument("--input", "-i", required=True, help="binary-v1 events")
    s.add_argument("--output-prefix", "-o", required=True)
    _opt(s, "tau", int, None, "reference time, us (default: last event)")
    _opt(s, "mode", str, "constant-count",
         "constant-count or fixed-duration")
    _opt(s, "counts", _float_list, surface.DEFAULT_NORMALIZED_COUNTS,
         "normalized per-pixel counts, comma separated")
    _opt(s, "durations", _int_list, None,
         "fixed window durations in us, comma separated")

    s = subs.add_parser("run", help="run the frontend pipeline over a stream")
    s.add_argument("--input", "-i", required=True, help="binary-v1 events")
    s.add_argument("--results", help="FrameResult JSONL out path")
    s.add_argument("--metrics", help="metrics JSON out path")
    s.add_argument("--timings-csv", help="per-interval stage timing CSV")
    _opt(s, "detector", str, "classical", "classical or learned")
    _opt(s, "weights", str, None, "SLWT weight file (learned)")
    _opt(s, "weights-seed", int, None,
         "random weights seed instead of a file (learned)")
    _opt(s, "tick", int, 10_000, "preprocessing period, us")
    _opt(s, "watermark-lag", int, 0, "event-time lag held back, us")
    _opt(s, "mode", str, "threaded", "threaded or serial")
    _opt(s, "paced", _bool, False, "pace replay by wall clock")
    _opt(s, "counts", _float_list, surface.DEFAULT_NORMALIZED_COUNTS,
         "normalized per-pixel counts")
    _opt(s, "channel-pair", int, 1, "classical detector channel pair")
    _opt(s, "nms-radius", int, 4, "NMS radius, px")
    _opt(s, "nms-threshold", float, 1e-4, "NMS score threshold")
    _opt(s, "nms-max-k", int, 256, "keypoint cap per frame")
    _opt(s, "max-distance", float, matching.DEFAULT_MAX_DISTANCE,
         "match acceptance ceiling, cosine distance")
    _opt(s, "metrics-interval", int, 60 * events.US_PER_S,
         "timing aggregation interval, us of event time")
    _opt(s, "no-descriptors", _bool, False,
         "elide descriptors from the results JSONL")

    s = subs.add_parser("verify",
                        help="motion-invariance comparison of window modes")
    _opt(s, "geometry", _geometry, events.SensorGeometry(100, 100),
         "sensor size WxH")
    _opt(s, "speed", float, 100.0, "base edge speed, px/s")
    _opt(s, "factor", float, 3.0, "speed multiplier for the second run")
    _opt(s, "counts", _float_list, surface.DEFAULT_NORMALIZED_COUNTS,
         "normalized per-pixel counts")

    s = subs.add_parser("bench", help="micro-benchmarks, CSV output")
    _opt(s, "workload", str, "all", "ingest, mcts, forward, match, or all")
    _opt(s, "events-n", int, 1_000_000, "base event count for ingest")
    _opt(s, "iterations", int, 5, "repeats per row")
    _opt(s, "seed", int, 0, "rng seed")
    s.add_argument("--output", "-o", help="CSV out path (default: stdout only)")

    return parser


def _load_config(path: str, command: str) -> dict:
    table = _CONVERTERS.get(command, {})
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in table:
            raise UsageError(f"config line {lineno}: unknown option {key!r} "
                             f"for {command}")
        conv = table[key][0]
        try:
            values[key] = conv(value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config line {lineno}: {exc}")
    return values


def _resolve(args: argparse.Namespace) -> dict:
    """Merge flags > config file > built-in defaults."""
    command = args.command
    overlay = _load_config(args.config, command) if args.config else {}
    resolved = {}
    for name, (_conv, default) in _CONVERTERS.get(command, {}).items():
        attr = name.replace("-", "_")
        cli_value = getattr(args, attr, None)
        if cli_value is not None:
            resolved[name] = cli_value
        elif name in overlay:
            resolved[name] = overlay[name]
        else:
            resolved[name] = default
    return resolved


# ---------------------------------------------------------------------------
# subcommands


def _read_batch(path: str) -> events.EventBatch:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}")
    return events.parse_events(data, "binary-v1")


def cmd_synth(opts, args) -> int:
    try:
        spec = events.MotionSpec(opts["pattern"], opts["velocity"],
                                 opts["duration"],
                                 grid_pitch=opts["grid-pitch"],
                                 square_side=opts["square-side"])
    except ValueError as exc:
        raise UsageError(str(exc))
    batch = events.synthesize(spec, opts["geometry"], opts["start-time"])
    Path(args.output).write_bytes(events.write_events(batch, "binary-v1"))
    if len(batch):
        span = int(batch.events["t"][-1]) - int(batch.events["t"][0])
    else:
        span = 0
    print(f"wrote {len(batch)} events spanning {span} us to {args.output}")
    if len(batch) == 0:
        raise EmptyResult("no events produced")
    return 0


def cmd_convert(opts, args) -> int:
    src, dst = opts["from-format"], opts["to-format"]
    if src not in ("binary-v1", "csv") or dst not in ("binary-v1", "csv"):
        raise UsageError("from-format and to-format must be binary-v1 or csv")
    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc}")
    try:
        batch = events.parse_events(data, src, geometry=opts["geometry"])
    except events.StreamFormatError as exc:
        raise UsageError(f"{args.input}: {exc}")
    except ValueError as exc:
        raise UsageError(str(exc))
    Path(args.output).write_bytes(events.write_events(batch, dst))
    print(f"converted {len(batch)} events to {dst} at {args.output}")
    return 0


def cmd_surface(opts, args) -> int:
    batch = _read_batch(args.input)
    if len(batch) == 0:
        raise UsageError("input stream is empty")
    if opts["mode"] == "constant-count":
        spec = surface.WindowSpec("constant-count",
                                  normalized_counts=opts["counts"])
    elif opts["mode"] == "fixed-duration":
        if not opts["durations"]:
            raise UsageError("fixed-duration mode needs --durations")
        spec = surface.WindowSpec("fixed-duration",
                                  durations=opts["durations"])
    else:
        raise UsageError(f"unknown mode {opts['mode']!r}")

    t = batch.events["t"]
    tau = int(t[-1]) if opts["tau"] is None else opts["tau"]
    cut = int(np.searchsorted(t, tau, side="right"))
    if cut == 0 and spec.mode == "constant-count":
        raise UsageError(f"tau {tau} precedes the first event "
                         f"({int(t[0])}) in constant-count mode")
    grid = surface.TimestampGrid.create(batch.geometry)
    ring = surface.EventCountRing(spec.ring_capacity(batch.geometry))
    surface.apply_events(grid, ring, batch.slice(0, cut))
    tensor = surface.mcts(grid, ring, tau, spec)

    prefix = args.output_prefix
    for idx in range(tensor.channels.shape[0]):
        path = f"{prefix}_ch{idx:02d}.pgm"
        Path(path).write_bytes(surface.write_pgm(tensor.channels[idx]))
    Path(prefix + ".mcts").write_bytes(surface.write_mcts(tensor))
    durs = ",".join(str(d) for d in tensor.window_durations)
    print(f"tau={tau} realized_durations_us={durs} "
          f"channels={tensor.channels.shape[0]} prefix={prefix}")
    return 0


def _crop_to_cell(batch: events.EventBatch, cell: int) -> events.EventBatch:
    w = (batch.geometry.width // cell) * cell
    h = (batch.geometry.height // cell) * cell
    if w == 0 or h == 0:
        raise UsageError(f"stream {batch.geometry.width}x"
                         f"{batch.geometry.height} smaller than one "
                         f"{cell}px cell")
    if (w, h) == (batch.geometry.width, batch.geometry.height):
        return batch
    ev = batch.events
    keep = (ev["x"] < w) & (ev["y"] < h)
    cropped = events.EventBatch(ev[keep], events.SensorGeometry(w, h))
    print(f"cropped stream to {w}x{h} ({len(batch) - len(cropped)} events "
          f"outside)")
    return cropped


def cmd_run(opts, args) -> int:
    batch = _read_batch(args.input)
    weights = None
    if opts["detector"] == "learned":
        if opts["weights"]:
            try:
                weights = detect.load_weights(Path(opts["weights"]).read_bytes())
            except OSError as exc:
                raise UsageError(f"cannot read weights: {exc}")
            except ValueError as exc:
                raise UsageError(f"bad weights file: {exc}")
        else:
            seed = opts["weights-seed"] if opts["weights-seed"] is not None \
                else 0
            weights = detect.random_weights(detect.NetworkSpec(), seed)
        batch = _crop_to_cell(batch, weights.spec.cell)
        if 2 * len(opts["counts"]) != weights.spec.input_channels:
            raise UsageError(
                f"{len(opts['counts'])} channel pairs feed "
                f"{2 * len(opts['counts'])} channels, weights expect "
                f"{weights.spec.input_channels}")
    elif opts["detector"] != "classical":
        raise UsageError(f"unknown detector {opts['detector']!r}")

    try:
        config = pipeline.PipelineConfig(
            tick=opts["tick"],
            window_spec=surface.WindowSpec(
                "constant-count", normalized_counts=opts["counts"]),
            detector=opts["detector"],
            weights=weights,
            channel_pair=opts["channel-pair"],
            nms_radius=opts["nms-radius"],
            nms_threshold=opts["nms-threshold"],
            nms_max_k=opts["nms-max-k"],
            match_max_distance=opts["max-distance"],
            watermark_lag=opts["watermark-lag"],
            metrics_interval=opts["metrics-interval"],
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    if opts["mode"] not in ("threaded", "serial"):
        raise UsageError(f"unknown mode {opts['mode']!r}")

    source = pipeline.ReplaySource(batch, paced=opts["paced"])
    results, metrics = pipeline.run_pipeline(source, config,
                                             mode=opts["mode"])

    if args.results:
        with open(args.results, "w") as fh:
            for r in results:
                fh.write(pipeline.result_to_json(
                    r, include_descriptors=not opts["no-descriptors"]) + "\n")
    if args.metrics:
        import json
        Path(args.metrics).write_text(
            json.dumps(metrics.as_dict(), indent=2) + "\n")
    if args.timings_csv:
        Path(args.timings_csv).write_bytes(pipeline.metrics_to_csv(metrics))
    total_matches = sum(len(r.matches_to_previous) for r in results)
    print(f"results={len(results)} versions={metrics.versions_applied} "
          f"events={metrics.events_applied} matches={total_matches}")
    if metrics.error:
        raise RuntimeError(f"source failed mid-run: {metrics.error}")
    if not results:
        raise EmptyResult("pipeline emitted no results")
    return 0


def cmd_verify(opts, args) -> int:
    report = surface.motion_invariance_report(
        opts["geometry"], opts["speed"], opts["factor"], opts["counts"])
    lo, hi = report.speeds
    print(f"speeds: {lo:g} and {hi:g} px/s")
    print(f"fixed durations (us): "
          f"{','.join(str(d) for d in report.fixed_durations)}")
    for tag, durs in zip(("base", "fast"), report.realized_durations):
        print(f"realized constant-count durations at {tag} speed (us): "
              f"{','.join(str(d) for d in durs)}")
    print("pair  l1_constant_count  l1_fixed_duration  smaller")
    for k, (a, b) in enumerate(zip(report.l1_constant_count,
                                   report.l1_fixed)):
        tag = "constant-count" if a < b else "fixed-duration"
        print(f"{k:4d}  {a:17.6f}  {b:17.6f}  {tag}")
    verdict = "pass" if report.passed else "fail"
    print(f"verdict: {verdict} ({report.pairs_favoring_constant}/"
          f"{len(report.l1_constant_count)} pairs favor constant-count)")
    return 0 if report.passed else 1


def _time_us(fn, iterations: int) -> tuple[float, float]:
    samples = []
    for _ in range(iterations):
        t0 = time.perf_counter_ns()
        fn()
        samples.append((time.perf_counter_ns() - t0) / 1_000)
    return float(np.mean(samples)), float(np.percentile(samples, 99))


def _random_stream(rng, n: int, geometry: events.SensorGeometry
                   ) -> events.EventBatch:
    t = np.sort(rng.integers(0, max(n * 10, 1), n).astype(np.uint64))
    return events.batch_from_columns(
        t,
        rng.integers(0, geometry.width, n).astype(np.uint16),
        rng.integers(0, geometry.height, n).astype(np.uint16),
        rng.choice(np.array([-1, 1], dtype=np.int8), n),
        geometry)


def cmd_bench(opts, args) -> int:
    if opts["iterations"] < 1:
        raise UsageError("iterations must be at least 1")
    wanted = opts["workload"]
    if wanted not in ("ingest", "mcts", "forward", "match", "all"):
        raise UsageError(f"unknown workload {wanted!r}")
    rng = np.random.default_rng(opts["seed"])
    rows = []

    if wanted in ("ingest", "all"):
        geometry = events.SensorGeometry(240, 180)
        for n in (opts["events-n"], 2 * opts["events-n"]):
            batch = _random_stream(rng, n, geometry)

            def ingest():
                grid = surface.TimestampGrid.create(geometry)
                ring = surface.EventCountRing(1024)
                step = 10_000
                for lo in range(0, n, step):
                    surface.apply_events(grid, ring,
                                         batch.slice(lo, lo + step))

            rows.append(("ingest", n, *_time_us(ingest, opts["iterations"])))

    if wanted in ("mcts", "all"):
        for size in (64, 128, 256):
            geometry = events.SensorGeometry(size, size)
            spec = surface.WindowSpec.default_constant_count()
            grid = surface.TimestampGrid.create(geometry)
            ring = surface.EventCountRing(spec.ring_capacity(geometry))
            batch = _random_stream(rng, 4 * geometry.pixel_count, geometry)
            surface.apply_events(grid, ring, batch)
            tau = grid.latest_time
            rows.append((
                "mcts", size,
                *_time_us(lambda: surface.mcts(grid, ring, tau, spec),
                          opts["iterations"])))

    if wanted in ("forward", "all"):
        weights = detect.random_weights(detect.NetworkSpec(), opts["seed"])
        for size in (64, 128):
            x = rng.random((8, size, size), dtype=np.float32)
            rows.append((
                "forward", size,
                *_time_us(lambda: detect.forward(weights, x),
                          opts["iterations"])))

    if wanted in ("match", "all"):
        for n in (100, 500, 1000):
            a = matching.QuantizedDescriptors(
                rng.integers(-127, 128, (n, 64)).astype(np.int8),
                matching.QuantizationScheme())
            b = matching.QuantizedDescriptors(
                rng.integers(-127, 128, (n, 64)).astype(np.int8),
                matching.QuantizationScheme())
            rows.append((
                "match", n,
                *_time_us(lambda: matching.match_mutual_nn(a, b),
                          opts["iterations"])))

    lines = ["workload,n,mean_us,p99_us"]
    lines += [f"{w},{n},{m:.1f},{p:.1f}" for w, n, m, p in rows]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.output:
        Path(args.output).write_text(text)
    return 0


_DISPATCH = {
    "synth": cmd_synth,
    "convert": cmd_convert,
    "surface": cmd_surface,
    "run": cmd_run,
    "verify": cmd_verify,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        opts = _resolve(args)
        return _DISPATCH[args.command](opts, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EmptyResult as exc:
        print(f"empty: {exc}", file=sys.stderr)
        return 3
    except events.StreamFormatError as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
