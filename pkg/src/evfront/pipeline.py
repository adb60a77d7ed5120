"""Asynchronous frontend pipeline.

Two roles share one ``SharedSurfaceState``: a preprocessing writer that
folds event batches into the timestamp grid at a fixed tick, and a
frontend consumer that snapshots the newest state, builds the surface
tensor, detects, describes, quantizes, and matches against its previous
iteration. The only synchronization is the state's gate: updates and
snapshot copies exclude each other, nothing else does. Snapshots are
copy-then-release, so the writer stalls for the copy duration only, not
for the whole inference.

A deterministic single-threaded mode replays the same tick structure and
a scripted snapshot schedule; given the snapshot versions observed in a
threaded run it reproduces the identical results (timings aside), which
is how snapshot consistency is validated end to end.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .detect import (KeypointSet, WeightBundle, classical_detect, forward,
                     interpolate_descriptors, nms)
from .events import EventBatch, SensorGeometry, empty_batch
from .matching import (DEFAULT_MAX_DISTANCE, Match, QuantizationScheme,
                       QuantizedDescriptors, match_mutual_nn, quantize)
from .surface import (EventCountRing, TimestampGrid, WindowSpec, apply_events,
                      mcts)

US_PER_S = 1_000_000

STAGE_NAMES = ("mcts_preparation", "keypoint_detection", "matching", "total")


def _now_us() -> int:
    return time.perf_counter_ns() // 1_000


@dataclass(frozen=True)
class PipelineConfig:
    tick: int = 10_000
    window_spec: WindowSpec = field(
        default_factory=WindowSpec.default_constant_count)
    detector: str = "classical"                 # "classical" or "learned"
    weights: WeightBundle | None = None
    channel_pair: int = 1
    nms_radius: int = 4
    nms_threshold: float = 1e-4
    nms_max_k: int = 256
    match_max_distance: float = DEFAULT_MAX_DISTANCE
    watermark_lag: int = 0
    quant_scheme: QuantizationScheme = field(default_factory=QuantizationScheme)
    metrics_interval: int = 60 * US_PER_S      # wall-clock bucket for the CSV
    step_delay_us: int = 0                     # test hook: slow the detector

    def __post_init__(self) -> None:
        if self.tick <= 0:
            raise ValueError("tick must be positive")
        if self.detector not in ("classical", "learned"):
            raise ValueError(f"unknown detector {self.detector!r}")
        if self.detector == "learned" and self.weights is None:
            raise ValueError("learned detector needs weights")
        if self.watermark_lag < 0:
            raise ValueError("watermark lag cannot be negative")


class SharedSurfaceState:
    """Grid + ring + version counter behind a single gate."""

    def __init__(self, geometry: SensorGeometry, ring_capacity: int):
        self.grid = TimestampGrid.create(geometry)
        self.ring = EventCountRing(ring_capacity)
        self.version = 0
        self.newest_ingested: int | None = None
        self.gate = threading.Lock()
        self.writer_stall_us = 0  # cumulative gate wait on the writer side


@dataclass(frozen=True)
class Snapshot:
    grid: TimestampGrid
    ring: EventCountRing
    version: int
    newest_ingested: int | None


@dataclass(frozen=True)
class StageTimings:
    mcts_preparation: int
    keypoint_detection: int
    matching: int
    total: int

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in STAGE_NAMES}


@dataclass(frozen=True)
class FrameResult:
    tau: int
    version: int
    keypoints: KeypointSet
    descriptors: QuantizedDescriptors
    matches_to_previous: list[Match]  # index_a = this frame, index_b = previous
    timings: StageTimings


@dataclass
class Metrics:
    results_emitted: int = 0
    versions_applied: int = 0
    events_applied: int = 0
    mean_stage_us: dict = field(default_factory=dict)
    max_stage_us: dict = field(default_factory=dict)
    iteration_rate_hz: float = 0.0
    mean_staleness_us: float = 0.0
    max_staleness_us: int = 0
    writer_stall_us: int = 0
    snapshot_copy_mean_us: float = 0.0
    snapshot_copy_max_us: int = 0
    intervals: list = field(default_factory=list)
    error: str | None = None

    def as_dict(self) -> dict:
        return {
            "results_emitted": self.results_emitted,
            "versions_applied": self.versions_applied,
            "events_applied": self.events_applied,
            "mean_stage_us": self.mean_stage_us,
            "max_stage_us": self.max_stage_us,
            "iteration_rate_hz": self.iteration_rate_hz,
            "mean_staleness_us": self.mean_staleness_us,
            "max_staleness_us": self.max_staleness_us,
            "writer_stall_us": self.writer_stall_us,
            "snapshot_copy_mean_us": self.snapshot_copy_mean_us,
            "snapshot_copy_max_us": self.snapshot_copy_max_us,
            "intervals": self.intervals,
            "error": self.error,
        }


def preprocess_tick(state: SharedSurfaceState, pending: EventBatch,
                    watermark: int) -> tuple[int, EventBatch]:
    """Apply the pending events at or below the watermark.

    Returns (applied count, retained batch). The version advances once
    iff anything was applied. Blocks while a snapshot holds the gate.
    """
    t = pending.events["t"]
    cut = int(np.searchsorted(t, watermark, side="right"))
    if cut == 0:
        return 0, pending
    ready = pending.slice(0, cut)
    retained = pending.slice(cut, len(pending))
    waited_from = _now_us()
    with state.gate:
        state.writer_stall_us += _now_us() - waited_from
        apply_events(state.grid, state.ring, ready)
        state.version += 1
    return cut, retained


def freeze_snapshot(state: SharedSurfaceState) -> Snapshot:
    """Consistent copy of grid, ring, and version, taken under the gate."""
    with state.gate:
        return Snapshot(state.grid.copy(), state.ring.copy(), state.version,
                        state.newest_ingested)


def frontend_step(snapshot: Snapshot, previous: FrameResult | None,
                  config: PipelineConfig) -> FrameResult:
    """One frontend iteration over a frozen snapshot.

    tau is the snapshot's newest applied event time (the latest possible
    event state). Matching runs current-against-previous descriptors.
    """
    t0 = _now_us()
    tau = snapshot.grid.latest_time
    if tau is None:
        raise ValueError("snapshot holds no events")
    tensor = mcts(snapshot.grid, snapshot.ring, tau, config.window_spec)
    t1 = _now_us()

    if config.detector == "learned":
        heatmap, desc_map = forward(config.weights, tensor.channels)
        keypoints = nms(heatmap, config.nms_radius, config.nms_threshold,
                        config.nms_max_k)
        descriptors = interpolate_descriptors(desc_map, keypoints,
                                              config.weights.spec.cell)
    else:
        keypoints, descriptors = classical_detect(
            tensor, config.channel_pair, config.nms_radius,
            config.nms_threshold, config.nms_max_k)
    if config.step_delay_us:
        time.sleep(config.step_delay_us / US_PER_S)
    quantized = quantize(descriptors, config.quant_scheme)
    t2 = _now_us()

    if previous is None:
        matches: list[Match] = []
    else:
        matches = match_mutual_nn(quantized, previous.descriptors,
                                  config.match_max_distance)
    t3 = _now_us()

    timings = StageTimings(mcts_preparation=t1 - t0,
                           keypoint_detection=t2 - t1,
                           matching=t3 - t2,
                           total=t3 - t0)
    return FrameResult(tau, snapshot.version, keypoints, quantized,
                       matches, timings)


@dataclass
class ReplaySource:
    """Bounded event source for the pipeline.

    ``paced=False`` replays as fast as possible: virtual time advances by
    one tick per preprocessing call. ``paced=True`` anchors event
    timestamps to the wall clock for latency-style runs.
    """

    batch: EventBatch
    paced: bool = False

    def __len__(self) -> int:
        return len(self.batch)


class _WriterLoop:
    """Fixed-tick ingestion shared by the threaded and serial modes."""

    def __init__(self, source: ReplaySource, state: SharedSurfaceState,
                 config: PipelineConfig):
        self.source = source
        self.state = state
        self.config = config
        ev = source.batch.events
        self.t_stream = ev["t"]
        self.cursor = 0
        self.retained = empty_batch(source.batch.geometry)
        self.virtual_now = int(ev["t"][0]) if len(ev) else 0
        self.exhausted = len(ev) == 0

    def one_tick(self) -> int:
        """Ingest arrivals for one tick; returns events applied."""
        batch = self.source.batch
        n = len(batch)
        self.virtual_now += self.config.tick
        new_cursor = int(np.searchsorted(self.t_stream, self.virtual_now,
                                         side="right"))
        arrivals = batch.slice(self.cursor, new_cursor)
        self.cursor = new_cursor
        if len(self.retained) and len(arrivals):
            pending = EventBatch(
                np.concatenate([self.retained.events, arrivals.events]),
                batch.geometry)
        elif len(arrivals):
            pending = arrivals
        else:
            pending = self.retained

        drained = self.cursor >= n
        if len(pending) == 0:
            self.exhausted = drained
            return 0
        if drained:
            watermark = int(pending.events["t"][-1])  # final drain ignores lag
        else:
            watermark = int(pending.events["t"][-1]) - self.config.watermark_lag
        with_state = self.state
        applied, self.retained = preprocess_tick(with_state, pending, watermark)
        with with_state.gate:
            newest = int(pending.events["t"][-1])
            if with_state.newest_ingested is None \
                    or newest > with_state.newest_ingested:
                with_state.newest_ingested = newest
        self.exhausted = drained and len(self.retained) == 0
        return applied


def run_pipeline(source: ReplaySource, config: PipelineConfig,
                 mode: str = "threaded",
                 snapshot_schedule: list[int] | None = None
                 ) -> tuple[list[FrameResult], Metrics]:
    """Drive the pipeline over a bounded source until it drains.

    ``mode="threaded"`` runs the writer on its own thread while the
    caller's thread loops the frontend over the newest snapshots.
    ``mode="serial"`` interleaves ticks and frontend steps in one thread,
    snapshotting at each version in ``snapshot_schedule`` (every version
    when None); with a schedule recorded from a threaded run it
    reproduces that run's results exactly, timings excluded.
    """
    if mode not in ("threaded", "serial"):
        raise ValueError(f"unknown mode {mode!r}")
    geometry = source.batch.geometry
    capacity = config.window_spec.ring_capacity(geometry)
    state = SharedSurfaceState(geometry, capacity)
    if mode == "serial":
        return _run_serial(source, config, state, snapshot_schedule)
    return _run_threaded(source, config, state)


def _run_serial(source, config, state, schedule):
    writer = _WriterLoop(source, state, config)
    results: list[FrameResult] = []
    staleness: list[int] = []
    copy_times: list[int] = []
    queue = list(schedule) if schedule is not None else None
    started = _now_us()
    last_snapped = 0
    while not writer.exhausted:
        writer.one_tick()
        if queue is None:
            due = state.version > last_snapped
        else:
            # ticks bump the version by at most 1, so >= hits each
            # scheduled version exactly once
            due = bool(queue) and state.version >= queue[0]
        if not due:
            continue
        if queue is not None:
            queue.pop(0)
        copy_from = _now_us()
        snap = freeze_snapshot(state)
        copy_times.append(_now_us() - copy_from)
        last_snapped = snap.version
        _step_if_fresh(snap, results, config, staleness)
    metrics = _collect_metrics(results, staleness, copy_times, state, started,
                               _now_us(), config)
    return results, metrics


def _run_threaded(source, config, state):
    writer = _WriterLoop(source, state, config)
    progress = threading.Condition()
    done = threading.Event()
    failure: list[str] = []

    def writer_main():
        try:
            next_deadline = time.perf_counter()
            while not writer.exhausted:
                if source.paced:
                    next_deadline += config.tick / US_PER_S
                    lag = next_deadline - time.perf_counter()
                    if lag > 0:
                        time.sleep(lag)
                writer.one_tick()
                with progress:
                    progress.notify_all()
        except Exception as exc:  # propagate source failures with partials
            failure.append(f"{type(exc).__name__}: {exc}")
        finally:
            done.set()
            with progress:
                progress.notify_all()

    thread = threading.Thread(target=writer_main, name="preprocess-writer",
                              daemon=True)
    results: list[FrameResult] = []
    staleness: list[int] = []
    copy_times: list[int] = []
    started = _now_us()
    thread.start()
    last_version = 0
    while True:
        with progress:
            while state.version == last_version and not done.is_set():
                progress.wait(timeout=0.05)
        if state.version == last_version and done.is_set():
            break
        copy_from = _now_us()
        snap = freeze_snapshot(state)
        copy_times.append(_now_us() - copy_from)
        last_version = snap.version
        _step_if_fresh(snap, results, config, staleness)
    thread.join()
    metrics = _collect_metrics(results, staleness, copy_times, state, started,
                               _now_us(), config)
    if failure:
        metrics.error = failure[0]
    return results, metrics


def _step_if_fresh(snap: Snapshot, results: list[FrameResult],
                   config: PipelineConfig, staleness: list[int]) -> bool:
    """Run a frontend step unless the snapshot cannot advance tau.

    Batches of identical timestamps can bump the version without moving
    latest_time; skipping them preserves strict tau monotonicity.
    """
    if snap.grid.latest_time is None:
        return False
    if results and snap.grid.latest_time <= results[-1].tau:
        return False
    previous = results[-1] if results else None
    result = frontend_step(snap, previous, config)
    results.append(result)
    if snap.newest_ingested is not None:
        staleness.append(snap.newest_ingested - result.tau)
    return True


def _collect_metrics(results, staleness, copy_times, state, started_us,
                     ended_us, config: PipelineConfig) -> Metrics:
    m = Metrics()
    m.results_emitted = len(results)
    m.versions_applied = state.version
    m.events_applied = state.grid.applied_count
    m.writer_stall_us = state.writer_stall_us
    wall = max(ended_us - started_us, 1)
    m.iteration_rate_hz = len(results) * US_PER_S / wall
    if results:
        for name in STAGE_NAMES:
            vals = [getattr(r.timings, name) for r in results]
            m.mean_stage_us[name] = float(np.mean(vals))
            m.max_stage_us[name] = int(max(vals))
    if staleness:
        m.mean_staleness_us = float(np.mean(staleness))
        m.max_staleness_us = int(max(staleness))
    if copy_times:
        m.snapshot_copy_mean_us = float(np.mean(copy_times))
        m.snapshot_copy_max_us = int(max(copy_times))
    m.intervals = _interval_rows(results, config.metrics_interval)
    return m


def _interval_rows(results, interval_us):
    """Per-interval mean stage timings, bucketed by result tau (event time)."""
    if not results:
        return []
    base = results[0].tau
    rows = []
    bucket: dict[int, list[FrameResult]] = {}
    for r in results:
        bucket.setdefault((r.tau - base) // interval_us, []).append(r)
    for idx in sorted(bucket):
        rs = bucket[idx]
        row = {"interval_start_us": base + idx * interval_us}
        for name in STAGE_NAMES:
            row[name] = float(np.mean([getattr(r.timings, name) for r in rs]))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# export


def result_to_json(result: FrameResult, include_descriptors: bool = True) -> str:
    obj = {
        "tau": result.tau,
        "version": result.version,
        "keypoints": [
            {"x": float(x), "y": float(y), "score": float(s)}
            for (x, y), s in zip(result.keypoints.xy, result.keypoints.scores)
        ],
        "matches": [
            {"index_a": m.index_a, "index_b": m.index_b,
             "distance": round(m.distance, 6)}
            for m in result.matches_to_previous
        ],
        "timings": result.timings.as_dict(),
    }
    if include_descriptors:
        obj["descriptor_scale"] = result.descriptors.scheme.scale
        obj["descriptors"] = result.descriptors.vectors.tolist()
    return json.dumps(obj, separators=(",", ":"))


def metrics_to_csv(metrics: Metrics) -> bytes:
    lines = ["interval_start_us," + ",".join(STAGE_NAMES)]
    for row in metrics.intervals:
        lines.append(",".join(
            [str(row["interval_start_us"])]
            + [f"{row[name]:.1f}" for name in STAGE_NAMES]))
    return ("\n".join(lines) + "\n").encode("ascii")
