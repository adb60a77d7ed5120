"""Event stream data model, serialization, synthesis, and stream shaping.

An event is ``(t, x, y, p)``: an integer microsecond timestamp, a pixel
coordinate, and a polarity of -1 (brightness decrease) or +1 (increase).
Batches keep timestamps non-decreasing; equal timestamps are legal because
real sensors emit bursts sharing a stamp.

Wire formats
------------
binary-v1   magic ``EVT1``, width and height as u16 little-endian, then
            packed 13-byte records: t u64 | x u16 | y u16 | p u8, with
            polarity encoded 0 -> -1 and 1 -> +1. No padding, no footer.
csv         header line ``t,x,y,p`` (optional on input), one event per
            row, polarity in {0, 1}. Geometry travels out of band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

US_PER_S = 1_000_000

BINARY_MAGIC = b"EVT1"
BINARY_HEADER_SIZE = 8
BINARY_RECORD_SIZE = 13

# Packed wire record; numpy keeps this at 13 bytes because no alignment
# is requested.
_RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])

# In-memory layout with signed polarity.
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])

CSV_HEADER = "t,x,y,p"


class StreamFormatError(ValueError):
    """An event stream violated its declared format.

    ``offset`` is the byte offset of the offending record (binary input),
    ``line`` the 1-based physical line number (csv input).
    """

    def __init__(self, message: str, *, offset: int | None = None,
                 line: int | None = None):
        where = ""
        if offset is not None:
            where = f" (byte offset {offset})"
        elif line is not None:
            where = f" (line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"geometry must be at least 1x1, got "
                             f"{self.width}x{self.height}")

    @property
    def pixel_count(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class EventBatch:
    """A time-ordered run of events on one sensor.

    ``events`` is a structured array with ``EVENT_DTYPE`` fields; it is
    treated as immutable once the batch exists.
    """

    events: np.ndarray
    geometry: SensorGeometry

    def __post_init__(self) -> None:
        ev = self.events
        if ev.dtype != EVENT_DTYPE:
            raise TypeError(f"expected event dtype {EVENT_DTYPE}, got {ev.dtype}")
        if ev.ndim != 1:
            raise ValueError("event array must be one-dimensional")
        if len(ev):
            t = ev["t"]
            if np.any(np.diff(t.astype(np.int64)) < 0):
                raise ValueError("batch timestamps must be non-decreasing")
            if np.any(ev["x"] >= self.geometry.width) or \
               np.any(ev["y"] >= self.geometry.height):
                raise ValueError("event coordinates outside sensor geometry")
            if not np.all(np.abs(ev["p"]) == 1):
                raise ValueError("polarity must be -1 or +1")

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        for rec in self.events:
            yield Event(int(rec["t"]), int(rec["x"]), int(rec["y"]), int(rec["p"]))

    def __getitem__(self, i):
        if isinstance(i, slice):
            return EventBatch(self.events[i], self.geometry)
        rec = self.events[i]
        return Event(int(rec["t"]), int(rec["x"]), int(rec["y"]), int(rec["p"]))

    def slice(self, start: int, stop: int) -> "EventBatch":
        return EventBatch(self.events[start:stop], self.geometry)


def batch_from_columns(t, x, y, p, geometry: SensorGeometry) -> EventBatch:
    """Assemble a batch from parallel coordinate arrays."""
    ev = np.empty(len(t), dtype=EVENT_DTYPE)
    ev["t"] = t
    ev["x"] = x
    ev["y"] = y
    ev["p"] = p
    return EventBatch(ev, geometry)


def empty_batch(geometry: SensorGeometry) -> EventBatch:
    return EventBatch(np.empty(0, dtype=EVENT_DTYPE), geometry)


@dataclass(frozen=True)
class MotionSpec:
    """Synthetic scene description.

    The contrast rule is fixed: a leading edge emits +1, a trailing edge
    -1. ``velocity`` is in pixels per second. For ``grid-of-corners`` the
    pattern is a lattice of bright squares of side ``square_side`` on a
    ``grid_pitch`` spacing, translating rigidly at ``velocity``.
    """

    pattern: str
    velocity: tuple[float, float]
    duration: float
    grid_pitch: int = 16
    square_side: int = 6

    def __post_init__(self) -> None:
        if self.pattern not in ("vertical-edge", "grid-of-corners"):
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if math.hypot(*self.velocity) == 0:
            raise ValueError("velocity must be non-zero")
        if self.grid_pitch <= self.square_side:
            raise ValueError("grid pitch must exceed square side")


# ---------------------------------------------------------------------------
# parsing / writing


def parse_events(data: bytes, format: str,
                 geometry: SensorGeometry | None = None) -> EventBatch:
    """Decode a byte stream into an EventBatch.

    ``geometry`` is required for csv input (the format does not carry it)
    and ignored for binary-v1 (the header does).
    """
    if format == "binary-v1":
        return _parse_binary(data)
    if format == "csv":
        if geometry is None:
            raise ValueError("csv input needs an explicit sensor geometry")
        return _parse_csv(data, geometry)
    raise ValueError(f"unknown event format {format!r}")


def write_events(batch: EventBatch, format: str) -> bytes:
    if format == "binary-v1":
        return _write_binary(batch)
    if format == "csv":
        return _write_csv(batch)
    raise ValueError(f"unknown event format {format!r}")


def _parse_binary(data: bytes) -> EventBatch:
    if len(data) < BINARY_HEADER_SIZE:
        raise StreamFormatError("header shorter than 8 bytes", offset=0)
    if data[:4] != BINARY_MAGIC:
        raise StreamFormatError(f"bad magic {data[:4]!r}", offset=0)
    width = int.from_bytes(data[4:6], "little")
    height = int.from_bytes(data[6:8], "little")
    if width == 0 or height == 0:
        raise StreamFormatError("zero sensor dimension in header", offset=4)
    geometry = SensorGeometry(width, height)

    body = data[BINARY_HEADER_SIZE:]
    n, leftover = divmod(len(body), BINARY_RECORD_SIZE)
    if leftover:
        raise StreamFormatError(
            "truncated record",
            offset=BINARY_HEADER_SIZE + n * BINARY_RECORD_SIZE)
    raw = np.frombuffer(body, dtype=_RECORD_DTYPE)

    def record_offset(i: int) -> int:
        return BINARY_HEADER_SIZE + i * BINARY_RECORD_SIZE

    bad_p = np.nonzero(raw["p"] > 1)[0]
    if bad_p.size:
        i = int(bad_p[0])
        raise StreamFormatError(f"polarity byte {raw['p'][i]} not in {{0,1}}",
                                offset=record_offset(i))
    oob = np.nonzero((raw["x"] >= width) | (raw["y"] >= height))[0]
    if oob.size:
        i = int(oob[0])
        raise StreamFormatError(
            f"coordinate ({raw['x'][i]},{raw['y'][i]}) outside {width}x{height}",
            offset=record_offset(i))
    if n > 1:
        dec = np.nonzero(np.diff(raw["t"].astype(np.int64)) < 0)[0]
        if dec.size:
            i = int(dec[0]) + 1
            raise StreamFormatError("decreasing timestamp",
                                    offset=record_offset(i))

    ev = np.empty(n, dtype=EVENT_DTYPE)
    ev["t"] = raw["t"]
    ev["x"] = raw["x"]
    ev["y"] = raw["y"]
    ev["p"] = raw["p"].astype(np.int8) * 2 - 1
    return EventBatch(ev, geometry)


def _parse_csv(data: bytes, geometry: SensorGeometry) -> EventBatch:
    text = data.decode("ascii")
    rows: list[tuple[int, int, int, int]] = []
    prev_t = -1
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line == CSV_HEADER:
            if lineno == 1:
                continue
            raise StreamFormatError("header row after data", line=lineno)
        parts = line.split(",")
        if len(parts) != 4:
            raise StreamFormatError(f"expected 4 fields, got {len(parts)}",
                                    line=lineno)
        try:
            t, x, y, p = (int(part) for part in parts)
        except ValueError:
            raise StreamFormatError(f"non-integer field in {line!r}",
                                    line=lineno) from None
        if t < 0:
            raise StreamFormatError("negative timestamp", line=lineno)
        if p not in (0, 1):
            raise StreamFormatError(f"polarity {p} not in {{0,1}}", line=lineno)
        if not (0 <= x < geometry.width and 0 <= y < geometry.height):
            raise StreamFormatError(
                f"coordinate ({x},{y}) outside "
                f"{geometry.width}x{geometry.height}", line=lineno)
        if t < prev_t:
            raise StreamFormatError("decreasing timestamp", line=lineno)
        prev_t = t
        rows.append((t, x, y, 2 * p - 1))

    ev = np.array(rows, dtype=EVENT_DTYPE) if rows else np.empty(0, EVENT_DTYPE)
    return EventBatch(ev, geometry)


def _write_binary(batch: EventBatch) -> bytes:
    header = (BINARY_MAGIC
              + batch.geometry.width.to_bytes(2, "little")
              + batch.geometry.height.to_bytes(2, "little"))
    raw = np.empty(len(batch), dtype=_RECORD_DTYPE)
    raw["t"] = batch.events["t"]
    raw["x"] = batch.events["x"]
    raw["y"] = batch.events["y"]
    raw["p"] = (batch.events["p"] > 0).astype(np.uint8)
    return header + raw.tobytes()


def _write_csv(batch: EventBatch) -> bytes:
    lines = [CSV_HEADER]
    for rec in batch.events:
        p01 = 1 if rec["p"] > 0 else 0
        lines.append(f"{rec['t']},{rec['x']},{rec['y']},{p01}")
    return ("\n".join(lines) + "\n").encode("ascii")


# ---------------------------------------------------------------------------
# synthesis


def synthesize(spec: MotionSpec, geometry: SensorGeometry,
               start_time: int = 0) -> EventBatch:
    """Generate the event stream of a rigidly translating pattern.

    Crossing times come from exact linear motion and are truncated to
    integer microseconds. Output is globally time-sorted with a canonical
    (t, x, y, p) tie order, so the generator is deterministic.
    """
    if spec.pattern == "vertical-edge":
        t, x, y, p = _edge_events(spec, geometry)
    else:
        t, x, y, p = _grid_events(spec, geometry)

    t_us = np.floor(t * US_PER_S).astype(np.int64) + start_time
    order = np.lexsort((p, y, x, t_us))
    return batch_from_columns(t_us[order], x[order], y[order], p[order], geometry)


def _edge_events(spec: MotionSpec, geometry: SensorGeometry):
    """Crossing times of a full-height vertical edge.

    The leading edge starts on the first column in its direction of travel
    and reaches column c at (c - c0)/vx; the trailing edge runs one pixel
    behind. Crossings at exactly t = duration are included.
    """
    vx = spec.velocity[0]
    w, h = geometry.width, geometry.height
    cols = np.arange(w, dtype=np.float64)
    if vx == 0:
        empty = np.empty(0)
        return empty, empty.astype(np.uint16), empty.astype(np.uint16), \
            empty.astype(np.int8)
    c0 = 0.0 if vx > 0 else float(w - 1)
    t_lead = (cols - c0) / vx
    t_trail = (cols + math.copysign(1.0, vx) - c0) / vx

    ts, xs, ps = [], [], []
    for t_cross, pol in ((t_lead, 1), (t_trail, -1)):
        hit = (t_cross >= 0) & (t_cross <= spec.duration)
        ts.append(np.repeat(t_cross[hit], h))
        xs.append(np.repeat(cols[hit].astype(np.uint16), h))
        ps.append(np.full(hit.sum() * h, pol, dtype=np.int8))
    t = np.concatenate(ts)
    x = np.concatenate(xs)
    y = np.tile(np.arange(h, dtype=np.uint16), len(t) // h if h else 0)
    p = np.concatenate(ps)
    return t, x, y, p


def _grid_anchors(spec: MotionSpec, geometry: SensorGeometry) -> np.ndarray:
    """Top-left corners of every lattice square whose path can touch the frame."""
    vx, vy = spec.velocity
    pitch, side = spec.grid_pitch, spec.square_side
    spans = []
    for extent, v in ((geometry.width, vx), (geometry.height, vy)):
        sweep = v * spec.duration
        lo = math.floor((min(0.0, -sweep) - side) / pitch) * pitch
        hi = math.ceil((extent + max(0.0, -sweep)) / pitch) * pitch
        spans.append(np.arange(lo, hi + 1, pitch, dtype=np.float64))
    ax, ay = np.meshgrid(spans[0], spans[1])
    return np.stack([ax.ravel(), ay.ravel()], axis=1)


def _axis_interval(p0: np.ndarray, v: float, a: float, s: float):
    """Times at which p0 - v*t lies inside the slab [a, a+s]."""
    if v == 0:
        inside = (p0 >= a) & (p0 <= a + s)
        lo = np.where(inside, -np.inf, np.inf)
        hi = np.where(inside, np.inf, -np.inf)
        return lo, hi
    t0 = (p0 - a - s) / v
    t1 = (p0 - a) / v
    return np.minimum(t0, t1), np.maximum(t0, t1)


def _grid_events(spec: MotionSpec, geometry: SensorGeometry):
    """Entry/exit crossings of translating bright squares, per pixel.

    A pixel tracks q(t) = p - v*t through the static lattice; entering a
    square emits +1, leaving emits -1. Squares never overlap (pitch >
    side), so per-square intervals are disjoint per pixel.
    """
    vx, vy = spec.velocity
    w, h = geometry.width, geometry.height
    px, py = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    px, py = px.ravel(), py.ravel()
    pix_x = px.astype(np.uint16)
    pix_y = py.astype(np.uint16)

    side = float(spec.square_side)
    ts, xs, ys, ps = [], [], [], []
    for ax, ay in _grid_anchors(spec, geometry):
        lo_x, hi_x = _axis_interval(px, vx, ax, side)
        lo_y, hi_y = _axis_interval(py, vy, ay, side)
        t_in = np.maximum(lo_x, lo_y)
        t_out = np.minimum(hi_x, hi_y)
        valid = t_in < t_out

        enter = valid & (t_in > 0) & (t_in <= spec.duration)
        leave = valid & (t_out > 0) & (t_out <= spec.duration) & \
            (np.maximum(t_in, 0.0) < t_out)
        for mask, times, pol in ((enter, t_in, 1), (leave, t_out, -1)):
            if mask.any():
                ts.append(times[mask])
                xs.append(pix_x[mask])
                ys.append(pix_y[mask])
                ps.append(np.full(mask.sum(), pol, dtype=np.int8))
    if not ts:
        z = np.empty(0)
        return z, z.astype(np.uint16), z.astype(np.uint16), z.astype(np.int8)
    return (np.concatenate(ts), np.concatenate(xs), np.concatenate(ys),
            np.concatenate(ps))


def corner_positions(spec: MotionSpec, geometry: SensorGeometry,
                     t_us: int, start_time: int = 0) -> np.ndarray:
    """Ground-truth corner locations of the grid-of-corners pattern at t_us.

    Returns an (N, 2) array of (x, y) image positions for every square
    corner inside the frame at that instant.
    """
    if spec.pattern != "grid-of-corners":
        raise ValueError("corner ground truth exists only for grid-of-corners")
    vx, vy = spec.velocity
    dt = (t_us - start_time) / US_PER_S
    side = float(spec.square_side)
    anchors = _grid_anchors(spec, geometry)
    offsets = np.array([[0, 0], [side, 0], [0, side], [side, side]])
    corners = (anchors[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
    corners = corners + np.array([vx * dt, vy * dt])
    inside = ((corners[:, 0] >= 0) & (corners[:, 0] <= geometry.width - 1)
              & (corners[:, 1] >= 0) & (corners[:, 1] <= geometry.height - 1))
    return corners[inside]


def linear_warp(velocity: tuple[float, float], tau_a: int, tau_b: int):
    """Point map for a rigid translation between two reference times."""
    dx = velocity[0] * (tau_b - tau_a) / US_PER_S
    dy = velocity[1] * (tau_b - tau_a) / US_PER_S

    def warp(points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) + np.array([dx, dy])

    return warp


# ---------------------------------------------------------------------------
# stream shaping


def downsample(batch: EventBatch, target: SensorGeometry) -> EventBatch:
    """Remap events onto a coarser grid by coordinate floor-division.

    Both axes must shrink by an integer factor; colliding events are all
    kept, timestamps and polarities untouched.
    """
    src = batch.geometry
    fx, rx = divmod(src.width, target.width)
    fy, ry = divmod(src.height, target.height)
    if rx or ry or fx < 1 or fy < 1:
        raise ValueError(
            f"{src.width}x{src.height} does not divide into "
            f"{target.width}x{target.height}")
    ev = batch.events.copy()
    ev["x"] //= fx
    ev["y"] //= fy
    return EventBatch(ev, target)


def rate_limit(batch: EventBatch, max_rate: float,
               window: int = 1_000) -> EventBatch:
    """Cap the event rate by uniform decimation inside aligned windows.

    The stream is partitioned into consecutive windows of ``window``
    microseconds aligned at t = 0; a window holding n events keeps the
    c = floor(max_rate * window / 1e6) events at indices floor(j*n/c).
    Applying the limiter twice changes nothing.
    """
    if max_rate <= 0 or window <= 0:
        raise ValueError("max_rate and window must be positive")
    cap = int(max_rate * window // US_PER_S)
    n_total = len(batch)
    if n_total == 0:
        return batch
    if cap == 0:
        return empty_batch(batch.geometry)

    win_id = batch.events["t"] // window
    keep = np.ones(n_total, dtype=bool)
    starts = np.flatnonzero(np.r_[True, np.diff(win_id) != 0])
    bounds = np.r_[starts, n_total]
    for b, e in zip(bounds[:-1], bounds[1:]):
        n = e - b
        if n > cap:
            keep[b:e] = False
            keep[b + (np.arange(cap) * n) // cap] = True
    return EventBatch(batch.events[keep], batch.geometry)
