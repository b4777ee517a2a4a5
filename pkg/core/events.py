"""Event streams, per-pixel last-timestamp maps and time-surface rendering."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Tuple

import numpy as np
import pandas as pd

import config
from core.errors import InputFormatError

logger = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype([('t', '<f8'), ('x', '<u2'), ('y', '<u2'), ('p', 'i1')])

POLARITY_FILTERS = ('both', 'positive', 'negative')


@dataclass(frozen=True)
class EventConfig:
    decay: float = config.TS_DECAY
    polarity: str = config.TS_POLARITY
    sort: bool = config.EVENTS_SORT

    def __post_init__(self):
        if self.decay <= 0:
            raise ValueError(f"Time-surface decay must be positive, got {self.decay}")
        if self.polarity not in POLARITY_FILTERS:
            raise ValueError(f"Unknown polarity filter '{self.polarity}'")


@dataclass(frozen=True)
class Event:
    t: float
    x: int
    y: int
    polarity: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events of one sensor, stored column-wise."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    sensor: str = 'left'

    @classmethod
    def empty(cls, width: int, height: int, sensor: str = 'left') -> 'EventStream':
        return cls(np.zeros(0), np.zeros(0, np.int32), np.zeros(0, np.int32), np.zeros(0, np.int8),
                   width, height, sensor)

    @classmethod
    def from_events(cls, events: Iterable[Event], width: int, height: int, sensor: str = 'left') -> 'EventStream':
        return ingest_events([(e.t, e.x, e.y, e.polarity) for e in events], width, height, sensor)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, index: int) -> Event:
        return Event(float(self.t[index]), int(self.x[index]), int(self.y[index]), int(self.p[index]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    @property
    def start(self) -> float:
        return float(self.t[0]) if len(self) else 0.0

    @property
    def end(self) -> float:
        return float(self.t[-1]) if len(self) else 0.0

    def span(self, t0: float, t1: float) -> Tuple[int, int]:
        """Index range of events with ``t0 < t <= t1``."""
        return (int(np.searchsorted(self.t, t0, side='right')),
                int(np.searchsorted(self.t, t1, side='right')))

    def window(self, t0: float, t1: float) -> 'EventStream':
        """Events with ``t0 <= t <= t1``."""
        i0 = int(np.searchsorted(self.t, t0, side='left'))
        i1 = int(np.searchsorted(self.t, t1, side='right'))
        return self.slice(i0, i1)

    def slice(self, i0: int, i1: int) -> 'EventStream':
        return EventStream(self.t[i0:i1], self.x[i0:i1], self.y[i0:i1], self.p[i0:i1],
                           self.width, self.height, self.sensor)


def _as_polarity(p: np.ndarray) -> np.ndarray:
    return np.where(p > 0, 1, -1).astype(np.int8)


def ingest_events(records, width: int, height: int, sensor: str = 'left',
                  sort: bool = config.EVENTS_SORT, first_line: int = 1) -> EventStream:
    """Validate raw ``(t, x, y, p)`` records and build an :class:`EventStream`.

    Args:
        records: sequence of 4-tuples or an (N, 4) array. Polarity 0 is read as -1.
        width, height: sensor size used for the bounds check.
        sort: stably sort out-of-order records instead of rejecting them.
        first_line: line number of the first record, used in error messages.

    Raises:
        InputFormatError: malformed record, out-of-bounds coordinate, negative or
            non-finite time, or (when ``sort`` is off) a decreasing timestamp.
    """
    if isinstance(records, np.ndarray) and records.dtype != object:
        data = np.asarray(records, dtype=np.float64).reshape(-1, 4) if records.size else np.zeros((0, 4))
    else:
        rows = []
        for i, record in enumerate(records):
            try:
                if len(record) != 4:
                    raise ValueError(f"expected 4 fields, got {len(record)}")
                rows.append([float(v) for v in record])
            except (TypeError, ValueError) as e:
                raise InputFormatError(f"malformed event record {record!r} ({e})", line=first_line + i)
        data = np.asarray(rows, dtype=np.float64).reshape(-1, 4)

    if len(data) == 0:
        return EventStream.empty(width, height, sensor)

    t, x, y, p = data.T
    bad = ~np.isfinite(data).all(axis=1) | (t < 0)
    if bad.any():
        i = int(np.argmax(bad))
        raise InputFormatError(f"invalid event time {data[i, 0]}", line=first_line + i)
    bad = (x != np.floor(x)) | (y != np.floor(y))
    if bad.any():
        i = int(np.argmax(bad))
        raise InputFormatError(f"non-integer pixel ({x[i]}, {y[i]})", line=first_line + i)
    bad = (x < 0) | (x >= width) | (y < 0) | (y >= height)
    if bad.any():
        i = int(np.argmax(bad))
        raise InputFormatError(
            f"pixel ({int(x[i])}, {int(y[i])}) outside {width}x{height} sensor", line=first_line + i)

    backwards = np.diff(t) < 0
    if backwards.any():
        if not sort:
            i = int(np.argmax(backwards)) + 1
            raise InputFormatError(f"timestamp {t[i]} earlier than previous {t[i - 1]}", line=first_line + i)
        logger.warning(f"{int(backwards.sum())} out-of-order events in {sensor} stream, sorting")
        order = np.argsort(t, kind='stable')
        t, x, y, p = t[order], x[order], y[order], p[order]

    return EventStream(t.copy(), x.astype(np.int32), y.astype(np.int32), _as_polarity(p),
                       width, height, sensor)


def header_line_index(path) -> Optional[int]:
    """Zero-based index of the header line, if the first non-comment line starts with a non-numeric field."""
    with open(path, 'r') as f:
        for index, line in enumerate(f):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            try:
                float(line.split(',')[0])
                return None
            except ValueError:
                return index
    return None


def read_events(path, width: int, height: int, sensor: str = 'left',
                sort: bool = config.EVENTS_SORT) -> EventStream:
    """Read a CSV (``t,x,y,p``, optional header) or binary (``.bin``) event file."""
    path = Path(path)
    if not path.exists():
        raise InputFormatError("event file not found", path=str(path))

    if path.suffix == '.bin':
        raw = np.fromfile(path, dtype=EVENT_DTYPE)
        data = np.column_stack([raw['t'], raw['x'].astype(np.float64),
                                raw['y'].astype(np.float64), raw['p'].astype(np.float64)])
        try:
            stream = ingest_events(data, width, height, sensor, sort)
        except InputFormatError as e:
            raise InputFormatError(str(e).split(": ", 1)[-1], line=e.line, path=str(path))
    else:
        header = header_line_index(path)
        try:
            df = pd.read_csv(path, header=None, names=['t', 'x', 'y', 'p'], dtype=str,
                             skiprows=None if header is None else [header], skip_blank_lines=False, comment='#')
        except pd.errors.ParserError as e:
            raise InputFormatError(f"malformed event file ({e})", path=str(path))
        except pd.errors.EmptyDataError:
            df = pd.DataFrame(columns=['t', 'x', 'y', 'p'])
        df = df.dropna(how='all')
        numeric = df.apply(pd.to_numeric, errors='coerce')
        bad = numeric.isna().any(axis=1).to_numpy()
        # rows after a skipped header sit one line further down
        offset = 1 if header is None else 2
        if bad.any():
            row = int(df.index[np.argmax(bad)])
            raise InputFormatError(f"malformed event record {df.iloc[int(np.argmax(bad))].tolist()}",
                                   line=row + offset, path=str(path))
        data = numeric.to_numpy(dtype=np.float64)
        try:
            stream = ingest_events(data, width, height, sensor, sort)
        except InputFormatError as e:
            # map record index back to the file line
            line = None if e.line is None else int(df.index[e.line - 1]) + offset
            raise InputFormatError(str(e).split(': ', 1)[-1], line=line, path=str(path))

    logger.info(f"Loaded {len(stream)} {sensor} events from {path}")
    return stream


def write_events(path, stream: EventStream):
    """Write a stream in the CSV or binary (``.bin``) event format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == '.bin':
        raw = np.empty(len(stream), dtype=EVENT_DTYPE)
        raw['t'] = stream.t
        raw['x'] = stream.x
        raw['y'] = stream.y
        raw['p'] = stream.p
        raw.tofile(path)
    else:
        df = pd.DataFrame({
            't': stream.t,
            'x': stream.x,
            'y': stream.y,
            'p': (stream.p > 0).astype(np.int8),
        })
        df.to_csv(path, index=False, float_format='%.9f')
    logger.info(f"Wrote {len(stream)} {stream.sensor} events to {path}")


class LastTimestampMap:
    """Per-pixel time of the most recent event; ``-inf`` marks pixels that never fired."""

    def __init__(self, width: int, height: int, polarity: str = config.TS_POLARITY):
        if polarity not in POLARITY_FILTERS:
            raise ValueError(f"Unknown polarity filter '{polarity}'")
        self.width = width
        self.height = height
        self.polarity = polarity
        self.t_last = np.full((height, width), -np.inf)
        self.latest = -np.inf

    def _accepts(self, p) -> bool:
        if self.polarity == 'positive':
            return p > 0
        if self.polarity == 'negative':
            return p < 0
        return True

    def advance(self, e: Event) -> 'LastTimestampMap':
        """Record one event; the map is updated in place and returned."""
        if e.t < self.latest:
            raise ValueError(f"Event at t={e.t} older than latest ingested t={self.latest}")
        self.latest = e.t
        if self._accepts(e.polarity):
            self.t_last[e.y, e.x] = e.t
        return self

    def advance_many(self, t, x, y, p=None) -> 'LastTimestampMap':
        """Record a time-ordered batch of events."""
        t = np.asarray(t, dtype=np.float64)
        if len(t) == 0:
            return self
        if t[0] < self.latest or np.any(np.diff(t) < 0):
            raise ValueError("Event batch is not time-ordered after the latest ingested event")
        t_max = float(t.max())
        x = np.asarray(x)
        y = np.asarray(y)
        if p is not None and self.polarity != 'both':
            keep = self._accepts(np.asarray(p))
            t, x, y = t[keep], x[keep], y[keep]
        np.maximum.at(self.t_last, (y, x), t)
        self.latest = max(self.latest, t_max)
        return self

    def advance_stream(self, stream: EventStream, t0: float, t1: float) -> 'LastTimestampMap':
        """Record the events of ``stream`` with ``t0 < t <= t1``."""
        i0, i1 = stream.span(t0, t1)
        self.advance_many(stream.t[i0:i1], stream.x[i0:i1], stream.y[i0:i1], stream.p[i0:i1])
        self.latest = max(self.latest, t1)
        return self


@dataclass(frozen=True, eq=False)
class TimeSurface:
    """Immutable 8-bit time-surface (or its negative) rendered at time ``t``."""

    values: np.ndarray
    t: float
    decay: float
    negative: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.uint8, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def render_time_surface(ts_map: LastTimestampMap, t: float, decay: float = config.TS_DECAY) -> TimeSurface:
    """Exponential decay of the time since the last event, rescaled to [0, 255]."""
    if decay <= 0:
        raise ValueError(f"Decay rate must be positive, got {decay}")
    if t < ts_map.latest:
        raise ValueError(f"Render time {t} precedes latest event {ts_map.latest}")
    # never-fired pixels have t_last = -inf and decay to exactly 0
    values = np.floor(255.0 * np.exp(-(t - ts_map.t_last) / decay) + 0.5)
    return TimeSurface(values.astype(np.uint8), t, decay)


def negate_time_surface(ts: TimeSurface) -> TimeSurface:
    return TimeSurface(255 - ts.values, ts.t, ts.decay, not ts.negative)


def sample_bilinear(image: np.ndarray, u, v, with_gradient: bool = False):
    """Bilinear lookup at continuous coordinates.

    Points must satisfy ``0 <= u < width - 1`` and ``0 <= v < height - 1``; the
    returned mask marks them, and values elsewhere are 0.

    Returns:
        (values, valid) or (values, gx, gy, valid) when ``with_gradient`` is set,
        where gx, gy are the exact derivatives of the interpolant.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u < w - 1) & (v >= 0) & (v < h - 1)
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)
    u0 = np.floor(uu).astype(np.intp)
    v0 = np.floor(vv).astype(np.intp)
    a = uu - u0
    b = vv - v0
    i00 = img[v0, u0]
    i01 = img[v0, u0 + 1]
    i10 = img[v0 + 1, u0]
    i11 = img[v0 + 1, u0 + 1]
    top = i00 + a * (i01 - i00)
    bottom = i10 + a * (i11 - i10)
    values = np.where(valid, top + b * (bottom - top), 0.0)
    if not with_gradient:
        return values, valid
    gx = np.where(valid, (1.0 - b) * (i01 - i00) + b * (i11 - i10), 0.0)
    gy = np.where(valid, bottom - top, 0.0)
    return values, gx, gy, valid
