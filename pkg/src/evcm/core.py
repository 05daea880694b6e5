"""Shared domain types and on-disk formats.

Events are held column-wise in numpy arrays (one entry per event) because every
consumer downstream works on whole slices at a time. Timestamps stay integer
microseconds until the warp converts them to seconds.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EVT1_MAGIC = b"EVT1"
EVT1_HEADER = struct.Struct("<4sHHQ")
EVT1_RECORD = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")]
)
assert EVT1_HEADER.size == 16 and EVT1_RECORD.itemsize == 16


class EventFileError(ValueError):
    """Base class for malformed EVT1 input."""


class BadMagicError(EventFileError):
    pass


class TruncatedRecordError(EventFileError):
    pass


class UnsortedTimestampsError(EventFileError):
    pass


class CoordinateOutOfRangeError(EventFileError):
    pass


class InvalidPolarityError(EventFileError):
    pass


class ShapeMismatchError(ValueError):
    """Grids that must share H x W do not."""


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


class EventSlice:
    """Time-ordered batch of events plus the sensor geometry.

    Args:
        t, x, y, p: per-event arrays (microseconds, column, row, polarity).
        width, height: sensor resolution in pixels.
        t_start, t_end: window bounds in microseconds; default to the tightest
            window around the events, ``[t_first, t_last + 1)``.
    """

    __slots__ = ("t", "x", "y", "p", "width", "height", "t_start", "t_end")

    def __init__(self, t, x, y, p, width, height, t_start=None, t_end=None):
        t = np.ascontiguousarray(t, dtype=np.int64)
        x = np.ascontiguousarray(x, dtype=np.int64)
        y = np.ascontiguousarray(y, dtype=np.int64)
        p = np.ascontiguousarray(p, dtype=np.int8)
        if not (t.shape == x.shape == y.shape == p.shape) or t.ndim != 1:
            raise ShapeMismatchError("event columns must be 1-D arrays of equal length")
        if width <= 0 or height <= 0:
            raise ValueError(f"sensor size must be positive, got {width}x{height}")
        if len(t):
            if np.any(t < 0):
                raise ValueError("timestamps must be non-negative")
            if np.any(np.diff(t) < 0):
                raise UnsortedTimestampsError("timestamps must be non-decreasing")
            if x.min() < 0 or y.min() < 0 or x.max() >= width or y.max() >= height:
                raise CoordinateOutOfRangeError(
                    f"event coordinates outside the {width}x{height} sensor"
                )
            if not np.all((p == 1) | (p == -1)):
                raise InvalidPolarityError("polarity must be +1 or -1")
        if t_start is None:
            t_start = int(t[0]) if len(t) else 0
        if t_end is None:
            t_end = int(t[-1]) + 1 if len(t) else t_start + 1
        if t_end <= t_start:
            raise ValueError("empty time window")
        if len(t) and (t[0] < t_start or t[-1] >= t_end):
            raise ValueError("events fall outside [t_start, t_end)")
        for arr in (t, x, y, p):
            arr.setflags(write=False)
        self.t, self.x, self.y, self.p = t, x, y, p
        self.width, self.height = int(width), int(height)
        self.t_start, self.t_end = int(t_start), int(t_end)

    @classmethod
    def from_events(cls, events: Iterable[Event], width, height, t_start=None, t_end=None):
        events = list(events)
        cols = np.array([(e.t, e.x, e.y, e.p) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(*cols.T, width=width, height=height, t_start=t_start, t_end=t_end)

    @classmethod
    def empty(cls, width, height, t_start=0, t_end=1):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height, t_start, t_end)

    def __len__(self):
        return len(self.t)

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def events(self) -> list[Event]:
        return [Event(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(self.t, self.x, self.y, self.p)]

    def crop(self, t_start, t_end) -> "EventSlice":
        """Events with ``t_start <= t < t_end``, keeping the sensor geometry."""
        lo, hi = np.searchsorted(self.t, [t_start, t_end], side="left")
        return EventSlice(
            self.t[lo:hi], self.x[lo:hi], self.y[lo:hi], self.p[lo:hi],
            self.width, self.height, t_start, t_end,
        )

    def select(self, keep) -> "EventSlice":
        """Events where the boolean array ``keep`` is True, same window and sensor."""
        keep = np.asarray(keep, bool)
        return EventSlice(self.t[keep], self.x[keep], self.y[keep], self.p[keep],
                          self.width, self.height, self.t_start, self.t_end)

    def same_events(self, other: "EventSlice") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "txyp")
        )

    def __eq__(self, other):
        if not isinstance(other, EventSlice):
            return NotImplemented
        return self.same_events(other) and (self.t_start, self.t_end) == (other.t_start, other.t_end)

    __hash__ = None

    def __repr__(self):
        return (
            f"EventSlice(n={len(self)}, {self.width}x{self.height}, "
            f"window=[{self.t_start}, {self.t_end}) us)"
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def check_sensor(self, width, height):
        if not (0 < self.cx < width and 0 < self.cy < height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {width}x{height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [[1 / self.fx, 0.0, -self.cx / self.fx], [0.0, 1 / self.fy, -self.cy / self.fy], [0.0, 0.0, 1.0]]
        )


@dataclass
class FlowField:
    u: np.ndarray  # (H, W, 2), px/s, channel 0 = x
    bin_duration: float  # seconds

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 3 or self.u.shape[2] != 2:
            raise ShapeMismatchError(f"flow must be HxWx2, got {self.u.shape}")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("flow must be finite")
        if not self.bin_duration > 0:
            raise ValueError("bin_duration must be positive")


class FlowSequence:
    """B contiguous flow bins stored as one ``(B, H, W, 2)`` array.

    ``edges`` are the B+1 bin edges in microseconds (absolute, float).
    """

    __slots__ = ("u", "edges")

    def __init__(self, u, edges):
        u = np.ascontiguousarray(u, dtype=np.float64)
        edges = np.asarray(edges, dtype=np.float64)
        if u.ndim != 4 or u.shape[3] != 2:
            raise ShapeMismatchError(f"flows must be BxHxWx2, got {u.shape}")
        if len(edges) != u.shape[0] + 1 or u.shape[0] < 1:
            raise ValueError("need B >= 1 bins and B + 1 edges")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if not np.all(np.isfinite(u)):
            raise ValueError("flow must be finite")
        self.u, self.edges = u, edges

    @classmethod
    def from_fields(cls, fields: Sequence[FlowField], t_start_us=0.0):
        shapes = {f.u.shape for f in fields}
        if len(shapes) != 1:
            raise ShapeMismatchError("all flow fields must share H x W")
        durations = np.array([f.bin_duration for f in fields]) * 1e6
        edges = t_start_us + np.concatenate([[0.0], np.cumsum(durations)])
        return cls(np.stack([f.u for f in fields]), edges)

    @classmethod
    def uniform(cls, u, t_start_us, t_end_us):
        u = np.asarray(u, dtype=np.float64)
        return cls(u, np.linspace(t_start_us, t_end_us, u.shape[0] + 1))

    @classmethod
    def zeros(cls, bins, height, width, t_start_us, t_end_us):
        return cls.uniform(np.zeros((bins, height, width, 2)), t_start_us, t_end_us)

    @property
    def bins(self):
        return self.u.shape[0]

    @property
    def shape(self):
        return self.u.shape[1:3]

    @property
    def durations(self) -> np.ndarray:
        """Bin durations in seconds."""
        return np.diff(self.edges) * 1e-6

    @property
    def fields(self) -> list[FlowField]:
        return [FlowField(self.u[i], d) for i, d in enumerate(self.durations)]

    def with_u(self, u) -> "FlowSequence":
        return FlowSequence(u, self.edges)


class DepthMap:
    """Dense depth with an optional validity mask (True = valid)."""

    __slots__ = ("d", "mask")

    def __init__(self, d, mask=None):
        d = np.asarray(d, dtype=np.float64)
        if d.ndim != 2:
            raise ShapeMismatchError(f"depth must be HxW, got {d.shape}")
        if mask is None:
            mask = np.ones(d.shape, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != d.shape:
                raise ShapeMismatchError("depth mask shape differs from depth")
        valid = d[mask]
        if not (np.all(np.isfinite(valid)) and np.all(valid > 0)):
            raise ValueError("depth must be finite and positive wherever valid")
        self.d, self.mask = d, mask

    @property
    def shape(self):
        return self.d.shape

    def __repr__(self):
        return f"DepthMap({self.d.shape[0]}x{self.d.shape[1]}, valid={int(self.mask.sum())})"


@dataclass
class PoseStep:
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.t))):
            raise ValueError("pose must be finite")
        if np.linalg.norm(self.omega) >= np.pi:
            raise ValueError("rotation angle must be below pi")

    @classmethod
    def identity(cls):
        return cls()

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.t])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:6])


def check_same_shape(*grids):
    shapes = {tuple(np.shape(g))[:2] for g in grids}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"grids disagree on H x W: {sorted(shapes)}")


# --- EVT1 ---------------------------------------------------------------------


def write_events(slice_: EventSlice, path) -> None:
    records = np.zeros(len(slice_), dtype=EVT1_RECORD)
    records["t"] = slice_.t
    records["x"] = slice_.x
    records["y"] = slice_.y
    records["p"] = slice_.p
    with open(path, "wb") as f:
        f.write(EVT1_HEADER.pack(EVT1_MAGIC, slice_.width, slice_.height, len(slice_)))
        f.write(records.tobytes())


def read_events(path, t_start=None, t_end=None) -> EventSlice:
    """Load an EVT1 file.

    EVT1 carries no window bounds; pass ``t_start``/``t_end`` to restore them,
    otherwise the tight window around the events is used.
    """
    raw = Path(path).read_bytes()
    if len(raw) < EVT1_HEADER.size:
        raise TruncatedRecordError("file shorter than the 16-byte header")
    magic, width, height, count = EVT1_HEADER.unpack_from(raw)
    if magic != EVT1_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    payload = raw[EVT1_HEADER.size:]
    if len(payload) != count * EVT1_RECORD.itemsize:
        raise TruncatedRecordError(
            f"header announces {count} records, payload holds {len(payload) / EVT1_RECORD.itemsize:g}"
        )
    rec = np.frombuffer(payload, dtype=EVT1_RECORD, count=count)
    t = rec["t"].astype(np.int64)
    if count and np.any(np.diff(t) < 0):
        raise UnsortedTimestampsError("timestamps are not sorted")
    x = rec["x"].astype(np.int64)
    y = rec["y"].astype(np.int64)
    if count and (x.max() >= width or y.max() >= height):
        raise CoordinateOutOfRangeError(f"coordinate outside the {width}x{height} sensor")
    return EventSlice(t, x, y, rec["p"], width, height, t_start, t_end)


# --- PFM ----------------------------------------------------------------------


def write_pfm(path, image) -> None:
    """Write a 1- or 3-channel float32 PFM, little-endian (scale -1.0)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        kind = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        kind = b"PF"
    else:
        raise ShapeMismatchError(f"PFM holds HxW or HxWx3 images, got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file: {kind!r}")
        dims = f.readline().split()
        while not dims:  # tolerate blank lines
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise ValueError("PFM payload size does not match header")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_depth(path, depth: DepthMap) -> None:
    """Depth as PFM; invalid pixels are stored as 0."""
    write_pfm(path, np.where(depth.mask, depth.d, 0.0))


def read_depth(path) -> DepthMap:
    d = read_pfm(path).astype(np.float64)
    mask = np.isfinite(d) & (d > 0)
    return DepthMap(np.where(mask, d, 1.0), mask)


def write_flow(prefix, flows: FlowSequence) -> list[Path]:
    """One ``<prefix>_<bin>_u.pfm`` / ``_v.pfm`` pair per bin."""
    paths = []
    for i in range(flows.bins):
        for c, name in enumerate("uv"):
            p = Path(f"{prefix}_{i:03d}_{name}.pfm")
            write_pfm(p, flows.u[i, :, :, c])
            paths.append(p)
    return paths


def read_flow(prefix, edges) -> FlowSequence:
    edges = np.asarray(edges, dtype=np.float64)
    fields = []
    for i in range(len(edges) - 1):
        u = read_pfm(f"{prefix}_{i:03d}_u.pfm")
        v = read_pfm(f"{prefix}_{i:03d}_v.pfm")
        fields.append(np.stack([u, v], axis=-1))
    return FlowSequence(np.stack(fields).astype(np.float64), edges)


def write_csv(path, rows: Sequence[dict], fieldnames=None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
