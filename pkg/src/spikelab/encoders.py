"""Input encodings: direct replication, Poisson spike trains, event frames.

Static images in [0, 1] become T-step inputs either by repeating the image
at every step (direct) or by sampling Bernoulli spikes at pixel intensity
(Poisson). Event streams from a DVS-style sensor are binned into T
two-channel count frames. Each encoding also provides the differentiable
mapping from the attacked variable to the network input, so perturbations
are optimized in image/frame space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .tensor import Tensor, _accumulate, _node, replicate, transpose

ENCODINGS = ("direct", "poisson", "frame")


@dataclass
class EncodedInput:
    kind: str
    data: np.ndarray  # (T, ...) float32
    timesteps: int


def _check_unit_range(image: np.ndarray):
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")


def encode_direct(image: np.ndarray, timesteps: int) -> EncodedInput:
    """Repeat a normalized image identically at every timestep."""
    image = np.asarray(image, np.float32)
    _check_unit_range(image)
    data = np.broadcast_to(image, (timesteps,) + image.shape).copy()
    return EncodedInput("direct", data, timesteps)


def encode_poisson(image: np.ndarray, timesteps: int, seed: int) -> EncodedInput:
    """Sample an independent Bernoulli(pixel) spike at every step and pixel."""
    image = np.asarray(image, np.float32)
    _check_unit_range(image)
    rng = np.random.default_rng(seed)
    uniforms = rng.random((timesteps,) + image.shape, dtype=np.float32)
    data = (uniforms < image).astype(np.float32)
    return EncodedInput("poisson", data, timesteps)


# -- event streams ---------------------------------------------------------


@dataclass
class EventStream:
    """Sparse sensor events: microsecond timestamps, pixel coords, polarity."""

    t: np.ndarray  # int64 microseconds
    x: np.ndarray  # int16 column
    y: np.ndarray  # int16 row
    p: np.ndarray  # uint8, 0 = off, 1 = on

    def __post_init__(self):
        self.t = np.asarray(self.t, np.int64)
        self.x = np.asarray(self.x, np.int16)
        self.y = np.asarray(self.y, np.int16)
        self.p = np.asarray(self.p, np.uint8)
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.p)):
            raise ValueError("event arrays must share one length")

    def __len__(self):
        return len(self.t)

    def canonical(self) -> "EventStream":
        """Stable-sort events by timestamp."""
        order = np.argsort(self.t, kind="stable")
        return EventStream(self.t[order], self.x[order], self.y[order], self.p[order])


def write_events(path, stream: EventStream):
    """One event per line: ``t_us x y p``, LF-terminated UTF-8."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
            fh.write(f"{t} {x} {y} {p}\n")


def read_events(path) -> EventStream:
    t, x, y, p = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 't_us x y p'")
            t.append(int(parts[0]))
            x.append(int(parts[1]))
            y.append(int(parts[2]))
            pol = int(parts[3])
            if pol not in (0, 1):
                raise ValueError(f"{path}:{lineno}: polarity must be 0 or 1")
            p.append(pol)
    return EventStream(np.array(t, np.int64), np.array(x, np.int16),
                       np.array(y, np.int16), np.array(p, np.uint8)).canonical()


def bin_events(stream: EventStream, timesteps: int, resolution) -> np.ndarray:
    """Accumulate raw per-bin, per-polarity event counts into (T, 2, H, W).

    The stream's time range is split into T equal bins (events at the final
    instant land in the last bin). Counts are not clipped here, so the total
    equals the number of events.
    """
    if len(stream) == 0:
        raise PreconditionError("cannot bin an empty event stream")
    h, w = resolution
    if stream.x.min() < 0 or stream.x.max() >= w or stream.y.min() < 0 or stream.y.max() >= h:
        raise ValueError("event coordinates outside resolution")
    stream = stream.canonical()
    t0, t1 = int(stream.t[0]), int(stream.t[-1])
    span = t1 - t0
    if span == 0:
        bins = np.zeros(len(stream), np.int64)
    else:
        bins = np.minimum(((stream.t - t0) * timesteps) // span, timesteps - 1)
    frames = np.zeros((timesteps, 2, h, w), np.float32)
    np.add.at(frames, (bins, stream.p.astype(np.int64), stream.y.astype(np.int64),
                       stream.x.astype(np.int64)), 1.0)
    return frames


def encode_frames(stream: EventStream, timesteps: int, resolution,
                  cap: int = 5) -> EncodedInput:
    """Bin events, clip per-cell counts at ``cap``, normalize to [0, 1]."""
    counts = bin_events(stream, timesteps, resolution)
    data = np.minimum(counts, float(cap)) / float(cap)
    return EncodedInput("frame", data.astype(np.float32), timesteps)


# -- differentiable attack-space -> network-input mappings -------------------


class DirectEncoding:
    """Attack variable is the image (batch, C, H, W); input repeats it T times."""

    kind = "direct"

    def __init__(self, timesteps: int):
        self.timesteps = timesteps

    def input_tensor(self, x: Tensor) -> Tensor:
        return replicate(x, self.timesteps)

    def encode_batch(self, images: np.ndarray, rng=None) -> np.ndarray:
        return np.broadcast_to(images, (self.timesteps,) + images.shape).copy()


class PoissonEncoding:
    """Attack variable is the Bernoulli probability map; draws share one seed.

    The same uniforms are reused across every optimization step, so the
    spike trains respond deterministically to the perturbed probabilities;
    gradients flow through the per-step expected rate (identity per draw).
    """

    kind = "poisson"

    def __init__(self, timesteps: int, seed: int = 0):
        self.timesteps = timesteps
        self.seed = seed
        self._uniforms = None

    def bind(self, shape) -> None:
        """Fix the uniform draws for an attack on a (batch, ...) block."""
        rng = np.random.default_rng(self.seed)
        self._uniforms = rng.random((self.timesteps,) + tuple(shape), dtype=np.float32)

    def input_tensor(self, x: Tensor) -> Tensor:
        if self._uniforms is None or self._uniforms.shape[1:] != x.data.shape:
            self.bind(x.data.shape)
        uniforms = self._uniforms.astype(x.data.dtype)
        spikes = (uniforms < x.data).astype(x.data.dtype)

        def backward():
            _accumulate(x, out.grad.sum(axis=0))

        out = _node(spikes, (x,), "poisson_draw", backward)
        return out

    def encode_batch(self, images: np.ndarray, rng=None) -> np.ndarray:
        rng = rng or np.random.default_rng(self.seed)
        uniforms = rng.random((self.timesteps,) + images.shape, dtype=np.float32)
        return (uniforms < images).astype(np.float32)


class FrameEncoding:
    """Attack variable is the frame stack (batch, T, 2, H, W) itself."""

    kind = "frame"

    def __init__(self, timesteps: int):
        self.timesteps = timesteps

    def input_tensor(self, x: Tensor) -> Tensor:
        return transpose(x, (1, 0, 2, 3, 4))

    def encode_batch(self, frames: np.ndarray, rng=None) -> np.ndarray:
        return np.ascontiguousarray(frames.transpose(1, 0, 2, 3, 4))


def make_encoding(kind: str, timesteps: int, seed: int = 0):
    if kind == "direct":
        return DirectEncoding(timesteps)
    if kind == "poisson":
        return PoissonEncoding(timesteps, seed)
    if kind == "frame":
        return FrameEncoding(timesteps)
    raise ValueError(f"unknown encoding {kind!r}")
