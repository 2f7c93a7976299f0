"""Desk-scale datasets: synthetic blobs, moving-blob event streams, IDX files.

The static set is a 3-class Gaussian-blob task on small grayscale images,
sized so a toy spiking network trains in seconds yet sits close enough to
its decision boundaries that bounded perturbations matter. The event set
emits DVS-style streams of a small blob sweeping across the pixel grid in a
class-specific direction. A reader for the classic IDX binary layout lets
users plug in local digit-style datasets; nothing is downloaded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .encoders import EventStream, encode_frames

KINDS = ("synthetic-static", "synthetic-events", "external-idx")


@dataclass
class Dataset:
    x: np.ndarray        # (N, C, H, W) images or (N, T, 2, H, W) frames
    y: np.ndarray        # (N,) int64 labels
    n_classes: int
    kind: str

    def __post_init__(self):
        self.y = np.asarray(self.y, np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("sample/label counts differ")
        if len(self.y) == 0:
            raise ValueError("dataset is empty")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError("label outside [0, n_classes)")

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self):
        return tuple(self.x.shape[1:])


# -- static blobs -------------------------------------------------------------


def _blob_image(rng: np.random.Generator, center, size: int, spread: float,
                amplitude: float, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = center
    img = amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spread ** 2))
    img += rng.normal(0.0, noise, (size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_blobs(n_samples: int, *, size: int = 8, n_classes: int = 3,
               seed: int = 0, spread: float = 1.4, jitter: float = 1.0,
               noise: float = 0.12) -> Dataset:
    """Gaussian bumps whose class is the (jittered) center position."""
    rng = np.random.default_rng(seed)
    margin = size / 4
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    radius = size / 2 - margin
    centers = [(size / 2 - 0.5 + radius * np.sin(a),
                size / 2 - 0.5 + radius * np.cos(a)) for a in angles]
    images = np.empty((n_samples, 1, size, size), np.float32)
    labels = rng.integers(0, n_classes, n_samples)
    for i, cls in enumerate(labels):
        cy, cx = centers[cls]
        center = (cy + rng.normal(0, jitter), cx + rng.normal(0, jitter))
        amplitude = rng.uniform(0.55, 0.9)
        images[i, 0] = _blob_image(rng, center, size, spread, amplitude, noise)
    return Dataset(images, labels, n_classes, "synthetic-static")


def make_blob_splits(n_train: int = 600, n_test: int = 200, seed: int = 0,
                     **kwargs) -> tuple[Dataset, Dataset]:
    train = make_blobs(n_train, seed=seed, **kwargs)
    test = make_blobs(n_test, seed=seed + 1, **kwargs)
    return train, test


# -- moving-blob event streams ---------------------------------------------------

EVENT_CLASSES = ("rightward", "downward", "diagonal")
_DIRECTIONS = {0: (0, 1), 1: (1, 0), 2: (1, 1)}


def moving_blob_stream(cls: int, rng: np.random.Generator, *, size: int = 8,
                       duration_us: int = 10_000, steps: int = 8,
                       noise_events: int = 6) -> EventStream:
    """Blob sweeping across the grid; ON events lead, OFF events trail."""
    dy, dx = _DIRECTIONS[cls]
    if dy and dx:
        start = [int(rng.integers(0, 2)), int(rng.integers(0, 2))]
    elif dy:
        start = [0, int(rng.integers(1, size - 1))]
    else:
        start = [int(rng.integers(1, size - 1)), 0]

    t, xs, ys, ps = [], [], [], []

    def blob_cells(cy, cx):
        cells = []
        for oy, ox in ((0, 0), (0, 1), (1, 0)):
            y, x = cy + oy, cx + ox
            if 0 <= y < size and 0 <= x < size:
                cells.append((y, x))
        return set(cells)

    prev = set()
    for step in range(steps):
        cy = start[0] + dy * step
        cx = start[1] + dx * step
        if not (0 <= cy < size and 0 <= cx < size):
            break
        now = blob_cells(cy, cx)
        stamp = (step * duration_us) // steps
        for y, x in sorted(now - prev):
            t.append(stamp + int(rng.integers(0, 50)))
            ys.append(y), xs.append(x), ps.append(1)
        for y, x in sorted(prev - now):
            t.append(stamp + int(rng.integers(0, 50)))
            ys.append(y), xs.append(x), ps.append(0)
        prev = now
    for _ in range(noise_events):
        t.append(int(rng.integers(0, duration_us)))
        ys.append(int(rng.integers(0, size)))
        xs.append(int(rng.integers(0, size)))
        ps.append(int(rng.integers(0, 2)))
    return EventStream(np.array(t, np.int64), np.array(xs, np.int16),
                       np.array(ys, np.int16), np.array(ps, np.uint8)).canonical()


def make_event_streams(n_samples: int, *, size: int = 8, seed: int = 0,
                       n_classes: int = 3, **kwargs):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, n_samples)
    streams = [moving_blob_stream(int(c), rng, size=size, **kwargs) for c in labels]
    return streams, labels.astype(np.int64)


def make_event_dataset(n_samples: int, timesteps: int, *, size: int = 8,
                       seed: int = 0, cap: int = 5, **kwargs) -> Dataset:
    """Pre-binned frame dataset: (N, T, 2, H, W) in [0, 1]."""
    streams, labels = make_event_streams(n_samples, size=size, seed=seed, **kwargs)
    frames = np.stack([encode_frames(s, timesteps, (size, size), cap).data
                       for s in streams])
    return Dataset(frames.astype(np.float32), labels, 3, "synthetic-events")


def make_event_splits(n_train: int, n_test: int, timesteps: int,
                      seed: int = 0, **kwargs) -> tuple[Dataset, Dataset]:
    train = make_event_dataset(n_train, timesteps, seed=seed, **kwargs)
    test = make_event_dataset(n_test, timesteps, seed=seed + 1, **kwargs)
    return train, test


# -- IDX ingestion ----------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
               0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Read one array in the IDX binary layout (big-endian, magic-prefixed)."""
    with open(path, "rb") as fh:
        zeros, dtype_code, ndim = struct.unpack(">HBB", fh.read(4))
        if zeros != 0 or dtype_code not in _IDX_DTYPES:
            raise ValueError(f"{path}: not an IDX file")
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        count = int(np.prod(dims))
        data = np.frombuffer(fh.read(), dtype=_IDX_DTYPES[dtype_code], count=count)
    return data.reshape(dims)


def load_idx_dataset(images_path, labels_path) -> Dataset:
    """Images + labels IDX pair -> normalized single-channel dataset."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError("expected (N, H, W) image file")
    if labels.ndim != 1 or len(labels) != len(images):
        raise ValueError("label file does not match image file")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    y = labels.astype(np.int64)
    return Dataset(x, y, int(y.max()) + 1, "external-idx")
