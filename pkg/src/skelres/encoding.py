"""Skeleton-to-color-image encoding and training-time augmentation.

Images are ``(height, width, 3)`` numpy arrays: ``uint8`` for the encoded
form, floating point in [0, 255] or [0, 1] where noted.  Rows are joints in
part order, columns are frames, channels carry the normalized x, y, z.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateRange, ImageSizeError, ShapeError, SequenceFormatError
from .skeleton_io import SkeletonSequence, Topology, ntu_ids_from_name, parse_ntu_raw

TRAIN_SIZE = 40
INPUT_SIZE = 32

# (row, col) offsets of the eight 32x32 windows inside a 40x40 image:
# four corners, then the four edge midpoints.
CROP_ANCHORS = ((0, 0), (0, 8), (8, 0), (8, 8), (0, 4), (8, 4), (4, 0), (4, 8))


@dataclass(frozen=True)
class PartLayout:
    topology: Topology
    permutation: np.ndarray
    part_boundaries: tuple[tuple[int, int], ...]
    part_names: tuple[str, ...] = ()

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.intp)
        object.__setattr__(self, "permutation", perm)
        k = self.topology.num_joints
        if perm.shape != (k,) or not np.array_equal(np.sort(perm), np.arange(k)):
            raise ValueError(f"layout for {self.topology.value} is not a permutation of range({k})")
        if len(self.part_boundaries) != 5:
            raise ValueError("a layout needs exactly five parts")
        pos = 0
        for start, stop in self.part_boundaries:
            if start != pos or stop <= start:
                raise ValueError("part ranges must tile [0, K) in order")
            pos = stop
        if pos != k:
            raise ValueError("part ranges must tile [0, K) in order")

    @property
    def num_joints(self) -> int:
        return self.topology.num_joints

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(len(self.permutation))
        return inv

    @classmethod
    def identity(cls, topology: Topology) -> "PartLayout":
        k = topology.num_joints
        step = k // 5
        bounds = tuple((i * step, k if i == 4 else (i + 1) * step) for i in range(5))
        return cls(topology, np.arange(k), bounds)

    @classmethod
    def from_dict(cls, doc: dict) -> "PartLayout":
        topology = Topology(doc["topology"])
        perm, bounds, names = [], [], []
        for part in doc["parts"]:
            bounds.append((len(perm), len(perm) + len(part["joints"])))
            perm.extend(part["joints"])
            names.append(part["name"])
        return cls(topology, np.array(perm), tuple(bounds), tuple(names))


@lru_cache(maxsize=None)
def default_layout(topology: Topology) -> PartLayout:
    """The shipped five-part layout table for ``topology``."""
    text = resources.files("skelres").joinpath("layouts", f"{topology.value}.json").read_text()
    return PartLayout.from_dict(json.loads(text))


def load_layout(path: str | os.PathLike) -> PartLayout:
    return PartLayout.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    c_min: float
    c_max: float

    def __post_init__(self):
        if not (np.isfinite(self.c_min) and np.isfinite(self.c_max)):
            raise ValueError("NormStats must be finite")
        if self.c_min > self.c_max:
            raise ValueError("c_min must not exceed c_max")

    @classmethod
    def of(cls, coords: np.ndarray) -> "NormStats":
        return cls(float(np.min(coords)), float(np.max(coords)))


def dataset_norm_stats(sequences) -> NormStats:
    """Extrema over many sequences, for dataset-wide normalization."""
    lo = min(float(s.coords.min()) for s in sequences)
    hi = max(float(s.coords.max()) for s in sequences)
    return NormStats(lo, hi)


def normalize(
    seq: SkeletonSequence, stats: NormStats | None = None
) -> tuple[np.ndarray, NormStats]:
    """Map all coordinates affinely onto [0, 255] with one shared min/max.

    With ``stats=None`` the extrema come from this sequence (over every
    joint, frame and axis).  Supplied stats are used as-is and values
    outside them are clipped.  Returns ``(values (N, K, 3), stats)``.
    """
    if stats is None:
        stats = NormStats.of(seq.coords)
    span = stats.c_max - stats.c_min
    if not span > 0:
        raise DegenerateRange("all coordinates are equal; cannot normalize")
    # divide first so that the extrema land on exactly 0.0 and 255.0
    values = (seq.coords - stats.c_min) / span * 255.0
    return np.clip(values, 0.0, 255.0), stats


def reorder_joints(rows: np.ndarray, layout: PartLayout, axis: int = -2) -> np.ndarray:
    """Permute the joint axis so that output row r is input row permutation[r]."""
    rows = np.asarray(rows)
    if rows.shape[axis] != layout.num_joints:
        raise ShapeError(
            f"expected {layout.num_joints} joints on axis {axis}, got {rows.shape[axis]}"
        )
    return np.take(rows, layout.permutation, axis=axis)


def to_uint8(values: np.ndarray) -> np.ndarray:
    # np.rint rounds half to even
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def encode_image(
    seq: SkeletonSequence,
    layout: PartLayout | None = None,
    stats: NormStats | None = None,
) -> np.ndarray:
    """Encode a sequence as a K x N x 3 uint8 image (joints x frames x xyz)."""
    if layout is None:
        layout = default_layout(seq.topology)
    if layout.topology is not seq.topology:
        raise ShapeError(f"layout is for {layout.topology.value}, sequence is {seq.topology.value}")
    values, _ = normalize(seq, stats)
    rows = reorder_joints(values, layout, axis=1)  # (N, K, 3)
    return to_uint8(rows.transpose(1, 0, 2))


def _resample_axis(img: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = img.shape[axis]
    if in_len == out_len:
        return img
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_len - 1)
    w = src - lo
    shape = [1] * img.ndim
    shape[axis] = out_len
    w = w.reshape(shape)
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    return a + w * (b - a)


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping.

    uint8 input gives uint8 output (rounded half to even); float input gives
    float output clipped to [0, 255].
    """
    if out_h < 1 or out_w < 1 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageSizeError(f"cannot resize {img.shape[:2]} to {(out_h, out_w)}")
    out = img.astype(np.float64)
    out = _resample_axis(out, out_h, 0)
    out = _resample_axis(out, out_w, 1)
    if img.dtype == np.uint8:
        return to_uint8(out)
    return np.clip(out, 0.0, 255.0)


def _check_size(img: np.ndarray, size: int) -> None:
    if img.shape[:2] != (size, size):
        raise ImageSizeError(f"expected a {size}x{size} image, got {img.shape[0]}x{img.shape[1]}")


def crops8(img: np.ndarray) -> list[np.ndarray]:
    _check_size(img, TRAIN_SIZE)
    return [img[r:r + INPUT_SIZE, c:c + INPUT_SIZE].copy() for r, c in CROP_ANCHORS]


def flip(img: np.ndarray, axis: str) -> np.ndarray:
    if axis == "horizontal":
        return img[:, ::-1].copy()
    if axis == "vertical":
        return img[::-1, :].copy()
    raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


def augment_set(img: np.ndarray) -> list[np.ndarray]:
    """24 training views: each of the 8 crops as-is, h-flipped and v-flipped."""
    out = []
    for crop in crops8(img):
        out += [crop, flip(crop, "horizontal"), flip(crop, "vertical")]
    return out


def encode_for_network(
    seq: SkeletonSequence,
    layout: PartLayout | None = None,
    size: int = INPUT_SIZE,
    stats: NormStats | None = None,
) -> np.ndarray:
    return resize(encode_image(seq, layout, stats), size, size)


def to_network_input(images) -> np.ndarray:
    """Stack uint8 HxWx3 images into a float32 N x 3 x H x W batch in [0, 1]."""
    batch = np.stack([np.asarray(im) for im in images]) if isinstance(images, list) else np.asarray(images)
    if batch.ndim == 3:
        batch = batch[None]
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2), dtype=np.float32) / np.float32(255.0)


# --------------------------------------------------------------------------
# NTU multi-body handling
# --------------------------------------------------------------------------


def motion_energy(body: np.ndarray) -> float:
    """Total inter-frame joint displacement of a (frames, K, 3) track."""
    if len(body) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(body, axis=0), axis=-1).sum())


def select_primary_body(bodies: list[np.ndarray]) -> np.ndarray:
    """Pick the most active body; ties go to the first listed."""
    if not bodies:
        raise SequenceFormatError("no tracked body in sequence")
    energies = [motion_energy(b) for b in bodies]
    return bodies[int(np.argmax(energies))]


def ntu_sequence_from_raw(text: str, name: str) -> SkeletonSequence:
    label, subject, camera = ntu_ids_from_name(name)
    body = select_primary_body(parse_ntu_raw(text))
    return SkeletonSequence(body, label, subject, camera, Topology.KINECT_V2)


# --------------------------------------------------------------------------
# PNG persistence
# --------------------------------------------------------------------------


def save_png(path: str | os.PathLike, img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError("PNG export needs an HxWx3 uint8 image")
    Image.fromarray(img, "RGB").save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_norm_stats(path: str | os.PathLike, stats: NormStats) -> None:
    Path(path).write_text(f"{stats.c_min!r} {stats.c_max!r}\n")


def read_norm_stats(path: str | os.PathLike) -> NormStats:
    lo, hi = Path(path).read_text().split()
    return NormStats(float(lo), float(hi))
