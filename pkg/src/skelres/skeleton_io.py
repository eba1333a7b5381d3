"""Skeleton sequence parsing, serialization and dataset protocol splits.

Canonical sequence file (UTF-8 text)::

    K N label subject camera        # camera may be "-"
    x y z                           # N blocks of K joint lines
    ...

Blank lines between frame blocks are accepted on read and never written.
A manifest file maps label ids to action names, one ``id<TAB>name`` per line.
"""

from __future__ import annotations

import enum
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    MalformedHeader,
    MalformedLine,
    NonFiniteCoordinate,
    SequenceFormatError,
    SplitError,
    TooFewFrames,
    WrongJointCount,
)

log = logging.getLogger(__name__)

SEQUENCE_SUFFIX = ".skel"


class Topology(enum.Enum):
    KINECT_V1 = "kinect-v1"
    KINECT_V2 = "kinect-v2"

    @property
    def num_joints(self) -> int:
        return 20 if self is Topology.KINECT_V1 else 25

    @classmethod
    def from_joint_count(cls, k: int) -> "Topology":
        for t in cls:
            if t.num_joints == k:
                return t
        raise WrongJointCount(f"no supported topology has {k} joints")


class Protocol(enum.Enum):
    AS1 = "as1"
    AS2 = "as2"
    AS3 = "as3"
    NTU_CROSS_SUBJECT = "ntu-xsub"
    NTU_CROSS_VIEW = "ntu-xview"

    @property
    def is_msr(self) -> bool:
        return self in (Protocol.AS1, Protocol.AS2, Protocol.AS3)


# MSR Action3D actions in dataset order (file prefix a01..a20 -> id 0..19).
MSR_ACTIONS = (
    "high arm wave",
    "horizontal arm wave",
    "hammer",
    "hand catch",
    "forward punch",
    "high throw",
    "draw x",
    "draw tick",
    "draw circle",
    "hand clap",
    "two hand wave",
    "side-boxing",
    "bend",
    "forward kick",
    "side kick",
    "jogging",
    "tennis swing",
    "tennis serve",
    "golf swing",
    "pickup & throw",
)

MSR_SUBSETS = {
    Protocol.AS1: (
        "horizontal arm wave", "hammer", "forward punch", "high throw",
        "hand clap", "bend", "tennis serve", "pickup & throw",
    ),
    Protocol.AS2: (
        "high arm wave", "hand catch", "draw x", "draw tick",
        "draw circle", "two hand wave", "forward kick", "side-boxing",
    ),
    Protocol.AS3: (
        "high throw", "forward kick", "side kick", "jogging",
        "tennis swing", "tennis serve", "golf swing", "pickup & throw",
    ),
}

MSR_TRAIN_SUBJECTS = frozenset({1, 3, 5, 7, 9})
MSR_TEST_SUBJECTS = frozenset({2, 4, 6, 8, 10})

NTU_TRAIN_SUBJECTS = frozenset(
    {1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38}
)
NTU_TRAIN_CAMERAS = frozenset({2, 3})
NTU_TEST_CAMERAS = frozenset({1})


@dataclass(eq=False)
class SkeletonSequence:
    """N frames of K joints, stored as an (N, K, 3) float64 array."""

    coords: np.ndarray
    label: int
    subject_id: int
    camera_id: int | None = None
    topology: Topology | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[2] != 3:
            raise SequenceFormatError(f"coords must be (N, K, 3), got {self.coords.shape}")
        if self.topology is None:
            self.topology = Topology.from_joint_count(self.coords.shape[1])
        elif self.coords.shape[1] != self.topology.num_joints:
            raise WrongJointCount(
                f"{self.topology.value} expects {self.topology.num_joints} joints, "
                f"got {self.coords.shape[1]}"
            )
        if self.coords.shape[0] < 2:
            raise TooFewFrames(f"need at least 2 frames, got {self.coords.shape[0]}")
        if not np.all(np.isfinite(self.coords)):
            raise NonFiniteCoordinate("sequence contains NaN or Inf coordinates")

    @property
    def num_frames(self) -> int:
        return self.coords.shape[0]

    @property
    def num_joints(self) -> int:
        return self.coords.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        return (
            self.label == other.label
            and self.subject_id == other.subject_id
            and self.camera_id == other.camera_id
            and self.topology == other.topology
            and self.coords.shape == other.coords.shape
            and self.coords.tobytes() == other.coords.tobytes()
        )


def _parse_header(line: str) -> tuple[int, int, int, int, int | None]:
    parts = line.split()
    if len(parts) != 5:
        raise MalformedHeader(f"header needs 5 fields, got {len(parts)}: {line!r}")
    try:
        k, n, label, subject = (int(p) for p in parts[:4])
        camera = None if parts[4] == "-" else int(parts[4])
    except ValueError as exc:
        raise MalformedHeader(f"bad header {line!r}: {exc}") from None
    if k <= 0 or n < 0 or label < 0:
        raise MalformedHeader(f"bad header values {line!r}")
    return k, n, label, subject, camera


def _parse_joint(line: str, lineno: int) -> tuple[float, float, float]:
    parts = line.split()
    if len(parts) != 3:
        raise MalformedLine(f"line {lineno}: expected 'x y z', got {line!r}")
    try:
        xyz = tuple(float(p) for p in parts)
    except ValueError:
        raise MalformedLine(f"line {lineno}: not a number: {line!r}") from None
    if not all(math.isfinite(v) for v in xyz):
        raise NonFiniteCoordinate(f"line {lineno}: non-finite coordinate {line!r}")
    return xyz


def parse_sequence(data: bytes | str, topology: Topology) -> SkeletonSequence:
    """Parse a canonical sequence stream and validate it against ``topology``."""
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MalformedHeader("empty stream")
    k, n, label, subject, camera = _parse_header(lines[0])
    if k != topology.num_joints:
        raise WrongJointCount(f"header declares K={k}, {topology.value} has {topology.num_joints}")
    if n < 2:
        raise TooFewFrames(f"header declares N={n}, need at least 2")

    body = [(i + 2, ln) for i, ln in enumerate(lines[1:])]
    if any(not ln.strip() for _, ln in body):
        blocks: list[list[tuple[int, str]]] = []
        cur: list[tuple[int, str]] = []
        for item in body:
            if item[1].strip():
                cur.append(item)
            elif cur:
                blocks.append(cur)
                cur = []
        if cur:
            blocks.append(cur)
    else:
        blocks = [body[i:i + k] for i in range(0, len(body), k)]

    if len(blocks) != n:
        raise WrongJointCount(f"expected {n} frames of {k} joints, found {len(blocks)} blocks")
    coords = np.empty((n, k, 3), dtype=np.float64)
    for f, block in enumerate(blocks):
        if len(block) != k:
            raise WrongJointCount(f"frame {f} has {len(block)} joints, expected {k}")
        for j, (lineno, ln) in enumerate(block):
            coords[f, j] = _parse_joint(ln, lineno)
    return SkeletonSequence(coords, label, subject, camera, topology)


def serialize_sequence(seq: SkeletonSequence) -> bytes:
    camera = "-" if seq.camera_id is None else str(seq.camera_id)
    out = [f"{seq.num_joints} {seq.num_frames} {seq.label} {seq.subject_id} {camera}"]
    # repr() gives the shortest string that round-trips a float64 exactly
    for frame in seq.coords:
        out.extend(f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in frame)
    return ("\n".join(out) + "\n").encode("utf-8")


def read_sequence(path: str | os.PathLike, topology: Topology) -> SkeletonSequence:
    return parse_sequence(Path(path).read_bytes(), topology)


def write_sequence(path: str | os.PathLike, seq: SkeletonSequence) -> None:
    Path(path).write_bytes(serialize_sequence(seq))


def load_manifest(path: str | os.PathLike) -> dict[int, str]:
    names: dict[int, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            ident, name = line.split("\t", 1)
            names[int(ident)] = name.strip()
        except ValueError:
            raise SequenceFormatError(f"{path}:{lineno}: expected 'id<TAB>name'") from None
    return names


def write_manifest(path: str | os.PathLike, names: Sequence[str] | dict[int, str]) -> None:
    items = names.items() if isinstance(names, dict) else enumerate(names)
    Path(path).write_text("".join(f"{i}\t{n}\n" for i, n in sorted(items)), encoding="utf-8")


# --------------------------------------------------------------------------
# Dataset indexing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Entry:
    path: str
    label: int
    subject_id: int
    camera_id: int | None = None


@dataclass
class DatasetIndex:
    """Admitted entries plus a disjoint train/test partition of their indices.

    Labels in ``entries`` are protocol-local (0..num_classes-1) and
    ``class_names[label]`` names them.
    """

    entries: list[Entry]
    protocol: Protocol
    train: list[int]
    test: list[int]
    class_names: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def train_entries(self) -> list[Entry]:
        return [self.entries[i] for i in self.train]

    def test_entries(self) -> list[Entry]:
        return [self.entries[i] for i in self.test]


def _norm_name(name: str) -> str:
    return re.sub(r"\s+", " ", name.strip().lower())


def build_msr_split(
    entries: Iterable[Entry],
    subset: Protocol,
    manifest: dict[int, str] | None = None,
) -> DatasetIndex:
    """Subject split for one MSR Action3D subset.

    Entries whose action is outside the subset are dropped; the remaining
    labels are renumbered in subset order.
    """
    if not subset.is_msr:
        raise SplitError(f"{subset.value} is not an MSR subset")
    if manifest is None:
        manifest = dict(enumerate(MSR_ACTIONS))
    wanted = [_norm_name(a) for a in MSR_SUBSETS[subset]]
    local = {name: i for i, name in enumerate(wanted)}

    admitted, train, test = [], [], []
    for e in entries:
        if not 1 <= e.subject_id <= 10:
            raise SplitError(f"{e.path}: MSR subject id {e.subject_id} outside [1, 10]")
        name = _norm_name(manifest.get(e.label, ""))
        if name not in local:
            continue
        idx = len(admitted)
        admitted.append(Entry(e.path, local[name], e.subject_id, e.camera_id))
        (train if e.subject_id in MSR_TRAIN_SUBJECTS else test).append(idx)
    return DatasetIndex(admitted, subset, train, test, list(MSR_SUBSETS[subset]))


def build_ntu_split(
    entries: Iterable[Entry],
    mode: Protocol,
    manifest: dict[int, str] | None = None,
) -> DatasetIndex:
    if mode not in (Protocol.NTU_CROSS_SUBJECT, Protocol.NTU_CROSS_VIEW):
        raise SplitError(f"{mode.value} is not an NTU protocol")
    admitted = list(entries)
    train, test = [], []
    for i, e in enumerate(admitted):
        if mode is Protocol.NTU_CROSS_SUBJECT:
            is_train = e.subject_id in NTU_TRAIN_SUBJECTS
        else:
            if e.camera_id not in NTU_TRAIN_CAMERAS | NTU_TEST_CAMERAS:
                raise SplitError(f"{e.path}: camera id {e.camera_id} not in {{1, 2, 3}}")
            is_train = e.camera_id in NTU_TRAIN_CAMERAS
        (train if is_train else test).append(i)
    if manifest:
        names = [manifest.get(i, str(i)) for i in range(max(manifest) + 1)]
    else:
        names = [str(i) for i in range(max((e.label for e in admitted), default=-1) + 1)]
    return DatasetIndex(admitted, mode, train, test, names)


def build_split(entries, protocol: Protocol, manifest=None) -> DatasetIndex:
    if protocol.is_msr:
        return build_msr_split(entries, protocol, manifest)
    return build_ntu_split(entries, protocol, manifest)


def scan_directory(
    directory: str | os.PathLike, topology: Topology
) -> tuple[list[Entry], list[tuple[str, str]]]:
    """Index every canonical sequence file under ``directory``.

    Invalid sequences are skipped with a warning and returned as
    ``(path, reason)`` failures.
    """
    entries, failures = [], []
    for path in sorted(Path(directory).glob(f"*{SEQUENCE_SUFFIX}")):
        try:
            seq = read_sequence(path, topology)
        except (SequenceFormatError, UnicodeDecodeError) as exc:
            log.warning("skipping %s: %s", path, exc)
            failures.append((str(path), str(exc)))
            continue
        entries.append(Entry(str(path), seq.label, seq.subject_id, seq.camera_id))
    return entries, failures


# --------------------------------------------------------------------------
# Raw dataset converters
# --------------------------------------------------------------------------

_MSR_NAME = re.compile(r"a(\d+)_s(\d+)_e(\d+)", re.IGNORECASE)
_NTU_NAME = re.compile(r"S(\d{3})C(\d{3})P(\d{3})R(\d{3})A(\d{3})")


def parse_msr_raw(text: str, name: str) -> SkeletonSequence:
    """MSR Action3D skeleton text: 20 lines of ``x y z confidence`` per frame.

    Label and subject come from the ``aXX_sYY_eZZ`` file name.
    """
    m = _MSR_NAME.search(name)
    if not m:
        raise MalformedHeader(f"cannot read action/subject from {name!r}")
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if any(len(r) < 3 for r in rows):
        raise MalformedLine(f"{name}: rows need at least 3 values")
    k = Topology.KINECT_V1.num_joints
    if len(rows) % k:
        raise WrongJointCount(f"{name}: {len(rows)} rows is not a multiple of {k}")
    coords = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, k, 3)
    return SkeletonSequence(
        coords, int(m.group(1)) - 1, int(m.group(2)), None, Topology.KINECT_V1
    )


def parse_ntu_raw(text: str) -> list[np.ndarray]:
    """Read an NTU RGB+D ``.skeleton`` file into one (frames, 25, 3) array per body id.

    Frames in which a body is absent are simply missing from its array.
    """
    tokens = iter(text.splitlines())
    bodies: dict[str, list[np.ndarray]] = {}
    try:
        nframes = int(next(tokens))
        for _ in range(nframes):
            nbodies = int(next(tokens))
            for _ in range(nbodies):
                body_id = next(tokens).split()[0]
                njoints = int(next(tokens))
                joints = np.empty((njoints, 3))
                for j in range(njoints):
                    joints[j] = [float(v) for v in next(tokens).split()[:3]]
                bodies.setdefault(body_id, []).append(joints)
    except (StopIteration, ValueError, IndexError) as exc:
        raise SequenceFormatError(f"truncated or malformed NTU skeleton file: {exc}") from None
    return [np.stack(frames) for frames in bodies.values() if len(frames) > 0]


def ntu_ids_from_name(name: str) -> tuple[int, int, int]:
    """(label, subject, camera) from an ``SsssCcccPpppRrrrAaaa`` file name."""
    m = _NTU_NAME.search(name)
    if not m:
        raise MalformedHeader(f"cannot read NTU ids from {name!r}")
    return int(m.group(5)) - 1, int(m.group(3)), int(m.group(2))
