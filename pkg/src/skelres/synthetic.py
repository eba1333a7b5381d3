"""Synthetic skeleton sequences for tests and benchmarks.

Every joint oscillates around a fixed rest pose.  A class fixes the
oscillation frequency at ``2 ** class id`` cycles per sequence; amplitudes,
a small per-coordinate phase jitter, the global offset, length and noise vary
per sequence.  The encoded images of different classes are linearly separable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .skeleton_io import (
    MSR_ACTIONS,
    MSR_SUBSETS,
    MSR_TEST_SUBJECTS,
    MSR_TRAIN_SUBJECTS,
    NTU_TRAIN_SUBJECTS,
    SEQUENCE_SUFFIX,
    Protocol,
    SkeletonSequence,
    Topology,
    write_manifest,
    write_sequence,
)

_REST_POSE_SEED = 20180601


def rest_pose(topology: Topology) -> np.ndarray:
    rng = make_rng(_REST_POSE_SEED + topology.num_joints)
    pose = rng.uniform(-0.1, 0.1, size=(topology.num_joints, 3))
    pose[:, 1] += np.linspace(0.2, -0.2, topology.num_joints)
    return pose


def make_sequence(
    label: int,
    rng,
    topology: Topology = Topology.KINECT_V2,
    frames: int | None = None,
    noise: float = 0.005,
    subject_id: int = 1,
    camera_id: int | None = None,
    frequency: float | None = None,
) -> SkeletonSequence:
    rng = make_rng(rng)
    k = topology.num_joints
    n = int(frames if frames is not None else rng.integers(30, 61))
    freq = float(2 ** label) if frequency is None else frequency
    t = np.arange(n) / n
    amp = rng.uniform(0.3, 0.45, size=(k, 3))
    phase = rng.uniform(-0.2, 0.2, size=(k, 3))
    motion = amp[None] * np.sin(2 * np.pi * freq * t[:, None, None] + phase[None])
    coords = rest_pose(topology)[None] + motion + noise * rng.standard_normal((n, k, 3))
    coords += rng.uniform(-0.05, 0.05, size=3)
    return SkeletonSequence(coords, label, subject_id, camera_id, topology)


def make_dataset(
    num_classes: int = 4,
    per_class_train: int = 16,
    per_class_test: int = 8,
    seed: int = 0,
    topology: Topology = Topology.KINECT_V2,
    frames: int | None = None,
) -> tuple[list[SkeletonSequence], list[SkeletonSequence]]:
    rng = make_rng(seed)
    train, test = [], []
    for c in range(num_classes):
        train += [make_sequence(c, rng, topology, frames) for _ in range(per_class_train)]
        test += [make_sequence(c, rng, topology, frames) for _ in range(per_class_test)]
    return train, test


def _ids_for(protocol: Protocol, is_train: bool, i: int) -> tuple[int, int | None]:
    if protocol.is_msr:
        pool = sorted(MSR_TRAIN_SUBJECTS if is_train else MSR_TEST_SUBJECTS)
        return pool[i % len(pool)], None
    if protocol is Protocol.NTU_CROSS_VIEW:
        cams = (2, 3) if is_train else (1,)
        return 1 + i % 40, cams[i % len(cams)]
    pool = sorted(NTU_TRAIN_SUBJECTS) if is_train else sorted(set(range(1, 41)) - NTU_TRAIN_SUBJECTS)
    return pool[i % len(pool)], 1 + i % 3


def write_dataset(
    directory,
    protocol: Protocol = Protocol.NTU_CROSS_SUBJECT,
    num_classes: int = 4,
    per_class_train: int = 16,
    per_class_test: int = 8,
    seed: int = 0,
    frames: int | None = None,
) -> list[Path]:
    """Write canonical sequence files plus ``manifest.tsv`` whose ids/subjects/
    cameras land in the intended partition under ``protocol``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    if protocol.is_msr:
        topology = Topology.KINECT_V1
        names = list(MSR_ACTIONS)
        global_ids = [MSR_ACTIONS.index(a) for a in MSR_SUBSETS[protocol][:num_classes]]
    else:
        topology = Topology.KINECT_V2
        names = [f"synthetic action {c}" for c in range(num_classes)]
        global_ids = list(range(num_classes))
    write_manifest(directory / "manifest.tsv", names)

    paths = []
    for c, gid in enumerate(global_ids):
        for split, count in (("train", per_class_train), ("test", per_class_test)):
            for i in range(count):
                subject, camera = _ids_for(protocol, split == "train", i)
                seq = make_sequence(c, rng, topology, frames, subject_id=subject, camera_id=camera)
                seq.label = gid
                path = directory / f"c{gid:02d}_{split}_{i:03d}{SEQUENCE_SUFFIX}"
                write_sequence(path, seq)
                paths.append(path)
    return paths
