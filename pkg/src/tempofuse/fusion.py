"""Temporal fusion: three consecutive scans become one 3-channel sample."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import ScanFrame, ScanSequence

GROUP_SIZE = 3


@dataclass(frozen=True)
class FusionConfig:
    group_size: int = GROUP_SIZE
    stride: int = GROUP_SIZE

    def __post_init__(self):
        if self.group_size != GROUP_SIZE or self.stride != GROUP_SIZE:
            raise ValueError("only non-overlapping groups of three are supported")


@dataclass(frozen=True)
class FusedSample:
    channels: np.ndarray  # (3, N1, N2) float32, channel c = frame i + c
    target: np.ndarray  # (N1, N2) int64
    source_indices: tuple[int, int, int]
    sequence_id: str = ""

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != GROUP_SIZE:
            raise ValueError(f"channels must be (3, N1, N2), got {self.channels.shape}")
        if self.target.shape != self.channels.shape[1:]:
            raise ValueError(
                f"target shape {self.target.shape} != channel shape {self.channels.shape[1:]}")


def discard_counts(m: int) -> tuple[int, int]:
    """Frames dropped from the (front, back) of an ``m``-frame sequence.

    One leftover frame is taken from the front; two leftovers are taken one
    from each end, so M=101 keeps frames 1..99.
    """
    rem = m % GROUP_SIZE
    return {0: (0, 0), 1: (1, 0), 2: (1, 1)}[rem]


def select_target(group: Sequence[ScanFrame]) -> np.ndarray:
    if len(group) != GROUP_SIZE:
        raise ValueError(f"expected {GROUP_SIZE} frames, got {len(group)}")
    if len({f.shape for f in group}) != 1:
        raise ValueError("frames in a group must share dimensions")
    return group[1].mask


def fuse_frames(group: Sequence[ScanFrame], sequence_id: str = "") -> FusedSample:
    target = select_target(group)
    channels = np.stack([f.image for f in group]).astype(np.float32)
    channels.setflags(write=False)
    return FusedSample(channels=channels, target=target,
                       source_indices=tuple(f.index for f in group),
                       sequence_id=sequence_id)


def fuse_sequence(sequence: ScanSequence) -> list[FusedSample]:
    m = len(sequence.frames)
    if m < GROUP_SIZE:
        raise ValueError(f"sequence too short to fuse: {sequence.id!r} has {m} frame(s)")
    front, back = discard_counts(m)
    kept = sequence.frames[front:m - back]
    return [fuse_frames(kept[i:i + GROUP_SIZE], sequence.id)
            for i in range(0, len(kept), GROUP_SIZE)]


def fuse_corpus(sequences: Sequence[ScanSequence]) -> list[FusedSample]:
    return [s for seq in sequences for s in fuse_sequence(seq)]
