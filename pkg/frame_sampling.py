# =====================================================
# Dynamic frame sampling by frame-wise difference scores
# =====================================================

# Loading modules
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import cv2  # downscaling only
import numpy as np  # array operations
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)


class SamplerError(ValueError):
    pass


class DimensionMismatch(SamplerError):
    def __init__(self, a_shape, b_shape):
        super().__init__(f"frame shapes differ: {tuple(a_shape)} vs {tuple(b_shape)}")


class EmptyStream(SamplerError):
    def __init__(self):
        super().__init__("frame stream is empty")


class SamplerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    theta: float = Field(0.05, ge=0.0, le=1.0)  # content change threshold
    gamma: int = Field(5, ge=1)  # minimum frame gap
    target_n: int = Field(16, ge=1)  # target frame count N
    delta: int = Field(0, ge=0)  # per-pixel luma tolerance
    downscale: int = Field(1, ge=1)  # integer factor applied before differencing


@dataclass(frozen=True)
class Frame:
    index: int
    pixels: np.ndarray  # H x W uint8 luma

    def __post_init__(self):
        if self.index < 0:
            raise SamplerError(f"negative frame index {self.index}")
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise SamplerError("frame pixels must be an H x W uint8 array")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


class SamplingMode(Enum):
    DYNAMIC = "Dynamic"
    DYNAMIC_SUBSAMPLED = "DynamicSubsampled"
    UNIFORM_FALLBACK = "UniformFallback"


@dataclass(frozen=True)
class SampledFrames:
    indices: tuple[int, ...]
    mode: SamplingMode
    diffs: tuple[float, ...]  # diffs[t] = difference between frame t and t-1, diffs[0] = 0


def to_grayscale(rgb: np.ndarray, index: int = 0) -> Frame:
    """BT.601 luma, Y = round(0.299 R + 0.587 G + 0.114 B) with halves rounded up."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise SamplerError(f"expected an H x W x 3 array, got shape {rgb.shape}")
    channels = rgb.astype(np.int64)
    # integer weights keep the rounding exact
    luma = (299 * channels[..., 0] + 587 * channels[..., 1] + 114 * channels[..., 2] + 500) // 1000
    return Frame(index, np.clip(luma, 0, 255).astype(np.uint8))


def frame_diff(a: Frame, b: Frame, delta: int = 0) -> float:
    """Fraction of pixel positions whose luma changes by more than delta."""
    if a.pixels.shape != b.pixels.shape:
        raise DimensionMismatch(a.pixels.shape, b.pixels.shape)
    change = np.abs(a.pixels.astype(np.int16) - b.pixels.astype(np.int16))
    return float(np.count_nonzero(change > delta)) / change.size


def uniform_positions(count: int, n: int) -> list[int]:
    """round(k (count-1) / (n-1)) for k = 0..n-1, halves up, deduplicated."""
    if count <= 0:
        return []
    if n == 1 or count == 1:
        return [0]
    positions = [(2 * k * (count - 1) + (n - 1)) // (2 * (n - 1)) for k in range(n)]
    return sorted(set(positions))


def select_from_diffs(diffs: Sequence[float], cfg: SamplerConfig) -> SampledFrames:
    """
    Frame selection from a precomputed difference chain.

    Inputs:
    diffs: diffs[t] for t >= 1 is the difference between frame t and t-1 (diffs[0] is ignored)
    cfg: sampler configuration

    Frame 0 is the anchor. Frame t is kept when diffs[t] > theta and it lies at
    least gamma frames after the last kept frame.
    """
    length = len(diffs)
    if length == 0:
        raise EmptyStream()

    selected = [0]
    t_last = 0
    for t in range(1, length):
        if diffs[t] > cfg.theta and t - t_last >= cfg.gamma:
            selected.append(t)
            t_last = t

    audit = (0.0, *(float(d) for d in diffs[1:]))
    if len(selected) == 1 and length > 1:  # nothing beyond the anchor qualified
        indices = uniform_positions(length, cfg.target_n)
        return SampledFrames(tuple(indices), SamplingMode.UNIFORM_FALLBACK, audit)
    if len(selected) > cfg.target_n:
        keep = uniform_positions(len(selected), cfg.target_n)
        return SampledFrames(tuple(selected[p] for p in keep), SamplingMode.DYNAMIC_SUBSAMPLED, audit)
    return SampledFrames(tuple(selected), SamplingMode.DYNAMIC, audit)


def _downscaled(frame: Frame, factor: int) -> np.ndarray:
    if factor == 1:
        return frame.pixels
    size = (max(1, frame.width // factor), max(1, frame.height // factor))
    return cv2.resize(frame.pixels, size, interpolation=cv2.INTER_AREA)


def difference_chain(stream: Sequence[Frame], cfg: SamplerConfig) -> list[float]:
    diffs = [0.0]
    previous = None
    for frame in stream:
        current = Frame(frame.index, _downscaled(frame, cfg.downscale))
        if previous is not None:
            if current.pixels.shape != previous.pixels.shape:
                raise DimensionMismatch(previous.pixels.shape, current.pixels.shape)
            diffs.append(frame_diff(current, previous, cfg.delta))
        previous = current
    return diffs


def select_frames(stream: Sequence[Frame], cfg: SamplerConfig) -> SampledFrames:
    """Dynamic frame sampling over an index-ordered stream; returned indices are stream positions."""
    if len(stream) == 0:
        raise EmptyStream()
    diffs = difference_chain(stream, cfg)
    sampled = select_from_diffs(diffs, cfg)
    logger.debug("Selected %d of %d frames (%s)", len(sampled.indices), len(stream), sampled.mode.value)
    return sampled
