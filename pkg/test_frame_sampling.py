#!/usr/bin/env python3
"""
Tests for frame_sampling.py and frame_io.py.
-select_from_diffs is checked against a brute-force simulator of the keep rule
 (anchor frame 0, Delta > theta, gap >= gamma, uniform fallback) on 1,000 random chains
-frame_diff identity / symmetry / saturation / monotonicity in delta
-ingestion of PGM/PPM directories and raw streams, PNG + sidecar emission
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import json
import time
from fractions import Fraction
from math import floor

import cv2
import numpy as np
import pytest

from frame_io import (FrameSourceError, decode_video, load_frame_directory, read_raw_stream, read_selection,
                      write_selection)
from frame_sampling import (DimensionMismatch, EmptyStream, Frame, SamplerConfig, SamplingMode, frame_diff,
                            select_frames, select_from_diffs, to_grayscale, uniform_positions)


def brute_force_selection(diffs, theta, gamma, n):
    kept = [0]
    for t in range(1, len(diffs)):
        if diffs[t] > theta and t - kept[-1] >= gamma:
            kept.append(t)

    def spread(count):
        if n == 1 or count == 1:
            return [0]
        return sorted({floor(Fraction(k * (count - 1), n - 1) + Fraction(1, 2)) for k in range(n)})

    if len(kept) == 1 and len(diffs) > 1:
        return spread(len(diffs)), "UniformFallback"
    if len(kept) > n:
        return [kept[p] for p in spread(len(kept))], "DynamicSubsampled"
    return kept, "Dynamic"


def test_oracle_equivalence_on_random_chains():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for _ in range(1000):
        length = int(rng.integers(2, 201))
        cfg = SamplerConfig(theta=float(rng.choice([0.0, 0.05, 0.2, 0.5, 0.9])), gamma=int(rng.integers(1, 12)),
                            target_n=int(rng.integers(1, 24)))
        diffs = [0.0, *rng.choice([0.0, 0.04, 0.05, 0.06, 0.3, 0.7, 1.0], size=length - 1).tolist()]
        sampled = select_from_diffs(diffs, cfg)
        indices, mode = brute_force_selection(diffs, cfg.theta, cfg.gamma, cfg.target_n)
        assert list(sampled.indices) == indices
        assert sampled.mode.value == mode
    assert time.perf_counter() - start < 5.0


def test_selection_properties():
    rng = np.random.default_rng(5)
    for _ in range(300):
        length = int(rng.integers(1, 120))
        cfg = SamplerConfig(theta=0.1, gamma=int(rng.integers(1, 8)), target_n=int(rng.integers(1, 20)))
        sampled = select_from_diffs([0.0, *rng.random(length - 1).tolist()], cfg)
        assert sampled.indices[0] == 0
        assert list(sampled.indices) == sorted(set(sampled.indices))
        assert len(sampled.indices) <= max(cfg.target_n, 1)
        if sampled.mode is SamplingMode.DYNAMIC:
            assert all(b - a >= cfg.gamma for a, b in zip(sampled.indices, sampled.indices[1:]))


def test_threshold_is_strict_and_fallback_on_static_clip():
    cfg = SamplerConfig(theta=0.5, gamma=1, target_n=4)
    sampled = select_from_diffs([0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5], cfg)
    assert sampled.mode is SamplingMode.UNIFORM_FALLBACK
    assert sampled.indices == (0, 2, 4, 6)


def test_short_streams():
    cfg = SamplerConfig(target_n=16)
    static = [Frame(i, np.zeros((4, 4), np.uint8)) for i in range(3)]
    sampled = select_frames(static, cfg)
    assert sampled.indices == (0, 1, 2) and sampled.mode is SamplingMode.UNIFORM_FALLBACK
    single = select_frames(static[:1], cfg)
    assert single.indices == (0,) and single.mode is SamplingMode.DYNAMIC
    with pytest.raises(EmptyStream):
        select_frames([], cfg)


def test_uniform_positions_round_half_up():
    assert uniform_positions(10, 4) == [0, 3, 6, 9]
    assert uniform_positions(4, 3) == [0, 2, 3]  # 1.5 rounds up
    assert uniform_positions(3, 16) == [0, 1, 2]
    assert uniform_positions(7, 1) == [0]


def test_grayscale_examples():
    rgb = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 255], [0, 0, 0]]], dtype=np.uint8)
    assert to_grayscale(rgb).pixels.tolist() == [[76, 150, 29, 255, 0]]


def test_frame_diff_properties():
    rng = np.random.default_rng(9)
    for _ in range(500):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        a = Frame(0, rng.integers(0, 256, size=shape, dtype=np.uint8))
        b = Frame(1, rng.integers(0, 256, size=shape, dtype=np.uint8))
        assert frame_diff(a, a) == 0.0
        assert frame_diff(a, b) == frame_diff(b, a)
        values = [frame_diff(a, b, d) for d in (0, 1, 10, 64, 255)]
        assert all(x >= y for x, y in zip(values, values[1:]))
        assert values[-1] == 0.0
    black = Frame(0, np.zeros((3, 5), np.uint8))
    white = Frame(1, np.full((3, 5), 255, np.uint8))
    assert frame_diff(black, white) == 1.0
    with pytest.raises(DimensionMismatch):
        frame_diff(black, Frame(2, np.zeros((5, 3), np.uint8)))


def moving_square(count=30, step=3, shape=(32, 32)):
    frames = []
    for t in range(count):
        pixels = np.zeros(shape, np.uint8)
        x = (t * step) % (shape[1] - 8)
        pixels[8:16, x:x + 8] = 200
        frames.append(Frame(t, pixels))
    return frames


def test_select_frames_on_motion_and_downscale():
    stream = moving_square()
    sampled = select_frames(stream, SamplerConfig(theta=0.01, gamma=5, target_n=16))
    assert sampled.mode is SamplingMode.DYNAMIC
    assert sampled.indices == (0, 5, 10, 15, 20, 25)
    coarse = select_frames(stream, SamplerConfig(theta=0.01, gamma=5, downscale=2))
    assert coarse.indices[0] == 0
    with pytest.raises(DimensionMismatch):
        select_frames([stream[0], Frame(1, np.zeros((8, 8), np.uint8))], SamplerConfig())


def test_frame_directory_and_selection_files(tmp_path):
    source = tmp_path / "frames"
    source.mkdir()
    for frame in moving_square(count=12):
        cv2.imwrite(str(source / f"f{frame.index:03d}.pgm"), frame.pixels)
    colour = np.zeros((32, 32, 3), np.uint8)
    colour[..., 2] = 255  # BGR red
    cv2.imwrite(str(source / "f999.ppm"), colour)

    stream = load_frame_directory(source)
    assert len(stream) == 13
    assert int(stream[-1].pixels[0, 0]) == 76
    cfg = SamplerConfig(theta=0.01, gamma=3, target_n=4)
    sampled = select_frames(stream, cfg)

    first = write_selection(stream, sampled, tmp_path / "a", cfg).read_bytes()
    second = write_selection(stream, sampled, tmp_path / "b", cfg).read_bytes()
    assert first == second
    sidecar, images = read_selection(tmp_path / "a")
    assert sidecar["indices"] == list(sampled.indices)
    assert sidecar["mode"] == sampled.mode.value
    assert len(images) == len(sampled.indices)
    decoded = cv2.imdecode(np.frombuffer(images[0], np.uint8), cv2.IMREAD_UNCHANGED)
    assert np.array_equal(decoded, stream[0].pixels)
    assert json.loads(first)["config"]["gamma"] == 3


def test_raw_stream(tmp_path):
    frames = moving_square(count=5, shape=(6, 10))
    path = tmp_path / "clip.raw"
    path.write_bytes(b"".join(f.pixels.tobytes() for f in frames))
    stream = read_raw_stream(path, width=10, height=6)
    assert len(stream) == 5
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(stream, frames))
    with pytest.raises(FrameSourceError):
        read_raw_stream(path, width=7, height=6)


def pgm_bytes(pixels):
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def test_reused_output_directories_hold_only_new_frames(tmp_path):
    clip = tmp_path / "clip.mp4"
    clip.write_bytes(pgm_bytes(np.full((8, 8), 200, np.uint8)))
    out = tmp_path / "decoded"
    out.mkdir()
    cv2.imwrite(str(out / "frame_000000.pgm"), np.zeros((8, 8), np.uint8))
    stream = decode_video(clip, out, "cp {input} {output_dir}/frame_000001.pgm")
    assert len(stream) == 1 and int(stream[0].pixels[0, 0]) == 200
    assert sorted(p.name for p in out.iterdir()) == ["frame_000001.pgm"]

    frames = moving_square(count=12)
    cfg = SamplerConfig(theta=0.01, gamma=3, target_n=4)
    write_selection(frames, select_frames(frames, cfg), tmp_path / "sel", cfg)
    assert len(list((tmp_path / "sel").glob("frame_*.png"))) > 1
    single = SamplerConfig(theta=0.01, gamma=3, target_n=1)
    write_selection(frames, select_frames(frames, single), tmp_path / "sel", single)
    assert [p.name for p in (tmp_path / "sel").glob("frame_*.png")] == ["frame_000000.png"]


def test_source_errors(tmp_path):
    with pytest.raises(FrameSourceError):
        load_frame_directory(tmp_path)
    clip = tmp_path / "clip.mp4"
    clip.write_bytes(b"\x00")
    with pytest.raises(FrameSourceError):
        decode_video(clip, tmp_path / "out", "no-such-decoder-binary {input} {output_dir}")


if __name__ == "__main__":
    print("🧪 Testing dynamic frame sampling")
    print("=" * 60)
    code = pytest.main([__file__, "-q"])
    print("\n🎉 All tests passed!" if code == 0 else "\n❌ Some tests failed. Please check the output above.")
    sys.exit(code)
