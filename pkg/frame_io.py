# =====================================================
# Frame ingestion (PGM/PPM directories, raw luma streams, external decoder)
# and emission of selected frames as PNG + sidecar JSON
# =====================================================

# Loading modules
from __future__ import annotations

import json
import logging
import shlex
import shutil
import subprocess
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from frame_sampling import Frame, SampledFrames, SamplerConfig, SamplerError, to_grayscale

logger = logging.getLogger(__name__)

FRAME_SUFFIXES = (".pgm", ".ppm", ".pnm")
SIDECAR_NAME = "frames.json"
# {input} and {output_dir} are substituted; output frames must be PGM files
DEFAULT_DECODER_TEMPLATE = "ffmpeg -nostdin -loglevel error -i {input} -pix_fmt gray {output_dir}/frame_%06d.pgm"


class FrameSourceError(SamplerError):
    pass


def load_frame_directory(directory: Path | str) -> list[Frame]:
    """Reads 8-bit PGM/PPM frames in lexicographic file-name order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameSourceError(f"frame directory not found: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not paths:
        raise FrameSourceError(f"no PGM/PPM frames in {directory}")

    frames = []
    for index, path in enumerate(paths):
        image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if image is None or image.dtype != np.uint8:
            raise FrameSourceError(f"unreadable or non 8-bit frame: {path}")
        if image.ndim == 2:
            frames.append(Frame(index, image))
        else:
            frames.append(to_grayscale(cv2.cvtColor(image, cv2.COLOR_BGR2RGB), index))
    if len({f.pixels.shape for f in frames}) > 1:
        raise FrameSourceError(f"frames in {directory} do not share one size")
    return frames


def read_raw_stream(path: Path | str, width: int, height: int) -> list[Frame]:
    """Concatenated 8-bit grayscale frames of a known size."""
    if width <= 0 or height <= 0:
        raise FrameSourceError("--width and --height must be positive")
    data = np.fromfile(str(path), dtype=np.uint8)
    frame_size = width * height
    if data.size == 0 or data.size % frame_size:
        raise FrameSourceError(f"{path}: {data.size} bytes is not a whole number of {width}x{height} frames")
    stack = data.reshape(-1, height, width)
    return [Frame(i, np.ascontiguousarray(stack[i])) for i in range(stack.shape[0])]


def decode_video(video: Path | str, out_dir: Path | str, command_template: str = DEFAULT_DECODER_TEMPLATE) -> list[Frame]:
    """Delegates decoding to an external process, then reads the frames it wrote into a freshly emptied out_dir."""
    out_dir = Path(out_dir)
    if out_dir.exists():
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True)
    command = shlex.split(command_template.format(input=shlex.quote(str(video)), output_dir=shlex.quote(str(out_dir))))
    logger.info("Decoding %s with %s", video, command[0])
    try:
        subprocess.run(command, check=True, capture_output=True)
    except FileNotFoundError as err:
        raise FrameSourceError(f"decoder not found: {command[0]}") from err
    except subprocess.CalledProcessError as err:
        raise FrameSourceError(f"decoder failed ({err.returncode}): {err.stderr.decode(errors='replace').strip()}") from err
    return load_frame_directory(out_dir)


def load_video_reference(reference: str, work_dir: Path, command_template: str = DEFAULT_DECODER_TEMPLATE) -> list[Frame]:
    """A video reference is either a directory of frames or a container file for the external decoder."""
    path = Path(reference)
    if path.is_dir():
        return load_frame_directory(path)
    if path.is_file():
        return decode_video(path, work_dir, command_template)
    raise FrameSourceError(f"video reference not found locally: {reference}")


def encode_png(frame: Frame) -> bytes:
    ok, buffer = cv2.imencode(".png", frame.pixels)
    if not ok:
        raise FrameSourceError(f"PNG encoding failed for frame {frame.index}")
    return buffer.tobytes()


def write_selection(stream: Sequence[Frame], sampled: SampledFrames, out_dir: Path | str,
                    cfg: SamplerConfig) -> Path:
    """Writes frame_<index>.png for each selected frame and the sidecar JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in out_dir.glob("frame_*.png"):
        stale.unlink()
    names = []
    for position in sampled.indices:
        frame = stream[position]
        name = f"frame_{frame.index:06d}.png"
        (out_dir / name).write_bytes(encode_png(frame))
        names.append(name)

    sidecar = {
        "indices": list(sampled.indices),
        "mode": sampled.mode.value,
        "frame_count": len(stream),
        "files": names,
        "diffs": [round(d, 6) for d in sampled.diffs],
        "config": cfg.model_dump(),
    }
    path = out_dir / SIDECAR_NAME
    path.write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return path


def read_selection(directory: Path | str) -> tuple[dict, list[bytes]]:
    """Loads a prior selection (sidecar + PNG bytes) without resampling."""
    directory = Path(directory)
    sidecar_path = directory / SIDECAR_NAME
    if not sidecar_path.is_file():
        raise FrameSourceError(f"no {SIDECAR_NAME} in {directory}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    images = [(directory / name).read_bytes() for name in sidecar["files"]]
    return sidecar, images
