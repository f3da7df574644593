"""Scene segmentation and per-scene sampling.

A video becomes a list of scenes by watching the running average of frame
intensity: a frame whose intensity deviates from the running mean by more
than a threshold opens a new scene, provided the current scene is long
enough. Each detected scene is then summarised by 12 uniformly sampled
low-resolution frames (the clip) plus one high-resolution center frame.

Frames enter either as a directory of numbered images (``%06d.png`` or
``.ppm``, lexicographic order = temporal order) or as a raw planar stream:
magic ``STANVID1``, u32-LE height, u32-LE width, u32-LE n_frames, then
``n_frames`` interleaved row-major RGB frames, one byte per channel.
"""

import os
import re
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .kernels import resize_bilinear

RAW_MAGIC = b"STANVID1"

_FRAME_FILE = re.compile(r"^\d{6}\.(png|ppm)$")


@dataclass
class FrameSequence:
    """A decoded video: (N,H,W,3) uint8 frames in temporal order."""

    frames: np.ndarray
    frame_rate: float = 24.0
    video_id: str = ""

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[3] != 3 or f.shape[0] < 1:
            raise DimensionError(f"frames must be (N,H,W,3) with N>=1, got {f.shape}")

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class CutDetectorConfig:
    window: int = 12
    threshold: float = 0.08
    min_scene_len: int = 12

    def __post_init__(self):
        if self.window < 1 or self.threshold <= 0:
            raise ContractError("window must be >= 1 and threshold > 0")


@dataclass
class PipelineConfig:
    """Detector parameters plus per-scene sampling geometry."""

    detector: CutDetectorConfig = field(default_factory=CutDetectorConfig)
    frames_per_scene: int = 12
    low_res: int = 64
    high_res: int = 128


@dataclass
class SceneSegment:
    """One detected scene: [start_idx, end_idx) plus sampled pixels.

    clip is (frames_per_scene, low, low, 3) float64 in [0,1]; center_frame is
    (high, high, 3) float64 in [0,1].
    """

    start_idx: int
    end_idx: int
    clip: np.ndarray
    center_frame: np.ndarray
    scene_index: int

    def __post_init__(self):
        if self.end_idx <= self.start_idx:
            raise ContractError(f"empty scene [{self.start_idx}, {self.end_idx})")


def mean_intensity(frame):
    """Mean over all pixels and channels, in [0,1].

    uint8 frames are normalised by 255; float frames are assumed to be in
    [0,1] already.
    """
    a = np.asarray(frame)
    if a.dtype == np.uint8:
        return float(a.mean()) / 255.0
    return float(a.mean())


def _normalized(frame):
    return frame.astype(np.float64) / 255.0


def detect_scenes(video: FrameSequence, cfg: CutDetectorConfig):
    """Partition [0, n_frames) at running-average intensity jumps.

    A cut lands on frame i when |intensity(i) - mean(recent window)| exceeds
    the threshold and the current scene already spans min_scene_len frames;
    the window resets at every cut. Intensity is measured on the frame after
    downscaling, which only needs its global brightness.
    """
    n = video.n_frames
    low = min(64, video.frames.shape[1], video.frames.shape[2])
    intens = np.empty(n)
    for i in range(n):
        intens[i] = mean_intensity(resize_bilinear(_normalized(video.frames[i]), low, low))
    bounds = []
    start = 0
    window = deque([intens[0]], maxlen=cfg.window)
    for i in range(1, n):
        running = sum(window) / len(window)
        if i - start >= cfg.min_scene_len and abs(intens[i] - running) > cfg.threshold:
            bounds.append((start, i))
            start = i
            window.clear()
        window.append(intens[i])
    bounds.append((start, n))
    return bounds


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def sample_scene(video: FrameSequence, start: int, end: int, cfg: PipelineConfig, scene_index=0):
    """Uniformly sample the clip and extract the resized center frame.

    Clip offsets are round-half-up(j*(L-1)/(F-1)) for j=0..F-1 over scene
    length L; frames repeat when the scene is shorter than the clip.
    """
    if end <= start:
        raise ContractError(f"empty scene [{start}, {end})")
    length = end - start
    f = cfg.frames_per_scene
    idx = [start + _round_half_up(j * (length - 1) / (f - 1)) for j in range(f)]
    clip = np.stack(
        [resize_bilinear(_normalized(video.frames[i]), cfg.low_res, cfg.low_res) for i in idx]
    )
    center = resize_bilinear(
        _normalized(video.frames[start + length // 2]), cfg.high_res, cfg.high_res
    )
    return SceneSegment(start, end, clip, center, scene_index)


def sample_indices(start, end, frames_per_scene):
    """Clip frame indices only (shared with external conformance checks)."""
    length = end - start
    return [
        start + _round_half_up(j * (length - 1) / (frames_per_scene - 1))
        for j in range(frames_per_scene)
    ]


def segment_video(video: FrameSequence, cfg: PipelineConfig):
    """detect_scenes + sample_scene, scene_index in temporal order from 0."""
    segments = []
    for k, (s, e) in enumerate(detect_scenes(video, cfg.detector)):
        segments.append(sample_scene(video, s, e, cfg, scene_index=k))
    return segments


# ---------------------------------------------------------------------------
# frame ingestion
# ---------------------------------------------------------------------------


def _read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ContractError(f"{path}: not a binary PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ContractError(f"{path}: unsupported PPM maxval {maxval}")
    return np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos).reshape(h, w, 3)


def _write_ppm(path, frame):
    h, w = frame.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


def _read_image(path):
    if path.endswith(".ppm"):
        return _read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_frames_dir(path, frame_rate=24.0):
    """Read <dir>/%06d.png (or .ppm); lexicographic order is temporal order."""
    names = sorted(n for n in os.listdir(path) if _FRAME_FILE.match(n))
    if not names:
        raise ContractError(f"{path}: no frame files matching %06d.png/.ppm")
    frames = np.stack([_read_image(os.path.join(path, n)) for n in names])
    return FrameSequence(frames, frame_rate, video_id=os.path.basename(os.path.normpath(path)))


def write_frames_dir(path, frames, fmt="png"):
    os.makedirs(path, exist_ok=True)
    for i, frame in enumerate(frames):
        fp = os.path.join(path, f"{i:06d}.{fmt}")
        if fmt == "ppm":
            _write_ppm(fp, frame)
        else:
            from PIL import Image

            Image.fromarray(np.ascontiguousarray(frame, dtype=np.uint8), "RGB").save(fp)


def load_raw_stream(path, frame_rate=24.0):
    """Read a STANVID1 raw RGB stream."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != RAW_MAGIC:
            raise ContractError(f"{path}: bad magic {magic!r}, expected {RAW_MAGIC!r}")
        h, w, n = struct.unpack("<III", fh.read(12))
        buf = fh.read(n * h * w * 3)
    if len(buf) != n * h * w * 3:
        raise ContractError(f"{path}: truncated stream")
    frames = np.frombuffer(buf, dtype=np.uint8).reshape(n, h, w, 3)
    vid = os.path.splitext(os.path.basename(path))[0]
    return FrameSequence(frames.copy(), frame_rate, video_id=vid)


def write_raw_stream(path, frames):
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    n, h, w, _ = frames.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<III", h, w, n))
        fh.write(frames.tobytes())


def load_source(source, frame_rate=24.0):
    """Resolve a manifest ``source`` dict to a FrameSequence."""
    if "frames_dir" in source:
        return load_frames_dir(source["frames_dir"], frame_rate)
    if "raw" in source:
        return load_raw_stream(source["raw"], frame_rate)
    raise ContractError(f"source must name frames_dir or raw, got {sorted(source)}")
