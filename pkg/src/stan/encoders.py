"""Per-scene tokenizers: a 2D conv encoder for the high-res center frame and
a factorized (2+1)D conv encoder for the 12-frame clip.

Both are small trainable stand-ins for the pretrained backbones the
architecture was designed around; paper-grade features can be injected
instead through a FeatureStore written by an external exporter. The temporal
encoder keeps the (2+1)D structure: a spatial 2D convolution per frame
followed by a 1D temporal convolution across frames, so its output is
order-sensitive. Normalisation is per-channel over the spatial extent, which
keeps outputs independent of batch composition.

FeatureStore file format (little-endian), one file per stream:
  magic "STANFEA1" | u32 dim | u32 record_count |
  records of [u16 id_len][utf-8 "video_id/scene_index"][dim x f32]
"""

import struct

import numpy as np

from .errors import ContractError, DimensionError, NotFoundError
from .tensor import (
    Tensor,
    affine,
    avg_pool2d,
    avg_pool_time,
    channel_norm,
    concat_rows,
    conv2d,
    gelu,
    global_avg_pool,
    reshape,
    tconv1d,
)

FEATURE_MAGIC = b"STANFEA1"
STREAMS = ("spatial", "temporal")


def fan_in_uniform(shape, fan_in, rng):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_spatial_params(params, prefix, channels, d_out, rng):
    """Conv blocks (conv -> norm -> GELU -> pool) + GAP + projection to d_out."""
    cin = 3
    for i, c in enumerate(channels):
        params[f"{prefix}.b{i}.w"] = Tensor(fan_in_uniform((c, cin, 3, 3), cin * 9, rng), True)
        params[f"{prefix}.b{i}.b"] = Tensor(np.zeros(c), True)
        params[f"{prefix}.b{i}.g"] = Tensor(np.ones(c), True)
        params[f"{prefix}.b{i}.beta"] = Tensor(np.zeros(c), True)
        cin = c
    params[f"{prefix}.proj.w"] = Tensor(fan_in_uniform((cin, d_out), cin, rng), True)
    params[f"{prefix}.proj.b"] = Tensor(np.zeros(d_out), True)


def init_temporal_params(params, prefix, channels, d_out, rng):
    """(2+1)D blocks: spatial conv then temporal conv, each with norm + GELU."""
    cin = 3
    for i, c in enumerate(channels):
        params[f"{prefix}.b{i}.sw"] = Tensor(fan_in_uniform((c, cin, 3, 3), cin * 9, rng), True)
        params[f"{prefix}.b{i}.sb"] = Tensor(np.zeros(c), True)
        params[f"{prefix}.b{i}.sg"] = Tensor(np.ones(c), True)
        params[f"{prefix}.b{i}.sbeta"] = Tensor(np.zeros(c), True)
        params[f"{prefix}.b{i}.tw"] = Tensor(fan_in_uniform((c, c, 3), c * 3, rng), True)
        params[f"{prefix}.b{i}.tb"] = Tensor(np.zeros(c), True)
        params[f"{prefix}.b{i}.tg"] = Tensor(np.ones(c), True)
        params[f"{prefix}.b{i}.tbeta"] = Tensor(np.zeros(c), True)
        cin = c
    params[f"{prefix}.proj.w"] = Tensor(fan_in_uniform((cin, d_out), cin, rng), True)
    params[f"{prefix}.proj.b"] = Tensor(np.zeros(d_out), True)


def _check_frame(frame, n_blocks):
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DimensionError(f"expected (H,W,3) frame, got {frame.shape}")
    div = 2 ** n_blocks
    if frame.shape[0] % div or frame.shape[1] % div:
        raise DimensionError(
            f"frame dims {frame.shape[:2]} must be divisible by {div} for {n_blocks} pooling stages"
        )


def encode_spatial(params, prefix, frame, channels):
    """Encode one (H,W,3) float frame in [0,1] to a (d_out,) tensor."""
    frame = np.asarray(frame, dtype=np.float64)
    _check_frame(frame, len(channels))
    x = Tensor(frame.transpose(2, 0, 1)[None])
    for i in range(len(channels)):
        # Edge padding on the first conv keeps flat regions flat, so the
        # following normalisation removes background level and contrast.
        x = conv2d(x, params[f"{prefix}.b{i}.w"], params[f"{prefix}.b{i}.b"],
                   pad_mode="edge" if i == 0 else "zero")
        x = channel_norm(x, params[f"{prefix}.b{i}.g"], params[f"{prefix}.b{i}.beta"])
        x = gelu(x)
        x = avg_pool2d(x)
    v = global_avg_pool(x)
    row = affine(reshape(v, (1, -1)), params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    return reshape(row, (-1,))


def encode_temporal(params, prefix, clip, channels, clip_len=12):
    """Encode a (clip_len,H,W,3) float clip in [0,1] to a (d_out,) tensor.

    Temporal pooling halves T after the first two blocks, so the conv stack's
    receptive field spans the whole clip before global pooling.
    """
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4 or clip.shape[0] != clip_len:
        raise ContractError(f"clip must have exactly {clip_len} frames, got shape {clip.shape}")
    _check_frame(clip[0], len(channels))
    x = Tensor(clip.transpose(0, 3, 1, 2))
    for i in range(len(channels)):
        x = conv2d(x, params[f"{prefix}.b{i}.sw"], params[f"{prefix}.b{i}.sb"],
                   pad_mode="edge" if i == 0 else "zero")
        x = channel_norm(x, params[f"{prefix}.b{i}.sg"], params[f"{prefix}.b{i}.sbeta"])
        x = gelu(x)
        x = avg_pool2d(x)
        x = tconv1d(x, params[f"{prefix}.b{i}.tw"], params[f"{prefix}.b{i}.tb"])
        x = channel_norm(x, params[f"{prefix}.b{i}.tg"], params[f"{prefix}.b{i}.tbeta"])
        x = gelu(x)
        if i < 2 and x.data.shape[0] % 2 == 0:
            x = avg_pool_time(x)
    v = global_avg_pool(x)
    row = affine(reshape(v, (1, -1)), params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    return reshape(row, (-1,))


def encode_scene_rows(params, prefix, arrays, channels, kind, clip_len=12):
    """Stack per-scene encodings into an (n, d_out) tensor."""
    rows = []
    for a in arrays:
        if kind == "spatial":
            vec = encode_spatial(params, prefix, a, channels)
        else:
            vec = encode_temporal(params, prefix, a, channels, clip_len)
        rows.append(reshape(vec, (1, -1)))
    return concat_rows(rows)


# ---------------------------------------------------------------------------
# feature store
# ---------------------------------------------------------------------------


class FeatureStore:
    """Exact-lookup map (video_id, scene_index, stream) -> float32 vector."""

    def __init__(self):
        self._recs = {s: {} for s in STREAMS}  # stream -> {"vid/idx": f32 vec}
        self._dims = {s: None for s in STREAMS}

    @staticmethod
    def _key(video_id, scene_index):
        return f"{video_id}/{int(scene_index)}"

    def dim(self, stream):
        return self._dims[stream]

    def put(self, video_id, scene_index, stream, vec):
        if stream not in STREAMS:
            raise ContractError(f"stream must be one of {STREAMS}, got {stream!r}")
        vec = np.ascontiguousarray(vec, dtype="<f4").reshape(-1)
        if self._dims[stream] is None:
            self._dims[stream] = vec.shape[0]
        elif self._dims[stream] != vec.shape[0]:
            raise ContractError(
                f"{stream} store dim is {self._dims[stream]}, got vector of dim {vec.shape[0]}"
            )
        self._recs[stream][self._key(video_id, scene_index)] = vec

    def get(self, video_id, scene_index, stream):
        try:
            return self._recs[stream][self._key(video_id, scene_index)].copy()
        except KeyError:
            raise NotFoundError(f"no {stream} feature for {self._key(video_id, scene_index)}")

    def scene_count(self, video_id, stream):
        prefix = f"{video_id}/"
        n = sum(1 for k in self._recs[stream] if k.startswith(prefix))
        if n == 0:
            raise NotFoundError(f"no {stream} features for video {video_id!r}")
        for i in range(n):
            if self._key(video_id, i) not in self._recs[stream]:
                raise ContractError(f"{video_id}: {stream} scene indices are not contiguous")
        return n

    @staticmethod
    def stream_path(prefix, stream):
        return f"{prefix}.{stream}.fea"

    def save(self, prefix, streams=STREAMS):
        """Write one STANFEA1 file per stream under prefix.<stream>.fea."""
        paths = []
        for stream in streams:
            recs = self._recs[stream]
            if not recs:
                continue
            path = self.stream_path(prefix, stream)
            with open(path, "wb") as fh:
                fh.write(FEATURE_MAGIC)
                fh.write(struct.pack("<II", self._dims[stream], len(recs)))
                for key, vec in recs.items():
                    ident = key.encode("utf-8")
                    fh.write(struct.pack("<H", len(ident)))
                    fh.write(ident)
                    fh.write(vec.tobytes())
            paths.append(path)
        return paths

    @classmethod
    def load(cls, prefix, streams=STREAMS):
        store = cls()
        found = False
        for stream in streams:
            path = cls.stream_path(prefix, stream)
            try:
                fh = open(path, "rb")
            except FileNotFoundError:
                continue
            found = True
            with fh:
                if fh.read(8) != FEATURE_MAGIC:
                    raise ContractError(f"{path}: bad magic, expected {FEATURE_MAGIC!r}")
                dim, count = struct.unpack("<II", fh.read(8))
                store._dims[stream] = dim
                for _ in range(count):
                    (id_len,) = struct.unpack("<H", fh.read(2))
                    key = fh.read(id_len).decode("utf-8")
                    vec = np.frombuffer(fh.read(4 * dim), dtype="<f4")
                    store._recs[stream][key] = vec.copy()
        if not found:
            raise NotFoundError(f"no feature store files under prefix {prefix!r}")
        return store


def store_features(store, video_id, scene_index, stream, vec):
    store.put(video_id, scene_index, stream, vec)


def load_features(store, video_id, scene_index, stream):
    return store.get(video_id, scene_index, stream)
