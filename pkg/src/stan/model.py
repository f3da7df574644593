"""Two-stream encoder architecture with CLS-token fusion.

Per video: scene feature rows for each stream are projected to a common
d_model, a learned CLS row is prepended, and one shared sinusoidal positional
table is added to both streams. Each stream runs through its own stack of
post-norm transformer blocks (MHSA -> add -> LayerNorm -> FFN -> add ->
LayerNorm). Only the CLS rows are classified: both pass through a weight-shared
one-hidden-layer MLP q, are fused as LayerNorm(q_s + lam * q_t) (sum mode),
and a three-layer gated-MLP head produces the logits. The training objective
is mean binary cross entropy on those logits.

Attention is the standard softmax(Q K^T / sqrt(d_k)) V.

Checkpoint format: magic "STANCKP1" | u32-LE header length | JSON header
(config, seed, epoch, ordered parameter-group manifest with shapes, optional
optimizer section) | float64-LE parameter blobs in manifest order, followed by
first- and second-moment blobs in the same order when optimizer state is
included. Saving a loaded checkpoint reproduces its bytes.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import encoders
from .errors import ContractError, DimensionError, SequenceLengthError
from .tensor import (
    Tensor,
    add,
    affine,
    bce_with_logits,
    cols,
    concat_cols,
    concat_rows,
    distill_kl,
    gelu,
    layer_norm,
    matmul,
    mul,
    record,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    take_row,
    transpose,
)

CHECKPOINT_MAGIC = b"STANCKP1"

MODES = ("small", "large")
FUSIONS = ("sum", "gated", "distill")
STREAM_CHOICES = ("both", "spatial", "temporal")


@dataclass
class ModelConfig:
    n_classes: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    lam: float = 0.6
    max_scenes: int = 64
    mode: str = "small"
    fusion: str = "sum"
    ffn_hidden: int = 256
    streams: str = "both"
    use_positional: bool = True
    classifier_gate: str = "glu"  # glu | gelu
    q_hidden: int = 0  # 0 -> d_model
    distill_temperature: float = 2.0
    distill_alpha: float = 0.5
    feature_input: bool = False
    d_spatial: int = 64
    d_temporal: int = 64
    spatial_channels: tuple = (16, 32, 64)
    temporal_channels: tuple = (16, 32, 64)
    clip_len: int = 12

    def __post_init__(self):
        if self.d_model % 2:
            raise ContractError("d_model must be even for the sin/cos table")
        if self.d_model % self.n_heads:
            raise ContractError(
                f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}"
            )
        if self.lam < 0:
            raise ContractError("lam must be non-negative")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fusion not in FUSIONS:
            raise ContractError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.streams not in STREAM_CHOICES:
            raise ContractError(f"streams must be one of {STREAM_CHOICES}")
        if self.classifier_gate not in ("glu", "gelu"):
            raise ContractError("classifier_gate must be glu or gelu")
        self.spatial_channels = tuple(self.spatial_channels)
        self.temporal_channels = tuple(self.temporal_channels)

    def to_dict(self):
        d = asdict(self)
        d["spatial_channels"] = list(self.spatial_channels)
        d["temporal_channels"] = list(self.temporal_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("spatial_channels", "temporal_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def positional_embedding(max_scenes, d_model):
    """Sinusoidal table of shape (max_scenes+1, d_model); row 0 is the CLS slot.

    entry(pos, 2i) = sin(pos / 10000^(2i/d_model)),
    entry(pos, 2i+1) = cos(pos / 10000^(2i/d_model)).
    """
    if d_model % 2:
        raise ContractError("d_model must be even")
    pos = np.arange(max_scenes + 1, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_model)
    table = np.empty((max_scenes + 1, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def attention(q, k, v):
    """Scaled dot-product attention: softmax(q k^T / sqrt(d_k)) v."""
    dk = q.data.shape[1]
    if k.data.shape[1] != dk or k.data.shape[0] != v.data.shape[0]:
        raise DimensionError(
            f"attention shapes incompatible: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}"
        )
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dk))
    return matmul(softmax_rows(scores), v)


def _mhsa(params, prefix, x, n_heads):
    d = x.data.shape[1]
    dh = d // n_heads
    qf = affine(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    kf = affine(x, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    vf = affine(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    heads = [
        attention(cols(qf, h * dh, (h + 1) * dh), cols(kf, h * dh, (h + 1) * dh), cols(vf, h * dh, (h + 1) * dh))
        for h in range(n_heads)
    ]
    return affine(concat_cols(heads), params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def encoder_block(params, prefix, x, n_heads):
    """Post-norm block: LN(x + MHSA(x)) then LN(y + FFN(y))."""
    y = layer_norm(add(x, _mhsa(params, prefix, x, n_heads)), params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    h = gelu(affine(y, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]))
    f = affine(h, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    return layer_norm(add(y, f), params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


def _glu(x):
    m = x.data.shape[1]
    if m % 2:
        raise DimensionError("gated layer needs an even width to split")
    return mul(cols(x, 0, m // 2), sigmoid(cols(x, m // 2, m)))


def fusion_loss(logits, targets):
    """Mean stable BCE between logits and a 0/1 target vector."""
    y = np.asarray(targets, dtype=np.float64)
    if y.size != logits.data.size:
        raise DimensionError(f"targets size {y.size} != logits size {logits.data.size}")
    return bce_with_logits(logits, y)


def distillation_loss(student_logits, teacher_logits, targets, temperature, alpha):
    """(1-a) * BCE(student, y) + a * T^2 * KL(sig(teacher/T) || sig(student/T)).

    teacher_logits is a constant array; no gradient reaches the teacher here.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must be in [0,1]")
    hard = fusion_loss(student_logits, targets)
    soft = distill_kl(student_logits, teacher_logits, temperature)
    return add(scale(hard, 1.0 - alpha), scale(soft, alpha * temperature * temperature))


class Model:
    """Parameter container plus the forward graph builders."""

    def __init__(self, config: ModelConfig, seed=0, params=None):
        self.config = config
        self.seed = seed
        # One table instance serves both streams: positional information is
        # identical across them by construction.
        self.pos_table = positional_embedding(config.max_scenes, config.d_model)
        if params is not None:
            self.params = params
        else:
            self.params = {}
            self._init_params(np.random.default_rng(seed))

    # -- parameter construction ------------------------------------------

    def _affine_pair(self, rng, d_in, d_out):
        w = Tensor(encoders.fan_in_uniform((d_in, d_out), d_in, rng), True)
        b = Tensor(np.zeros(d_out), True)
        return w, b

    def _init_params(self, rng):
        cfg = self.config
        p = self.params
        if not cfg.feature_input:
            encoders.init_spatial_params(p, "enc.s", cfg.spatial_channels, cfg.d_spatial, rng)
            encoders.init_temporal_params(p, "enc.t", cfg.temporal_channels, cfg.d_temporal, rng)
        for stream, d_in in (("s", cfg.d_spatial), ("t", cfg.d_temporal)):
            p[f"{stream}.proj.w"], p[f"{stream}.proj.b"] = self._affine_pair(rng, d_in, cfg.d_model)
            p[f"{stream}.cls"] = Tensor(rng.normal(0.0, 0.02, (1, cfg.d_model)), True)
            for l in range(cfg.n_layers):
                pre = f"{stream}.L{l}"
                for name in ("wq", "wk", "wv", "wo"):
                    p[f"{pre}.{name}"], p[f"{pre}.b{name[1]}"] = self._affine_pair(
                        rng, cfg.d_model, cfg.d_model
                    )
                p[f"{pre}.ln1.g"] = Tensor(np.ones(cfg.d_model), True)
                p[f"{pre}.ln1.b"] = Tensor(np.zeros(cfg.d_model), True)
                p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"] = self._affine_pair(
                    rng, cfg.d_model, cfg.ffn_hidden
                )
                p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"] = self._affine_pair(
                    rng, cfg.ffn_hidden, cfg.d_model
                )
                p[f"{pre}.ln2.g"] = Tensor(np.ones(cfg.d_model), True)
                p[f"{pre}.ln2.b"] = Tensor(np.zeros(cfg.d_model), True)
        qh = cfg.q_hidden or cfg.d_model
        p["fusion.q.w1"], p["fusion.q.b1"] = self._affine_pair(rng, cfg.d_model, qh)
        p["fusion.q.w2"], p["fusion.q.b2"] = self._affine_pair(rng, qh, cfg.d_model)
        p["fusion.norm.g"] = Tensor(np.ones(cfg.d_model), True)
        p["fusion.norm.b"] = Tensor(np.zeros(cfg.d_model), True)
        if cfg.fusion == "gated":
            p["fusion.gate.w"], p["fusion.gate.b"] = self._affine_pair(
                rng, 2 * cfg.d_model, cfg.d_model
            )
        m = cfg.d_model
        wide = 2 * m if cfg.classifier_gate == "glu" else m
        p["head.w1"], p["head.b1"] = self._affine_pair(rng, cfg.d_model, wide)
        p["head.w2"], p["head.b2"] = self._affine_pair(rng, m, wide)
        p["head.w3"], p["head.b3"] = self._affine_pair(rng, m, cfg.n_classes)

    def group_names(self):
        return list(self.params.keys())

    def frozen_names(self):
        """Parameter groups excluded from optimizer updates."""
        cfg = self.config
        frozen = set()
        for name in self.params:
            if cfg.mode == "small" and name.startswith("enc.t."):
                frozen.add(name)
            if cfg.streams == "spatial" and (name.startswith("t.") or name.startswith("enc.t.")):
                frozen.add(name)
            if cfg.streams == "temporal" and (name.startswith("s.") or name.startswith("enc.s.")):
                frozen.add(name)
        return frozen

    def trainable_names(self):
        frozen = self.frozen_names()
        return [n for n in self.params if n not in frozen]

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    # -- forward pieces ----------------------------------------------------

    def scene_feature_rows(self, spatial_inputs, temporal_inputs):
        """Per-scene feature matrices for the active streams.

        With feature_input the inputs are already (n, d) arrays; otherwise
        they are per-scene center frames (n,H,W,3) and clips (n,T,H,W,3).
        """
        cfg = self.config
        sfeats = tfeats = None
        if cfg.streams in ("both", "spatial"):
            if cfg.feature_input:
                sfeats = Tensor(np.asarray(spatial_inputs, dtype=np.float64))
            else:
                sfeats = encoders.encode_scene_rows(
                    self.params, "enc.s", spatial_inputs, cfg.spatial_channels, "spatial"
                )
        if cfg.streams in ("both", "temporal"):
            if cfg.feature_input:
                tfeats = Tensor(np.asarray(temporal_inputs, dtype=np.float64))
            else:
                tfeats = encoders.encode_scene_rows(
                    self.params, "enc.t", temporal_inputs, cfg.temporal_channels, "temporal", cfg.clip_len
                )
        return sfeats, tfeats

    def _sequence(self, stream, feats):
        cfg = self.config
        n = feats.data.shape[0]
        if n < 1:
            raise ContractError("need at least one scene")
        if n > cfg.max_scenes:
            raise SequenceLengthError(f"{n} scenes exceed max_scenes={cfg.max_scenes}")
        # Projection includes the sqrt(d_model) embedding scaling of the
        # underlying transformer design, keeping tokens commensurate with the
        # unit-amplitude positional rows.
        proj = scale(
            affine(feats, self.params[f"{stream}.proj.w"], self.params[f"{stream}.proj.b"]),
            math.sqrt(cfg.d_model),
        )
        seq = concat_rows([self.params[f"{stream}.cls"], proj])
        if cfg.use_positional:
            seq = add(seq, Tensor(self.pos_table[: n + 1]))
        return seq

    def build_sequences(self, spatial_feats, temporal_feats):
        """CLS-prepended, positionally embedded token matrices per stream."""
        z_s = self._sequence("s", spatial_feats) if spatial_feats is not None else None
        z_t = self._sequence("t", temporal_feats) if temporal_feats is not None else None
        return z_s, z_t

    def encode_stream(self, stream, z):
        for l in range(self.config.n_layers):
            z = encoder_block(self.params, f"{stream}.L{l}", z, self.config.n_heads)
        return z

    def q_project(self, x):
        """Shared one-hidden-layer MLP applied to a (1, d_model) CLS row."""
        h = gelu(affine(x, self.params["fusion.q.w1"], self.params["fusion.q.b1"]))
        return affine(h, self.params["fusion.q.w2"], self.params["fusion.q.b2"])

    def classify(self, fused):
        p = self.params
        act = _glu if self.config.classifier_gate == "glu" else gelu
        h1 = act(affine(fused, p["head.w1"], p["head.b1"]))
        h2 = act(affine(h1, p["head.w2"], p["head.b2"]))
        return reshape(affine(h2, p["head.w3"], p["head.b3"]), (-1,))

    def _fuse_norm(self, x):
        return layer_norm(x, self.params["fusion.norm.g"], self.params["fusion.norm.b"])

    def fuse(self, q_s, q_t):
        """Fused (1, d_model) embedding from the two projected CLS rows."""
        cfg = self.config
        if q_s is None:
            return self._fuse_norm(q_t)
        if q_t is None:
            return self._fuse_norm(q_s)
        if cfg.fusion == "gated":
            g = sigmoid(affine(concat_cols([q_s, q_t]), self.params["fusion.gate.w"], self.params["fusion.gate.b"]))
            one_minus = add(scale(g, -1.0), Tensor(np.ones_like(g.data)))
            return add(mul(g, q_s), mul(one_minus, q_t))
        return self._fuse_norm(add(q_s, scale(q_t, cfg.lam)))

    def forward_from_feats(self, spatial_feats, temporal_feats):
        """Logits plus per-stream CLS embeddings from feature-row tensors."""
        cfg = self.config
        z_s, z_t = self.build_sequences(spatial_feats, temporal_feats)
        aux = {}
        q_s = q_t = None
        if z_s is not None:
            cls_s = take_row(self.encode_stream("s", z_s), 0)
            q_s = self.q_project(cls_s)
            aux["cls_s"], aux["q_s"] = cls_s, q_s
        if z_t is not None:
            cls_t = take_row(self.encode_stream("t", z_t), 0)
            q_t = self.q_project(cls_t)
            aux["cls_t"], aux["q_t"] = cls_t, q_t
        if cfg.fusion == "distill" and q_s is not None and q_t is not None:
            student = self.classify(self._fuse_norm(q_s))
            teacher = self.classify(self._fuse_norm(q_t))
            aux["teacher_logits"] = teacher
            return student, aux
        return self.classify(self.fuse(q_s, q_t)), aux

    def forward_video(self, spatial_inputs, temporal_inputs):
        sfeats, tfeats = self.scene_feature_rows(spatial_inputs, temporal_inputs)
        return self.forward_from_feats(sfeats, tfeats)

    def loss_for_sample(self, spatial_inputs, temporal_inputs, targets):
        """Training loss for one video under the configured fusion mode."""
        cfg = self.config
        logits, aux = self.forward_video(spatial_inputs, temporal_inputs)
        if cfg.fusion == "distill" and "teacher_logits" in aux:
            teacher = aux["teacher_logits"]
            teacher_bce = fusion_loss(teacher, targets)
            student_part = distillation_loss(
                logits, teacher.data.copy(), targets, cfg.distill_temperature, cfg.distill_alpha
            )
            return add(student_part, teacher_bce), logits
        return fusion_loss(logits, targets), logits


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, opt_state=None, epoch=0):
    header = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "epoch": epoch,
        "groups": [{"name": n, "shape": list(model.params[n].data.shape)} for n in model.params],
        "optimizer": {"step": opt_state.step} if opt_state is not None else None,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in model.params:
            fh.write(model.params[n].data.astype("<f8").tobytes())
        if opt_state is not None:
            for n in model.params:
                fh.write(opt_state.m[n].astype("<f8").tobytes())
            for n in model.params:
                fh.write(opt_state.v[n].astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, opt_state_or_None, epoch)."""
    from .training import AdamState

    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        params = {}
        for g in header["groups"]:
            shape = tuple(g["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            params[g["name"]] = Tensor(arr.copy(), True)
        model = Model(config, seed=header["seed"], params=params)
        opt_state = None
        if header["optimizer"] is not None:
            opt_state = AdamState.for_params(params)
            opt_state.step = header["optimizer"]["step"]
            for n in params:
                count = params[n].data.size
                opt_state.m[n] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(
                    params[n].data.shape
                ).copy()
            for n in params:
                count = params[n].data.size
                opt_state.v[n] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(
                    params[n].data.shape
                ).copy()
    return model, opt_state, header["epoch"]
