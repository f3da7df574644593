"""Adam optimization, batching over variable scene counts, and evaluation.

Samples are preprocessed once (segmentation + per-scene sampling, or feature
store lookups) and cached as float32 arrays; every later epoch re-reads the
cache. Gradients accumulate per sample in a fixed order and are averaged, so
a batch of size B equals the mean of B single-sample gradients exactly.
Parameter groups listed by Model.frozen_names() never receive updates and
their optimizer state stays at zero; with mode=small that freezes the
temporal conv encoder while both transformer streams and the spatial conv
encoder keep training.

All randomness derives from (seed, epoch), so a run restarted from a
checkpoint at epoch k replays epochs k+1.. bitwise identically.

Dataset manifests are JSON lines {"video_id", "source": {...}, "labels":
[...]}; source names one of frames_dir, raw, or features (a store prefix).
Relative paths resolve against the manifest's directory. A sidecar JSON array
(labels.json next to the manifest unless overridden) fixes class order.
Training logs are JSON lines {epoch, step, loss, mAP, P_w, R_w, F1_w}.
"""

import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .encoders import FeatureStore
from .errors import ContractError, StanError
from .metrics import metrics_report
from .model import Model, save_checkpoint
from .scenes import PipelineConfig, load_source, segment_video
from .tensor import record


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    grad_clip: float = 0.0  # 0 disables clipping
    eval_every: int = 1
    subsample: int = 0  # 0 keeps the full manifest

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ContractError("lr must be > 0 and batch_size >= 1")


class AdamState:
    """First/second moment accumulators mirroring the parameter shapes."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0

    @classmethod
    def for_params(cls, params):
        state = cls()
        for name, t in params.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adam_step(params, grads, state, cfg, trainable):
    """Bias-corrected Adam update over trainable groups in a fixed order."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    if cfg.grad_clip > 0:
        sq = 0.0
        for name in trainable:
            g = grads.get(name)
            if g is not None:
                sq += float((g * g).sum())
        norm = np.sqrt(sq)
        if norm > cfg.grad_clip:
            factor = cfg.grad_clip / norm
            grads = {n: (g * factor if g is not None else None) for n, g in grads.items()}
    for name in trainable:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name].data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**t)
        v_hat = state.v[name] / (1 - b2**t)
        params[name].data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    video_id: str
    label: np.ndarray  # multi-hot float64 (n_classes,)
    clips: np.ndarray = None  # (n, T, low, low, 3) float32
    centers: np.ndarray = None  # (n, high, high, 3) float32
    sfeat: np.ndarray = None  # (n, d_s) float32
    tfeat: np.ndarray = None

    @property
    def n_scenes(self):
        for a in (self.clips, self.centers, self.sfeat, self.tfeat):
            if a is not None:
                return a.shape[0]
        return 0


def read_manifest(path):
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def read_vocab(manifest_path, labels_path=None):
    if labels_path is None:
        labels_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "labels.json")
    with open(labels_path) as fh:
        vocab = json.load(fh)
    if not isinstance(vocab, list) or not vocab:
        raise ContractError(f"{labels_path}: expected a non-empty JSON array of class names")
    return vocab


def _resolve(base_dir, path):
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def load_dataset(manifest_path, vocab, pipeline_cfg: PipelineConfig, feature_prefix=None,
                 log=lambda msg: print(msg, file=sys.stderr)):
    """Preprocess every manifest entry into a Sample.

    Unreadable entries are skipped with a warning; more than 10% unreadable
    aborts the run.
    """
    entries = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    index = {name: i for i, name in enumerate(vocab)}
    stores = {}
    samples, skipped = [], []
    for entry in entries:
        try:
            label = np.zeros(len(vocab))
            for name in entry["labels"]:
                label[index[name]] = 1.0
            source = entry["source"]
            if feature_prefix is not None or "features" in source:
                prefix = feature_prefix if feature_prefix is not None else _resolve(
                    base, source["features"]
                )
                if prefix not in stores:
                    stores[prefix] = FeatureStore.load(prefix)
                store = stores[prefix]
                vid = entry["video_id"]
                n = store.scene_count(vid, "spatial")
                sfeat = np.stack([store.get(vid, i, "spatial") for i in range(n)])
                tfeat = np.stack([store.get(vid, i, "temporal") for i in range(n)])
                samples.append(Sample(vid, label, sfeat=sfeat, tfeat=tfeat))
            else:
                src = {k: _resolve(base, v) if k in ("frames_dir", "raw") else v
                       for k, v in source.items()}
                video = load_source(src)
                segs = segment_video(video, pipeline_cfg)
                clips = np.stack([s.clip for s in segs]).astype(np.float32)
                centers = np.stack([s.center_frame for s in segs]).astype(np.float32)
                samples.append(Sample(entry["video_id"], label, clips=clips, centers=centers))
        except (StanError, OSError, KeyError, ValueError) as exc:
            skipped.append((entry.get("video_id", "?"), str(exc)))
            log(f"warning: skipping {entry.get('video_id', '?')}: {exc}")
    if entries and len(skipped) > 0.1 * len(entries):
        raise StanError(
            f"{len(skipped)}/{len(entries)} manifest entries unreadable (>10%); aborting"
        )
    return samples, skipped


def _stream_inputs(sample, perm=None):
    s = sample.sfeat if sample.sfeat is not None else sample.centers
    t = sample.tfeat if sample.tfeat is not None else sample.clips
    if perm is not None:
        s = s[perm] if s is not None else None
        t = t[perm] if t is not None else None
    return s, t


# ---------------------------------------------------------------------------
# steps and loops
# ---------------------------------------------------------------------------


def train_step(model: Model, batch, opt_state, cfg: TrainConfig):
    """Forward/backward each sample, average gradients, one Adam update."""
    if not batch:
        raise ContractError("train_step needs a non-empty batch")
    accum = {}
    total = 0.0
    trainable = model.trainable_names()
    for sample in batch:
        s_in, t_in = _stream_inputs(sample)
        with record() as tape:
            loss, _ = model.loss_for_sample(s_in, t_in, sample.label)
        tape.backward(loss)
        for name, tensor in model.params.items():
            if tensor.grad is not None:
                if name in accum:
                    accum[name] += tensor.grad
                else:
                    accum[name] = tensor.grad.copy()
                tensor.zero_grad()
        total += float(loss.data)
    inv = 1.0 / len(batch)
    grads = {name: g * inv for name, g in accum.items()}
    adam_step(model.params, grads, opt_state, cfg, trainable)
    return total * inv


def evaluate(model: Model, samples, class_names, shuffle_scenes_seed=None):
    """MetricsReport over a sample list; never mutates parameters."""
    rng = None
    if shuffle_scenes_seed is not None:
        rng = np.random.default_rng(shuffle_scenes_seed)
    scores = np.zeros((len(samples), model.config.n_classes))
    labels = np.zeros_like(scores)
    for i, sample in enumerate(samples):
        perm = None
        if rng is not None and sample.n_scenes > 1:
            perm = rng.permutation(sample.n_scenes)
        s_in, t_in = _stream_inputs(sample, perm)
        logits, _ = model.forward_video(s_in, t_in)
        scores[i] = logits.data
        labels[i] = sample.label
    return metrics_report(scores, labels, class_names)


def _epoch_rng(seed, epoch):
    # epoch -1 is the subsample draw; epochs 0.. shuffle batches.
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch) + 1]))


def fit(model: Model, train_samples, val_samples, class_names, cfg: TrainConfig, out_dir,
        opt_state=None, start_epoch=0, log_stream=None, target_map=None):
    """Epoch loop with seeded shuffling, periodic eval, best-mAP checkpointing.

    Returns (history, best_ckpt_path). ``target_map`` optionally stops early
    once the validation weighted mAP reaches the given value.
    """
    if not train_samples:
        raise ContractError("fit needs at least one training sample")
    os.makedirs(out_dir, exist_ok=True)
    if cfg.subsample and cfg.subsample < len(train_samples):
        pick = _epoch_rng(cfg.seed, -1).permutation(len(train_samples))[: cfg.subsample]
        train_samples = [train_samples[i] for i in sorted(pick)]
    if opt_state is None:
        opt_state = AdamState.for_params(model.params)
    eval_samples = val_samples if val_samples else train_samples
    log_path = os.path.join(out_dir, "train_log.jsonl")
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")
    history = []
    best_map = -1.0
    step = opt_state.step
    mode = "a" if start_epoch > 0 else "w"
    with open(log_path, mode) as logf:
        for epoch in range(start_epoch, cfg.epochs):
            rng = _epoch_rng(cfg.seed, epoch)
            order = rng.permutation(len(train_samples))
            losses = []
            for lo in range(0, len(order), cfg.batch_size):
                batch = [train_samples[i] for i in order[lo : lo + cfg.batch_size]]
                losses.append(train_step(model, batch, opt_state, cfg))
                step += 1
            if (epoch + 1) % cfg.eval_every and epoch + 1 != cfg.epochs:
                continue
            report = evaluate(model, eval_samples, class_names)
            rec = {
                "epoch": epoch,
                "step": step,
                "loss": float(np.mean(losses)),
                "mAP": report.weighted_map,
                "P_w": report.p_w,
                "R_w": report.r_w,
                "F1_w": report.f1_w,
            }
            history.append(rec)
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
            logf.flush()
            if log_stream is not None:
                print(json.dumps(rec, sort_keys=True), file=log_stream)
            if report.weighted_map > best_map:
                best_map = report.weighted_map
                save_checkpoint(best_path, model, opt_state, epoch=epoch)
            save_checkpoint(last_path, model, opt_state, epoch=epoch)
            if target_map is not None and report.weighted_map >= target_map:
                break
    return history, best_path
