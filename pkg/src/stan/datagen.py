"""Procedural labeled videos with known cuts and temporal class semantics.

Each video shows one bright rectangle sliding across a flat background; scene
boundaries are hard background-brightness flips (magnitude ~0.5 normalized)
that the default cut detector catches. The background alternation itself
carries no label. Classes come in two independent groups, so labels are
multi-hot:

  motion classes - the rectangle's movement direction within every scene.
    Directions form twin pairs (right/left, down/up): the reversed class
    renders the *same* frames in reversed per-scene order, so per-frame pixel
    statistics are identical between twins and only frame order separates
    them.
  order classes  - whether the rectangle's size ramps up or down across the
    scenes of the video. Both classes traverse the same size ramp, one
    forward and one backward, so they show the same multiset of scenes and
    only scene ordering separates them.

Supported class counts: 2 (one twin pair), 4 (+ order pair), 6 (two twin
pairs + order pair).
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .scenes import FrameSequence, write_frames_dir, write_raw_stream

DIRECTIONS = ("motion_right", "motion_left", "motion_down", "motion_up")
ORDERS = ("order_grow", "order_shrink")

DARK = 0.15
BRIGHT = 0.65
JITTER = 0.03


@dataclass
class SyntheticSpec:
    n_classes: int = 4
    scenes_per_video: tuple = (4, 6)
    frames_per_scene: tuple = (12, 24)
    resolution: int = 64
    appearance_jitter: bool = True  # per-scene nuisance variation, label-independent

    def __post_init__(self):
        if self.n_classes not in (2, 4, 6):
            raise ContractError(f"supported n_classes: 2, 4, 6; got {self.n_classes}")
        if self.frames_per_scene[0] < 2:
            raise ContractError("scenes need at least 2 frames for motion")
        if self.resolution < 16:
            raise ContractError("resolution must be at least 16")

    @property
    def class_names(self):
        n_dirs = 2 if self.n_classes in (2, 4) else 4
        names = list(DIRECTIONS[:n_dirs])
        if self.n_classes >= 4:
            names += list(ORDERS)
        return names

    @property
    def n_directions(self):
        return 2 if self.n_classes in (2, 4) else 4

    @property
    def has_orders(self):
        return self.n_classes >= 4

    def label_combos(self):
        """All valid class-index sets, one per (direction, order) cell."""
        if self.has_orders:
            return [
                frozenset({d, self.n_directions + o})
                for d in range(self.n_directions)
                for o in range(2)
            ]
        return [frozenset({d}) for d in range(self.n_directions)]


def _draw_scene_count(spec, rng):
    lo, hi = spec.scenes_per_video
    return int(rng.integers(lo, hi + 1))


def generate_video_with_truth(spec: SyntheticSpec, class_set, seed):
    """(FrameSequence, multi-hot labels, ground-truth boundary list).

    Deterministic in (spec, class_set, seed). All random draws are shared by
    every class choice; the direction class only reverses per-scene frame
    order and the order class only flips the size ramp, which is what makes
    twin pairs bitwise multiset-equal under paired seeds.
    """
    class_set = set(class_set)
    if not class_set:
        raise ContractError("class_set must be non-empty")
    names = spec.class_names
    if not class_set <= set(range(len(names))):
        raise ContractError(f"class_set {sorted(class_set)} outside 0..{len(names) - 1}")
    dirs = [c for c in class_set if c < spec.n_directions]
    orders = [c - spec.n_directions for c in class_set if c >= spec.n_directions]
    if len(dirs) != 1 or (spec.has_orders and len(orders) != 1) or (not spec.has_orders and orders):
        raise ContractError("class_set needs exactly one motion class and one order class (when present)")
    direction = dirs[0]
    shrink = bool(orders[0]) if orders else False

    rng = np.random.default_rng(seed)
    res = spec.resolution
    large_side = max(8, res * 13 // 32)
    small_side = max(4, res * 5 // 32)
    margin = 2
    n_scenes = _draw_scene_count(spec, rng)
    # Random background phase: the brightness flips exist only for the cut
    # detector and must not correlate with the shape alternation.
    dark_first = bool(rng.integers(2))
    lo, hi = spec.frames_per_scene

    ramp = np.rint(np.linspace(small_side, large_side, n_scenes)).astype(int)
    if shrink:
        ramp = ramp[::-1]

    frames = []
    bounds = []
    pos = 0
    for i in range(n_scenes):
        length = int(rng.integers(lo, hi + 1))
        # Draws below stay class-independent so twins share pixels.
        cross_u = float(rng.uniform())
        jitter = float(rng.uniform(-JITTER, JITTER)) if spec.appearance_jitter else 0.0
        bg = (DARK if (i % 2 == 0) == dark_first else BRIGHT) + jitter
        bg_byte = int(round(bg * 255))

        rh = rw = int(ramp[i])
        travel_extent = rw if direction < 2 else rh
        cross_extent = rh if direction < 2 else rw
        span0, span1 = margin, res - margin - travel_extent
        cross = margin + int(np.floor(cross_u * (res - 2 * margin - cross_extent) + 0.5))

        scene = np.full((length, res, res, 3), bg_byte, dtype=np.uint8)
        for k in range(length):
            along = span0 + int(np.floor(k * (span1 - span0) / (length - 1) + 0.5))
            if direction < 2:  # horizontal path, random row
                y0, x0 = cross, along
            else:  # vertical path, random column
                y0, x0 = along, cross
            scene[k, y0 : y0 + rh, x0 : x0 + rw, :] = 255
        if direction in (1, 3):  # left/up: the reversed twin
            scene = scene[::-1]
        frames.append(scene)
        bounds.append((pos, pos + length))
        pos += length

    video = FrameSequence(np.concatenate(frames), video_id=f"synthetic-{seed}")
    labels = np.zeros(len(names))
    for c in class_set:
        labels[c] = 1.0
    return video, labels, bounds


def generate_video(spec: SyntheticSpec, class_set, seed):
    video, labels, _ = generate_video_with_truth(spec, class_set, seed)
    return video, labels


def generate_dataset(spec: SyntheticSpec, n_samples, seed, out_dir, fmt="png"):
    """Write frame dirs + manifest + label vocabulary; returns manifest path.

    Class combinations are assigned round-robin, so supports balance within
    one sample. ``fmt`` may be png, ppm, or raw (STANVID1 streams).
    """
    os.makedirs(out_dir, exist_ok=True)
    combos = spec.label_combos()
    names = spec.class_names
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(os.path.join(out_dir, "labels.json"), "w") as fh:
        json.dump(names, fh)
    children = np.random.SeedSequence(seed).spawn(n_samples)
    with open(manifest_path, "w") as fh:
        for i in range(n_samples):
            vid = f"vid{i:05d}"
            video, labels, _ = generate_video_with_truth(spec, combos[i % len(combos)], children[i])
            if fmt == "raw":
                rel = os.path.join("videos", f"{vid}.stanvid")
                write_raw_stream(os.path.join(out_dir, rel), video.frames)
                source = {"raw": rel}
            else:
                rel = os.path.join("videos", vid)
                write_frames_dir(os.path.join(out_dir, rel), video.frames, fmt=fmt)
                source = {"frames_dir": rel}
            entry = {
                "video_id": vid,
                "source": source,
                "labels": [names[c] for c in range(len(names)) if labels[c] > 0],
            }
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return manifest_path
