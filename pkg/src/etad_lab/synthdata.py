"""Seeded synthetic untrimmed videos, feature resizing and sliding windows.

Each frame carries a D-dim latent vector. Action snippets add a class pattern
whose sign alternates from frame to frame; background snippets add a random
distractor held constant across frames, of the same norm. The observed frame
is an elementwise invertible cubic of a fixed random rotation of the latent,
so telling action from background needs temporal differencing after undoing
the mixing, which a random encoder does poorly and a trained one can learn.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import seeded_rng

CUBIC = 0.25
HEADER = struct.Struct("<qqq")


@dataclass
class DatasetConfig:
    n_train: int = 64
    n_val: int = 32
    length: int = 128
    frames: int = 4
    frame_dim: int = 8
    n_classes: int = 3
    min_actions: int = 1
    max_actions: int = 2
    durations: tuple = ((12, 32), (32, 64), (64, 112))
    duration_weights: tuple = (0.35, 0.35, 0.3)
    min_gap: int = 2
    snr: float = 2.0
    pattern_scale: float = 1.0
    seed: int = 0

    def validate(self):
        errors = []
        for name in ("n_train", "n_val", "length", "frames", "frame_dim", "n_classes"):
            if getattr(self, name) < 1:
                errors.append(f"data.{name} must be positive")
        if self.length < 2:
            errors.append("data.length must be >= 2")
        if self.frames % 2:
            errors.append("data.frames must be even (the class pattern alternates per frame)")
        if not 0 <= self.min_actions <= self.max_actions:
            errors.append("data.min_actions <= max_actions required")
        if len(self.durations) != len(self.duration_weights) or not self.durations:
            errors.append("data.durations and duration_weights must align")
        elif any(lo < 1 or hi < lo for lo, hi in self.durations):
            errors.append("data.durations must be ranges 1 <= lo <= hi")
        if any(w < 0 for w in self.duration_weights) or sum(self.duration_weights) <= 0:
            errors.append("data.duration_weights must be non-negative with a positive sum")
        if self.min_gap < 0:
            errors.append("data.min_gap must be >= 0")
        if not self.snr > 0:
            errors.append("data.snr must be > 0 (use inf for noiseless)")
        if not errors:
            shortest = min(lo for lo, _ in self.durations)
            need = self.min_actions * (shortest + self.min_gap) + self.min_gap
            if need > self.length - 1:
                errors.append(f"data: {self.min_actions} actions of length >= {shortest} cannot be "
                              f"packed into {self.length} snippets with gap {self.min_gap}")
        return errors

    def to_dict(self):
        d = asdict(self)
        d["durations"] = [list(r) for r in self.durations]
        d["duration_weights"] = list(self.duration_weights)
        if math.isinf(self.snr):
            d["snr"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "durations" in d:
            d["durations"] = tuple(tuple(int(v) for v in r) for r in d["durations"])
        if "duration_weights" in d:
            d["duration_weights"] = tuple(float(w) for w in d["duration_weights"])
        if "snr" in d:
            d["snr"] = float(d["snr"])
        return cls(**d)


@dataclass
class VideoSample:
    video_id: str
    snippets: np.ndarray
    annotations: list = field(default_factory=list)

    @property
    def length(self):
        return self.snippets.shape[0]

    @property
    def segments(self):
        return np.array([[s, e] for s, e, _ in self.annotations], dtype=np.float64).reshape(-1, 2)

    def validate(self):
        errors = []
        prev_end = -np.inf
        for s, e, c in sorted(self.annotations):
            if not 0 <= s < e <= self.length:
                errors.append(f"{self.video_id}: segment ({s}, {e}) outside [0, {self.length}]")
            if s < prev_end:
                errors.append(f"{self.video_id}: segments overlap at {s}")
            prev_end = e
        return errors


@dataclass
class World:
    """Fixed generative pieces shared by every video of a dataset."""

    mixing: np.ndarray
    patterns: np.ndarray


def make_world(config):
    rng = seeded_rng(config.seed, "world")
    q, r = np.linalg.qr(rng.normal(size=(config.frame_dim, config.frame_dim)))
    mixing = q * np.sign(np.diag(r))
    pat = rng.normal(size=(config.n_classes, config.frame_dim))
    pat *= config.pattern_scale * math.sqrt(config.frame_dim) / np.linalg.norm(pat, axis=1, keepdims=True)
    return World(mixing, pat)


def observe(latent, world):
    y = latent @ world.mixing.T
    return y + CUBIC * y ** 3


def invert_observation(x, world):
    """Exact inverse of :func:`observe` (real root of the monotone cubic)."""
    # y^3 + (1/CUBIC) y - x/CUBIC = 0
    p = 1.0 / CUBIC
    q = -np.asarray(x, dtype=np.float64) / CUBIC
    disc = np.sqrt(q * q / 4.0 + p ** 3 / 27.0)
    y = np.cbrt(-q / 2.0 + disc) + np.cbrt(-q / 2.0 - disc)
    return y @ world.mixing


def recover_class(snippet, world, tol=1e-6):
    """Class index of a noiseless snippet, or -1 for background."""
    latent = invert_observation(snippet, world)
    signs = (-1.0) ** np.arange(latent.shape[0])
    alternating = (signs[:, None] * latent).mean(axis=0)
    if np.linalg.norm(alternating) < tol * math.sqrt(latent.shape[1]):
        return -1
    return int(np.argmax(world.patterns @ alternating))


def _draw_segments(rng, config):
    n = config.length
    weights = np.asarray(config.duration_weights, dtype=np.float64)
    weights = weights / weights.sum()
    for _ in range(100):
        m = int(rng.integers(config.min_actions, config.max_actions + 1))
        kinds = rng.choice(len(config.durations), size=m, p=weights)
        lens = [int(rng.integers(config.durations[k][0], config.durations[k][1] + 1)) for k in kinds]
        # usable coordinates are [0, n-1]; gaps before, between and after
        slack = (n - 1) - sum(lens) - config.min_gap * (m + 1)
        if slack < 0:
            continue
        cuts = np.sort(rng.integers(0, slack + 1, size=m))
        segs = []
        pos = config.min_gap
        prev = 0
        for length, cut in zip(lens, cuts):
            pos += int(cut - prev)
            prev = cut
            segs.append((pos, pos + length))
            pos += length + config.min_gap
        classes = rng.integers(0, config.n_classes, size=m)
        return [(float(s), float(e), int(c)) for (s, e), c in zip(segs, classes)]
    raise ValueError(f"could not pack {config.min_actions}-{config.max_actions} actions with durations "
                     f"{config.durations} into {n} snippets after 100 draws")


def generate_video(config, world, video_id, rng):
    n, f, d = config.length, config.frames, config.frame_dim
    annotations = _draw_segments(rng, config)
    label = np.full(n, -1)
    for s, e, c in annotations:
        label[int(s):int(e) + 1] = c
    signs = (-1.0) ** np.arange(f)
    scale = config.pattern_scale * math.sqrt(d)
    distract = rng.normal(size=(n, d))
    distract *= scale / np.linalg.norm(distract, axis=1, keepdims=True)
    latent = np.repeat(distract[:, None, :], f, axis=1)
    act = label >= 0
    latent[act] = signs[None, :, None] * world.patterns[label[act]][:, None, :]
    noise_std = 0.0 if math.isinf(config.snr) else 1.0 / config.snr
    latent = latent + noise_std * rng.normal(size=latent.shape)
    return VideoSample(video_id, observe(latent, world), annotations)


def generate_dataset(config):
    """Train and validation splits; every video has its own derived seed stream."""
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    world = make_world(config)
    splits = {}
    for split, count in (("train", config.n_train), ("val", config.n_val)):
        splits[split] = [generate_video(config, world, f"{split}_{i:04d}", seeded_rng(config.seed, "video", split, i))
                         for i in range(count)]
    return splits


# ---------------------------------------------------------------------------
# resizing and windows


def rescale_sequence(features, target=128):
    """Linear interpolation along time to ``target`` rows; first and last rows preserved."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError(f"rescale needs at least 2 rows, got {x.shape[0]}")
    if target < 2:
        raise ValueError(f"rescale target must be >= 2, got {target}")
    if x.shape[0] == target:
        return x.copy()
    pos = np.linspace(0.0, x.shape[0] - 1, target)
    lo = np.minimum(np.floor(pos).astype(int), x.shape[0] - 2)
    frac = (pos - lo)[:, None] if x.ndim == 2 else (pos - lo).reshape(-1, *([1] * (x.ndim - 1)))
    return (1.0 - frac) * x[lo] + frac * x[lo + 1]


def window_offsets(length, window=128, stride=64):
    offsets = list(range(0, max(length - window, 0) + 1, stride))
    if offsets[-1] + window < length:
        offsets.append(offsets[-1] + stride)
    return offsets


def sliding_windows(video, window=128, stride=64, keep=0.5):
    """Windows at 0, stride, ...; the final partial window is zero-padded.

    An annotation is kept in a window when its clipped length is at least
    ``keep`` of its original length.
    """
    out = []
    n = video.length
    for off in window_offsets(n, window, stride):
        chunk = video.snippets[off:off + window]
        if len(chunk) < window:
            pad = np.zeros((window - len(chunk),) + chunk.shape[1:])
            chunk = np.concatenate([chunk, pad], axis=0)
        anns = []
        for s, e, c in video.annotations:
            cs, ce = max(s, off), min(e, off + window)
            if ce > cs and (ce - cs) >= keep * (e - s):
                anns.append((cs - off, ce - off, c))
        out.append(VideoSample(f"{video.video_id}@{off}", chunk, anns))
    return out


# ---------------------------------------------------------------------------
# persistence


def _write_video(path, video):
    n, f, d = video.snippets.shape
    payload = HEADER.pack(n, f, d) + np.ascontiguousarray(video.snippets, dtype="<f8").tobytes()
    path.write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def _read_video(path, video_id, annotations):
    raw = path.read_bytes()
    n, f, d = HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f8", offset=HEADER.size)
    if data.size != n * f * d:
        raise ValueError(f"{path}: header says {n}x{f}x{d} but holds {data.size} values")
    return VideoSample(video_id, data.reshape(n, f, d).astype(np.float64),
                       [(float(s), float(e), int(c)) for s, e, c in annotations])


def save_dataset(splits, config, directory, force=False):
    directory = Path(directory)
    index_path = directory / "index.json"
    if index_path.exists() and not force:
        raise FileExistsError(f"{index_path} exists; pass force to overwrite")
    (directory / "videos").mkdir(parents=True, exist_ok=True)
    index = {"config": config.to_dict(), "splits": {}}
    for split in sorted(splits):
        entries = []
        for video in splits[split]:
            rel = f"videos/{video.video_id}.bin"
            digest = _write_video(directory / rel, video)
            entries.append({"video_id": video.video_id, "file": rel, "sha256": digest,
                            "annotations": [[s, e, c] for s, e, c in video.annotations]})
        index["splits"][split] = entries
    text = json.dumps(index, indent=1, sort_keys=True)
    index_path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_dataset(directory):
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no dataset index at {index_path}")
    index = json.loads(index_path.read_text())
    splits = {split: [_read_video(directory / e["file"], e["video_id"], e["annotations"]) for e in entries]
              for split, entries in index["splits"].items()}
    return splits, DatasetConfig.from_dict(index["config"])
