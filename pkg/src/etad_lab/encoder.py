"""Toy snippet encoder: two temporal convolutions, frame pooling, two affine layers.

Nothing in the stack mixes samples along the batch axis, and every forward
matmul uses the row-wise kernel, so encoding a batch in any partition of
micro-batches gives bitwise-identical features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import linear, seeded_rng, uniform_param, zeros_param

LAYERS = ("conv1", "conv2", "fc1", "fc2")


@dataclass
class EncoderConfig:
    frame_dim: int = 8
    frames: int = 4
    conv_width: int = 32
    hidden: int = 64
    out_dim: int = 64
    frozen_layers: tuple = ()

    def validate(self):
        errors = []
        for name in ("frame_dim", "frames", "conv_width", "hidden", "out_dim"):
            if getattr(self, name) < 1:
                errors.append(f"encoder.{name} must be positive")
        for layer in self.frozen_layers:
            if layer not in LAYERS:
                errors.append(f"encoder.frozen_layers: unknown layer {layer!r}")
        return errors


class EncoderModel:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    @property
    def out_dim(self):
        return self.config.out_dim

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def trainable(self):
        return [p for p in self.parameters() if p.requires_grad]

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def __call__(self, x):
        p = self.params
        h = ad.relu(ad.conv1d(x, p["conv1.w"], kernel="rowwise") + p["conv1.b"])
        h = ad.relu(ad.conv1d(h, p["conv2.w"], kernel="rowwise") + p["conv2.b"])
        h = ad.mean(h, axis=1)
        h = ad.relu(linear(h, p["fc1.w"], p["fc1.b"], kernel="rowwise"))
        return linear(h, p["fc2.w"], p["fc2.b"], kernel="rowwise")


def param_count_closed_form(config):
    d, w, h, c = config.frame_dim, config.conv_width, config.hidden, config.out_dim
    return (3 * d * w + w) + (3 * w * w + w) + (w * h + h) + (h * c + c)


def init_encoder(config, seed):
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    rng = seeded_rng(seed, "encoder-init")
    d, w, h, c = config.frame_dim, config.conv_width, config.hidden, config.out_dim
    params = {
        "conv1.w": uniform_param(rng, 3 * d, (3 * d, w), "conv1.w"),
        "conv1.b": zeros_param((w,), "conv1.b"),
        "conv2.w": uniform_param(rng, 3 * w, (3 * w, w), "conv2.w"),
        "conv2.b": zeros_param((w,), "conv2.b"),
        "fc1.w": uniform_param(rng, w, (w, h), "fc1.w"),
        "fc1.b": zeros_param((h,), "fc1.b"),
        "fc2.w": uniform_param(rng, h, (h, c), "fc2.w"),
        "fc2.b": zeros_param((c,), "fc2.b"),
    }
    for name, p in params.items():
        if name.split(".")[0] in config.frozen_layers:
            p.requires_grad = False
    return EncoderModel(config, params)


def encode(model, batch, mode="eval"):
    """Encode a (K, T_f, D) snippet batch into (K, C) features.

    ``mode="train"`` records onto the active train tape; ``mode="eval"``
    retains nothing.
    """
    x = batch if isinstance(batch, Tensor) else Tensor._wrap(np.asarray(batch, dtype=np.float64))
    cfg = model.config
    if x.ndim != 3 or x.shape[2] != cfg.frame_dim or x.shape[1] != cfg.frames:
        raise ValueError(
            f"snippet batch shape {x.shape} does not match encoder (K, {cfg.frames}, {cfg.frame_dim})")
    if mode == "eval":
        with ad.no_tape():
            return model(x)
    if mode != "train":
        raise ValueError(f"unknown encode mode {mode!r}")
    if not ad.is_recording():
        raise ad.AutodiffError("train-mode encode needs an active train tape")
    return model(x)


def encode_sequential(model, snippets, micro_batch):
    """Eval-mode encode of (N, T_f, D) snippets in chunks of ``micro_batch``; returns (N, C) array."""
    if micro_batch < 1:
        raise ValueError(f"micro-batch size must be >= 1, got {micro_batch}")
    snippets = np.asarray(snippets, dtype=np.float64)
    rows = [encode(model, snippets[i:i + micro_batch], "eval").data
            for i in range(0, len(snippets), micro_batch)]
    return np.concatenate(rows, axis=0)
