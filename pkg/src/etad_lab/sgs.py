"""Sequentialized gradient sampling trainer, the naive end-to-end baseline and AdamW.

One SGS iteration for a video:

1. encode all N snippets in eval mode, K at a time (nothing retained);
2. run the detector on the detached features, backpropagate the loss into the
   detector and into the feature matrix, giving dL/dF;
3. pick round(gamma * N) snippets, re-encode them K at a time in train mode and
   backpropagate each micro-batch with its rows of dL/dF as the seed.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .detector import compute_loss, init_detector
from .encoder import encode, encode_sequential, init_encoder
from .nn import seeded_rng
from .samplers import LABEL_GUIDED, STRATEGIES, SampleRequest, SamplerError, sample
from .tadeval import compute_map, enumerate_proposals, infer, tiou_matrix

ENCODER = "encoder"
DETECTOR = "detector"
KDPP_MAX_CANDIDATES = 2048


class TrainingError(RuntimeError):
    pass


@dataclass
class SgsConfig:
    micro_batch: int = 4
    gamma: float = 0.3
    snippet_sampler: str = "random"
    lr_detector: float = 1e-3
    lr_encoder: float = 1e-6
    weight_decay: float = 1e-4
    epochs: int = 6
    decay_epoch: int = 5
    decay_factor: float = 0.1
    batch_videos: int = 4
    rescale_sampled: bool = False
    naive_e2e: bool = False

    def validate(self, length=None):
        errors = []
        if self.micro_batch < 1:
            errors.append("sgs.micro_batch must be >= 1")
        if length is not None and self.micro_batch > length:
            errors.append(f"sgs.micro_batch must be <= the sequence length {length}")
        if not 0 <= self.gamma <= 1:
            errors.append("sgs.gamma must lie in [0, 1]")
        if self.snippet_sampler not in STRATEGIES or self.snippet_sampler in LABEL_GUIDED:
            errors.append(f"sgs.snippet_sampler must be one of random, grid, block, fps, kdpp; "
                          f"got {self.snippet_sampler!r}")
        for name in ("lr_detector", "lr_encoder", "weight_decay"):
            if getattr(self, name) < 0:
                errors.append(f"sgs.{name} must be >= 0")
        if self.epochs < 0:
            errors.append("sgs.epochs must be >= 0")
        if self.batch_videos < 1:
            errors.append("sgs.batch_videos must be >= 1")
        if not 0 < self.decay_factor <= 1:
            errors.append("sgs.decay_factor must lie in (0, 1]")
        return errors


@dataclass
class ApsConfig:
    ratio: float = 0.06
    strategy: str = "random"

    def validate(self):
        errors = []
        if not 0 < self.ratio <= 1:
            errors.append("aps.ratio must lie in (0, 1]")
        if self.strategy not in STRATEGIES:
            errors.append(f"aps.strategy must be one of {', '.join(STRATEGIES)}")
        return errors


# ---------------------------------------------------------------------------
# proposal sampling


def proposal_embeddings(features, proposals):
    s = proposals[:, 0].astype(int)
    e = proposals[:, 1].astype(int)
    return np.concatenate([features[s], features[e]], axis=1)


def select_proposals(features, gt, aps, rng):
    """APS over the dense enumeration; returns the sampled (P, 2) proposals."""
    n = features.shape[0]
    props = enumerate_proposals(n)
    req = SampleRequest(len(props), ratio=aps.ratio, strategy=aps.strategy, rng=rng, positions=None)
    if aps.strategy in ("grid", "block"):
        req.positions = props
    elif aps.strategy in ("fps", "kdpp"):
        if aps.strategy == "kdpp" and aps.ratio < 1 and len(props) > KDPP_MAX_CANDIDATES:
            raise SamplerError(f"kdpp proposal sampling supports at most {KDPP_MAX_CANDIDATES} "
                               f"candidates, got {len(props)}")
        req.embeddings = proposal_embeddings(features, props)
    elif aps.strategy == "iou_balanced":
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
        req.labels = tiou_matrix(props, gt).max(axis=1) if len(gt) else np.zeros(len(props))
    elif aps.strategy == "scale_balanced":
        req.labels = (props[:, 1] - props[:, 0]) / n
    return props[sample(req)]


# ---------------------------------------------------------------------------
# the three stages


def stage1_sequential_encode(encoder, video, micro_batch, acct=None):
    """Detached (N, C) features from eval-mode micro-batches."""
    if micro_batch < 1:
        raise ValueError(f"micro-batch size must be >= 1, got {micro_batch}")
    acct = acct or ad.Accountant()
    with acct.phase(ENCODER):
        return encode_sequential(encoder, video.snippets, micro_batch)


@dataclass
class DetectorStep:
    loss: dict
    feature_grads: np.ndarray


def _check_loss(loss, where):
    value = float(loss.total.data)
    if not math.isfinite(value):
        raise TrainingError(f"{where}: non-finite loss {value}; components {loss.to_dict()}")


def stage2_detector_step(detector, features, gt, proposals, acct=None, loss_scale=1.0):
    """Detector forward/backward on detached features; returns the loss and dL/dF."""
    acct = acct or ad.Accountant()
    config = detector.config
    with acct.phase(DETECTOR), ad.TapeGraph("train"):
        leaf = Tensor(features, requires_grad=True)
        out = detector.run(leaf, proposals)
        loss = compute_loss(out, gt, config)
        _check_loss(loss, "detector step")
        ad.backward(loss.total, np.full((), loss_scale))
        grads = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return DetectorStep(loss.to_dict(), grads)


def sampled_snippets(video, features, config, rng):
    n = video.length
    k = int(math.floor(config.gamma * n + 0.5))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    req = SampleRequest(n, k=k, strategy=config.snippet_sampler, rng=rng)
    if config.snippet_sampler in ("fps", "kdpp"):
        req.embeddings = features
    return sample(req)


def stage3_sampled_update(encoder, video, feature_grads, indices, micro_batch, acct=None, seed_scale=1.0):
    """Re-encode the chosen snippets in train mode, K at a time, seeding backward with their dL/dF rows."""
    if micro_batch < 1:
        raise ValueError(f"micro-batch size must be >= 1, got {micro_batch}")
    acct = acct or ad.Accountant()
    indices = np.asarray(indices, dtype=np.int64)
    for i in range(0, len(indices), micro_batch):
        chunk = indices[i:i + micro_batch]
        with acct.phase(ENCODER), ad.TapeGraph("train"):
            feats = encode(encoder, video.snippets[chunk], "train")
            if feats.node is not None:
                ad.backward(feats, feature_grads[chunk] * seed_scale)
    return indices


def sgs_step(encoder, detector, video, proposals, config, rng, acct=None, loss_scale=1.0, features=None):
    """Stages 1-3 for one video; returns (loss dict, features, sampled indices)."""
    acct = acct or ad.Accountant()
    if features is None:
        features = stage1_sequential_encode(encoder, video, config.micro_batch, acct)
    step = stage2_detector_step(detector, features, video.segments, proposals, acct, loss_scale)
    idx = sampled_snippets(video, features, config, rng)
    if len(idx):
        scale = (1.0 / config.gamma) if config.rescale_sampled else 1.0
        stage3_sampled_update(encoder, video, step.feature_grads, idx, config.micro_batch, acct, scale)
    return step.loss, features, idx


def naive_e2e_step(encoder, detector, video, proposals, acct=None, loss_scale=1.0):
    """One train-mode forward of all N snippets plus detector, one backward."""
    acct = acct or ad.Accountant()
    with ad.TapeGraph("train"):
        with acct.phase(ENCODER):
            feats = encode(encoder, video.snippets, "train")
        with acct.phase(DETECTOR):
            out = detector.run(feats, proposals)
            loss = compute_loss(out, video.segments, detector.config)
            _check_loss(loss, "naive step")
        ad.backward(loss.total, np.full((), loss_scale))
        features = feats.data
    return loss.to_dict(), features


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)

    def to_dict(self):
        return {"step": self.step,
                "first": {k: v.tolist() for k, v in sorted(self.first.items())},
                "second": {k: v.tolist() for k, v in sorted(self.second.items())}}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["step"]),
                   {k: np.asarray(v, dtype=np.float64) for k, v in d["first"].items()},
                   {k: np.asarray(v, dtype=np.float64) for k, v in d["second"].items()})


def optimizer_step(params, state, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
    """AdamW with decoupled decay applied before the moment update; zeroes grads afterwards.

    ``params`` maps name -> Tensor; tensors without a grad take a zero gradient.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        p = params[name]
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        p.data *= 1.0 - lr * weight_decay
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first[name] = m
        state.second[name] = v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None


def zero_grads(params):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# training loop


METRIC_COLUMNS = (
    "epoch", "loss_total", "loss_bd_s", "loss_bd_p", "loss_iou", "loss_secw",
    "average_map", *(f"ap_{i}" for i in range(10)),
    "peak_bytes_encoder", "peak_bytes_detector",
    "forward_flops_encoder", "backward_flops_encoder",
    "forward_flops_detector", "backward_flops_detector",
    "wall_seconds",
)


@dataclass
class TrainResult:
    encoder: object
    detector: object
    states: dict
    metrics: list
    final_eval: object = None


def _thread_count():
    try:
        return max(1, int(os.environ.get("ETAD_LAB_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(encoder, detector, videos, inference, thresholds, features=None):
    """Class-agnostic mAP over ``videos``; per-video work may use ETAD_LAB_THREADS threads."""
    features = features or {}

    def one(video):
        return video.video_id, infer(video, encoder, detector, inference, features.get(video.video_id))

    threads = _thread_count()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, videos))
    else:
        results = [one(v) for v in videos]
    dets = dict(sorted(results))
    gt = {v.video_id: v.segments for v in videos}
    return compute_map(dets, gt, thresholds)


def _mean_losses(rows):
    keys = ("total", "l_bd_s")
    out = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    for part in ("l_bd_p", "l_iou", "l_secw"):
        out[part] = float(np.mean([sum(v for k, v in r.items() if k.startswith(part)) for r in rows]))
    return out


def train(splits, run, progress=None):
    """Epoch loop: per batch of videos run SGS (or the naive baseline), then one AdamW step per group."""
    cfg = run.sgs
    encoder = init_encoder(run.encoder, run.seed)
    detector = init_detector(run.detector, run.seed)
    enc_params = {n: p for n, p in encoder.params.items() if p.requires_grad}
    det_params = dict(detector.params)
    states = {ENCODER: OptimizerState(), DETECTOR: OptimizerState()}
    frozen = cfg.gamma == 0 and not cfg.naive_e2e
    train_videos = splits["train"]
    val_videos = splits.get("val", [])
    acct = ad.Accountant()
    acct.register_params(encoder.parameters() + detector.parameters())
    cache = {}
    metrics = []
    final_eval = None
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr_scale = cfg.decay_factor if epoch >= cfg.decay_epoch else 1.0
        order = seeded_rng(run.seed, "order", epoch).permutation(len(train_videos))
        flops_before = acct.read_flops()
        acct.reset_peaks()
        rows = []
        for b in range(0, len(order), cfg.batch_videos):
            batch = [train_videos[i] for i in order[b:b + cfg.batch_videos]]
            weight = 1.0 / len(batch)
            for j, video in enumerate(batch):
                rng = seeded_rng(run.seed, "step", epoch, b, j)
                aps_rng = seeded_rng(run.seed, "aps", epoch, b, j)
                if cfg.naive_e2e:
                    if run.aps.strategy in ("fps", "kdpp"):
                        feats = encode_sequential(encoder, video.snippets, cfg.micro_batch)
                    else:
                        feats = np.zeros((video.length, 1))
                    props = select_proposals(feats, video.segments, run.aps, aps_rng)
                    loss, _ = naive_e2e_step(encoder, detector, video, props, acct, weight)
                else:
                    feats = cache.get(video.video_id)
                    if feats is None:
                        feats = stage1_sequential_encode(encoder, video, cfg.micro_batch, acct)
                        if frozen:
                            cache[video.video_id] = feats
                    props = select_proposals(feats, video.segments, run.aps, aps_rng)
                    loss, _, _ = sgs_step(encoder, detector, video, props, cfg, rng, acct, weight, feats)
                rows.append(loss)
            optimizer_step(det_params, states[DETECTOR], cfg.lr_detector * lr_scale, cfg.weight_decay)
            if frozen:
                zero_grads(enc_params)
            else:
                optimizer_step(enc_params, states[ENCODER], cfg.lr_encoder * lr_scale, cfg.weight_decay)
        last = epoch == cfg.epochs - 1
        result = None
        if val_videos and (last or (run.eval_every and (epoch + 1) % run.eval_every == 0)):
            val_feats = None
            if frozen:
                val_feats = {v.video_id: encode_sequential(encoder, v.snippets, cfg.micro_batch)
                             for v in val_videos}
            result = evaluate(encoder, detector, val_videos, run.inference, run.thresholds, val_feats)
            final_eval = result
        flops = acct.read_flops()
        mem = acct.snapshot_memory()
        losses = _mean_losses(rows) if rows else {k: 0.0 for k in ("total", "l_bd_s", "l_bd_p", "l_iou", "l_secw")}
        row = {
            "epoch": epoch,
            "loss_total": losses["total"], "loss_bd_s": losses["l_bd_s"], "loss_bd_p": losses["l_bd_p"],
            "loss_iou": losses["l_iou"], "loss_secw": losses["l_secw"],
            "average_map": result.average if result else float("nan"),
        }
        for i in range(10):
            row[f"ap_{i}"] = result.ap[i] if result and i < len(result.ap) else float("nan")
        row["peak_bytes_encoder"] = mem.peak_live_bytes.get(ENCODER, 0)
        row["peak_bytes_detector"] = mem.peak_live_bytes.get(DETECTOR, 0)
        for phase in (ENCODER, DETECTOR):
            row[f"forward_flops_{phase}"] = flops.forward_flops.get(phase, 0) - flops_before.forward_flops.get(phase, 0)
            row[f"backward_flops_{phase}"] = (flops.backward_flops.get(phase, 0)
                                              - flops_before.backward_flops.get(phase, 0))
        row["wall_seconds"] = time.perf_counter() - start
        metrics.append(row)
        if progress:
            progress(row)
    return TrainResult(encoder, detector, states, metrics, final_eval)
