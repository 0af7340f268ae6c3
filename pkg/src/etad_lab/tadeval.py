"""Proposal geometry, post-processing and mAP evaluation for temporal detection.

Coordinates are snippet units: boundary index t sits at coordinate t, and a
segment is a pair (start, end) with start < end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class Detection:
    video_id: str
    start: float
    end: float
    score: float
    components: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "video_id": self.video_id,
            "start": float(self.start),
            "end": float(self.end),
            "score": float(self.score),
            "components": {k: float(v) for k, v in sorted(self.components.items())},
        }


@dataclass
class EvalResult:
    thresholds: tuple
    ap: tuple
    average: float

    def to_dict(self):
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "ap": [float(a) for a in self.ap],
            "average_map": float(self.average),
        }

    def csv_row(self):
        return [f"{self.average:.10f}"] + [f"{a:.10f}" for a in self.ap]


@lru_cache(maxsize=16)
def _enumeration(t):
    s, e = np.triu_indices(t, k=1)
    out = np.stack([s, e], axis=1).astype(np.float64)
    out.setflags(write=False)
    return out


def enumerate_proposals(t):
    """All (s, e) index pairs with 0 <= s < e <= t-1, start-major order."""
    if t < 2:
        raise ValueError(f"need at least 2 snippets to enumerate proposals, got {t}")
    return _enumeration(int(t)).copy()


def tiou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    if inter <= 0.0:
        return 0.0
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def tiou_matrix(a, b):
    """Pairwise tIoU between (P, 2) and (G, 2) segment arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    inter = np.clip(np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]),
                    0.0, None)
    union = (a[:, None, 1] - a[:, None, 0]) + (b[None, :, 1] - b[None, :, 0]) - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _boundary_candidates(prob):
    prob = np.asarray(prob, dtype=np.float64)
    n = len(prob)
    keep = prob > 0.5 * prob.max() if n else np.zeros(0, bool)
    for t in range(n):
        left = t == 0 or prob[t] > prob[t - 1]
        right = t == n - 1 or prob[t] > prob[t + 1]
        if left and right and n > 1:
            keep[t] = True
    return np.flatnonzero(keep)


def select_boundaries(start_prob, end_prob):
    """Candidate (s, e) pairs from strict local maxima or values above half the maximum."""
    starts = _boundary_candidates(start_prob)
    ends = _boundary_candidates(end_prob)
    pairs = [(int(s), int(e)) for s in starts for e in ends if s < e]
    return np.asarray(pairs, dtype=np.float64).reshape(-1, 2)


def fuse_scores(p_s, p_e, p_iou):
    return np.asarray(p_s) * np.asarray(p_e) * np.asarray(p_iou)


def soft_nms(detections, sigma=0.4, score_floor=1e-4, top_k=100):
    """Gaussian soft-NMS. Ties resolve by score, then earlier start, then input order."""
    scores = np.array([float(d.score) for d in detections], dtype=np.float64)
    starts = np.array([float(d.start) for d in detections], dtype=np.float64)
    ends = np.array([float(d.end) for d in detections], dtype=np.float64)
    alive = np.flatnonzero(scores >= score_floor)
    kept = []
    while len(alive) and len(kept) < top_k:
        s_alive = scores[alive]
        top = alive[s_alive == s_alive.max()]
        top = top[starts[top] == starts[top].min()]
        best = int(top.min())
        kept.append((best, float(scores[best])))
        alive = alive[alive != best]
        if not len(alive):
            break
        inter = np.minimum(ends[best], ends[alive]) - np.maximum(starts[best], starts[alive])
        union = (ends[best] - starts[best]) + (ends[alive] - starts[alive]) - inter
        overlap = np.where(inter > 0, inter / np.where(inter > 0, union, 1.0), 0.0)
        if sigma > 0:
            scores[alive] = scores[alive] * np.exp(-(overlap * overlap) / sigma)
        else:
            scores[alive] = np.where(overlap > 0, 0.0, scores[alive])
        alive = alive[scores[alive] >= score_floor]
    out = []
    for idx, score in kept:
        d = detections[idx]
        out.append(Detection(d.video_id, d.start, d.end, score, dict(d.components)))
    return out


def _interpolated_ap(precision, recall):
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(detections, gt, threshold):
    """AP at one tIoU threshold; ``detections`` is a flat list, ``gt`` maps video id -> (M, 2)."""
    n_gt = sum(len(g) for g in gt.values())
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground-truth segments")
    if not detections:
        return 0.0
    order = sorted(detections, key=lambda d: (-d.score, d.video_id, d.start, d.end))
    used = {vid: np.zeros(len(g), dtype=bool) for vid, g in gt.items()}
    tp = np.zeros(len(order))
    for i, d in enumerate(order):
        segs = gt.get(d.video_id)
        if segs is None or len(segs) == 0:
            continue
        ious = tiou_matrix([[d.start, d.end]], segs)[0]
        ious[used[d.video_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= threshold:
            used[d.video_id][j] = True
            tp[i] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(order) + 1)
    recall = ctp / n_gt
    return _interpolated_ap(precision, recall)


def compute_map(detections, gt, thresholds=DEFAULT_THRESHOLDS):
    """Class-agnostic mAP per threshold and its mean.

    ``detections`` maps video id -> list of Detection; ``gt`` maps video id -> (M, 2) segments.
    """
    gt = {vid: np.asarray(g, dtype=np.float64).reshape(-1, 2) for vid, g in gt.items()}
    flat = [d for vid in sorted(detections) for d in detections[vid]]
    aps = tuple(average_precision(flat, gt, thr) for thr in thresholds)
    return EvalResult(tuple(thresholds), aps, float(np.mean(aps)))


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferenceConfig:
    micro_batch: int = 4
    candidates: str = "select"
    aps_ratio: float = 1.0
    sigma: float = 0.4
    score_floor: float = 1e-4
    top_k: int = 100

    def validate(self):
        errors = []
        if self.micro_batch < 1:
            errors.append("inference.micro_batch must be >= 1")
        if self.candidates not in ("select", "all"):
            errors.append("inference.candidates must be 'select' or 'all'")
        if not 0 < self.aps_ratio <= 1:
            errors.append("inference.aps_ratio must lie in (0, 1]")
        if self.sigma < 0:
            errors.append("inference.sigma must be >= 0")
        if self.top_k < 1:
            errors.append("inference.top_k must be >= 1")
        return errors


def infer(video, encoder, detector, config=None, features=None):
    """Detections for one video: sequential encode, detect, cascade, fuse, soft-NMS."""
    from .encoder import encode_sequential
    from .samplers import SampleRequest, sample

    config = config or InferenceConfig()
    if features is None:
        features = encode_sequential(encoder, video.snippets, config.micro_batch)
    n = features.shape[0]
    start_prob, end_prob, enhanced = detector.boundary_probs(features)
    if config.candidates == "all":
        cands = enumerate_proposals(n)
    else:
        cands = select_boundaries(start_prob, end_prob)
    if len(cands) == 0:
        return []
    if config.aps_ratio < 1.0:
        idx = sample(SampleRequest(len(cands), ratio=config.aps_ratio, strategy="grid", positions=cands))
        cands = cands[idx]
    final, p_iou = detector.cascade_inference(enhanced, cands)
    si = cands[:, 0].astype(int)
    ei = cands[:, 1].astype(int)
    p_s = start_prob[si]
    p_e = end_prob[ei]
    scores = fuse_scores(p_s, p_e, p_iou)
    dets = [
        Detection(video.video_id, float(final[i, 0]), float(final[i, 1]), float(scores[i]),
                  {"p_s": float(p_s[i]), "p_e": float(p_e[i]), "p_iou": float(p_iou[i])})
        for i in range(len(cands))
    ]
    return soft_nms(dets, config.sigma, config.score_floor, config.top_k)
