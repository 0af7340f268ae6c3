"""Action detector: recurrent feature enhancement, snippet boundary head,
RoI alignment and three cascaded proposal evaluation modules (PEM).

Proposals are (start, end) pairs in snippet coordinates; feature row t sits at
coordinate t. All per-proposal computation is row-wise, so permuting the
proposals permutes every output the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .nn import linear, ones_param, seeded_rng, uniform_param, zeros_param
from .tadeval import tiou_matrix

GROUPS = 16
LOGW_CLIP = 4.0
MIN_WIDTH = 1e-3


@dataclass
class DetectorConfig:
    feat_dim: int = 64
    cell: str = "mingru"
    head_widths: tuple = (512, 128, 128, 128)
    stages: int = 3
    positive_iou: tuple = (0.7, 0.8, 0.9)
    boundary_bins: int = 8
    extended_bins: int = 32
    boundary_frac: float = 0.15
    extend_frac: float = 0.25
    iou_pos: float = 0.9
    iou_neg: float = 0.3
    label_radius: float = 1.5
    secw_weight: float = 10.0

    def validate(self):
        errors = []
        if self.feat_dim < 1 or self.feat_dim % GROUPS:
            errors.append(f"detector.feat_dim must be a positive multiple of {GROUPS}")
        if self.cell not in ("mingru", "lstm"):
            errors.append("detector.cell must be 'mingru' or 'lstm'")
        if not self.head_widths or any(w < 1 for w in self.head_widths):
            errors.append("detector.head_widths must be non-empty positive widths")
        if self.stages < 1 or len(self.positive_iou) != self.stages:
            errors.append("detector.positive_iou needs one threshold per stage")
        if any(not 0 < t <= 1 for t in self.positive_iou):
            errors.append("detector.positive_iou thresholds must lie in (0, 1]")
        if self.boundary_bins < 1 or self.extended_bins < 1:
            errors.append("detector bin counts must be positive")
        if self.boundary_frac < 0 or self.extend_frac < 0:
            errors.append("detector region fractions must be >= 0")
        if not 0 <= self.iou_neg < self.iou_pos <= 1:
            errors.append("detector.iou_neg < iou_pos within [0, 1] required")
        if self.label_radius < 0 or self.secw_weight < 0:
            errors.append("detector.label_radius and secw_weight must be >= 0")
        return errors


@dataclass
class PemOutput:
    """Per-proposal head outputs of one stage; every field is a (P,) tensor."""

    start_offset: Tensor
    end_offset: Tensor
    center_offset: Tensor
    logw_offset: Tensor
    iou_cls_logit: Tensor
    iou_reg: Tensor
    startness_logit: Tensor
    endness_logit: Tensor

    @property
    def iou_cls(self):
        return ad._sigmoid(self.iou_cls_logit.data)

    @property
    def startness(self):
        return ad._sigmoid(self.startness_logit.data)

    @property
    def endness(self):
        return ad._sigmoid(self.endness_logit.data)

    def offsets(self):
        return np.stack([self.start_offset.data, self.end_offset.data,
                         self.center_offset.data, self.logw_offset.data], axis=1)


@dataclass
class StageOutput:
    proposals: np.ndarray
    pem: PemOutput
    refined: np.ndarray


@dataclass
class DetectorOutput:
    enhanced: Tensor
    start_logit: Tensor
    end_logit: Tensor
    stages: list = field(default_factory=list)


@dataclass
class Labels:
    start: np.ndarray
    end: np.ndarray


@dataclass
class ProposalLabels:
    iou_target: np.ndarray
    positive: np.ndarray
    offsets: np.ndarray
    startness: np.ndarray
    endness: np.ndarray


@dataclass
class LossBreakdown:
    l_bd_s: Tensor
    l_bd_p: list
    l_iou: list
    l_secw: list
    secw_weight: float
    total: Tensor

    def to_dict(self):
        out = {"l_bd_s": float(self.l_bd_s.data), "total": float(self.total.data)}
        for i, (a, b, c) in enumerate(zip(self.l_bd_p, self.l_iou, self.l_secw), start=1):
            out[f"l_bd_p{i}"] = float(a.data)
            out[f"l_iou{i}"] = float(b.data)
            out[f"l_secw{i}"] = float(c.data)
        return out


# ---------------------------------------------------------------------------
# parameters


def _head_shapes(in_dim, widths, out_dim):
    dims = [in_dim, *widths, out_dim]
    return list(zip(dims[:-1], dims[1:]))


def init_detector(config, seed):
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    rng = seeded_rng(seed, "detector-init")
    c = config.feat_dim
    p = {}
    gates = ("z", "h") if config.cell == "mingru" else ("i", "f", "g", "o")
    for direction in ("fwd", "bwd"):
        for gate in gates:
            p[f"rnn.{direction}.w{gate}"] = uniform_param(rng, c, (c, c), f"rnn.{direction}.w{gate}")
            p[f"rnn.{direction}.u{gate}"] = uniform_param(rng, c, (c, c), f"rnn.{direction}.u{gate}")
            p[f"rnn.{direction}.b{gate}"] = zeros_param((c,), f"rnn.{direction}.b{gate}")
    for j in (1, 2):
        p[f"conv{j}.w"] = uniform_param(rng, 3 * c, (3 * c, c), f"conv{j}.w")
        p[f"conv{j}.b"] = zeros_param((c,), f"conv{j}.b")
        p[f"gn{j}.gamma"] = ones_param((c,), f"gn{j}.gamma")
        p[f"gn{j}.beta"] = zeros_param((c,), f"gn{j}.beta")
    p["bd.conv.w"] = uniform_param(rng, 3 * c, (3 * c, c), "bd.conv.w")
    p["bd.conv.b"] = zeros_param((c,), "bd.conv.b")
    p["bd.fc.w"] = uniform_param(rng, c, (c, 2), "bd.fc.w")
    p["bd.fc.b"] = zeros_param((2,), "bd.fc.b")
    heads = {
        "edge": config.boundary_bins * c,
        "cw": config.extended_bins * c,
        "iou": config.extended_bins * c,
    }
    for stage in range(config.stages):
        for head, in_dim in heads.items():
            for j, (a, b) in enumerate(_head_shapes(in_dim, config.head_widths, 2)):
                name = f"pem{stage}.{head}.fc{j}"
                p[name + ".w"] = uniform_param(rng, a, (a, b), name + ".w")
                p[name + ".b"] = zeros_param((b,), name + ".b")
    return Detector(config, p)


# ---------------------------------------------------------------------------
# geometry helpers


def interpolation_matrix(positions, length):
    """Sparse (len(positions), length) matrix of linear-interpolation weights, positions clamped."""
    pos = np.clip(np.asarray(positions, dtype=np.float64).reshape(-1), 0.0, length - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), max(length - 2, 0))
    frac = pos - lo
    rows = np.arange(len(pos))
    if length == 1:
        return sp.csr_matrix((np.ones(len(pos)), (rows, np.zeros(len(pos), int))), shape=(len(pos), 1))
    data = np.concatenate([1.0 - frac, frac])
    cols = np.concatenate([lo, lo + 1])
    return sp.csr_matrix((data, (np.concatenate([rows, rows]), cols)), shape=(len(pos), length))


def bin_positions(lo, hi, bins):
    """Centres of ``bins`` equal sub-intervals of [lo, hi], one row per proposal."""
    lo = np.asarray(lo, dtype=np.float64)[:, None]
    hi = np.asarray(hi, dtype=np.float64)[:, None]
    return lo + (np.arange(bins) + 0.5)[None, :] * (hi - lo) / bins


def roi_regions(proposals, config):
    s, e = proposals[:, 0], proposals[:, 1]
    d = e - s
    bf, ef = config.boundary_frac, config.extend_frac
    return {
        "start": bin_positions(s - bf * d, s + bf * d, config.boundary_bins),
        "end": bin_positions(e - bf * d, e + bf * d, config.boundary_bins),
        "extended": bin_positions(s - ef * d, e + ef * d, config.extended_bins),
    }


def roi_align(enhanced, proposals, config):
    """Bin features per proposal: (P, bins*C) tensors, bin-major, for start, end and extended regions."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
    if np.any(proposals[:, 1] <= proposals[:, 0]):
        raise ValueError("roi_align: every proposal needs start < end")
    n, c = enhanced.shape
    out = []
    for name, pos in roi_regions(proposals, config).items():
        bins = pos.shape[1]
        g = ad.interp_gather(enhanced, interpolation_matrix(pos, n))
        out.append(ad.reshape(g, (len(proposals), bins * c)))
    return tuple(out)


def roi_gather_matrices(proposals, length, config):
    """Per region, a sparse (P, bins*N) matrix; column b*N + t weights snippet t for bin b.

    Gathering a (bins*N, h) table of per-bin projections with it equals
    roi_align followed by the first linear layer of a head.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
    if np.any(proposals[:, 1] <= proposals[:, 0]):
        raise ValueError("roi_align: every proposal needs start < end")
    out = {}
    for name, pos in roi_regions(proposals, config).items():
        p, bins = pos.shape
        if length < 2:
            m = interpolation_matrix(pos, length).tocoo()
            rows, b = np.divmod(m.row, bins)
            out[name] = sp.csr_matrix((m.data, (rows, b * length + m.col)), shape=(p, bins * length))
            continue
        pos = np.clip(pos, 0.0, length - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), length - 2)
        frac = pos - lo
        cols = lo + (np.arange(bins) * length)[None, :]
        indices = np.stack([cols, cols + 1], axis=2).reshape(-1)
        data = np.stack([1.0 - frac, frac], axis=2).reshape(-1)
        indptr = np.arange(p + 1, dtype=np.int64) * (2 * bins)
        out[name] = sp.csr_matrix((data, indices, indptr), shape=(p, bins * length))
    return out


def project_bins(enhanced, weight, bins):
    """(bins*N, h) table whose row b*N + t is enhanced[t] @ weight[b*C:(b+1)*C]."""
    n, c = enhanced.shape
    h = weight.shape[1]
    per_bin = ad.transpose(ad.reshape(ad.transpose(weight), (h * bins, c)))
    z = ad.matmul(enhanced, per_bin)
    return ad.transpose(ad.reshape(ad.transpose(z), (h, bins * n)))


def refine(proposals, offsets, length):
    """Average of the boundary-offset and centre/width-offset refinements, clipped to [0, length].

    ``offsets`` columns: start, end, centre, log-width.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    s, e = proposals[:, 0], proposals[:, 1]
    d = e - s
    sb = s + offsets[:, 0] * d
    eb = e + offsets[:, 1] * d
    c = 0.5 * (s + e) + offsets[:, 2] * d
    w = d * np.exp(np.clip(offsets[:, 3], -LOGW_CLIP, LOGW_CLIP))
    rs = np.clip(0.5 * (sb + (c - 0.5 * w)), 0.0, length)
    re = np.clip(0.5 * (eb + (c + 0.5 * w)), 0.0, length)
    lo, hi = np.minimum(rs, re), np.maximum(rs, re)
    thin = hi - lo < MIN_WIDTH
    if np.any(thin):
        mid = np.clip(0.5 * (lo + hi), 0.5 * MIN_WIDTH, length - 0.5 * MIN_WIDTH)
        lo = np.where(thin, mid - 0.5 * MIN_WIDTH, lo)
        hi = np.where(thin, mid + 0.5 * MIN_WIDTH, hi)
    return np.stack([lo, hi], axis=1)


def regression_targets(proposals, gt):
    """Offsets that map each proposal exactly onto ``gt`` (row-aligned)."""
    s, e = proposals[:, 0], proposals[:, 1]
    d = e - s
    gs, ge = gt[:, 0], gt[:, 1]
    return np.stack([
        (gs - s) / d,
        (ge - e) / d,
        (0.5 * (gs + ge) - 0.5 * (s + e)) / d,
        np.log((ge - gs) / d),
    ], axis=1)


def _near_any(points, anchors, radius):
    if len(anchors) == 0:
        return np.zeros(len(points))
    return (np.abs(points[:, None] - anchors[None, :]) <= radius).any(axis=1).astype(np.float64)


def snippet_labels(gt, length, radius=1.5):
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    t = np.arange(length, dtype=np.float64)
    return Labels(_near_any(t, gt[:, 0], radius), _near_any(t, gt[:, 1], radius))


def assign_labels(gt, proposals, stage, config):
    """Labels for one cascade stage: max-tIoU targets, positives at the stage threshold, offsets."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
    p = len(proposals)
    if len(gt) == 0:
        zeros = np.zeros(p)
        return ProposalLabels(zeros, np.zeros(p, bool), np.zeros((p, 4)), zeros.copy(), zeros.copy())
    ious = tiou_matrix(proposals, gt)
    best = ious.argmax(axis=1)
    target = ious[np.arange(p), best]
    positive = target >= config.positive_iou[stage]
    return ProposalLabels(
        iou_target=target,
        positive=positive,
        offsets=regression_targets(proposals, gt[best]),
        startness=_near_any(proposals[:, 0], gt[:, 0], config.label_radius),
        endness=_near_any(proposals[:, 1], gt[:, 1], config.label_radius),
    )


# ---------------------------------------------------------------------------
# losses


def balanced_bce(logits, labels, include=None):
    """-(1/2P) sum_pos log p - (1/2Q) sum_neg log(1-p); a side with no members contributes 0."""
    labels = np.asarray(labels, dtype=np.float64)
    include = np.ones(labels.shape, bool) if include is None else np.asarray(include, bool)
    pos = include & (labels > 0.5)
    neg = include & ~(labels > 0.5)
    npos, nneg = pos.sum(), neg.sum()
    w_pos = pos / (2.0 * npos) if npos else np.zeros(labels.shape)
    w_neg = neg / (2.0 * nneg) if nneg else np.zeros(labels.shape)
    terms = ad.log_sigmoid(logits) * w_pos + ad.log_sigmoid(-logits) * w_neg
    return -ad.tsum(terms)


def _zero():
    return Tensor._wrap(np.array(0.0))


def compute_loss(output, gt, config):
    """Full training loss; labels are assigned to each stage's input proposals."""
    n = output.start_logit.shape[0]
    snip = snippet_labels(gt, n, config.label_radius)
    l_bd_s = balanced_bce(output.start_logit, snip.start) + balanced_bce(output.end_logit, snip.end)
    l_bd_p, l_iou, l_secw = [], [], []
    total = l_bd_s
    for i, stage in enumerate(output.stages):
        lab = assign_labels(gt, stage.proposals, i, config)
        pem = stage.pem
        bd_p = balanced_bce(pem.startness_logit, lab.startness) + balanced_bce(pem.endness_logit, lab.endness)
        cls_labels = (lab.iou_target >= config.iou_pos).astype(np.float64)
        keep = (lab.iou_target >= config.iou_pos) | (lab.iou_target <= config.iou_neg)
        diff = pem.iou_reg - lab.iou_target
        iou = balanced_bce(pem.iou_cls_logit, cls_labels, keep) + ad.mean(diff * diff)
        idx = np.flatnonzero(lab.positive)
        if len(idx):
            pred = ad.concat([ad.reshape(t[idx], (len(idx), 1)) for t in
                              (pem.start_offset, pem.end_offset, pem.center_offset, pem.logw_offset)], axis=1)
            secw = ad.mean(ad.smooth_l1(pred - lab.offsets[idx]))
        else:
            secw = _zero()
        l_bd_p.append(bd_p)
        l_iou.append(iou)
        l_secw.append(secw)
        total = total + bd_p + iou + secw * config.secw_weight
    return LossBreakdown(l_bd_s, l_bd_p, l_iou, l_secw, config.secw_weight, total)


# ---------------------------------------------------------------------------
# model


class Detector:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def trainable(self):
        return [p for p in self.parameters() if p.requires_grad]

    def param_count(self):
        return sum(p.size for p in self.params.values())

    # -- feature enhancement

    def _mingru(self, x, direction):
        p = self.params
        pre = f"rnn.{direction}."
        xz = ad.matmul(x, p[pre + "wz"]) + p[pre + "bz"]
        xh = ad.matmul(x, p[pre + "wh"]) + p[pre + "bh"]
        return ad.gated_scan(xz, xh, p[pre + "uz"], p[pre + "uh"], reverse=direction == "bwd")

    def _mingru_stepwise(self, x, direction):
        """Reference route for :meth:`_mingru`: one tape node per elementary step."""
        p = self.params
        pre = f"rnn.{direction}."
        xz = ad.matmul(x, p[pre + "wz"]) + p[pre + "bz"]
        xh = ad.matmul(x, p[pre + "wh"]) + p[pre + "bh"]
        n, c = x.shape
        steps = range(n) if direction == "fwd" else range(n - 1, -1, -1)
        h = Tensor._wrap(np.zeros((1, c)))
        outs = {}
        for t in steps:
            z = ad.sigmoid(xz[t:t + 1] + ad.matmul(h, p[pre + "uz"]))
            cand = ad.tanh(xh[t:t + 1] + ad.matmul(h, p[pre + "uh"]))
            h = h + z * (cand - h)
            outs[t] = h
        return ad.concat([outs[t] for t in range(n)], axis=0)

    def _lstm(self, x, direction):
        p = self.params
        pre = f"rnn.{direction}."
        proj = {g: ad.matmul(x, p[pre + "w" + g]) + p[pre + "b" + g] for g in "ifgo"}
        n, c = x.shape
        steps = range(n) if direction == "fwd" else range(n - 1, -1, -1)
        h = Tensor._wrap(np.zeros((1, c)))
        cell = Tensor._wrap(np.zeros((1, c)))
        outs = {}
        for t in steps:
            act = {g: proj[g][t:t + 1] + ad.matmul(h, p[pre + "u" + g]) for g in "ifgo"}
            cell = ad.sigmoid(act["f"]) * cell + ad.sigmoid(act["i"]) * ad.tanh(act["g"])
            h = ad.sigmoid(act["o"]) * ad.tanh(cell)
            outs[t] = h
        return ad.concat([outs[t] for t in range(n)], axis=0)

    def enhance(self, features):
        """Bidirectional recurrence with a residual, then two conv + group-norm + relu layers."""
        x = features if isinstance(features, Tensor) else Tensor._wrap(np.asarray(features, dtype=np.float64))
        if x.ndim != 2 or x.shape[1] != self.config.feat_dim:
            raise ValueError(f"enhance: expected (N, {self.config.feat_dim}) features, got {x.shape}")
        rnn = self._mingru if self.config.cell == "mingru" else self._lstm
        h = x + rnn(x, "fwd") + rnn(x, "bwd")
        p = self.params
        n, c = h.shape
        for j in (1, 2):
            h = ad.reshape(ad.conv1d(ad.reshape(h, (1, n, c)), p[f"conv{j}.w"]), (n, c)) + p[f"conv{j}.b"]
            h = ad.relu(ad.group_norm(h, p[f"gn{j}.gamma"], p[f"gn{j}.beta"], GROUPS))
        return h

    def boundary_logits(self, enhanced):
        p = self.params
        n, c = enhanced.shape
        h = ad.reshape(ad.conv1d(ad.reshape(enhanced, (1, n, c)), p["bd.conv.w"]), (n, c)) + p["bd.conv.b"]
        out = linear(ad.relu(h), p["bd.fc.w"], p["bd.fc.b"])
        return out[:, 0], out[:, 1]

    def boundary_head(self, enhanced):
        start, end = self.boundary_logits(enhanced)
        return ad.sigmoid(start), ad.sigmoid(end)

    # -- proposal evaluation

    def _head(self, stage, head, x, first=0):
        depth = len(self.config.head_widths) + 1
        for j in range(first, depth):
            name = f"pem{stage}.{head}.fc{j}"
            x = linear(x, self.params[name + ".w"], self.params[name + ".b"])
            if j < depth - 1:
                x = ad.relu(x)
        return x

    def pem_forward(self, stage, feats):
        """Heads applied to roi_align features."""
        start_feats, end_feats, ext_feats = feats
        s_out = self._head(stage, "edge", start_feats)
        e_out = self._head(stage, "edge", end_feats)
        cw = self._head(stage, "cw", ext_feats)
        iou = self._head(stage, "iou", ext_feats)
        return self._pem_output(s_out, e_out, cw, iou)

    def pem_forward_fused(self, stage, enhanced, proposals):
        """Same outputs as pem_forward(stage, roi_align(...)), but each head's first
        layer is applied to the N snippets per bin before interpolation, which is
        far cheaper when proposals outnumber snippets."""
        cfg = self.config
        gather = roi_gather_matrices(proposals, enhanced.shape[0], cfg)

        def first_layer(head, bins, region):
            name = f"pem{stage}.{head}.fc0"
            table = tables.setdefault(head, project_bins(enhanced, self.params[name + ".w"], bins))
            x = ad.interp_gather(table, gather[region]) + self.params[name + ".b"]
            return ad.relu(x)

        tables = {}
        s_out = self._head(stage, "edge", first_layer("edge", cfg.boundary_bins, "start"), first=1)
        e_out = self._head(stage, "edge", first_layer("edge", cfg.boundary_bins, "end"), first=1)
        cw = self._head(stage, "cw", first_layer("cw", cfg.extended_bins, "extended"), first=1)
        iou = self._head(stage, "iou", first_layer("iou", cfg.extended_bins, "extended"), first=1)
        return self._pem_output(s_out, e_out, cw, iou)

    @staticmethod
    def _pem_output(s_out, e_out, cw, iou):
        return PemOutput(
            start_offset=s_out[:, 0], end_offset=e_out[:, 0],
            center_offset=cw[:, 0], logw_offset=cw[:, 1],
            iou_cls_logit=iou[:, 0], iou_reg=ad.sigmoid(iou[:, 1]),
            startness_logit=s_out[:, 1], endness_logit=e_out[:, 1])

    def run(self, features, proposals):
        """Training forward: enhance, boundary logits, and the chained PEM cascade."""
        enhanced = self.enhance(features)
        start_logit, end_logit = self.boundary_logits(enhanced)
        out = DetectorOutput(enhanced, start_logit, end_logit)
        props = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
        n = enhanced.shape[0]
        for stage in range(self.config.stages):
            pem = self.pem_forward_fused(stage, enhanced, props)
            refined = refine(props, pem.offsets(), n)
            out.stages.append(StageOutput(props, pem, refined))
            props = refined
        return out

    # -- inference

    def boundary_probs(self, features):
        with ad.no_tape():
            enhanced = self.enhance(features)
            start, end = self.boundary_head(enhanced)
        return start.data, end.data, enhanced

    def cascade_inference(self, enhanced, proposals):
        """Mean of the stages' refined boundaries and mean over stages of iou_cls * iou_reg."""
        props = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
        n = enhanced.shape[0]
        boxes, scores = [], []
        with ad.no_tape():
            for stage in range(self.config.stages):
                pem = self.pem_forward_fused(stage, enhanced, props)
                props = refine(props, pem.offsets(), n)
                boxes.append(props)
                scores.append(pem.iou_cls * pem.iou_reg.data)
        final = np.mean(boxes, axis=0)
        return final, np.mean(scores, axis=0)
