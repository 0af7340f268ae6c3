"""Subset samplers shared by snippet-gradient sampling and proposal sampling.

Each sampler returns a sorted array of ``k`` distinct indices into the
candidate set. Proposal-map variants of grid/block take the candidates'
(start, end) positions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

STRATEGIES = ("random", "grid", "block", "fps", "kdpp", "iou_balanced", "scale_balanced")
FEATURE_GUIDED = ("fps", "kdpp")
LABEL_GUIDED = ("iou_balanced", "scale_balanced")
BALANCE_BINS = (0.3, 0.7)
KDPP_RIDGE = 1e-2


class SamplerError(ValueError):
    pass


def round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass
class SampleRequest:
    n_total: int
    ratio: float = None
    k: int = None
    strategy: str = "random"
    embeddings: np.ndarray = None
    labels: np.ndarray = None
    positions: np.ndarray = None
    rng: np.random.Generator = None
    fps_start: int = 0

    def resolve_k(self):
        if self.n_total < 1:
            raise SamplerError("no candidates to sample from")
        if self.k is not None:
            k = int(self.k)
        elif self.ratio is not None:
            if not 0 < self.ratio <= 1:
                raise SamplerError(f"sampling ratio must lie in (0, 1], got {self.ratio}")
            k = max(1, round_half_up(self.ratio * self.n_total))
        else:
            raise SamplerError("either ratio or k is required")
        if k < 1:
            raise SamplerError(f"k must be >= 1, got {k}")
        if k > self.n_total:
            raise SamplerError(f"cannot draw k={k} from {self.n_total} candidates")
        return k

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise SamplerError(f"unknown sampling strategy {self.strategy!r}")
        if self.strategy in FEATURE_GUIDED:
            if self.embeddings is None:
                raise SamplerError(f"{self.strategy} needs candidate embeddings")
            if len(self.embeddings) != self.n_total:
                raise SamplerError("embeddings must have one row per candidate")
        if self.strategy in LABEL_GUIDED:
            if self.labels is None:
                raise SamplerError(f"{self.strategy} needs per-candidate labels")
            if len(self.labels) != self.n_total:
                raise SamplerError("labels must have one entry per candidate")
        if self.positions is not None and len(self.positions) != self.n_total:
            raise SamplerError("positions must have one row per candidate")
        return self.resolve_k()

    def generator(self):
        return self.rng if self.rng is not None else np.random.default_rng(0)


def sample(req):
    k = req.validate()
    if k == req.n_total:
        return np.arange(req.n_total)
    fn = {
        "random": sample_random,
        "grid": sample_grid,
        "block": sample_block,
        "fps": sample_fps,
        "kdpp": sample_kdpp,
        "iou_balanced": sample_iou_balanced,
        "scale_balanced": sample_scale_balanced,
    }[req.strategy]
    return fn(req)


def sample_random(req):
    k = req.resolve_k()
    idx = req.generator().choice(req.n_total, size=k, replace=False)
    return np.sort(idx)


def _even_pick(n, k):
    # round(j * n / k), j = 0..k-1, in exact integer arithmetic
    j = np.arange(k, dtype=np.int64)
    return (2 * j * n + k) // (2 * k)


def sample_grid(req):
    """1-D: indices round(j*n/k). Proposal map: stride ceil(sqrt(1/ratio)) lattice, then even trim/pad."""
    n = req.n_total
    k = req.resolve_k()
    if req.positions is None:
        return _even_pick(n, k)
    ratio = k / n if req.ratio is None else req.ratio
    stride = max(1, math.ceil(math.sqrt(1.0 / ratio) - 1e-12))
    pos = np.rint(np.asarray(req.positions)).astype(np.int64)
    on = (pos[:, 0] % stride == 0) & (pos[:, 1] % stride == 0)
    lattice = np.flatnonzero(on)
    rest = np.flatnonzero(~on)
    if len(lattice) >= k:
        chosen = lattice[_even_pick(len(lattice), k)]
    else:
        chosen = np.concatenate([lattice, rest[_even_pick(len(rest), k - len(lattice))]])
    return np.sort(chosen)


def sample_block(req):
    """Contiguous run of k snippets, or the proposals inside one random temporal window."""
    n = req.n_total
    k = req.resolve_k()
    rng = req.generator()
    if req.positions is None:
        start = int(rng.integers(0, n - k + 1))
        return np.arange(start, start + k)
    pos = np.asarray(req.positions, dtype=np.float64)
    lo_all, hi_all = pos.min(), pos.max()
    width = 1.0
    while True:
        # smallest window holding at least k candidates for some placement
        inside_best = 0
        for a in np.arange(lo_all, hi_all - width + 1.0 + 1e-9):
            inside = np.count_nonzero((pos[:, 0] >= a) & (pos[:, 1] <= a + width))
            inside_best = max(inside_best, inside)
            if inside_best >= k:
                break
        if inside_best >= k or width >= hi_all - lo_all:
            break
        width += 1.0
    starts = [a for a in np.arange(lo_all, hi_all - width + 1.0 + 1e-9)
              if np.count_nonzero((pos[:, 0] >= a) & (pos[:, 1] <= a + width)) >= k]
    a = starts[int(rng.integers(0, len(starts)))]
    inside = np.flatnonzero((pos[:, 0] >= a) & (pos[:, 1] <= a + width))
    chosen = rng.choice(inside, size=k, replace=False)
    return np.sort(chosen)


def sample_fps(req):
    """Greedy farthest-point selection; ties go to the lowest index."""
    x = np.asarray(req.embeddings, dtype=np.float64)
    k = req.resolve_k()
    if not np.all(np.isfinite(x)):
        raise SamplerError("fps: embeddings must be finite")
    start = req.fps_start
    if start is None:
        start = int(req.generator().integers(0, len(x)))
    chosen = [start]
    mind = np.sqrt(((x - x[start]) ** 2).sum(axis=1))
    mind[start] = -np.inf
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        d = np.sqrt(((x - x[nxt]) ** 2).sum(axis=1))
        mind = np.minimum(mind, d)
        mind[chosen] = -np.inf
    return np.sort(np.asarray(chosen))


def fps_order(embeddings, k, start=0):
    """Selection order of greedy farthest-point sampling (unsorted)."""
    x = np.asarray(embeddings, dtype=np.float64)
    chosen = [start]
    mind = np.sqrt(((x - x[start]) ** 2).sum(axis=1))
    mind[start] = -np.inf
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, np.sqrt(((x - x[nxt]) ** 2).sum(axis=1)))
        mind[chosen] = -np.inf
    return chosen


def cosine_kernel(embeddings, ridge=KDPP_RIDGE):
    x = np.asarray(embeddings, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise SamplerError("kdpp: embeddings must be finite")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    xn = x / np.where(norms > 0, norms, 1.0)
    return xn @ xn.T + ridge * np.eye(len(x))


def elementary_symmetric(lam, k):
    """E[l, m] = e_l(lam[:m]) for l <= k."""
    n = len(lam)
    e = np.zeros((k + 1, n + 1))
    e[0, :] = 1.0
    for ell in range(1, k + 1):
        for m in range(1, n + 1):
            e[ell, m] = e[ell, m - 1] + lam[m - 1] * e[ell - 1, m - 1]
    return e


def sample_kdpp_kernel(kernel, k, rng):
    """Exact k-DPP draw from a symmetric PSD likelihood kernel."""
    kernel = np.asarray(kernel, dtype=np.float64)
    n = len(kernel)
    if not 1 <= k <= n:
        raise SamplerError(f"kdpp: need 1 <= k <= n, got k={k}, n={n}")
    try:
        lam, vecs = np.linalg.eigh(kernel)
    except np.linalg.LinAlgError as exc:
        raise SamplerError(f"kdpp: eigendecomposition failed: {exc}") from None
    lam = np.clip(lam, 0.0, None)
    if np.count_nonzero(lam > 1e-12 * max(lam.max(), 1e-300)) < k:
        raise SamplerError(f"kdpp: kernel rank below k={k}")
    # k-DPP probabilities are invariant to scaling the kernel
    lam = lam / lam.max()
    e = elementary_symmetric(lam, k)
    picked = []
    remaining = k
    for m in range(n, 0, -1):
        if remaining == 0:
            break
        if m == remaining:
            marg = 1.0
        else:
            marg = lam[m - 1] * e[remaining - 1, m - 1] / e[remaining, m]
        if rng.random() < marg:
            picked.append(m - 1)
            remaining -= 1
    v = vecs[:, picked]
    items = []
    while v.shape[1] > 0:
        p = (v ** 2).sum(axis=1)
        p[items] = 0.0
        p = p / p.sum()
        i = int(rng.choice(n, p=p))
        items.append(i)
        j = int(np.argmax(np.abs(v[i])))
        col = v[:, j].copy()
        v = v - np.outer(col / col[i], v[i])
        v = np.delete(v, j, axis=1)
        if v.shape[1]:
            v, _ = np.linalg.qr(v)
    return np.sort(np.asarray(items))


def sample_kdpp(req):
    k = req.resolve_k()
    return sample_kdpp_kernel(cosine_kernel(req.embeddings), k, req.generator())


def kdpp_marginals_bruteforce(kernel, k):
    """P(S) = det(L_S) / sum det(L_S') over all size-k subsets (n <= 12)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    n = len(kernel)
    if n > 12:
        raise SamplerError(f"brute-force k-DPP limited to n <= 12, got {n}")
    subsets = list(itertools.combinations(range(n), k))
    dets = np.array([np.linalg.det(kernel[np.ix_(s, s)]) for s in subsets])
    return dict(zip(subsets, dets / dets.sum()))


def balanced_quotas(k, available):
    """Per-bin counts: round-half-up k/nbins, trim or top up, then redistribute shortfalls round-robin.

    Trimming takes from the bin with most candidates (ties: highest bin index);
    topping up adds to the bin with most spare candidates (ties: lowest index).
    """
    available = list(available)
    nb = len(available)
    if sum(available) < k:
        raise SamplerError(f"only {sum(available)} labelled candidates for k={k}")
    quota = [round_half_up(k / nb)] * nb
    while sum(quota) > k:
        b = max(range(nb), key=lambda i: (available[i], i))
        quota[b] -= 1
    while sum(quota) < k:
        b = max(range(nb), key=lambda i: (available[i] - quota[i], -i))
        quota[b] += 1
    take = [min(q, a) for q, a in zip(quota, available)]
    deficit = k - sum(take)
    b = 0
    while deficit > 0:
        if take[b] < available[b]:
            take[b] += 1
            deficit -= 1
        b = (b + 1) % nb
    return take


def _bin_of(values):
    values = np.asarray(values, dtype=np.float64)
    return np.digitize(values, BALANCE_BINS, right=False)


def _balanced(req, values):
    k = req.resolve_k()
    bins = _bin_of(values)
    members = [np.flatnonzero(bins == b) for b in range(len(BALANCE_BINS) + 1)]
    if all(len(m) == 0 for m in members):
        raise SamplerError("all label bins are empty")
    take = balanced_quotas(k, [len(m) for m in members])
    rng = req.generator()
    chosen = [rng.choice(m, size=t, replace=False) for m, t in zip(members, take) if t]
    return np.sort(np.concatenate(chosen))


def sample_iou_balanced(req):
    """Equal share per max-tIoU bin [0, .3), [.3, .7), [.7, 1]."""
    return _balanced(req, req.labels)


def sample_scale_balanced(req):
    """Equal share per relative-duration bin [0, .3), [.3, .7), [.7, 1]."""
    return _balanced(req, req.labels)
