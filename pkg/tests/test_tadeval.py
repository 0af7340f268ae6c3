import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etad_lab.samplers import round_half_up
from etad_lab.tadeval import (DEFAULT_THRESHOLDS, Detection, InferenceConfig, average_precision, compute_map,
                              enumerate_proposals, fuse_scores, infer, select_boundaries, soft_nms, tiou,
                              tiou_matrix)
from toys import toy_models, toy_video


# --- independent reference implementations --------------------------------


def ref_tiou(a, b):
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def ref_soft_nms(dets, sigma, floor, top_k):
    pool = [[d.score, d.start, d.end, i] for i, d in enumerate(dets) if d.score >= floor]
    out = []
    while pool and len(out) < top_k:
        best = pool[0]
        for item in pool[1:]:
            if (item[0], -item[1], -item[3]) > (best[0], -best[1], -best[3]):
                best = item
        pool.remove(best)
        out.append((best[3], best[0]))
        survivors = []
        for item in pool:
            o = ref_tiou((best[1], best[2]), (item[1], item[2]))
            if sigma > 0:
                item[0] = item[0] * math.exp(-(o * o) / sigma)
            elif o > 0:
                item[0] = 0.0
            if item[0] >= floor:
                survivors.append(item)
        pool = survivors
    return out


def ref_hard_nms(dets):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].start, i))
    kept = []
    for i in order:
        if all(ref_tiou((dets[i].start, dets[i].end), (dets[j].start, dets[j].end)) == 0 for j in kept):
            kept.append(i)
    return kept


def ref_ap(dets, gt, thr):
    n_gt = sum(len(v) for v in gt.values())
    order = sorted(dets, key=lambda d: (-d.score, d.video_id, d.start, d.end))
    used = {k: [False] * len(v) for k, v in gt.items()}
    hits = []
    for d in order:
        best, best_j = -1.0, None
        for j, g in enumerate(gt.get(d.video_id, [])):
            if used[d.video_id][j]:
                continue
            o = ref_tiou((d.start, d.end), g)
            if o > best:
                best, best_j = o, j
        if best_j is not None and best >= thr:
            used[d.video_id][best_j] = True
            hits.append(1)
        else:
            hits.append(0)
    precision, recall, tp = [], [], 0
    for i, h in enumerate(hits, start=1):
        tp += h
        precision.append(tp / i)
        recall.append(tp / n_gt)
    ap, prev_r = 0.0, 0.0
    for i in range(len(recall)):
        if recall[i] != prev_r:
            ap += (recall[i] - prev_r) * max(precision[i:])
            prev_r = recall[i]
    return ap


def random_instance(rng):
    n_det = int(rng.integers(0, 6))
    n_gt = int(rng.integers(1, 4))
    videos = ["a", "b"]

    def seg():
        s = float(rng.integers(0, 20))
        return s, s + float(rng.integers(1, 8))

    dets = []
    for _ in range(n_det):
        s, e = seg()
        # coarse scores make ties common
        dets.append(Detection(videos[int(rng.integers(0, 2))], s, e, float(rng.integers(1, 5)) / 4))
    gt = {v: [] for v in videos}
    for _ in range(n_gt):
        gt[videos[int(rng.integers(0, 2))]].append(seg())
    return dets, gt


# --- geometry --------------------------------------------------------------


def test_enumeration_counts_and_order():
    assert len(enumerate_proposals(128)) == 8128
    assert enumerate_proposals(2).tolist() == [[0.0, 1.0]]
    p8 = enumerate_proposals(8)
    assert len(p8) == 28 and round_half_up(0.06 * 28) == 2
    assert p8[:3].tolist() == [[0, 1], [0, 2], [0, 3]]
    with pytest.raises(ValueError, match="at least 2"):
        enumerate_proposals(1)
    for t in range(2, 257):
        assert len(enumerate_proposals(t)) == t * (t - 1) // 2


def test_tiou_examples():
    assert tiou((0, 2), (0, 2)) == 1.0
    assert tiou((0, 2), (3, 4)) == 0.0
    assert tiou((0, 2), (2, 4)) == 0.0
    assert tiou((0, 2), (1, 3)) == pytest.approx(1 / 3)


segments = st.tuples(st.floats(0, 50), st.floats(0.01, 20)).map(lambda t: (t[0], t[0] + t[1]))


@settings(max_examples=200, deadline=None)
@given(segments, segments)
def test_tiou_symmetric_bounded(a, b):
    v = tiou(a, b)
    assert v == tiou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b) or math.isclose(v, 1.0)
    assert tiou_matrix([a], [b])[0, 0] == pytest.approx(v, abs=1e-15)


def test_tiou_matrix_empty():
    assert tiou_matrix(np.zeros((0, 2)), [[0, 1]]).shape == (0, 1)


# --- boundary selection and fusion -----------------------------------------


def test_select_boundaries_single_peaks():
    sp = np.full(12, 0.1)
    ep = np.full(12, 0.1)
    sp[5], ep[9] = 0.9, 0.8
    assert (5, 9) in {tuple(int(v) for v in c) for c in select_boundaries(sp, ep)}


def test_select_boundaries_increasing_only_last():
    rising = np.array([0.01, 0.02, 0.04, 0.08, 0.16, 0.5])
    flat = np.full(6, 0.3)
    cands = select_boundaries(flat, rising)
    # only index 5 is an end candidate: it is the sole value above half the maximum
    # and the only strict local maximum
    assert {tuple(int(v) for v in c) for c in cands} == {(s, 5) for s in range(5)}
    assert len(select_boundaries(rising, flat)) == 0


def test_select_boundaries_uniform_gives_all_pairs():
    u = np.full(10, 0.4)
    assert len(select_boundaries(u, u)) == 45


def test_fuse_scores():
    assert fuse_scores(1, 1, 1) == 1
    assert fuse_scores(0, 0.3, 0.7) == 0
    assert fuse_scores(0.5, 0.5, 0.5) == 0.125


# --- soft-NMS ---------------------------------------------------------------


def test_soft_nms_disjoint_unchanged():
    out = soft_nms([Detection("v", 0, 2, 0.9), Detection("v", 3, 5, 0.6)])
    assert [(d.start, d.score) for d in out] == [(0, 0.9), (3, 0.6)]


def test_soft_nms_identical_decay_value():
    out = soft_nms([Detection("v", 0, 2, 0.9), Detection("v", 0, 2, 0.8)], sigma=0.4)
    assert out[1].score == pytest.approx(0.8 * math.exp(-1 / 0.4), abs=1e-15)
    assert round(out[1].score, 4) == 0.0657


def test_soft_nms_tie_break():
    dets = [Detection("v", 4, 6, 0.5), Detection("v", 1, 3, 0.5), Detection("v", 1, 3, 0.5)]
    out = soft_nms(dets, sigma=0.4)
    assert (out[0].start, out[0].end) == (1, 3)
    assert ref_soft_nms(dets, 0.4, 1e-4, 100)[0][0] == 1


def test_soft_nms_small_sigma_is_hard_nms():
    dets = [Detection("v", 0, 4, 0.9), Detection("v", 3, 8, 0.8), Detection("v", 9, 12, 0.7)]
    want = [(dets[i].start, dets[i].end) for i in ref_hard_nms(dets)]
    for sigma in (0.0, 1e-12):
        out = soft_nms(dets, sigma=sigma)
        assert [(d.start, d.end) for d in out] == want


def test_soft_nms_matches_reference_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        dets, _ = random_instance(rng)
        for sigma in (0.4, 0.1, 0.0):
            got = soft_nms(dets, sigma=sigma, score_floor=1e-4, top_k=4)
            want = ref_soft_nms(dets, sigma, 1e-4, 4)
            assert len(got) == len(want)
            for d, (i, score) in zip(got, want):
                assert (d.start, d.end, d.video_id) == (dets[i].start, dets[i].end, dets[i].video_id)
                assert abs(d.score - score) <= 1e-12


# --- mAP --------------------------------------------------------------------


def test_map_perfect_and_empty():
    gt = {"a": [[0, 10], [20, 30]], "b": [[5, 9]]}
    perfect = {v: [Detection(v, s, e, 1.0) for s, e in segs] for v, segs in gt.items()}
    res = compute_map(perfect, gt)
    assert res.ap == (1.0,) * 10 and res.average == 1.0
    assert compute_map({}, gt).average == 0.0
    with pytest.raises(ValueError, match="undefined"):
        compute_map({}, {"a": []})


def test_map_hand_pr_table():
    gt = {"v": [[0, 10], [20, 30]]}
    dets = {"v": [Detection("v", 0, 10, 0.9), Detection("v", 40, 50, 0.8), Detection("v", 20, 30, 0.7)]}
    # ranks: TP (P=1, R=.5), FP (P=1/2, R=.5), TP (P=2/3, R=1); envelope gives .5*1 + .5*2/3
    res = compute_map(dets, gt, (0.5, 0.9))
    assert res.ap == pytest.approx((5 / 6, 5 / 6), abs=1e-15)


def test_map_each_gt_matched_once():
    gt = {"v": [[0, 10]]}
    dets = {"v": [Detection("v", 0, 10, 0.9), Detection("v", 0, 10, 0.8)]}
    assert compute_map(dets, gt, (0.5,)).ap == (1.0,)
    dets = {"v": [Detection("v", 0, 10, 0.8), Detection("v", 30, 40, 0.9)]}
    assert compute_map(dets, gt, (0.5,)).ap == (0.5,)


def test_map_matches_reference_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(200):
        dets, gt = random_instance(rng)
        gt_arr = {k: np.array(v, dtype=float).reshape(-1, 2) for k, v in gt.items()}
        for thr in DEFAULT_THRESHOLDS:
            got = average_precision(dets, gt_arr, thr)
            want = ref_ap(dets, gt, thr) if dets else 0.0
            assert abs(got - want) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_map_invariant_to_input_order(seed):
    rng = np.random.default_rng(seed)
    dets, gt = random_instance(rng)
    perm = rng.permutation(len(dets))
    a = {v: [d for d in dets if d.video_id == v] for v in gt}
    b = {v: [dets[i] for i in perm if dets[i].video_id == v] for v in gt}
    assert compute_map(a, gt).ap == compute_map(b, gt).ap


def test_eval_result_serialization():
    res = compute_map({"v": [Detection("v", 0, 10, 0.9)]}, {"v": [[0, 10]]}, (0.5, 0.7))
    d = res.to_dict()
    assert d == {"thresholds": [0.5, 0.7], "ap": [1.0, 1.0], "average_map": 1.0}
    assert len(res.csv_row()) == 3
    assert Detection("v", 1, 2, 0.5, {"p_s": 1}).to_dict()["components"] == {"p_s": 1.0}


# --- inference --------------------------------------------------------------


def test_infer_contract_and_identity_aps():
    enc, det = toy_models(seed=2)
    video = toy_video(seed=2)
    base = infer(video, enc, det, InferenceConfig())
    again = infer(video, enc, det, InferenceConfig(aps_ratio=1.0))
    assert [d.to_dict() for d in base] == [d.to_dict() for d in again]
    assert base and all(0 <= d.start < d.end <= video.length for d in base)
    for d in base:
        assert d.components["p_s"] * d.components["p_e"] * d.components["p_iou"] >= d.score - 1e-15


def test_infer_with_sampled_candidates():
    enc, det = toy_models(seed=2)
    video = toy_video(seed=2)
    full = infer(video, enc, det, InferenceConfig(candidates="all", top_k=1000, score_floor=0.0))
    half = infer(video, enc, det, InferenceConfig(candidates="all", aps_ratio=0.5, top_k=1000, score_floor=0.0))
    assert len(full) == 120 and len(half) == 60


def test_inference_config_validation():
    assert InferenceConfig().validate() == []
    assert len(InferenceConfig(micro_batch=0, candidates="x", aps_ratio=0, sigma=-1, top_k=0).validate()) == 5
