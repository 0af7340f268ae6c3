import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etad_lab import autodiff as ad
from etad_lab.autodiff import Tensor, grad_check
from etad_lab.detector import (DetectorConfig, DetectorOutput, PemOutput, StageOutput, assign_labels,
                               balanced_bce, compute_loss, init_detector, interpolation_matrix, refine,
                               roi_align, snippet_labels)
from etad_lab.tadeval import enumerate_proposals


def tiny_config(**kw):
    base = dict(feat_dim=16, head_widths=(8,))
    base.update(kw)
    return DetectorConfig(**base)


def zero_all(det):
    for p in det.parameters():
        if not p.name.startswith("gn"):
            p.data[:] = 0.0


def log_sig(x):
    return -math.log1p(math.exp(-x))


def test_config_rejects_feat_dim_not_multiple_of_groups():
    assert any("multiple of 16" in e for e in DetectorConfig(feat_dim=24).validate())
    with pytest.raises(ValueError, match="multiple of 16"):
        init_detector(DetectorConfig(feat_dim=20), 0)


def test_enhance_zero_in_zero_weights_out():
    det = init_detector(tiny_config(), 0)
    zero_all(det)
    with ad.no_tape():
        out = det.enhance(np.zeros((10, 16))).data
    assert np.all(out == 0.0)


@pytest.mark.parametrize("n", [1, 5, 17])
@pytest.mark.parametrize("cell", ["mingru", "lstm"])
def test_enhance_preserves_shape(n, cell):
    det = init_detector(tiny_config(cell=cell), 1)
    with ad.no_tape():
        assert det.enhance(np.random.default_rng(n).normal(size=(n, 16))).shape == (n, 16)
    with pytest.raises(ValueError, match="expected"):
        det.enhance(np.zeros((4, 32)))


@pytest.mark.parametrize("cell", ["mingru", "lstm"])
def test_enhance_gradient_matches_finite_differences(cell):
    det = init_detector(tiny_config(cell=cell), 2)
    rng = np.random.default_rng(3)
    w = rng.normal(size=(6, 16))
    res = grad_check(lambda x: ad.tsum(det.enhance(x) * w), rng.normal(size=(6, 16)))
    assert res.max_error <= 1e-6


@pytest.mark.parametrize("direction", ["fwd", "bwd"])
def test_fused_recurrence_matches_stepwise_route(direction):
    det = init_detector(tiny_config(), 5)
    for name in ("uz", "uh"):
        det.params[f"rnn.{direction}.{name}"].data[:] = np.random.default_rng(6).normal(size=(16, 16)) * 0.3
    x = np.random.default_rng(7).normal(size=(11, 16))
    w = np.random.default_rng(8).normal(size=(11, 16))
    results = []
    for route in (det._mingru, det._mingru_stepwise):
        for p in det.parameters():
            p.zero_grad()
        leaf = Tensor(x, requires_grad=True)
        with ad.TapeGraph("train"):
            out = route(leaf, direction)
            ad.backward(ad.tsum(out * w), 1.0)
        grads = {k: p.grad.copy() for k, p in det.params.items() if p.grad is not None}
        results.append((out.data, leaf.grad.copy(), grads))
    (fa, ga, pa), (fb, gb, pb) = results
    assert np.array_equal(fa, fb)
    np.testing.assert_allclose(ga, gb, rtol=1e-12, atol=1e-14)
    assert set(pa) == set(pb) and len(pa) == 6
    for k in pa:
        np.testing.assert_allclose(pa[k], pb[k], rtol=1e-12, atol=1e-14)


def test_boundary_head_zero_logits_give_half():
    det = init_detector(tiny_config(), 0)
    det.params["bd.fc.w"].data[:] = 0.0
    with ad.no_tape():
        start, end = det.boundary_head(det.enhance(np.random.default_rng(0).normal(size=(9, 16))))
    assert start.shape == end.shape == (9,)
    assert np.all(start.data == 0.5) and np.all(end.data == 0.5)


def test_boundary_probs_strictly_inside_unit_interval():
    det = init_detector(tiny_config(), 4)
    start, end, _ = det.boundary_probs(np.random.default_rng(1).normal(size=(12, 16)))
    assert np.all((start > 0) & (start < 1)) and np.all((end > 0) & (end < 1))


def test_roi_align_constant_sequence():
    feats = Tensor(np.full((10, 16), 2.5))
    with ad.no_tape():
        outs = roi_align(feats, np.array([[1.0, 4.0], [0.0, 10.0], [7.2, 9.9]]), tiny_config())
    assert [o.shape for o in outs] == [(3, 8 * 16), (3, 8 * 16), (3, 32 * 16)]
    for o in outs:
        assert np.allclose(o.data, 2.5, rtol=0, atol=1e-14)


def test_roi_align_ramp_full_span():
    n, c = 8, 16
    t = np.arange(n, dtype=float)
    feats = 0.5 * t[:, None] + np.arange(c)[None, :]
    with ad.no_tape():
        _, _, ext = roi_align(Tensor(feats), np.array([[0.0, float(n)]]), tiny_config())
    got = ext.data.reshape(32, c)
    # extended region [-0.25 n, 1.25 n] split into 32 cells, sampled at the cell centres
    width = 1.5 * n / 32
    for j in range(32):
        pos = min(max(-0.25 * n + (j + 0.5) * width, 0.0), n - 1.0)
        np.testing.assert_allclose(got[j], 0.5 * pos + np.arange(c), rtol=0, atol=1e-12)


def test_roi_align_rejects_degenerate():
    with pytest.raises(ValueError, match="start < end"):
        roi_align(Tensor(np.zeros((4, 16))), np.array([[2.0, 2.0]]), tiny_config())


def test_interpolation_matrix_rows_sum_to_one():
    m = interpolation_matrix(np.array([-3.0, 0.0, 2.25, 6.99, 9.0]), 7).toarray()
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    assert m[2, 2] == 0.75 and m[2, 3] == 0.25
    assert m[0, 0] == 1.0 and m[4, 6] == 1.0


def test_pem_zero_weights_give_neutral_outputs():
    cfg = tiny_config()
    det = init_detector(cfg, 0)
    zero_all(det)
    with ad.no_tape():
        feats = roi_align(Tensor(np.zeros((6, 16))), np.array([[0.0, 3.0], [2.0, 5.0]]), cfg)
        pem = det.pem_forward(0, feats)
    assert np.all(pem.offsets() == 0.0)
    assert np.all(pem.iou_cls == 0.5) and np.all(pem.iou_reg.data == 0.5)
    assert np.all(pem.startness == 0.5) and np.all(pem.endness == 0.5)


def test_pem_permutation_equivariant():
    cfg = tiny_config()
    det = init_detector(cfg, 5)
    feats = np.random.default_rng(0).normal(size=(12, 16))
    props = np.array([[0.0, 3.0], [2.0, 9.5], [4.0, 6.0], [1.0, 12.0]])
    perm = np.array([2, 0, 3, 1])
    with ad.no_tape():
        enh = det.enhance(feats)
        a = det.pem_forward(1, roi_align(enh, props, cfg))
        b = det.pem_forward(1, roi_align(enh, props[perm], cfg))
    np.testing.assert_allclose(a.offsets()[perm], b.offsets(), rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.iou_reg.data[perm], b.iou_reg.data, rtol=0, atol=1e-12)


def test_pem_head_parameter_gradient():
    cfg = tiny_config()
    det = init_detector(cfg, 6)
    with ad.no_tape():
        feats = roi_align(det.enhance(np.random.default_rng(1).normal(size=(10, 16))),
                          np.array([[1.0, 4.0], [3.0, 9.0]]), cfg)
    feats = tuple(f.data for f in feats)
    name = "pem1.iou.fc0.w"

    def fn(w):
        det.params[name] = w
        pem = det.pem_forward(1, feats)
        return ad.tsum(pem.iou_reg * pem.iou_reg) + ad.tsum(ad.sigmoid(pem.iou_cls_logit))

    original = det.params[name]
    try:
        assert grad_check(fn, original.data).max_error <= 1e-6
    finally:
        det.params[name] = original


def test_refine_identity_and_worked_example():
    props = np.array([[4.0, 6.0], [0.5, 9.0]])
    assert np.array_equal(refine(props, np.zeros((2, 4)), 10), props)
    got = refine(np.array([[4.0, 6.0]]), np.array([[0.0, 0.0, 0.0, math.log(2.0)]]), 10)
    np.testing.assert_allclose(got, [[3.5, 6.5]], rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 9), st.floats(0.01, 5), st.lists(st.floats(-20, 20), min_size=4, max_size=4))
def test_refine_stays_in_range_and_ordered(start, dur, offs):
    out = refine(np.array([[start, start + dur]]), np.array([offs]), 10)
    assert 0.0 <= out[0, 0] < out[0, 1] <= 10.0


def test_assign_labels_worked_cases():
    cfg = DetectorConfig()
    gt = np.array([[10.0, 20.0]])
    props = np.array([[10.0, 20.0], [30.0, 40.0], [12.0, 22.0]])
    for stage in range(3):
        lab = assign_labels(gt, props, stage, cfg)
        assert lab.iou_target[0] == 1.0 and lab.positive[0]
        assert lab.iou_target[1] == 0.0 and not lab.positive[1]
        assert not lab.positive[2]
    np.testing.assert_allclose(lab.iou_target[2], 8 / 12, rtol=0, atol=1e-15)
    assert np.array_equal(lab.offsets[0], np.zeros(4))


def test_assign_labels_without_gt_is_all_negative():
    lab = assign_labels(np.zeros((0, 2)), np.array([[1.0, 2.0]]), 0, DetectorConfig())
    assert not lab.positive.any() and lab.iou_target[0] == 0.0


def test_snippet_labels_half_width():
    lab = snippet_labels(np.array([[1.0, 3.0]]), 6)
    assert lab.start.tolist() == [1, 1, 1, 0, 0, 0]
    assert lab.end.tolist() == [0, 0, 1, 1, 1, 0]


def _output(start_logit, end_logit, proposals, **pem):
    fields = {k: Tensor(np.atleast_1d(np.asarray(v, dtype=float))) for k, v in pem.items()}
    stage = StageOutput(np.asarray(proposals, dtype=float), PemOutput(**fields), None)
    return DetectorOutput(None, Tensor(np.asarray(start_logit, float)), Tensor(np.asarray(end_logit, float)), [stage])


def test_loss_single_proposal_hand_evaluation():
    cfg = DetectorConfig(stages=1, positive_iou=(0.7,))
    a, b = [0.3, -1.2, 2.0, 0.7], [-0.4, 0.1, 1.1, -2.2]
    out = _output(a, b, [[1.0, 3.0]], start_offset=0.2, end_offset=-0.5, center_offset=1.5, logw_offset=0.0,
                  iou_cls_logit=0.4, iou_reg=0.6, startness_logit=1.0, endness_logit=-2.0)
    with ad.no_tape():
        loss = compute_loss(out, np.array([[1.0, 3.0]]), cfg).to_dict()
    # snippet labels: start [1,1,1,0], end [0,0,1,1] (radius 1.5 around 1 and 3)
    bd_s = -(log_sig(a[0]) + log_sig(a[1]) + log_sig(a[2])) / 6 - log_sig(-a[3]) / 2
    bd_e = -(log_sig(b[2]) + log_sig(b[3])) / 4 - (log_sig(-b[0]) + log_sig(-b[1])) / 4
    bd_p = -log_sig(1.0) / 2 - log_sig(-2.0) / 2
    iou = -log_sig(0.4) / 2 + (0.6 - 1.0) ** 2
    secw = (0.5 * 0.2 ** 2 + 0.5 * 0.5 ** 2 + (1.5 - 0.5) + 0.0) / 4
    assert loss["l_bd_s"] == pytest.approx(bd_s + bd_e, abs=1e-12)
    assert loss["l_bd_p1"] == pytest.approx(bd_p, abs=1e-12)
    assert loss["l_iou1"] == pytest.approx(iou, abs=1e-12)
    assert loss["l_secw1"] == pytest.approx(secw, abs=1e-12)
    assert loss["total"] == pytest.approx(bd_s + bd_e + bd_p + iou + 10 * secw, abs=1e-12)


def test_loss_perfect_predictions_vanish():
    cfg = DetectorConfig(stages=1, positive_iou=(0.7,))
    big = 60.0
    out = _output([big, big, big, -big], [-big, -big, big, big], [[1.0, 3.0], [0.0, 0.5]],
                  start_offset=[0.0, 2.0], end_offset=[0.0, 5.0], center_offset=[0.0, 3.0],
                  logw_offset=[0.0, 1.0], iou_cls_logit=[big, -big], iou_reg=[1.0, 0.0],
                  startness_logit=[big, big], endness_logit=[big, -big])
    with ad.no_tape():
        assert compute_loss(out, np.array([[1.0, 3.0]]), cfg).to_dict()["total"] < 1e-20


def test_loss_without_positives_has_zero_secw():
    cfg = DetectorConfig(stages=1, positive_iou=(0.7,))
    out = _output([0.0] * 6, [0.0] * 6, [[0.0, 1.0]], start_offset=3.0, end_offset=3.0, center_offset=3.0,
                  logw_offset=3.0, iou_cls_logit=0.0, iou_reg=0.5, startness_logit=0.0, endness_logit=0.0)
    with ad.no_tape():
        d = compute_loss(out, np.array([[3.0, 5.0]]), cfg).to_dict()
    assert d["l_secw1"] == 0.0
    assert all(v >= 0 and math.isfinite(v) for v in d.values())


def test_balanced_bce_missing_side_contributes_zero():
    with ad.no_tape():
        only_pos = balanced_bce(Tensor(np.array([0.0, 0.0])), np.ones(2)).data
    assert only_pos == pytest.approx(-log_sig(0.0) / 2)


def _features_and_props(seed, n=16):
    rng = np.random.default_rng(seed)
    props = enumerate_proposals(n)[rng.choice(n * (n - 1) // 2, size=12, replace=False)].astype(float)
    return rng.normal(size=(n, 16)), props, np.array([[2.0, 7.0], [9.0, 14.0]])


def _total(det, feats, props, gt):
    with ad.no_tape():
        return float(compute_loss(det.run(feats, props), gt, det.config).total.data)


def test_loss_invariant_to_proposal_order():
    det = init_detector(tiny_config(), 7)
    feats, props, gt = _features_and_props(0)
    perm = np.random.default_rng(1).permutation(len(props))
    assert _total(det, feats, props, gt) == pytest.approx(_total(det, feats, props[perm], gt), abs=1e-12)


def test_sampling_commutes_with_loss_restriction():
    det = init_detector(tiny_config(), 8)
    feats, props, gt = _features_and_props(2)
    subset = np.array([0, 3, 4, 9])
    with ad.no_tape():
        full = det.run(feats, props)
        for stage in full.stages:
            stage.proposals = stage.proposals[subset]
            pem = stage.pem
            for name in vars(pem):
                setattr(pem, name, getattr(pem, name)[subset])
        restricted = float(compute_loss(full, gt, det.config).total.data)
    assert restricted == pytest.approx(_total(det, feats, props[subset], gt), abs=1e-12)


def test_full_detector_gradient_wrt_features():
    # zero the offset outputs so refined proposals do not move with the features;
    # refinement is detached between stages by design
    cfg = tiny_config()
    det = init_detector(cfg, 9)
    for stage in range(cfg.stages):
        det.params[f"pem{stage}.edge.fc1.w"].data[:, 0] = 0.0
        det.params[f"pem{stage}.cw.fc1.w"].data[:] = 0.0
    feats, props, gt = _features_and_props(3)
    res = grad_check(lambda x: compute_loss(det.run(x, props), gt, cfg).total, feats)
    assert res.max_error <= 1e-5


def test_run_chains_refined_proposals():
    det = init_detector(tiny_config(), 10)
    feats, props, _ = _features_and_props(4)
    with ad.no_tape():
        out = det.run(feats, props)
    assert len(out.stages) == 3
    for prev, nxt in zip(out.stages, out.stages[1:]):
        assert np.array_equal(prev.refined, nxt.proposals)
    boxes, scores = det.cascade_inference(out.enhanced, props)
    np.testing.assert_allclose(boxes, np.mean([s.refined for s in out.stages], axis=0), atol=1e-12)
    want = np.mean([s.pem.iou_cls * s.pem.iou_reg.data for s in out.stages], axis=0)
    np.testing.assert_allclose(scores, want, atol=1e-12)


def test_param_count_and_independent_stages():
    cfg = tiny_config()
    det = init_detector(cfg, 0)
    assert not np.array_equal(det.params["pem0.iou.fc0.w"].data, det.params["pem1.iou.fc0.w"].data)
    c = 16
    rnn = 2 * 2 * (2 * c * c + c)
    enh = 2 * (3 * c * c + c + 2 * c)
    bd = 3 * c * c + c + 2 * c + 2
    heads = (8 * c * 8 + 8 + 8 * 2 + 2) + 2 * (32 * c * 8 + 8 + 8 * 2 + 2)
    assert det.param_count() == rnn + enh + bd + 3 * heads


def test_fused_heads_match_roi_align_route():
    cfg = tiny_config(head_widths=(8, 4))
    det = init_detector(cfg, 11)
    rng = np.random.default_rng(12)
    enhanced = rng.normal(size=(14, 16))
    props = np.array([[0.0, 3.0], [2.5, 13.0], [-0.0, 14.0], [6.0, 6.5]])
    seeds = rng.normal(size=(3, 4))
    grads = []
    for fused in (False, True):
        x = Tensor(enhanced, requires_grad=True)
        for p in det.parameters():
            p.zero_grad()
        with ad.TapeGraph("train"):
            pem = (det.pem_forward_fused(0, x, props) if fused
                   else det.pem_forward(0, roi_align(x, props, cfg)))
            outs = [pem.start_offset, pem.iou_reg, pem.endness_logit]
            loss = ad.tsum(ad.concat([ad.reshape(o, (1, 4)) for o in outs], axis=0) * seeds)
            ad.backward(loss, 1.0)
        grads.append((pem.offsets(), pem.iou_reg.data, x.grad.copy(),
                      det.params["pem0.edge.fc0.w"].grad.copy(), det.params["pem0.iou.fc0.w"].grad.copy()))
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
