"""Command-line harness: data generation, training, the APS/SGS ablations,
memory benchmark and evaluation.

Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, RunConfig
from .detector import init_detector
from .encoder import init_encoder
from .sgs import (ENCODER, METRIC_COLUMNS, OptimizerState, evaluate, naive_e2e_step, select_proposals,
                  sgs_step, stage1_sequential_encode, train)
from .synthdata import generate_dataset, load_dataset, save_dataset
from .tadeval import Detection, compute_map
from .nn import seeded_rng

EVAL_SCHEMA_KEYS = ("average_map", "ap", "thresholds")


# ---------------------------------------------------------------------------
# persistence


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows, columns=METRIC_COLUMNS):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def table_csv(rows, columns):
    return metrics_csv(rows, columns)


def checkpoint_dict(result, run):
    return {
        "config": run.to_dict(),
        "seed": run.seed,
        "epochs": len(result.metrics),
        "encoder": {k: v.data.tolist() for k, v in sorted(result.encoder.params.items())},
        "detector": {k: v.data.tolist() for k, v in sorted(result.detector.params.items())},
        "optimizer": {k: s.to_dict() for k, s in sorted(result.states.items())},
    }


def write_checkpoint(path, result, run):
    Path(path).write_text(json.dumps(checkpoint_dict(result, run), sort_keys=True))


def load_checkpoint(path):
    """(RunConfig, encoder, detector, optimizer states) from a checkpoint file."""
    raw = json.loads(Path(path).read_text())
    run = RunConfig.from_dict(raw["config"])
    encoder = init_encoder(run.encoder, run.seed)
    detector = init_detector(run.detector, run.seed)
    for model, key in ((encoder, "encoder"), (detector, "detector")):
        for name, values in raw[key].items():
            model.params[name].data[...] = np.asarray(values, dtype=np.float64)
    states = {k: OptimizerState.from_dict(v) for k, v in raw.get("optimizer", {}).items()}
    return run, encoder, detector, states


def _prepare_out(out, force, names):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise FileExistsError(f"{out}: {', '.join(clash)} already exist; pass --force to overwrite")
    return out


def _load_splits(run):
    index = Path(run.data_dir) / "index.json"
    if not index.exists():
        raise FileNotFoundError(f"dataset not found at {run.data_dir}; run gen-data first")
    splits, _ = load_dataset(run.data_dir)
    return splits


# ---------------------------------------------------------------------------
# experiments (also used by scripts and the acceptance suite)


def frozen_variant(run, ratio=None, seed=None):
    r = copy.deepcopy(run)
    r.sgs.gamma = 0.0
    r.sgs.naive_e2e = False
    if ratio is not None:
        r.aps.ratio = ratio
    if seed is not None:
        r.seed = seed
    return r


def ablate_aps(run, splits, ratios, seeds=None, progress=None):
    """One frozen-encoder run per (ratio, seed); rows sorted by ratio then seed."""
    seeds = [run.seed] if seeds is None else list(seeds)
    rows = []
    for ratio in sorted(ratios):
        for seed in seeds:
            r = frozen_variant(run, ratio, seed).check()
            result = train(splits, r)
            last = result.metrics[-1] if result.metrics else {}
            row = {
                "ratio": float(ratio), "seed": seed,
                "average_map": result.final_eval.average if result.final_eval else float("nan"),
                "detector_flops": sum(m["forward_flops_detector"] + m["backward_flops_detector"]
                                      for m in result.metrics),
                "peak_bytes_detector": last.get("peak_bytes_detector", 0),
                "wall_seconds": sum(m["wall_seconds"] for m in result.metrics),
            }
            rows.append(row)
            if progress:
                progress(row)
    return rows


def encoder_flops(metrics):
    fwd = sum(m["forward_flops_encoder"] for m in metrics)
    bwd = sum(m["backward_flops_encoder"] for m in metrics)
    return fwd, bwd


def ablate_sgs(run, splits, gammas, progress=None):
    """Naive baseline plus one SGS run per gamma; FLOP ratios are exact fractions of the naive ledger."""
    base = copy.deepcopy(run)
    base.sgs.naive_e2e = True
    base.check()
    naive = train(splits, base)
    nf, nb = encoder_flops(naive.metrics)
    naive_time = sum(m["wall_seconds"] for m in naive.metrics)
    rows = []
    for gamma in sorted(gammas, reverse=True):
        r = copy.deepcopy(run)
        r.sgs.gamma = gamma
        r.sgs.naive_e2e = False
        r.check()
        result = train(splits, r)
        f, b = encoder_flops(result.metrics)
        ratio = Fraction(f + b, nf + nb)
        row = {
            "gamma": float(gamma),
            "average_map": result.final_eval.average if result.final_eval else float("nan"),
            "flop_ratio_percent": float(100 * ratio),
            "forward_percent": float(Fraction(100 * f, nf)),
            "backward_percent": float(Fraction(100 * b, nf)),
            "time_ratio": sum(m["wall_seconds"] for m in result.metrics) / naive_time if naive_time else 0.0,
            "peak_bytes_encoder": max(m["peak_bytes_encoder"] for m in result.metrics),
            "naive_peak_bytes_encoder": max(m["peak_bytes_encoder"] for m in naive.metrics),
        }
        rows.append(row)
        if progress:
            progress(row)
    return rows


def bench_memory(run, video, ks):
    """Encoder-phase peak retained bytes of one SGS iteration (gamma=1) per K, against the naive step."""
    encoder = init_encoder(run.encoder, run.seed)
    detector = init_detector(run.detector, run.seed)
    rng = seeded_rng(run.seed, "bench")
    feats = stage1_sequential_encode(encoder, video, video.length)
    props = select_proposals(feats, video.segments, run.aps, rng)
    acct = ad.Accountant()
    naive_e2e_step(encoder, detector, video, props, acct)
    naive_peak = acct.snapshot_memory(ENCODER).peak_live_bytes[ENCODER]
    rows = []
    for k in sorted(ks):
        cfg = copy.deepcopy(run.sgs)
        cfg.gamma = 1.0
        cfg.micro_batch = k
        acct = ad.Accountant()
        sgs_step(encoder, detector, video, props, cfg, seeded_rng(run.seed, "bench", k), acct)
        peak = acct.snapshot_memory(ENCODER).peak_live_bytes[ENCODER]
        rows.append({"k": k, "encoder_peak_bytes": peak, "naive_peak_bytes": naive_peak,
                     "ratio": peak / naive_peak})
    return rows


def oracle_detections(videos):
    return {v.video_id: [Detection(v.video_id, s, e, 1.0, {"p_s": 1.0, "p_e": 1.0, "p_iou": 1.0})
                         for s, e, _ in v.annotations] for v in videos}


# ---------------------------------------------------------------------------
# commands


def _apply_overrides(run, args):
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
        run.data.seed = args.seed
    if getattr(args, "gamma", None) is not None:
        run.sgs.gamma = args.gamma
    if getattr(args, "aps_ratio", None) is not None:
        run.aps.ratio = args.aps_ratio
    if getattr(args, "sampler", None) is not None:
        run.aps.strategy = args.sampler
    if getattr(args, "snippet_sampler", None) is not None:
        run.sgs.snippet_sampler = args.snippet_sampler
    if getattr(args, "micro_batch", None) is not None:
        run.sgs.micro_batch = args.micro_batch
    if getattr(args, "naive_e2e", False):
        run.sgs.naive_e2e = True
    if getattr(args, "data", None) is not None:
        run.data_dir = args.data
    if getattr(args, "out", None) is not None:
        run.out_dir = args.out
    return run


def _run_config(args):
    run = RunConfig.load(args.config) if args.config else RunConfig()
    return _apply_overrides(run, args).check()


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError([f"could not parse number list {text!r}"]) from None


def cmd_gen_data(args):
    run = _run_config(args)
    target = Path(args.out or run.data_dir)
    splits = generate_dataset(run.data)
    digest = save_dataset(splits, run.data, target, force=args.force)
    counts = ", ".join(f"{k}={len(v)}" for k, v in sorted(splits.items()))
    actions = sum(len(v.annotations) for vs in splits.values() for v in vs)
    print(f"wrote {target}: {counts}, {actions} actions, index sha256 {digest}")


def cmd_train(args):
    run = _run_config(args)
    out = _prepare_out(run.out_dir, args.force, ["metrics.csv", "checkpoint.json"])
    splits = _load_splits(run)

    def show(row):
        print(f"epoch {row['epoch']}: loss {row['loss_total']:.4f} mAP {row['average_map']:.4f}", flush=True)

    result = train(splits, run, progress=show)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    write_checkpoint(out / "checkpoint.json", result, run)
    (out / "config.json").write_text(run.to_json())
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.json'}")


def cmd_ablate_aps(args):
    run = _run_config(args)
    ratios = _floats(args.ratios)
    if any(not 0 < r <= 1 for r in ratios):
        raise ConfigError(["every APS ratio must lie in (0, 1]"])
    seeds = [int(s) for s in _floats(args.seeds)] if args.seeds else None
    out = _prepare_out(run.out_dir, args.force, ["ablate_aps.csv"])
    splits = _load_splits(run)
    rows = ablate_aps(run, splits, ratios, seeds, progress=lambda r: print(r, flush=True))
    cols = ("ratio", "seed", "average_map", "detector_flops", "peak_bytes_detector", "wall_seconds")
    (out / "ablate_aps.csv").write_text(table_csv(rows, cols))
    print(f"wrote {out / 'ablate_aps.csv'}")


def cmd_ablate_sgs(args):
    run = _run_config(args)
    gammas = _floats(args.gammas)
    if any(not 0 <= g <= 1 for g in gammas):
        raise ConfigError(["every gamma must lie in [0, 1]"])
    out = _prepare_out(run.out_dir, args.force, ["ablate_sgs.csv"])
    splits = _load_splits(run)
    rows = ablate_sgs(run, splits, gammas, progress=lambda r: print(r, flush=True))
    cols = ("gamma", "average_map", "flop_ratio_percent", "forward_percent", "backward_percent",
            "time_ratio", "peak_bytes_encoder", "naive_peak_bytes_encoder")
    (out / "ablate_sgs.csv").write_text(table_csv(rows, cols))
    print(f"wrote {out / 'ablate_sgs.csv'}")


def cmd_bench_mem(args):
    run = _run_config(args)
    ks = [int(k) for k in _floats(args.ks)] if args.ks else [1, 2, 4, 8, 16, 32, run.data.length]
    if any(k < 1 or k > run.data.length for k in ks):
        raise ConfigError([f"every K must lie in [1, {run.data.length}]"])
    out = _prepare_out(run.out_dir, args.force, ["bench_mem.csv"])
    splits = generate_dataset(run.data) if not (Path(run.data_dir) / "index.json").exists() else _load_splits(run)
    rows = bench_memory(run, splits["train"][0], ks)
    (out / "bench_mem.csv").write_text(table_csv(rows, ("k", "encoder_peak_bytes", "naive_peak_bytes", "ratio")))
    for row in rows:
        print(f"K={row['k']}: {row['encoder_peak_bytes']} bytes, ratio {row['ratio']:.5f}")


def cmd_eval(args):
    run, encoder, detector, _ = load_checkpoint(args.checkpoint)
    run = _apply_overrides(run, args).check()
    splits = _load_splits(run)
    if args.split not in splits:
        raise ConfigError([f"split {args.split!r} not in dataset (have {sorted(splits)})"])
    videos = splits[args.split]
    if args.oracle:
        result = compute_map(oracle_detections(videos), {v.video_id: v.segments for v in videos}, run.thresholds)
    else:
        result = evaluate(encoder, detector, videos, run.inference, run.thresholds)
    text = json.dumps(result.to_dict(), indent=1, sort_keys=True)
    if args.out:
        _prepare_out(args.out, args.force, ["eval.json"])
        (Path(args.out) / "eval.json").write_text(text)
    print(text)


def build_parser():
    parser = argparse.ArgumentParser(prog="etad-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training=True):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if training:
            p.add_argument("--data", help="dataset directory (overrides data_dir)")
            p.add_argument("--gamma", type=float)
            p.add_argument("--aps-ratio", type=float)
            p.add_argument("--sampler", help="proposal (APS) sampling strategy")
            p.add_argument("--snippet-sampler", help="snippet-gradient (SGS) sampling strategy")
            p.add_argument("--micro-batch", type=int)
            p.add_argument("--naive-e2e", action="store_true", help="parallel end-to-end baseline")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p, training=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write metrics.csv + checkpoint.json")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate-aps", help="frozen-encoder runs over APS ratios")
    common(p)
    p.add_argument("--ratios", default="0.001,0.002,0.02,0.06,0.2,1.0")
    p.add_argument("--seeds", help="comma-separated seeds (default: the run seed)")
    p.set_defaults(func=cmd_ablate_aps)

    p = sub.add_parser("ablate-sgs", help="SGS runs over gradient ratios vs the naive baseline")
    common(p)
    p.add_argument("--gammas", default="1.0,0.5,0.4,0.3,0.2,0.1")
    p.set_defaults(func=cmd_ablate_sgs)

    p = sub.add_parser("bench-mem", help="encoder peak activation bytes per micro-batch size")
    common(p)
    p.add_argument("--ks", help="comma-separated micro-batch sizes")
    p.set_defaults(func=cmd_bench_mem)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--data", help="dataset directory (overrides the checkpoint's data_dir)")
    p.add_argument("--oracle", action="store_true", help="score ground-truth detections instead")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
