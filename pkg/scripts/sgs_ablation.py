"""SGS gradient-ratio ablation against the naive end-to-end baseline, plus the frozen-encoder comparison.

    python scripts/sgs_ablation.py --config configs/desk.json
"""

import argparse

from etad_lab.cli import ablate_sgs, frozen_variant
from etad_lab.config import RunConfig
from etad_lab.sgs import train
from etad_lab.synthdata import generate_dataset


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("--gammas", default="1.0,0.5,0.4,0.3,0.2,0.1")
    p.add_argument("--with-frozen", action="store_true", help="also train the gamma=0 baseline")
    args = p.parse_args(argv)
    run = RunConfig.load(args.config).check()
    splits = generate_dataset(run.data)
    gammas = [float(g) for g in args.gammas.split(",")]
    print("gamma,average_map,flop_ratio_percent,forward_percent,backward_percent,time_ratio")
    for row in ablate_sgs(run, splits, gammas):
        print(f"{row['gamma']},{row['average_map']:.4f},{row['flop_ratio_percent']:g},"
              f"{row['forward_percent']:g},{row['backward_percent']:g},{row['time_ratio']:.3f}", flush=True)
    if args.with_frozen:
        frozen = train(splits, frozen_variant(run).check())
        print(f"0.0,{frozen.final_eval.average:.4f},,,,")


if __name__ == "__main__":
    main()
