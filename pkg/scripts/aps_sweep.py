"""Frozen-encoder sweep over APS proposal ratios; prints per-ratio mean mAP over seeds.

    python scripts/aps_sweep.py --config configs/desk.json --seeds 0,1,2
"""

import argparse
import csv
import sys
from collections import defaultdict

import numpy as np

from etad_lab.cli import ablate_aps
from etad_lab.config import RunConfig
from etad_lab.synthdata import generate_dataset


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("--ratios", default="0.001,0.002,0.02,0.06,0.2,1.0")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--csv", help="write the per-run rows here")
    args = p.parse_args(argv)
    run = RunConfig.load(args.config).check()
    ratios = [float(r) for r in args.ratios.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    splits = generate_dataset(run.data)
    rows = ablate_aps(run, splits, ratios, seeds, progress=lambda r: print(r, file=sys.stderr, flush=True))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    by_ratio = defaultdict(list)
    for row in rows:
        by_ratio[row["ratio"]].append(row["average_map"])
    print("ratio,mean_map,std_map")
    for ratio in sorted(by_ratio):
        vals = np.array(by_ratio[ratio])
        print(f"{ratio},{vals.mean():.4f},{vals.std():.4f}")


if __name__ == "__main__":
    main()
