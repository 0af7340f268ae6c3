"""Encoder peak retained-activation bytes per micro-batch size K, against the naive step.

    python scripts/bench_mem.py --length 64 --ks 1,2,4,8,16,32,64
"""

import argparse

from etad_lab.cli import bench_memory
from etad_lab.config import RunConfig
from etad_lab.synthdata import generate_dataset


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--ks", default="1,2,4,8,16,32,64")
    args = p.parse_args(argv)
    run = RunConfig.load(args.config) if args.config else RunConfig()
    run.data.length = args.length
    run.data.n_train, run.data.n_val = 1, 1
    run.check()
    video = generate_dataset(run.data)["train"][0]
    print("k,encoder_peak_bytes,naive_peak_bytes,ratio,k_over_n")
    for row in bench_memory(run, video, [int(k) for k in args.ks.split(",")]):
        print(f"{row['k']},{row['encoder_peak_bytes']},{row['naive_peak_bytes']},{row['ratio']:.5f},"
              f"{row['k'] / args.length:.5f}")


if __name__ == "__main__":
    main()
