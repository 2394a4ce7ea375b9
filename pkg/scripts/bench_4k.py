"""Time and peak memory of a 3840x2160 transfer for several tile sizes and thread counts."""

import argparse
import time
import tracemalloc

import numpy as np

from colorflow import synthetic
from colorflow.flow import FlowArch, train_flow
from colorflow.transfer import TransferConfig, TransferJob, transfer_image


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=8)
    ap.add_argument("--tiles", default="16,18,20", help="log2 tile sizes")
    ap.add_argument("--threads", default="1,4")
    ap.add_argument("--noise", type=float, default=0.02)
    args = ap.parse_args()

    rng = np.random.default_rng(11)
    big = synthetic.palette_image(rng, 2160, 3840, noise=args.noise)
    small = [synthetic.palette_image(rng, 128, 128) for _ in range(2)]
    arch = FlowArch(args.hidden)
    cflow, sflow = (train_flow(s.cloud(), arch, args.iters, 1e-3, 1024, seed=i) for i, s in enumerate(small))
    ref = None
    print("log2_tile,threads,seconds,aux_peak_mib,identical")
    for lt in (int(v) for v in args.tiles.split(",")):
        for th in (int(v) for v in args.threads.split(",")):
            tracemalloc.start()
            t0 = time.perf_counter()
            out = transfer_image(TransferJob(big, cflow, sflow, TransferConfig(args.steps, tile_size=2**lt, threads=th)))
            dt = time.perf_counter() - t0
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            ref = out.data if ref is None else ref
            aux = (peak - big.data.nbytes) / 2**20
            print(f"{lt},{th},{dt:.2f},{aux:.1f},{np.array_equal(ref, out.data)}", flush=True)


if __name__ == "__main__":
    main()
