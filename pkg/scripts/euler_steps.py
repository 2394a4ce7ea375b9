"""Round-trip error and pushforward quality against the number of Euler steps."""

import argparse

import numpy as np

from colorflow import synthetic
from colorflow.flow import FlowArch, LatentSpec, integrate, train_flow
from colorflow.otmetrics import sliced_wasserstein


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--images", type=int, default=3)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--iters", type=int, default=10_000)
    ap.add_argument("--lr", type=float, default=5e-4)
    ap.add_argument("--batch", type=int, default=4096)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    print("image,steps,roundtrip_l2,sliced_to_uniform")
    for k, img in enumerate(synthetic.corpus(args.seed, args.images, args.size, args.size)):
        w = train_flow(img.cloud(), FlowArch(args.hidden), args.iters, args.lr, args.batch, seed=100 + k)
        x = img.pixels()
        u = LatentSpec.sample(x.shape[0], np.random.default_rng(500 + k))
        for steps in (4, 8, 16, 32, 64):
            z = integrate(w, x, steps, 1.0, "forward")
            back = integrate(w, z, steps, 1.0, "inverse")
            rt = np.linalg.norm(back - x, axis=1).mean()
            print(f"{img.source_id},{steps},{rt:.5f},{sliced_wasserstein(z, u, seed=k):.5f}", flush=True)


if __name__ == "__main__":
    main()
