"""Style distance and content distance as the transfer strength grows.

Trains flows for a content and a style image (or loads .modf files) and
prints one row per strength.
"""

import argparse

import numpy as np

from colorflow import synthetic
from colorflow.flow import FlowArch, load_flow, train_flow
from colorflow.imagecore import load_image
from colorflow.otmetrics import content_distance, sliced_wasserstein
from colorflow.transfer import TransferConfig, TransferJob, transfer_image


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--content", help="content image (default: synthetic)")
    ap.add_argument("--style", help="style image (default: synthetic)")
    ap.add_argument("--content-flow")
    ap.add_argument("--style-flow")
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--iters", type=int, default=5000)
    ap.add_argument("--steps", type=int, default=8)
    ap.add_argument("--levels", type=int, default=11)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    content = load_image(args.content) if args.content else synthetic.palette_image(rng, 96, 96)
    style = load_image(args.style) if args.style else synthetic.palette_image(rng, 96, 96)
    arch = FlowArch(args.hidden)
    cflow = load_flow(args.content_flow) if args.content_flow else train_flow(content.cloud(), arch, args.iters, 1e-3, 1024, args.seed)
    sflow = load_flow(args.style_flow) if args.style_flow else train_flow(style.cloud(), arch, args.iters, 1e-3, 1024, args.seed + 1)

    print("strength,style_distance,content_distance")
    for s in np.linspace(0.0, 1.0, args.levels):
        out = transfer_image(TransferJob(content, cflow, sflow, TransferConfig(steps=args.steps, strength=float(s))))
        sd = sliced_wasserstein(out.pixels(), style.pixels(), seed=args.seed)
        print(f"{s:.2f},{sd:.5f},{content_distance(content, out):.5f}")


if __name__ == "__main__":
    main()
