"""Direct vs modulated vs MKL transfer on a held-out synthetic corpus.

Trains one flow per image, distills the training flows into an encoder, then
evaluates each method on held-out (content, style) pairs. Flows are cached in
--work so reruns only retrain what is missing.
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from colorflow import synthetic
from colorflow.encoder import (
    DatasetEntry,
    EncoderArch,
    EncoderTrainParams,
    FlowDataset,
    modulated_flow,
    train_encoder,
)
from colorflow.imagecore import RgbImage
from colorflow.flow import FlowArch, load_flow, save_flow, train_flow
from colorflow.otmetrics import evaluate_transfer, format_table, mkl_map, summarize
from colorflow.transfer import TransferConfig, TransferJob, transfer_cloud, transfer_image


def cached_flow(img, arch, iters, lr, batch, seed, path: Path | None):
    if path is not None and path.exists():
        return load_flow(path)
    w = train_flow(img.cloud(), arch, iters, lr, batch, seed)
    if path is not None:
        save_flow(w, path)
    return w


def run_ablation(
    n_train=192, n_eval=32, size=64, hidden=64, flow_iters=4000, flow_lr=1e-3, flow_batch=1024,
    encoder_arch=None, encoder_iters=5000, seed=0, steps=8, work=None, log_every=500,
):  # fmt: skip
    arch = FlowArch(hidden)
    encoder_arch = encoder_arch or EncoderArch(64, (16, 32, 64, 128), hidden)
    rng = np.random.default_rng(seed)
    images = [RgbImage(synthetic.palette_image(rng, size, size).data, f"img{k:04d}") for k in range(n_train + n_eval)]
    if work is not None:
        work = Path(work)
        work.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    flows = []
    for k, img in enumerate(images):
        path = None if work is None else work / f"{img.source_id}_h{hidden}_{flow_iters}.modf"
        flows.append(cached_flow(img, arch, flow_iters, flow_lr, flow_batch, seed * 100003 + k, path))
    logging.info("flows ready in %.0fs", time.time() - t0)

    t0 = time.time()
    ds = FlowDataset([DatasetEntry(images[k], flows[k]) for k in range(n_train)], arch)
    params = EncoderTrainParams(iters=encoder_iters, drop_at=int(encoder_iters * 0.8), seed=seed)
    history = []
    model = train_encoder(ds, encoder_arch, params, history=history)
    logging.info("encoder trained in %.0fs, loss %.4f -> %.4f", time.time() - t0,
                 float(np.median(history[:100])), float(np.median(history[-100:])))  # fmt: skip

    cfg = TransferConfig(steps=steps)
    rows = []
    held = list(range(n_train, n_train + n_eval))
    mod = {k: modulated_flow(model, images[k]) for k in held}
    for j, c in enumerate(held):
        s = held[(j + 1) % n_eval]
        content, style = images[c], images[s]
        for method, cf, sf in (("direct", flows[c], flows[s]), ("modulated", mod[c], mod[s])):
            out = transfer_image(TransferJob(content, cf, sf, cfg))
            rep = evaluate_transfer(content, style, out, lambda x, cf=cf, sf=sf: transfer_cloud(x, cf, sf, cfg))
            rows.append((method, content.source_id, style.source_id, rep))
        amap = mkl_map(content.pixels(), style.pixels())
        out = RgbImage(np.clip(amap(content.pixels()), 0, 1).reshape(content.data.shape).astype(np.float32))
        rep = evaluate_transfer(content, style, out, lambda x, amap=amap: np.clip(amap(x), 0, 1))
        rows.append(("mkl", content.source_id, style.source_id, rep))
        identity = evaluate_transfer(content, style, content, lambda x: x)
        rows.append(("identity", content.source_id, style.source_id, identity))
    return rows, history


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train", type=int, default=192)
    ap.add_argument("--eval", type=int, default=32)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--flow-iters", type=int, default=4000)
    ap.add_argument("--flow-lr", type=float, default=1e-3)
    ap.add_argument("--encoder-iters", type=int, default=5000)
    ap.add_argument("--encoder-widths", default="16,32,64,128")
    ap.add_argument("--encoder-input", type=int, default=64)
    ap.add_argument("--steps", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--work", default=None, help="flow cache directory")
    ap.add_argument("--report", default=None, help="per-pair CSV")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    widths = tuple(int(w) for w in args.encoder_widths.split(","))
    rows, _ = run_ablation(
        args.train, args.eval, args.size, args.hidden, args.flow_iters, args.flow_lr, 1024,
        EncoderArch(args.encoder_input, widths, args.hidden), args.encoder_iters, args.seed, args.steps, args.work,
    )  # fmt: skip
    if args.report:
        from colorflow.otmetrics import write_report_csv

        write_report_csv(rows, args.report)
    print(format_table(summarize(rows)))


if __name__ == "__main__":
    main()
