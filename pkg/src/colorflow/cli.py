"""Command-line entry point: train-flow, build-dataset, train-encoder, transfer, search, eval.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import zipfile
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import encoder as enc
from .config import Manifest, ManifestEntry, RunConfig
from .errors import ColorflowError, ImageIOError, NumericalError, ValidationError
from .flow import FlowArch, FlowWeights, OptimizerState, load_flow, save_flow, train_flow
from .imagecore import PixelCloud, RgbImage, load_image, save_image
from .otmetrics import (
    evaluate_transfer,
    format_table,
    mkl_map,
    summarize,
    write_report_csv,
)
from .transfer import TransferConfig, TransferJob, transfer_cloud, transfer_image

log = logging.getLogger("colorflow")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


def image_seed(base: int, image_id: str) -> int:
    """Per-image seed that depends only on the base seed and the image id."""
    return int(np.random.SeedSequence([base, zlib.crc32(image_id.encode("utf-8"))]).generate_state(1)[0])


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageIOError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def _transfer_config(cfg: RunConfig) -> TransferConfig:
    return TransferConfig(cfg.steps, cfg.strength, cfg.blend, cfg.tile_size, cfg.threads)


def _encoder_arch(cfg: RunConfig, hidden: int) -> enc.EncoderArch:
    return enc.EncoderArch(cfg.encoder_input, cfg.widths(), hidden)


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# ---------------------------------------------------------------- train-flow


def _train_one(image_path: str, out_path: str, hidden: int, iters: int, lr: float, batch: int, seed: int):
    from .flow import flow_to_bytes

    img = load_image(image_path)
    w = train_flow(PixelCloud(img.pixels(), img.source_id), FlowArch(hidden), iters, lr, batch, seed)
    _write_atomic(Path(out_path), flow_to_bytes(w))
    return w.meta.iterations, w.meta.final_loss


def cmd_train_flow(image, out, cfg: RunConfig) -> FlowWeights:
    """Train one flow for ``image`` and write it as a MODF weight file."""
    img = load_image(image)
    log.info("training H=%d flow on %s (%d px) for %d iterations", cfg.hidden, image, img.n_pixels, cfg.flow_iters)
    w = train_flow(
        PixelCloud(img.pixels(), img.source_id), FlowArch(cfg.hidden), cfg.flow_iters, cfg.flow_lr, cfg.flow_batch,
        cfg.seed,
    )  # fmt: skip
    save_flow(w, out)
    log.info("wrote %s (final loss %.5f)", out, w.meta.final_loss)
    return w


# ------------------------------------------------------------- build-dataset


def _weights_valid(path: Path, arch: FlowArch) -> FlowWeights | None:
    try:
        w = load_flow(path)
    except ColorflowError:
        return None
    return w if w.arch == arch else None


def _unique_ids(paths: list[Path]) -> list[str]:
    seen: dict[str, int] = {}
    ids = []
    for p in paths:
        base = p.stem
        n = seen.get(base, 0)
        seen[base] = n + 1
        ids.append(base if n == 0 else f"{base}-{n}")
    return ids


def cmd_build_dataset(image_dir, out_dir, cfg: RunConfig) -> tuple[Manifest, list[ColorflowError]]:
    """Train one flow per image; resumable. Returns ``(manifest, errors of failed entries)``."""
    images = list_images(image_dir)
    if not images:
        raise ValidationError(f"no PNG/JPEG images in {image_dir}")
    out_dir = Path(out_dir)
    flows_dir = out_dir / "flows"
    flows_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.txt"
    arch = FlowArch(cfg.hidden)

    old: dict[str, ManifestEntry] = {}
    if manifest_path.exists():
        try:
            prev = Manifest.read(manifest_path)
            if prev.arch == arch:
                old = {e.id: e for e in prev.entries}
        except ColorflowError:
            log.warning("ignoring unreadable manifest %s", manifest_path)

    entries: dict[str, ManifestEntry] = {}
    todo = []
    for path, image_id in zip(images, _unique_ids(images)):
        weights_path = flows_dir / f"{image_id}.modf"
        rel_image = Path(_relpath(path, out_dir)).as_posix()
        rel_weights = Path(_relpath(weights_path, out_dir)).as_posix()
        seed = image_seed(cfg.seed, image_id)
        existing = _weights_valid(weights_path, arch)
        prev_entry = old.get(image_id)
        if existing is not None and (prev_entry is None or prev_entry.seed == seed):
            entries[image_id] = ManifestEntry(
                image_id, rel_image, rel_weights, existing.meta.iterations, existing.meta.final_loss, seed, "ok"
            )
            log.info("skip %s (weights valid)", image_id)
            continue
        entries[image_id] = ManifestEntry(image_id, rel_image, rel_weights, 0, None, seed, "pending")
        todo.append((image_id, str(path), str(weights_path), seed))

    jobs = [(p, w, cfg.hidden, cfg.flow_iters, cfg.flow_lr, cfg.flow_batch, s) for _, p, w, s in todo]
    failures: list[ColorflowError] = []
    if cfg.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            futures = [pool.submit(_train_one, *job) for job in jobs]
            results = []
            for f in futures:
                try:
                    results.append(f.result())
                except ColorflowError as exc:
                    results.append(exc)
    else:
        results = []
        for job in jobs:
            log.info("training flow for %s", job[0])
            try:
                results.append(_train_one(*job))
            except ColorflowError as exc:
                results.append(exc)
    for (image_id, *_), res in zip(todo, results):
        e = entries[image_id]
        if isinstance(res, Exception):
            failures.append(res)
            e.status = f"failed:{type(res).__name__}"
            log.error("%s failed: %s", image_id, res)
        else:
            e.iterations, e.final_loss = res
            e.status = "ok"

    manifest = Manifest(arch, [entries[k] for k in sorted(entries)])
    manifest.write(manifest_path)
    return manifest, failures


def _relpath(path: Path, start: Path) -> str:
    import os

    return os.path.relpath(Path(path).resolve(), Path(start).resolve())


def load_dataset(manifest_path) -> enc.FlowDataset:
    manifest_path = Path(manifest_path)
    m = Manifest.read(manifest_path)
    base = manifest_path.parent
    entries = []
    for e in m.entries:
        if e.status != "ok":
            log.warning("skipping manifest entry %s (%s)", e.id, e.status)
            continue
        img = load_image(base / e.image)
        img = RgbImage(img.data, e.id)
        w = load_flow(base / e.weights)
        entries.append(enc.DatasetEntry(img, w, e.image, e.weights))
    if not entries:
        raise ValidationError(f"manifest {manifest_path} has no usable entries")
    return enc.FlowDataset(entries, m.arch)


# ------------------------------------------------------------- train-encoder


def _state_path(out: Path) -> Path:
    return out.with_name(out.name + ".state.npz")


def _save_state(out: Path, state: enc.EncoderTrainState) -> None:
    _write_atomic(out, enc.encoder_to_bytes(state.model))
    sp = _state_path(out)
    tmp = sp.with_name(sp.name + ".tmp.npz")
    arrays = {
        "params": state.model.params, "m": state.opt.m, "v": state.opt.v,
        "step": np.asarray(state.opt.step), "iteration": np.asarray(state.iteration),
    }  # fmt: skip
    # np.savez stamps entries with the wall clock; fixed stamps keep reruns byte-identical
    with zipfile.ZipFile(tmp, "w") as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    tmp.replace(sp)


def _load_state(out: Path, arch: enc.EncoderArch, lr: float) -> enc.EncoderTrainState:
    model = enc.load_encoder(out)
    if model.arch != arch:
        raise ValidationError("checkpoint architecture does not match the requested encoder")
    with np.load(_state_path(out)) as z:
        model.params = z["params"].copy()
        opt = OptimizerState(z["m"].copy(), z["v"].copy(), int(z["step"]), lr)
        iteration = int(z["iteration"])
    return enc.EncoderTrainState(model, opt, iteration)


def cmd_train_encoder(manifest, out, cfg: RunConfig, resume: bool = False, loss_csv=None) -> enc.EncoderModel:
    """Distill the manifest's flows into an encoder; checkpoints and a loss CSV are written as it runs."""
    out = Path(out)
    ds = load_dataset(manifest)
    arch = _encoder_arch(cfg, ds.arch.hidden)
    params = enc.EncoderTrainParams(
        cfg.encoder_iters, cfg.encoder_lr, cfg.encoder_lr_drop, cfg.encoder_drop_at, cfg.batch_images,
        cfg.pixels_per_image, cfg.distill_steps, cfg.target_mode, seed=cfg.seed,
    )  # fmt: skip
    loss_csv = Path(loss_csv) if loss_csv else out.with_suffix(".loss.csv")

    state = None
    rows: list[list[str]] = []
    if resume and out.exists() and _state_path(out).exists():
        state = _load_state(out, arch, cfg.encoder_lr)
        log.info("resuming from iteration %d", state.iteration)
        if loss_csv.exists():
            with open(loss_csv, newline="") as fh:
                rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) <= state.iteration]

    window: list[float] = []

    def on_step(st: enc.EncoderTrainState, loss: float) -> None:
        window.append(loss)
        if st.iteration % cfg.log_every == 0:
            lr = params.lr if params.drop_at is None or st.iteration - 1 < params.drop_at else params.lr_drop
            rows.append([str(st.iteration), repr(float(np.mean(window))), repr(lr)])
            window.clear()
            log.info("iter %d loss %s", st.iteration, rows[-1][1])
            _write_loss_csv(loss_csv, rows)
        if st.iteration % cfg.checkpoint_every == 0:
            _save_state(out, st)

    holder: dict = {}

    def capture(st, loss):
        holder["state"] = st
        on_step(st, loss)

    model = enc.train_encoder(ds, arch, params, resume=state, callback=capture)
    final_state = holder.get("state") or state
    if final_state is not None:
        _save_state(out, final_state)
    else:
        _write_atomic(out, enc.encoder_to_bytes(model))
    _write_loss_csv(loss_csv, rows)
    return model


def _write_loss_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "lr"])
        w.writerows(rows)


# ------------------------------------------------------------------ transfer


def cmd_transfer(content, style, out, cfg: RunConfig, mode: str = "encoder", encoder_path=None, report=None):
    """Transfer ``style``'s palette onto ``content`` and write a PNG."""
    cimg = load_image(content)
    simg = load_image(style)
    tcfg = _transfer_config(cfg)
    if mode == "encoder":
        if encoder_path is None:
            raise ValidationError("encoder mode needs --encoder CHECKPOINT")
        model = enc.load_encoder(encoder_path)
        cflow = enc.modulated_flow(model, cimg)
        sflow = enc.modulated_flow(model, simg)
    elif mode == "direct":
        arch = FlowArch(cfg.hidden)
        cflow = train_flow(cimg.cloud(), arch, cfg.flow_iters, cfg.flow_lr, cfg.flow_batch, image_seed(cfg.seed, "content"))
        sflow = train_flow(simg.cloud(), arch, cfg.flow_iters, cfg.flow_lr, cfg.flow_batch, image_seed(cfg.seed, "style"))
    elif mode == "mkl":
        cflow = sflow = None
    else:
        raise ValidationError(f"unknown mode {mode!r}")

    if mode == "mkl":
        amap = mkl_map(cimg.pixels(), simg.pixels())

        def fmap(x):
            x = np.asarray(x, dtype=np.float64)
            if tcfg.strength == 0.0 or tcfg.blend == 0.0:
                return x.copy()
            y = x + tcfg.strength * (amap(x) - x)
            y = tcfg.blend * y + (1.0 - tcfg.blend) * x
            return np.clip(y, 0.0, 1.0)

        flat = cimg.data.reshape(-1, 3)
        result = np.empty_like(flat)
        for lo in range(0, flat.shape[0], tcfg.tile_size):
            result[lo : lo + tcfg.tile_size] = fmap(flat[lo : lo + tcfg.tile_size].astype(np.float64))
        output = RgbImage(result.reshape(cimg.data.shape), cimg.source_id)
    else:
        output = transfer_image(TransferJob(cimg, cflow, sflow, tcfg))

        def fmap(x):
            return transfer_cloud(np.asarray(x, dtype=np.float64), cflow, sflow, tcfg)

    save_image(output, out)
    rep = None
    if report:
        rep = evaluate_transfer(
            cimg, simg, output, fmap, cfg.style_samples, cfg.seed, cfg.lipschitz_pairs, cfg.lipschitz_radius,
            cfg.ideal_point,
        )  # fmt: skip
        write_report_csv([(mode, cimg.source_id, simg.source_id, rep)], report)
    return output, rep


# -------------------------------------------------------------------- search


def cmd_search(corpus_dir, query, k: int, encoder_path=None, baseline: bool = False, embeddings_out=None):
    """Rank corpus images by palette similarity to ``query``."""
    paths = list_images(corpus_dir)
    if not paths:
        raise ValidationError(f"no images in {corpus_dir}")
    if baseline:
        embed = lambda img: enc.PaletteEmbedding(enc.moment_embedding(img), img.source_id or "")  # noqa: E731
    else:
        if encoder_path is None:
            raise ValidationError("embedding search needs --encoder (or use --baseline)")
        model = enc.load_encoder(encoder_path)
        embed = lambda img: enc.encode(model, img)  # noqa: E731
    db = []
    for p, image_id in zip(paths, _unique_ids(paths)):
        img = load_image(p)
        db.append(enc.PaletteEmbedding(embed(img).e, image_id))
    q = embed(load_image(query))
    if embeddings_out:
        enc.write_embeddings_csv(db, embeddings_out)
    return enc.embed_search(db, q, k)


# ---------------------------------------------------------------------- eval

PAIR_COLUMNS = ["content", "style", "output", "method"]


def read_pairs(path) -> list[dict]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ImageIOError(f"cannot read pairs file {path}: {exc}") from exc
    if not text.strip():
        return []
    rows = list(csv.DictReader(text.splitlines()))
    if rows and set(PAIR_COLUMNS) - set(rows[0]):
        raise ValidationError(f"pairs file needs columns {PAIR_COLUMNS}")
    return rows


def cmd_eval(pairs_file, outputs_dir, report_path, cfg: RunConfig):
    """One report row per listed transfer plus a per-method summary (mean, std of mean)."""
    pairs_file = Path(pairs_file)
    outputs_dir = Path(outputs_dir)
    pairs = read_pairs(pairs_file)
    resolved = []
    missing = []
    for row in pairs:
        c = pairs_file.parent / row["content"]
        s = pairs_file.parent / row["style"]
        o = outputs_dir / row["output"]
        for p in (c, s, o):
            if not p.exists():
                missing.append(str(p))
        resolved.append((c, s, o, row["method"]))
    if missing:
        for m in missing:
            print(f"missing: {m}", file=sys.stderr)
        raise ImageIOError(f"{len(missing)} listed file(s) missing")
    rows = []
    for c, s, o, method in resolved:
        cimg, simg, oimg = load_image(c), load_image(s), load_image(o)
        rep = evaluate_transfer(
            cimg, simg, oimg, None, cfg.style_samples, cfg.seed, cfg.lipschitz_pairs, cfg.lipschitz_radius,
            cfg.ideal_point,
        )  # fmt: skip
        rows.append((method, c.stem, s.stem, rep))
    write_report_csv(rows, report_path)
    summary = summarize(rows)
    summary_path = Path(report_path).with_name(Path(report_path).stem + "_summary.csv")
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        names = ["style_distance", "content_distance", "aggregated", "lipschitz"]
        w.writerow(["method", "n"] + [f"{n}_{s}" for n in names for s in ("mean", "sem")])
        for method in sorted(summary):
            n = sum(1 for r in rows if r[0] == method)
            w.writerow([method, n] + [f"{summary[method][k][i]:.6f}" for k in names for i in (0, 1)])
    return rows, summary


# ---------------------------------------------------------------------- main

_FLAG_HELP = {
    "hidden": "hidden units H of per-image flows",
    "steps": "Euler steps per direction",
    "strength": "fraction of the flow path traversed, in [0, 1]",
    "blend": "linear mix of result with the original, in [0, 1]",
    "tile_size": "pixels per processing tile",
    "threads": "worker count; results do not depend on it",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig text file (key = value lines)")
    p.add_argument("--seed", type=int)
    p.add_argument("-q", "--quiet", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    group = p.add_argument_group("run configuration")
    for f in fields(RunConfig):
        if f.name == "seed":
            continue
        typ = {"int": int, "float": float}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
        group.add_argument(
            "--" + f.name.replace("_", "-"), dest=f.name, type=typ, default=None,
            help=_FLAG_HELP.get(f.name, f"default {f.default!r}"),
        )  # fmt: skip


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colorflow", description="Color transfer with rectified flows.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-flow", help="train one per-image flow")
    p.add_argument("image")
    p.add_argument("out")
    _add_config_flags(p)

    p = sub.add_parser("build-dataset", help="train flows for every image in a directory")
    p.add_argument("image_dir")
    p.add_argument("out_dir")
    _add_config_flags(p)

    p = sub.add_parser("train-encoder", help="distill a dataset of flows into a palette encoder")
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--resume", action="store_true", help="continue from OUT and its .state.npz")
    p.add_argument("--loss-csv", help="loss log path (default OUT with .loss.csv suffix)")
    _add_config_flags(p)

    p = sub.add_parser("transfer", help="recolor CONTENT with the palette of STYLE")
    p.add_argument("content")
    p.add_argument("style")
    p.add_argument("out")
    p.add_argument("--mode", choices=["encoder", "direct", "mkl"], default="encoder")
    p.add_argument("--encoder", help="MENC checkpoint (encoder mode)")
    p.add_argument("--report", help="write a TransportReport CSV row here")
    _add_config_flags(p)

    p = sub.add_parser("search", help="find corpus images with a similar palette")
    p.add_argument("corpus_dir")
    p.add_argument("query")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--encoder", help="MENC checkpoint")
    p.add_argument("--baseline", action="store_true", help="rank by mean+covariance moments instead")
    p.add_argument("--embeddings-out", help="write corpus embeddings as CSV")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score transfers listed in a pairs CSV")
    p.add_argument("pairs")
    p.add_argument("outputs_dir")
    p.add_argument("report")
    _add_config_flags(p)
    return parser


def _resolve_config(args) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    try:
        return base.updated(**overrides)
    except ValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = _resolve_config(args)
        if args.command == "train-flow":
            cmd_train_flow(args.image, args.out, cfg)
        elif args.command == "build-dataset":
            manifest, failures = cmd_build_dataset(args.image_dir, args.out_dir, cfg)
            print(f"{len(manifest.entries)} entries, {len(failures)} failed")
            if failures:
                return max(f.exit_code for f in failures)
        elif args.command == "train-encoder":
            cmd_train_encoder(args.manifest, args.out, cfg, resume=args.resume, loss_csv=args.loss_csv)
        elif args.command == "transfer":
            _, rep = cmd_transfer(args.content, args.style, args.out, cfg, args.mode, args.encoder, args.report)
            if rep is not None:
                print(
                    f"style {rep.style_distance:.4f}  content {rep.content_distance:.4f}  "
                    f"aggregated {rep.aggregated:.4f}  lipschitz {rep.lipschitz:.3f}"
                )
        elif args.command == "search":
            ranked = cmd_search(args.corpus_dir, args.query, args.k, args.encoder, args.baseline, args.embeddings_out)
            for rank, (image_id, dist) in enumerate(ranked, 1):
                print(f"{rank}\t{image_id}\t{dist:.6f}")
        elif args.command == "eval":
            _, summary = cmd_eval(args.pairs, args.outputs_dir, args.report, cfg)
            if summary:
                print(format_table(summary))
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL
    except ImageIOError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except ColorflowError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
