"""Color transfer as forward content flow followed by inverse style flow."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .flow import DEFAULT_BATCH, DEFAULT_ITERS, DEFAULT_LR, FlowArch, FlowWeights, integrate, train_flow
from .imagecore import PixelCloud, RgbImage

log = logging.getLogger(__name__)

DEFAULT_TILE = 2**20


@dataclass(frozen=True)
class TransferConfig:
    steps: int = 8
    strength: float = 1.0
    blend: float = 1.0
    tile_size: int = DEFAULT_TILE
    threads: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not 0.0 <= self.strength <= 1.0:
            raise ValidationError("strength must lie in [0, 1]")
        if not 0.0 <= self.blend <= 1.0:
            raise ValidationError("blend must lie in [0, 1]")
        if self.tile_size < 1 or self.threads < 1:
            raise ValidationError("tile_size and threads must be >= 1")


@dataclass(frozen=True)
class TrainParams:
    iters: int = DEFAULT_ITERS
    lr: float = DEFAULT_LR
    batch: int = DEFAULT_BATCH
    seed: int = 0


@dataclass(frozen=True)
class TransferJob:
    content: RgbImage
    content_flow: FlowWeights
    style_flow: FlowWeights
    config: TransferConfig = TransferConfig()


def transfer_cloud(x, content_flow: FlowWeights, style_flow: FlowWeights, cfg: TransferConfig = TransferConfig()):
    """Map colors through the latent cube; output is clamped to [0, 1]^3."""
    pts = x.samples if isinstance(x, PixelCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if cfg.strength == 0.0 or cfg.blend == 0.0:
        return np.array(pts, dtype=np.float64, copy=True)
    z = integrate(content_flow, pts, cfg.steps, cfg.strength, "forward")
    y = integrate(style_flow, z, cfg.steps, cfg.strength, "inverse")
    if cfg.blend != 1.0:
        y = cfg.blend * y + (1.0 - cfg.blend) * pts
    return np.clip(y, 0.0, 1.0)


def _unique_colors(tile: np.ndarray):
    """Distinct colors of a float32 tile and the inverse index.

    Colors decoded from 8/16-bit rasters pack losslessly into one int64 key;
    anything else falls back to a row-wise unique.
    """
    q = np.rint(tile.astype(np.float64) * 65535.0)
    if np.array_equal((q / 65535.0).astype(np.float32), tile):
        q = q.astype(np.int64)
        keys = (q[:, 0] << 32) | (q[:, 1] << 16) | q[:, 2]
        _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        return tile[first], inverse
    colors, inverse = np.unique(tile, axis=0, return_inverse=True)
    return colors, inverse.ravel()


def _map_tile(flat_in, flat_out, lo, hi, content_flow, style_flow, cfg):
    tile = flat_in[lo:hi]
    colors, inverse = _unique_colors(tile)
    mapped = transfer_cloud(colors.astype(np.float64), content_flow, style_flow, cfg)
    flat_out[lo:hi] = mapped.astype(np.float32)[inverse]


def transfer_image(job: TransferJob) -> RgbImage:
    """Apply the color map to every pixel, one tile of ``tile_size`` pixels at a time.

    Tiles are contiguous runs of the row-major pixel array; each distinct color
    within a tile is integrated once. Results do not depend on tile size or
    thread count because the per-color computation is batch-invariant.
    """
    cfg = job.config
    src = job.content.data
    flat_in = src.reshape(-1, 3)
    out = np.empty_like(src)
    flat_out = out.reshape(-1, 3)
    bounds = [(lo, min(lo + cfg.tile_size, flat_in.shape[0])) for lo in range(0, flat_in.shape[0], cfg.tile_size)]
    if cfg.threads == 1 or len(bounds) == 1:
        for lo, hi in bounds:
            _map_tile(flat_in, flat_out, lo, hi, job.content_flow, job.style_flow, cfg)
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futures = [
                pool.submit(_map_tile, flat_in, flat_out, lo, hi, job.content_flow, job.style_flow, cfg)
                for lo, hi in bounds
            ]
            for f in futures:
                f.result()
    return RgbImage(out, job.content.source_id)


def train_image_flow(img: RgbImage, arch: FlowArch, params: TrainParams) -> FlowWeights:
    """Train one flow on an image's pixels at native resolution."""
    return train_flow(
        PixelCloud(img.pixels(), img.source_id), arch, params.iters, params.lr, params.batch, params.seed
    )


def transfer_direct(
    content: RgbImage,
    style: RgbImage,
    arch: FlowArch = FlowArch(),
    params: TrainParams = TrainParams(),
    cfg: TransferConfig = TransferConfig(),
) -> RgbImage:
    """Ablation baseline: train both flows from scratch, then transfer."""
    seeds = np.random.SeedSequence(params.seed).generate_state(2)
    cflow = train_image_flow(content, arch, TrainParams(params.iters, params.lr, params.batch, int(seeds[0])))
    sflow = train_image_flow(style, arch, TrainParams(params.iters, params.lr, params.batch, int(seeds[1])))
    return transfer_image(TransferJob(content, cflow, sflow, cfg))
