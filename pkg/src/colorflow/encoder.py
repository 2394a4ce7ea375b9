"""Palette encoder: image -> flow weights, trained by distilling per-image flows.

The encoder is a small stride-2 CNN (3x3 kernels, ReLU), global average
pooling and a linear head whose output ``e`` is used directly as the
parameter vector of a velocity-field MLP (the modulated flow). Forward and
backward passes are written out in numpy, channels-last.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import cv2
import numpy as np

from .errors import FormatError, ImageIOError, NumericalError, ValidationError
from .flow import (
    DIVERGENCE_LOSS,
    FlowArch,
    FlowMeta,
    FlowWeights,
    OptimizerState,
    _adam_inplace,
    integrate,
    loss_grad_theta,
    velocity,
    velocity_theta,
)
from .imagecore import PixelCloud, RgbImage

log = logging.getLogger(__name__)

MENC_MAGIC = b"MENC"
MENC_VERSION = 1

TargetMode = Literal["displacement", "velocity"]


@dataclass(frozen=True)
class EncoderArch:
    input_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 128)
    flow_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_size < 1 or not self.widths or min(self.widths) < 1:
            raise ValidationError("bad encoder architecture")

    @property
    def flow_arch(self) -> FlowArch:
        return FlowArch(self.flow_hidden)

    @property
    def dim_e(self) -> int:
        return self.flow_arch.param_count

    def shapes(self) -> list[tuple[int, ...]]:
        """Parameter tensor shapes in packing order."""
        out = []
        cin = 3
        for cout in self.widths:
            out += [(3, 3, cin, cout), (cout,)]
            cin = cout
        out += [(cin, self.dim_e), (self.dim_e,)]
        return out

    @property
    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes()))


@dataclass
class EncoderModel:
    arch: EncoderArch
    params: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).ravel()
        if self.params.size != self.arch.param_count:
            raise ValidationError(f"{self.params.size} params, arch needs {self.arch.param_count}")
        if not np.all(np.isfinite(self.params)):
            raise ValidationError("encoder params not finite")

    def tensors(self) -> list[np.ndarray]:
        return _split(self.params, self.arch)


@dataclass(frozen=True)
class PaletteEmbedding:
    e: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        e = np.asarray(self.e, dtype=np.float64).ravel()
        if not np.all(np.isfinite(e)):
            raise ValidationError("embedding not finite")
        object.__setattr__(self, "e", e)


@dataclass
class DatasetEntry:
    image: RgbImage
    flow: FlowWeights
    image_path: str | None = None
    weights_path: str | None = None


@dataclass
class FlowDataset:
    entries: list[DatasetEntry]
    arch: FlowArch

    def __post_init__(self):
        for entry in self.entries:
            if entry.flow.arch != self.arch:
                raise ValidationError(
                    f"flow for {entry.image.source_id} has H={entry.flow.arch.hidden}, dataset H={self.arch.hidden}"
                )

    def __len__(self) -> int:
        return len(self.entries)


def _split(flat: np.ndarray, arch: EncoderArch) -> list[np.ndarray]:
    out, off = [], 0
    for shape in arch.shapes():
        size = int(np.prod(shape))
        out.append(flat[off : off + size].reshape(shape))
        off += size
    return out


def init_encoder(arch: EncoderArch, rng: np.random.Generator) -> EncoderModel:
    """He-normal conv kernels, zero biases; head uniform in +-1/sqrt(fan_in), zero bias."""
    parts = []
    for shape in arch.shapes():
        if len(shape) == 4:
            fan_in = shape[0] * shape[1] * shape[2]
            parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).ravel())
        elif len(shape) == 2:
            parts.append(rng.uniform(-1.0, 1.0, size=shape).ravel() / np.sqrt(shape[0]))
        else:
            parts.append(np.zeros(shape))
    return EncoderModel(arch, np.concatenate(parts))


def preprocess(img: RgbImage, size: int) -> np.ndarray:
    """Bilinear resize to ``size x size``, centered around zero."""
    data = img.data
    if data.shape[:2] != (size, size):
        data = cv2.resize(data, (size, size), interpolation=cv2.INTER_LINEAR)
    return data.astype(np.float64) - 0.5


def _conv_s2(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """3x3 stride-2 conv with zero padding 1; x is (B, H, W, C)."""
    B, H, Wd, _ = x.shape
    ho, wo = (H + 1) // 2, (Wd + 1) // 2
    xpad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b, (B, ho, wo, W.shape[3])).copy()
    for di in range(3):
        for dj in range(3):
            out += xpad[:, di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2, :] @ W[di, dj]
    return out, xpad


def _conv_s2_backward(dout: np.ndarray, xpad: np.ndarray, W: np.ndarray, need_dx: bool):
    B, ho, wo, cout = dout.shape
    cin = W.shape[2]
    dW = np.empty_like(W)
    dflat = dout.reshape(-1, cout)
    dxpad = np.zeros_like(xpad) if need_dx else None
    for di in range(3):
        for dj in range(3):
            patch = xpad[:, di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2, :]
            dW[di, dj] = patch.reshape(-1, cin).T @ dflat
            if need_dx:
                dxpad[:, di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2, :] += dout @ W[di, dj].T
    db = dflat.sum(axis=0)
    dx = dxpad[:, 1:-1, 1:-1, :] if need_dx else None
    return dx, dW, db


def encoder_forward(model: EncoderModel, x: np.ndarray):
    """``x`` is a preprocessed (B, S, S, 3) batch; returns ``(e, cache)``."""
    tensors = model.tensors()
    n_stages = len(model.arch.widths)
    cache = []
    a = x
    for s in range(n_stages):
        W, b = tensors[2 * s], tensors[2 * s + 1]
        pre, xpad = _conv_s2(a, W, b)
        a = np.maximum(pre, 0.0)
        cache.append((xpad, pre))
    pooled = a.mean(axis=(1, 2))
    Wh, bh = tensors[-2], tensors[-1]
    e = pooled @ Wh + bh
    return e, (cache, pooled, a.shape)


def encoder_backward(model: EncoderModel, cache, de: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat params, given ``dloss/de``."""
    tensors = model.tensors()
    stages, pooled, last_shape = cache
    grads: list[np.ndarray] = [None] * len(tensors)  # type: ignore[list-item]
    Wh = tensors[-2]
    grads[-2] = pooled.T @ de
    grads[-1] = de.sum(axis=0)
    dpooled = de @ Wh.T
    B, h, w, c = last_shape
    da = np.broadcast_to(dpooled[:, None, None, :] / (h * w), last_shape)
    for s in reversed(range(len(stages))):
        xpad, pre = stages[s]
        dpre = da * (pre > 0)
        da, dW, db = _conv_s2_backward(dpre, xpad, tensors[2 * s], need_dx=s > 0)
        grads[2 * s], grads[2 * s + 1] = dW, db
    return np.concatenate([g.ravel() for g in grads])


def encode(model: EncoderModel, img: RgbImage) -> PaletteEmbedding:
    x = preprocess(img, model.arch.input_size)[None]
    e, _ = encoder_forward(model, x)
    return PaletteEmbedding(e[0], img.source_id or "")


def modulated_flow(model: EncoderModel, img: RgbImage) -> FlowWeights:
    """The flow whose weights the encoder predicts for ``img``."""
    emb = encode(model, img)
    return FlowWeights(model.arch.flow_arch, emb.e, FlowMeta(0, float("nan"), img.source_id or ""))


def distill_targets(
    w: FlowWeights,
    x,
    steps: int = 32,
    seed: int = 0,
    mode: TargetMode = "displacement",
):
    """Regression targets for distilling ``w`` along straight lines.

    ``Z`` is the Euler endpoint of ``x``; ``t ~ U[0, 1]`` per point and
    ``z_t = t Z + (1 - t) x``. The target is ``Z - x`` ("displacement") or the
    teacher velocity ``v(z_t, t)`` ("velocity").
    Returns ``(z_t, t, v_target)``.
    """
    pts = x.samples if isinstance(x, PixelCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    Z = integrate(w, pts, steps, 1.0, "forward")
    t = np.random.default_rng(seed).random(pts.shape[0])
    return _targets(w, pts, Z, t, mode)


def _targets(w, x, Z, t, mode):
    z_t = t[:, None] * Z + (1.0 - t[:, None]) * x
    if mode == "displacement":
        v = Z - x
    elif mode == "velocity":
        v = velocity(w, z_t, t)
    else:
        raise ValidationError(f"unknown target mode {mode!r}")
    return z_t, t, v


def _dihedral_array(x: np.ndarray, index: int) -> np.ndarray:
    out = np.rot90(x, k=index % 4)
    return out[:, ::-1] if index >= 4 else out


@dataclass
class EncoderTrainState:
    model: EncoderModel
    opt: OptimizerState
    iteration: int = 0


@dataclass(frozen=True)
class EncoderTrainParams:
    iters: int = 20_000
    lr: float = 5e-4
    lr_drop: float = 1e-4
    drop_at: int | None = 10_000
    batch_images: int = 8
    pixels_per_image: int = 1024
    distill_steps: int = 32
    target_mode: TargetMode = "displacement"
    pool_size: int = 16384
    seed: int = 0


def _prepare(ds: FlowDataset, arch: EncoderArch, p: EncoderTrainParams):
    """Per entry: resized encoder input and a pool of (X, Z) pairs.

    Z = T(X) is deterministic in X, so integrating a fixed pool once is the
    same as integrating freshly drawn pixels each iteration; images with more
    than ``pool_size`` pixels contribute a seeded subsample.
    """
    prepared = []
    for k, entry in enumerate(ds.entries):
        px = entry.image.pixels()
        if px.shape[0] > p.pool_size:
            rng = np.random.default_rng([p.seed, k, 7])
            px = px[rng.choice(px.shape[0], p.pool_size, replace=False)]
        Z = integrate(entry.flow, px, p.distill_steps, 1.0, "forward")
        prepared.append((preprocess(entry.image, arch.input_size), px, Z))
    return prepared


def encoder_batch_loss(model: EncoderModel, images: np.ndarray, batches, with_grad: bool = True):
    """Distillation loss over a batch; ``batches`` holds ``(inputs, target)`` per image.

    ``inputs`` is (P, 4) with time last. Returns ``(loss, grad)``.
    """
    e, cache = encoder_forward(model, images)
    hidden = model.arch.flow_hidden
    B = images.shape[0]
    de = np.empty_like(e)
    total = 0.0
    for b, (inputs, target) in enumerate(batches):
        loss_b, g_b = loss_grad_theta(e[b], hidden, inputs, target)
        total += loss_b / B
        de[b] = g_b / B
    if not with_grad:
        return total, None
    return total, encoder_backward(model, cache, de)


def train_encoder(
    ds: FlowDataset,
    arch: EncoderArch = EncoderArch(),
    params: EncoderTrainParams = EncoderTrainParams(),
    resume: EncoderTrainState | None = None,
    history: list | None = None,
    callback: Callable[[EncoderTrainState, float], None] | None = None,
) -> EncoderModel:
    """Distill the dataset's flows into the encoder.

    Each iteration draws ``batch_images`` entries, ``pixels_per_image`` pixels
    and times per entry, applies a random dihedral transform to each encoder
    input, and regresses the modulated flow's velocity onto the targets.
    Randomness is keyed on ``(seed, iteration)`` so a resumed run replays the
    uninterrupted one. ``callback(state, loss)`` runs after every iteration.
    """
    if len(ds) == 0:
        raise ValidationError("empty flow dataset")
    if arch.dim_e != ds.arch.param_count:
        raise ValidationError(f"encoder dim(e)={arch.dim_e} but dataset flows have {ds.arch.param_count} params")
    p = params
    if resume is None:
        model = init_encoder(arch, np.random.default_rng([p.seed, 0xE]))
        state = EncoderTrainState(model, OptimizerState.fresh(arch.param_count, p.lr))
    else:
        state = resume
        if state.model.arch != arch:
            raise ValidationError("resume checkpoint architecture differs")
    prepared = _prepare(ds, arch, p)
    n = len(prepared)
    while state.iteration < p.iters:
        it = state.iteration
        rng = np.random.default_rng([p.seed, it])
        idx = rng.choice(n, size=p.batch_images, replace=n < p.batch_images)
        images = np.empty((p.batch_images, arch.input_size, arch.input_size, 3))
        batches = []
        for b, k in enumerate(idx):
            small, px, Z = prepared[k]
            sel = rng.integers(0, px.shape[0], size=p.pixels_per_image)
            t = rng.random(p.pixels_per_image)
            z_t, _, target = _targets(ds.entries[k].flow, px[sel], Z[sel], t, p.target_mode)
            batches.append((np.column_stack([z_t, t]), target))
            images[b] = _dihedral_array(small, int(rng.integers(0, 8)))
        loss, grad = encoder_batch_loss(state.model, images, batches)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise NumericalError(f"encoder training diverged at iteration {it} (loss={loss})")
        lr = p.lr if p.drop_at is None or it < p.drop_at else p.lr_drop
        _adam_inplace(state.opt, state.model.params, grad, lr)
        state.iteration += 1
        if history is not None:
            history.append(loss)
        if callback is not None:
            callback(state, loss)
        if log.isEnabledFor(logging.DEBUG) and it % 100 == 0:
            log.debug("train_encoder iter %d loss %.5f", it, loss)
    state.model.meta.update({"iterations": state.iteration, "seed": p.seed})
    return state.model


def embed_search(db: list[PaletteEmbedding], query: PaletteEmbedding, k: int) -> list[tuple[str, float]]:
    """Top-``k`` ``(image_id, distance)`` by Euclidean distance; ties broken by id."""
    if not db:
        raise ValidationError("empty embedding database")
    E = np.stack([d.e for d in db])
    if E.shape[1] != query.e.size:
        raise ValidationError(f"query dim {query.e.size} != database dim {E.shape[1]}")
    dist = np.linalg.norm(E - query.e, axis=1)
    ids = [d.image_id for d in db]
    order = sorted(range(len(db)), key=lambda i: (dist[i], ids[i]))
    return [(ids[i], float(dist[i])) for i in order[: max(k, 0)]]


def moment_embedding(img: RgbImage) -> np.ndarray:
    """Channel means followed by the flattened 3x3 (population) covariance."""
    px = img.pixels()
    mu = px.mean(axis=0)
    d = px - mu
    cov = d.T @ d / px.shape[0]
    return np.concatenate([mu, cov.ravel()])


def encoder_to_bytes(model: EncoderModel) -> bytes:
    arch = model.arch
    meta = json.dumps(model.meta, sort_keys=True).encode("utf-8")
    head = struct.pack("<III", MENC_VERSION, arch.input_size, len(arch.widths))
    head += struct.pack(f"<{len(arch.widths)}I", *arch.widths)
    head += struct.pack("<II", arch.dim_e, arch.param_count)
    return b"".join([MENC_MAGIC, head, model.params.astype("<f4").tobytes(), struct.pack("<I", len(meta)), meta])


def encoder_from_bytes(buf: bytes) -> EncoderModel:
    if len(buf) < 16 or buf[:4] != MENC_MAGIC:
        raise FormatError("not a MENC checkpoint")
    version, size, n_stages = struct.unpack_from("<III", buf, 4)
    if version != MENC_VERSION:
        raise FormatError(f"unsupported MENC version {version}")
    off = 16
    if len(buf) < off + 4 * n_stages + 8:
        raise FormatError("truncated MENC header")
    widths = struct.unpack_from(f"<{n_stages}I", buf, off)
    off += 4 * n_stages
    dim_e, count = struct.unpack_from("<II", buf, off)
    off += 8
    try:
        arch = EncoderArch(size, widths, FlowArch.from_param_count(dim_e).hidden)
    except ValidationError as exc:
        raise FormatError(str(exc)) from exc
    if count != arch.param_count:
        raise FormatError("MENC parameter count inconsistent with architecture")
    end = off + 4 * count
    if len(buf) < end + 4:
        raise FormatError("truncated MENC checkpoint")
    params = np.frombuffer(buf, "<f4", count, off).astype(np.float64)
    (mlen,) = struct.unpack_from("<I", buf, end)
    if len(buf) != end + 4 + mlen:
        raise FormatError("MENC metadata length mismatch")
    try:
        meta = json.loads(buf[end + 4 :].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"bad MENC metadata: {exc}") from exc
    return EncoderModel(arch, params, meta)


def save_encoder(model: EncoderModel, path) -> None:
    try:
        Path(path).write_bytes(encoder_to_bytes(model))
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def load_encoder(path) -> EncoderModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    return encoder_from_bytes(buf)


def write_embeddings_csv(db: list[PaletteEmbedding], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = db[0].e.size if db else 0
        w.writerow(["id"] + [f"e{i}" for i in range(dim)])
        for emb in db:
            w.writerow([emb.image_id] + [repr(float(v)) for v in emb.e])


def read_embeddings_csv(path) -> list[PaletteEmbedding]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [PaletteEmbedding(np.array([float(v) for v in r[1:]]), r[0]) for r in rows[1:]]


__all__ = [
    "EncoderArch",
    "EncoderModel",
    "EncoderTrainParams",
    "EncoderTrainState",
    "DatasetEntry",
    "FlowDataset",
    "PaletteEmbedding",
    "init_encoder",
    "preprocess",
    "encoder_forward",
    "encoder_backward",
    "encoder_batch_loss",
    "encode",
    "modulated_flow",
    "distill_targets",
    "train_encoder",
    "embed_search",
    "moment_embedding",
    "velocity_theta",
    "save_encoder",
    "load_encoder",
    "encoder_to_bytes",
    "encoder_from_bytes",
    "write_embeddings_csv",
    "read_embeddings_csv",
]
