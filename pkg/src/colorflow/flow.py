"""Velocity-field MLP, its analytic gradient, Adam, rectified-flow training and Euler integration.

The velocity field is ``v(x, t) = W2 @ tanh(W1 @ [x; t] + b1) + b2`` with parameters
packed into one flat vector ``theta = [W1 (H x 4), b1 (H), W2 (3 x H), b2 (3)]``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import FormatError, ImageIOError, NumericalError, ValidationError
from .imagecore import PixelCloud

log = logging.getLogger(__name__)

MODF_MAGIC = b"MODF"
MODF_VERSION = 1

DEFAULT_HIDDEN = 1024
DEFAULT_ITERS = 100_000
DEFAULT_LR = 5e-4
DEFAULT_BATCH = 4096
DIVERGENCE_LOSS = 1e6

# rows per einsum call during integration; bounds the (rows, H) activation buffer
_INTEGRATE_CHUNK = 65536


@dataclass(frozen=True)
class FlowArch:
    hidden: int = DEFAULT_HIDDEN
    input_dim: int = field(default=4, init=False)
    output_dim: int = field(default=3, init=False)
    activation: str = field(default="tanh", init=False)

    def __post_init__(self):
        if int(self.hidden) < 1:
            raise ValidationError("hidden units must be >= 1")

    @property
    def param_count(self) -> int:
        return 8 * self.hidden + 3

    @classmethod
    def from_param_count(cls, count: int) -> FlowArch:
        if count < 11 or (count - 3) % 8:
            raise ValidationError(f"{count} is not 8H+3 for any H >= 1")
        return cls((count - 3) // 8)


@dataclass(frozen=True)
class FlowMeta:
    iterations: int = 0
    final_loss: float = float("nan")
    source_id: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {"iterations": self.iterations, "final_loss": self.final_loss, "source_id": self.source_id},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> FlowMeta:
        d = json.loads(text)
        return cls(int(d.get("iterations", 0)), float(d.get("final_loss", float("nan"))), str(d.get("source_id", "")))


@dataclass(frozen=True)
class FlowWeights:
    arch: FlowArch
    theta: np.ndarray
    meta: FlowMeta = FlowMeta()

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).ravel()
        if theta.size != self.arch.param_count:
            raise ValidationError(f"theta has {theta.size} entries, arch needs {self.arch.param_count}")
        if not np.all(np.isfinite(theta)):
            raise ValidationError("theta has non-finite entries")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    def layers(self):
        return unpack(self.theta, self.arch.hidden)

    @classmethod
    def zeros(cls, arch: FlowArch) -> FlowWeights:
        return cls(arch, np.zeros(arch.param_count))


class LatentSpec:
    """The shared latent distribution: uniform on the unit cube."""

    dim = 3

    @staticmethod
    def sample(n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random((n, 3))


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float = DEFAULT_LR, **kw) -> OptimizerState:
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kw)


def unpack(theta: np.ndarray, hidden: int):
    """Views ``(W1, b1, W2, b2)`` into a flat parameter vector."""
    h = hidden
    W1 = theta[: 4 * h].reshape(h, 4)
    b1 = theta[4 * h : 5 * h]
    W2 = theta[5 * h : 8 * h].reshape(3, h)
    b2 = theta[8 * h : 8 * h + 3]
    return W1, b1, W2, b2


def init_flow(arch: FlowArch, rng: np.random.Generator) -> FlowWeights:
    """Uniform init in +-1/sqrt(fan_in) per layer, biases included."""
    h = arch.hidden
    theta = np.empty(arch.param_count)
    theta[: 5 * h] = rng.uniform(-0.5, 0.5, 5 * h)  # fan_in 4
    theta[5 * h :] = rng.uniform(-1.0, 1.0, 3 * h + 3) / np.sqrt(h)
    return FlowWeights(arch, theta)


def _as_inputs(x, t) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    return np.column_stack([x, t])


def velocity_theta(theta: np.ndarray, hidden: int, x, t) -> np.ndarray:
    """Evaluate the field for a raw parameter vector.

    Uses non-BLAS einsum so each row's result does not depend on how many
    rows are evaluated together; tiling invariance relies on this.
    """
    W1, b1, W2, b2 = unpack(theta, hidden)
    inp = _as_inputs(x, t)
    hid = np.tanh(np.einsum("nk,hk->nh", inp, W1, optimize=False) + b1)
    return np.einsum("nh,oh->no", hid, W2, optimize=False) + b2


def velocity(w: FlowWeights, x, t) -> np.ndarray:
    """``v_theta(x, t)`` for points ``x`` of shape (N, 3) or (3,); returns (N, 3)."""
    return velocity_theta(w.theta, w.arch.hidden, x, t)


def loss_grad_theta(theta: np.ndarray, hidden: int, inputs: np.ndarray, target: np.ndarray):
    """Mean squared velocity error and its gradient for a raw parameter vector.

    ``inputs`` is (N, 4) with time in the last column, ``target`` is (N, 3).
    """
    W1, b1, W2, b2 = unpack(theta, hidden)
    n = inputs.shape[0]
    hid = np.tanh(inputs @ W1.T + b1)
    v = hid @ W2.T + b2
    resid = v - target
    loss = float(np.sum(resid * resid) / n)

    dv = (2.0 / n) * resid
    dW2 = dv.T @ hid
    db2 = dv.sum(axis=0)
    da = (dv @ W2) * (1.0 - hid * hid)
    dW1 = da.T @ inputs
    db1 = da.sum(axis=0)
    grad = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
    return loss, grad


def flow_loss_grad(w: FlowWeights, x_t, t, target_v):
    """Loss ``mean ||target_v - v(x_t, t)||^2`` and its exact gradient w.r.t. theta."""
    target_v = np.atleast_2d(np.asarray(target_v, dtype=np.float64))
    if target_v.shape[0] == 0:
        raise ValidationError("empty batch")
    return loss_grad_theta(w.theta, w.arch.hidden, _as_inputs(x_t, t), target_v)


def adam_step(state: OptimizerState, w, grad: np.ndarray, lr: float | None = None):
    """Bias-corrected Adam update. ``w`` may be a FlowWeights or a flat array.

    Returns ``(new_state, new_w)``; inputs are left untouched.
    """
    theta = w.theta if isinstance(w, FlowWeights) else np.asarray(w, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValidationError("adam_step: dimension mismatch")
    lr = state.lr if lr is None else lr
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_theta = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, m=m, v=v, step=step)
    if isinstance(w, FlowWeights):
        return new_state, replace(w, theta=new_theta)
    return new_state, new_theta


def _adam_inplace(state: OptimizerState, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
    # same update as adam_step, without the per-step copies of the training loop
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    theta -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def train_flow(
    cloud,
    arch: FlowArch = FlowArch(),
    iters: int = DEFAULT_ITERS,
    lr: float = DEFAULT_LR,
    batch: int = DEFAULT_BATCH,
    seed: int = 0,
    target=None,
    history: list | None = None,
) -> FlowWeights:
    """Fit a rectified flow from ``cloud`` to the uniform cube (or to ``target``).

    Each iteration pairs source samples with independent target samples,
    draws ``t ~ U[0, 1]`` per pair and regresses ``target - source`` at the
    interpolated point. ``history`` receives per-iteration losses if given.
    """
    src = cloud.samples if isinstance(cloud, PixelCloud) else np.asarray(cloud, dtype=np.float64)
    if src.ndim != 2 or src.shape[0] < 1:
        raise ValidationError("training cloud must be a non-empty (N, 3) array")
    if target is not None:
        target = target.samples if isinstance(target, PixelCloud) else np.asarray(target, dtype=np.float64)
    rng = np.random.default_rng(seed)
    theta = init_flow(arch, rng).theta.copy()
    state = OptimizerState.fresh(theta.size, lr)
    recent = []
    inputs = np.empty((batch, 4))
    for it in range(iters):
        x0 = src[rng.integers(0, src.shape[0], size=batch)]
        if target is None:
            x1 = LatentSpec.sample(batch, rng)
        else:
            x1 = target[rng.integers(0, target.shape[0], size=batch)]
        t = rng.random(batch)
        inputs[:, :3] = t[:, None] * x1 + (1.0 - t[:, None]) * x0
        inputs[:, 3] = t
        loss, grad = loss_grad_theta(theta, arch.hidden, inputs, x1 - x0)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise NumericalError(f"flow training diverged at iteration {it} (loss={loss})")
        _adam_inplace(state, theta, grad, lr)
        recent.append(loss)
        if len(recent) > 100:
            recent.pop(0)
        if history is not None:
            history.append(loss)
        if log.isEnabledFor(logging.DEBUG) and it % 1000 == 0:
            log.debug("train_flow iter %d loss %.5f", it, loss)
    # stored weights are float32, so round now and keep memory == file
    theta = theta.astype(np.float32).astype(np.float64)
    source_id = getattr(cloud, "source_id", None) or ""
    meta = FlowMeta(iters, float(np.mean(recent)) if recent else float("nan"), source_id)
    return FlowWeights(arch, theta, meta)


def integrate(
    w: FlowWeights,
    points,
    steps: int = 8,
    strength: float = 1.0,
    direction: Literal["forward", "inverse"] = "forward",
) -> np.ndarray:
    """Explicit Euler along the flow; returns an unclamped (N, 3) array.

    Both directions use the grid ``t_k = k * dt`` (k = 0..steps-1, dt = strength/steps).
    forward visits it upward with ``z += dt * v(z, t_k)``; inverse visits it
    downward with ``z -= dt * v(z, t_k)``, so each inverse step undoes its
    forward partner up to the change of ``v`` across the step.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if not 0.0 <= strength <= 1.0:
        raise ValidationError("strength must lie in [0, 1]")
    if direction not in ("forward", "inverse"):
        raise ValidationError(f"unknown direction {direction!r}")
    pts = points.samples if isinstance(points, PixelCloud) else points
    z = np.array(pts, dtype=np.float64, copy=True).reshape(-1, 3)
    if strength == 0.0:
        return z
    dt = strength / steps
    for k in range(steps):
        if direction == "forward":
            t, sign = k * dt, 1.0
        else:
            t, sign = (steps - 1 - k) * dt, -1.0
        with np.errstate(over="ignore", invalid="ignore"):
            for lo in range(0, z.shape[0], _INTEGRATE_CHUNK):
                chunk = z[lo : lo + _INTEGRATE_CHUNK]
                chunk += sign * dt * velocity(w, chunk, t)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite state at Euler step {k} ({direction})")
    return z


def flow_to_bytes(w: FlowWeights) -> bytes:
    meta = w.meta.to_json().encode("utf-8")
    return b"".join(
        [
            MODF_MAGIC,
            struct.pack("<III", MODF_VERSION, w.arch.hidden, w.arch.param_count),
            w.theta.astype("<f4").tobytes(),
            struct.pack("<I", len(meta)),
            meta,
        ]
    )


def flow_from_bytes(buf: bytes) -> FlowWeights:
    if len(buf) < 16 or buf[:4] != MODF_MAGIC:
        raise FormatError("not a MODF weight file")
    version, hidden, count = struct.unpack_from("<III", buf, 4)
    if version != MODF_VERSION:
        raise FormatError(f"unsupported MODF version {version}")
    arch = FlowArch(hidden)
    if count != arch.param_count:
        raise FormatError(f"param count {count} inconsistent with H={hidden}")
    off = 16
    end = off + 4 * count
    if len(buf) < end + 4:
        raise FormatError("truncated MODF file")
    theta = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float64)
    (mlen,) = struct.unpack_from("<I", buf, end)
    if len(buf) != end + 4 + mlen:
        raise FormatError("MODF metadata length mismatch")
    try:
        meta = FlowMeta.from_json(buf[end + 4 :].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"bad MODF metadata: {exc}") from exc
    try:
        return FlowWeights(arch, theta, meta)
    except ValidationError as exc:
        raise FormatError(str(exc)) from exc


def save_flow(w: FlowWeights, path) -> None:
    try:
        Path(path).write_bytes(flow_to_bytes(w))
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def load_flow(path) -> FlowWeights:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    return flow_from_bytes(buf)
