"""Optimal-transport ground truths and transfer evaluation metrics."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Literal

import numpy as np
from scipy import optimize, sparse

from .errors import ValidationError
from .imagecore import PixelCloud, RgbImage, normalize_grayscale

EXACT_MAX = 2048
STYLE_SAMPLES = 6000
DEFAULT_PROJECTIONS = 128
DEFAULT_RADIUS = 1.0 / 255.0

CostKind = Literal["sqeuclidean", "euclidean"]


def _points(x) -> np.ndarray:
    if isinstance(x, PixelCloud):
        return x.samples
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    return a


@dataclass(frozen=True)
class CostSpec:
    kind: CostKind = "sqeuclidean"

    def matrix(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        diff = p[:, None, :] - q[None, :, :]
        sq = np.einsum("nmd,nmd->nm", diff, diff)
        if self.kind == "sqeuclidean":
            return sq
        if self.kind == "euclidean":
            return np.sqrt(sq)
        raise ValidationError(f"unknown cost kind {self.kind!r}")


@dataclass(frozen=True)
class CouplingMatrix:
    weights: np.ndarray

    def marginals(self):
        return self.weights.sum(axis=1), self.weights.sum(axis=0)


def ot_exact(p, q, cost: CostSpec | CostKind = "sqeuclidean", max_size: int = EXACT_MAX):
    """Exact discrete OT between uniform empirical measures.

    Equal sizes reduce to an assignment problem (Birkhoff); unequal sizes are
    solved as a transportation LP. Returns ``(cost, CouplingMatrix)``.
    """
    cost = CostSpec(cost) if isinstance(cost, str) else cost
    p, q = _points(p), _points(q)
    n, m = p.shape[0], q.shape[0]
    if n == 0 or m == 0:
        raise ValidationError("empty cloud")
    if n > max_size or m > max_size:
        raise ValidationError(
            f"exact OT limited to {max_size} points per cloud (got {n}, {m}); use the sliced estimator"
        )
    C = cost.matrix(p, q)
    if n == m:
        rows, cols = optimize.linear_sum_assignment(C)
        P = np.zeros((n, m))
        P[rows, cols] = 1.0 / n
        return float(C[rows, cols].sum() / n), CouplingMatrix(P)

    a_rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    a_cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A = sparse.vstack([a_rows, a_cols]).tocsr()
    b = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = optimize.linprog(
        C.ravel(),
        A_eq=A,
        b_eq=b,
        bounds=(0, None),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise ValidationError(f"transport LP failed: {res.message}")
    P = np.clip(res.x.reshape(n, m), 0.0, None)
    return float(np.sum(P * C)), CouplingMatrix(P)


def wasserstein_1d(a, b, order: int = 1) -> float:
    """W_p between two 1-D empirical measures via their quantile functions."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == b.size:
        return float(np.mean(np.abs(a - b) ** order) ** (1.0 / order))
    # piecewise-constant quantile functions, integrated over merged breakpoints
    u = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    du = np.diff(np.concatenate([[0.0], u]))
    ia = np.minimum(np.ceil(u * a.size - 1e-12).astype(int) - 1, a.size - 1)
    ib = np.minimum(np.ceil(u * b.size - 1e-12).astype(int) - 1, b.size - 1)
    return float(np.sum(du * np.abs(a[ia] - b[ib]) ** order) ** (1.0 / order))


def _sphere_moment(dim: int, order: int) -> float:
    """E|theta_1|^order for theta uniform on the unit sphere in R^dim."""
    return math.gamma(dim / 2) * math.gamma((order + 1) / 2) / (math.sqrt(math.pi) * math.gamma((dim + order) / 2))


def sliced_wasserstein(p, q, n_proj: int = DEFAULT_PROJECTIONS, seed: int = 0, order: int = 1) -> float:
    """Sliced W_p, rescaled so a pure translation by ``v`` scores ``|v|``.

    The raw average over random directions shrinks every displacement by
    ``E|theta_1|`` (1/2 in 3-D); dividing it out keeps the estimate on the
    scale of the exact distance.
    """
    p, q = _points(p), _points(q)
    dim = p.shape[1]
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_proj, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pp = np.sort(p @ dirs.T, axis=0)
    qq = np.sort(q @ dirs.T, axis=0)
    if pp.shape[0] == qq.shape[0]:
        per = np.mean(np.abs(pp - qq) ** order, axis=0)
    else:
        per = np.array([wasserstein_1d(pp[:, k], qq[:, k], order) ** order for k in range(n_proj)])
    raw = float(np.mean(per)) ** (1.0 / order)
    return raw / _sphere_moment(dim, order) ** (1.0 / order)


def _subsample(x: np.ndarray, n: int | None, seed: int) -> np.ndarray:
    if n is None or n >= x.shape[0]:
        return x
    idx = np.random.default_rng(seed).choice(x.shape[0], size=n, replace=False)
    return x[np.sort(idx)]


def wasserstein(
    p,
    q,
    n: int | None = STYLE_SAMPLES,
    mode: Literal["exact", "sliced"] = "sliced",
    seed: int = 0,
    n_proj: int = DEFAULT_PROJECTIONS,
    order: int = 1,
) -> float:
    """Empirical W_p (default W_1, Euclidean ground cost) between two clouds.

    Both clouds are subsampled to ``n`` points with the same seed, so
    identical clouds give identical subsamples.
    """
    p = _subsample(_points(p), n, seed)
    q = _subsample(_points(q), n, seed)
    if mode == "exact":
        kind = "euclidean" if order == 1 else "sqeuclidean"
        if order not in (1, 2):
            raise ValidationError("exact mode supports order 1 or 2")
        c, _ = ot_exact(p, q, kind)
        return c if order == 1 else math.sqrt(c)
    if mode == "sliced":
        return sliced_wasserstein(p, q, n_proj, seed + 1, order)
    raise ValidationError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class MonotoneMap:
    """Tabulated increasing rearrangement: ``source[i] -> target[i]``."""

    source: np.ndarray
    target: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return np.interp(np.asarray(x, dtype=np.float64), self.source, self.target)


def rearrange_1d(source, target) -> MonotoneMap:
    """Increasing rearrangement ``F_target^-1 o F_source`` on sample tables.

    Source rank ``i`` (midpoint level ``(i + 0.5) / N``) maps to the target
    quantile at that level, interpolating linearly between target order
    statistics placed at their own midpoint levels.
    """
    s = np.sort(np.asarray(source, dtype=np.float64).ravel())
    t = np.sort(np.asarray(target, dtype=np.float64).ravel())
    if s.size == 0 or t.size == 0:
        raise ValidationError("rearrange_1d needs non-empty samples")
    levels = (np.arange(s.size) + 0.5) / s.size
    t_levels = (np.arange(t.size) + 0.5) / t.size
    mapped = np.interp(levels, t_levels, t)
    return MonotoneMap(s, mapped)


def transport_cost(x, y) -> float:
    """Mean squared displacement of a paired sample."""
    d = _points(x) - _points(y)
    return float(np.mean(np.sum(d * d, axis=1)))


@dataclass(frozen=True)
class AffineMap:
    A: np.ndarray
    b: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return _points(x) @ self.A.T + self.b


def _sym_power(S: np.ndarray, power: float) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    w = np.clip(w, 0.0, None)
    return (V * w**power) @ V.T


def mkl_map(p, q, eps: float = 1e-6) -> AffineMap:
    """Closed-form Gaussian OT map (Monge-Kantorovich linear)."""
    x, y = _points(p), _points(q)
    mu0, mu1 = x.mean(axis=0), y.mean(axis=0)
    S0 = np.atleast_2d(np.cov(x, rowvar=False))
    S1 = np.atleast_2d(np.cov(y, rowvar=False))
    if np.linalg.eigvalsh(S0).min() < eps:
        warnings.warn("source covariance near singular; adding eps*I", RuntimeWarning, stacklevel=2)
        S0 = S0 + eps * np.eye(S0.shape[0])
    r0 = _sym_power(S0, 0.5)
    r0_inv = _sym_power(S0, -0.5)
    mid = _sym_power(r0 @ S1 @ r0, 0.5)
    A = r0_inv @ mid @ r0_inv
    A = 0.5 * (A + A.T)
    return AffineMap(A, mu1 - A @ mu0)


def lipschitz_estimate(
    fmap: Callable[[np.ndarray], np.ndarray],
    domain,
    pairs: int = 1000,
    radius: float = DEFAULT_RADIUS,
    seed: int = 0,
) -> float:
    """Average local expansion ratio ``|f(x') - f(x)| / |x' - x|``.

    ``x`` is drawn from ``domain``; ``x'`` is ``x`` plus a random offset of
    length ``radius``, clamped into the unit cube. Pairs whose clamped offset
    shrinks below half the radius are redrawn.
    """
    if pairs < 1 or radius <= 0:
        raise ValidationError("pairs must be >= 1 and radius > 0")
    pts = _points(domain)
    rng = np.random.default_rng(seed)
    x = pts[rng.integers(0, pts.shape[0], size=pairs)]
    xp = np.empty_like(x)
    todo = np.arange(pairs)
    for _ in range(100):
        d = rng.normal(size=(todo.size, x.shape[1]))
        d *= radius / np.linalg.norm(d, axis=1, keepdims=True)
        xp[todo] = np.clip(x[todo] + d, 0.0, 1.0)
        gap = np.linalg.norm(xp[todo] - x[todo], axis=1)
        todo = todo[gap < 0.5 * radius]
        if todo.size == 0:
            break
    else:
        raise ValidationError("could not place perturbation pairs inside the cube")
    fx = np.asarray(fmap(x), dtype=np.float64)
    fxp = np.asarray(fmap(xp), dtype=np.float64)
    ratios = np.linalg.norm(fxp - fx, axis=1) / np.linalg.norm(xp - x, axis=1)
    return float(np.mean(ratios))


def lipschitz_from_pixels(content: RgbImage, output: RgbImage, pairs: int = 1000, seed: int = 0) -> float:
    """Lipschitz proxy when only the before/after images are known.

    Pairs each sampled pixel with its nearest distinct color in the content
    image and averages the output/input color-difference ratio.
    """
    from scipy.spatial import cKDTree

    if content.data.shape != output.data.shape:
        raise ValidationError("content and output dimensions differ")
    src = content.pixels()
    dst = output.pixels()
    colors, first = np.unique(src, axis=0, return_index=True)
    if colors.shape[0] < 2:
        return 0.0
    out_colors = dst[first]
    tree = cKDTree(colors)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, colors.shape[0], size=pairs)
    _, nn = tree.query(colors[idx], k=2)
    j = nn[:, 1]
    num = np.linalg.norm(out_colors[idx] - out_colors[j], axis=1)
    den = np.linalg.norm(colors[idx] - colors[j], axis=1)
    return float(np.mean(num / den))


def content_distance(a: RgbImage, b: RgbImage) -> float:
    """Mean absolute difference of the equalized grayscale images."""
    if a.data.shape != b.data.shape:
        raise ValidationError(f"dimension mismatch {a.data.shape} vs {b.data.shape}")
    ga = normalize_grayscale(a).intensity
    gb = normalize_grayscale(b).intensity
    return float(np.mean(np.abs(ga - gb)))


def aggregated_score(style: float, content: float, p: float = 0.0) -> float:
    if style < 0 or content < 0:
        raise ValidationError("scores must be non-negative")
    return math.hypot(p - style, p - content)


@dataclass(frozen=True)
class TransportReport:
    style_distance: float
    content_distance: float
    aggregated: float
    lipschitz: float

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValidationError(f"{name} must be >= 0, got {value}")


def evaluate_transfer(
    content: RgbImage,
    style: RgbImage,
    output: RgbImage,
    fmap: Callable[[np.ndarray], np.ndarray] | None = None,
    n: int = STYLE_SAMPLES,
    seed: int = 0,
    lipschitz_pairs: int = 1000,
    radius: float = DEFAULT_RADIUS,
    p: float = 0.0,
) -> TransportReport:
    """Style/content/aggregated/Lipschitz metrics for one transfer.

    Without ``fmap`` the Lipschitz term falls back to the pixel-pair proxy.
    """
    if output.data.shape != content.data.shape:
        raise ValidationError("output must have the content image's dimensions")
    out_cloud = _sample(output, n, seed)
    style_cloud = _sample(style, n, seed)
    sd = sliced_wasserstein(out_cloud, style_cloud, DEFAULT_PROJECTIONS, seed + 1)
    cd = content_distance(content, output)
    if fmap is None:
        lip = lipschitz_from_pixels(content, output, lipschitz_pairs, seed)
    else:
        lip = lipschitz_estimate(fmap, content.pixels(), lipschitz_pairs, radius, seed)
    return TransportReport(sd, cd, aggregated_score(sd, cd, p), lip)


def _sample(img: RgbImage, n: int, seed: int) -> np.ndarray:
    flat = img.data.reshape(-1, 3)
    idx = np.random.default_rng(seed).integers(0, flat.shape[0], size=n)
    return flat[idx].astype(np.float64)


REPORT_FIELDS = ["method", "content", "style", "style_distance", "content_distance", "aggregated", "lipschitz"]


def write_report_csv(rows, path_or_file) -> None:
    """Rows are ``(method, content_id, style_id, TransportReport)`` tuples."""

    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for method, cid, sid, rep in rows:
            w.writerow(
                [method, cid, sid]
                + [f"{v:.6f}" for v in (rep.style_distance, rep.content_distance, rep.aggregated, rep.lipschitz)]
            )

    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            _write(fh)


def summarize(rows) -> dict[str, dict[str, tuple[float, float]]]:
    """Per-method mean and standard error of the mean (sample std / sqrt(n))."""
    by_method: dict[str, list[TransportReport]] = {}
    for method, _, _, rep in rows:
        by_method.setdefault(method, []).append(rep)
    out = {}
    for method, reps in by_method.items():
        stats = {}
        for name in ("style_distance", "content_distance", "aggregated", "lipschitz"):
            vals = np.array([getattr(r, name) for r in reps])
            sem = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
            stats[name] = (float(vals.mean()), sem)
        out[method] = stats
    return out


def format_table(summary) -> str:
    lines = [f"{'method':<12} {'style':>16} {'content':>16} {'aggregated':>16} {'lipschitz':>18}"]
    for method, s in sorted(summary.items()):
        cells = [f"{s[k][0]:.4f} ± {s[k][1]:.4f}" for k in ("style_distance", "content_distance", "aggregated")]
        cells.append(f"{s['lipschitz'][0]:.3f} ± {s['lipschitz'][1]:.3f}")
        lines.append(f"{method:<12} {cells[0]:>16} {cells[1]:>16} {cells[2]:>16} {cells[3]:>18}")
    return "\n".join(lines)
