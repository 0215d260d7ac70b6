"""Linear interpolation between solutions, loss/accuracy barriers and fusion.

Convention: ``interpolate(w1, w2, alpha) = alpha * w1 + (1 - alpha) * w2``,
so alpha = 1 is the first endpoint. Barriers are grid maxima, which
approximate the supremum from below.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, DimensionError
from .nncore import Dataset, LayeredNetwork, Metrics, evaluate, unflatten

DEFAULT_GRID = 25


def _vec(w):
    return w.params if isinstance(w, LayeredNetwork) else np.asarray(w, dtype=np.float64)


def interpolate(w1, w2, alpha: float) -> np.ndarray:
    a, b = _vec(w1), _vec(w2)
    if a.shape != b.shape:
        raise DimensionError(f"cannot interpolate vectors of shape {a.shape} and {b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * a + (1.0 - alpha) * b


def alpha_grid(grid_size: int = DEFAULT_GRID) -> np.ndarray:
    if grid_size < 2:
        raise ConfigError("grid_size must be >= 2")
    return np.linspace(0.0, 1.0, grid_size)


@dataclass
class InterpolationProfile:
    alphas: np.ndarray
    loss_interp: np.ndarray
    loss_mix: np.ndarray
    acc_interp: Optional[np.ndarray]
    acc_mix: Optional[np.ndarray]
    endpoint1: Metrics
    endpoint2: Metrics
    midpoint: Metrics

    @property
    def grid_size(self):
        return len(self.alphas)

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["alpha", "loss_interp", "loss_mix", "acc_interp", "acc_mix"])
        for i, a in enumerate(self.alphas):
            acc_i = "" if self.acc_interp is None else repr(float(self.acc_interp[i]))
            acc_m = "" if self.acc_mix is None else repr(float(self.acc_mix[i]))
            writer.writerow([repr(float(a)), repr(float(self.loss_interp[i])),
                             repr(float(self.loss_mix[i])), acc_i, acc_m])
        return buf.getvalue()


@dataclass
class BarrierReport:
    loss_barrier: float
    loss_argmax_alpha: float
    acc_barrier: Optional[float]
    acc_argmax_alpha: Optional[float]
    grid_size: int
    midpoint_loss: float
    midpoint_acc: Optional[float]
    endpoint_acc: Optional[tuple]

    def to_dict(self):
        return dict(self.__dict__)


def parallel_map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def sweep(net1: LayeredNetwork, net2: LayeredNetwork, data: Dataset,
          grid_size: int = DEFAULT_GRID, loss: Optional[str] = None,
          threads: int = 1, alphas: Sequence[float] | None = None) -> InterpolationProfile:
    """Evaluate every interpolant on the grid; also the alpha = 0.5 midpoint."""
    if net1.spec.layer_widths != net2.spec.layer_widths:
        raise DimensionError("endpoints have different architectures")
    alphas = alpha_grid(grid_size) if alphas is None else np.asarray(alphas, dtype=np.float64)
    spec = net1.spec

    def tagged(net, alpha):
        try:
            return evaluate(net, data, loss)
        except Exception as exc:
            exc.alpha = alpha
            raise

    m1 = tagged(net1, 1.0)
    m2 = tagged(net2, 0.0)

    def at(alpha):
        return tagged(unflatten(spec, interpolate(net1, net2, alpha)), alpha)

    metrics = parallel_map(at, [float(a) for a in alphas], threads)
    hit = np.flatnonzero(alphas == 0.5)
    midpoint = metrics[hit[0]] if hit.size else at(0.5)
    loss_interp = np.array([m.loss for m in metrics])
    loss_mix = alphas * m1.loss + (1.0 - alphas) * m2.loss
    acc_interp = acc_mix = None
    if data.is_classification:
        acc_interp = np.array([m.accuracy for m in metrics])
        acc_mix = alphas * m1.accuracy + (1.0 - alphas) * m2.accuracy
    return InterpolationProfile(alphas, loss_interp, loss_mix, acc_interp, acc_mix,
                                m1, m2, midpoint)


def loss_barrier(profile: InterpolationProfile) -> float:
    """max over the grid of L(interp) - mix of endpoint losses; not clamped at 0."""
    return float(np.max(profile.loss_interp - profile.loss_mix))


def acc_barrier(profile: InterpolationProfile) -> float:
    """max over the grid of 1 - A(interp) / mix of endpoint accuracies."""
    if profile.acc_interp is None:
        raise ConfigError("accuracy barrier needs a classification profile")
    if np.any(profile.acc_mix <= 0):
        bad = profile.alphas[profile.acc_mix <= 0]
        raise DegenerateError(f"endpoint accuracy mix is zero at alpha={bad.tolist()}")
    return float(np.max(1.0 - profile.acc_interp / profile.acc_mix))


def barrier_report(profile: InterpolationProfile) -> BarrierReport:
    gap = profile.loss_interp - profile.loss_mix
    i = int(np.argmax(gap))
    acc_b = acc_a = ep_acc = None
    if profile.acc_interp is not None:
        ratio = 1.0 - profile.acc_interp / profile.acc_mix
        j = int(np.argmax(ratio))
        acc_b, acc_a = acc_barrier(profile), float(profile.alphas[j])
        ep_acc = (profile.endpoint1.accuracy, profile.endpoint2.accuracy)
    return BarrierReport(
        loss_barrier=float(gap[i]),
        loss_argmax_alpha=float(profile.alphas[i]),
        acc_barrier=acc_b,
        acc_argmax_alpha=acc_a,
        grid_size=profile.grid_size,
        midpoint_loss=profile.midpoint.loss,
        midpoint_acc=profile.midpoint.accuracy,
        endpoint_acc=ep_acc,
    )


def multi_fuse(models, weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted average, written as ``w_0 + sum_i lambda_i (w_i - w_0)`` so that
    coordinates on which all models agree come out bit-exact."""
    vecs = [_vec(m) for m in models]
    if len(vecs) < 2:
        raise ConfigError("fusion needs at least two models")
    if any(v.shape != vecs[0].shape for v in vecs):
        raise DimensionError("models have different parameter layouts")
    if weights is None:
        weights = np.full(len(vecs), 1.0 / len(vecs))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(vecs),):
        raise ConfigError("need one fusion weight per model")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ConfigError(f"fusion weights must be non-negative and sum to 1, got {weights.sum()}")
    return _anchored_average(vecs[0], vecs, weights)


def _anchored_average(anchor, vecs, weights):
    out = anchor.copy()
    for lam, v in zip(weights, vecs):
        if v is anchor:
            continue
        out += lam * (v - anchor)
    return out


@dataclass
class LandscapeGrid:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray  # loss[i, j] at origin + xs[i] u + ys[j] v
    accuracy: Optional[np.ndarray]
    points: dict  # plane coordinates of origin, w_a, w_b

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "y", "loss", "accuracy"])
        for i, x in enumerate(self.xs):
            for j, y in enumerate(self.ys):
                acc = "" if self.accuracy is None else repr(float(self.accuracy[i, j]))
                writer.writerow([repr(float(x)), repr(float(y)),
                                 repr(float(self.loss[i, j])), acc])
        return buf.getvalue()


def _axis(lo, hi, resolution):
    # integer multiples of the step, so the coordinate 0 is always on the grid
    step = (hi - lo) / (resolution - 2)
    k0 = int(np.floor(lo / step))
    return (k0 + np.arange(resolution)) * step


def plane_slice(origin, w_a, w_b, data: Dataset, resolution: int = 25,
                loss: Optional[str] = None, margin: float = 0.2,
                spec=None, threads: int = 1) -> LandscapeGrid:
    """Loss on the plane through three parameter vectors.

    The basis is Gram-Schmidt of (w_a - origin, w_b - origin); both axes
    share one coordinate range covering the three points plus ``margin``.
    """
    if spec is None:
        spec = next(w.spec for w in (origin, w_a, w_b) if isinstance(w, LayeredNetwork))
    o, a, b = _vec(origin), _vec(w_a), _vec(w_b)
    if resolution < 3:
        raise ConfigError("resolution must be >= 3")
    da, db = a - o, b - o
    na = np.linalg.norm(da)
    if na == 0:
        raise DegenerateError("w_a coincides with the origin")
    u = da / na
    rest = db - (db @ u) * u
    nr = np.linalg.norm(rest)
    if nr <= 1e-12 * max(np.linalg.norm(db), 1.0):
        raise DegenerateError("the three points are collinear")
    v = rest / nr
    pts = {"origin": (0.0, 0.0), "w_a": (float(na), 0.0),
           "w_b": (float(db @ u), float(db @ v))}
    coords = np.array([c for p in pts.values() for c in p])
    lo, hi = coords.min(), coords.max()
    pad = margin * (hi - lo)
    xs = _axis(lo - pad, hi + pad, resolution)
    ys = xs.copy()

    def at(ij):
        i, j = ij
        return evaluate(unflatten(spec, o + xs[i] * u + ys[j] * v), data, loss)

    cells = [(i, j) for i in range(resolution) for j in range(resolution)]
    metrics = parallel_map(at, cells, threads)
    grid = np.array([m.loss for m in metrics]).reshape(resolution, resolution)
    acc = None
    if data.is_classification:
        acc = np.array([m.accuracy for m in metrics]).reshape(resolution, resolution)
    return LandscapeGrid(o, u, v, xs, ys, grid, acc, pts)
