"""Monte Carlo check of the concentration bounds for masked two-layer ReLU pairs.

The pair is ``f(x) = v^T relu(U x)`` and ``f'(x) = v'^T relu(U' x)`` with a
shared frozen subset (mask 0 = shared). ``z_x(alpha)`` is the gap between the
interpolated network and the interpolation of the two outputs; ``z(alpha)``
averages it over inputs drawn uniformly from the radius-``b`` ball.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .connect import parallel_map
from .errors import ConfigError

TREND_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class TheoryConfig:
    h: int = 512
    d: int = 32
    b: float = 1.0
    sigma_v: float = 1.0
    sigma_U: float = 1.0
    rho_v: float = 0.4
    rho_U: float = 0.4
    delta: float = 0.1
    n_x: int = 4096
    alpha_grid_size: int = 25

    def __post_init__(self):
        if self.h < 1 or self.d < 1 or self.n_x < 2:
            raise ConfigError("h, d must be >= 1 and n_x >= 2")
        if self.b <= 0 or self.sigma_v <= 0 or self.sigma_U <= 0:
            raise ConfigError("b and the sampling std devs must be positive")
        for name in ("rho_v", "rho_U"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.alpha_grid_size < 3:
            raise ConfigError("alpha_grid_size must be >= 3 for second differences")

    @property
    def alphas(self):
        return np.linspace(0.0, 1.0, self.alpha_grid_size)


@dataclass
class TwoLayerPair:
    U: np.ndarray
    U2: np.ndarray
    v: np.ndarray
    v2: np.ndarray
    M_U: np.ndarray  # True = free (trainable), False = shared
    M_v: np.ndarray


def _exact_mask(rng, shape, ratio):
    n = int(np.prod(shape))
    k = min(n, math.floor(ratio * n + 1e-9))
    bits = np.ones(n, dtype=bool)
    bits[rng.permutation(n)[:k]] = False
    return bits.reshape(shape)


def sample_pair(cfg: TheoryConfig, seed) -> TwoLayerPair:
    rng = np.random.default_rng(seed)
    M_U = _exact_mask(rng, (cfg.h, cfg.d), cfg.rho_U)
    M_v = _exact_mask(rng, (cfg.h,), cfg.rho_v)
    U = rng.normal(0.0, cfg.sigma_U, (cfg.h, cfg.d))
    v = rng.normal(0.0, cfg.sigma_v, cfg.h)
    U2 = np.where(M_U, rng.normal(0.0, cfg.sigma_U, (cfg.h, cfg.d)), U)
    v2 = np.where(M_v, rng.normal(0.0, cfg.sigma_v, cfg.h), v)
    return TwoLayerPair(U, U2, v, v2, M_U, M_v)


def sample_ball(n, d, b, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * (b * rng.random(n) ** (1.0 / d))[:, None]


def _preacts(pair, X):
    return pair.U @ X.T, pair.U2 @ X.T  # (h, n) each


def _mix(A, B, alpha):
    # B + alpha (A - B) leaves coordinates with A == B untouched, so shared
    # units cancel exactly; the endpoints are returned as-is
    if alpha == 0.0:
        return B
    if alpha == 1.0:
        return A
    return B + alpha * (A - B)


def z_per_x(pair: TwoLayerPair, X, alphas) -> np.ndarray:
    """z_x(alpha) for every alpha (rows) and input (columns)."""
    A, B = _preacts(pair, X)
    D = A - B
    V = np.stack([pair.v, pair.v2])
    s, s2 = np.maximum(A, 0.0), np.maximum(B, 0.0)
    vs, v2s2 = (V @ s)[0], (V @ s2)[1]
    buf = np.empty_like(A)
    out = np.empty((len(alphas), X.shape[0]))
    for k, a in enumerate(alphas):
        a = float(a)
        if a == 0.0:
            sa = s2
        elif a == 1.0:
            sa = s
        else:
            np.multiply(D, a, out=buf)
            buf += B
            sa = np.maximum(buf, 0.0, out=buf)
        both = V @ sa
        out[k] = a * (both[0] - vs) + (1.0 - a) * (both[1] - v2s2)
    return out


def analytic_dz(pair: TwoLayerPair, X, alpha: float) -> np.ndarray:
    """d z_x / d alpha per input, valid away from ReLU kinks."""
    A, B = _preacts(pair, X)
    P = _mix(A, B, alpha)
    c = alpha * pair.v + (1.0 - alpha) * pair.v2
    return ((pair.v - pair.v2) @ np.maximum(P, 0.0)
            + c @ ((P > 0) * (A - B))
            - pair.v @ np.maximum(A, 0.0) + pair.v2 @ np.maximum(B, 0.0))


def second_difference(y, alphas):
    step = alphas[1] - alphas[0]
    d2 = np.empty_like(y)
    d2[1:-1] = (y[2:] - 2.0 * y[1:-1] + y[:-2]) / step**2
    d2[0], d2[-1] = d2[1], d2[-2]
    return d2


@dataclass
class ZProfile:
    alphas: np.ndarray
    z: np.ndarray
    stderr: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


def z_profile(pair: TwoLayerPair, cfg: TheoryConfig, alphas=None, seed=0) -> ZProfile:
    alphas = cfg.alphas if alphas is None else np.asarray(alphas, dtype=np.float64)
    if alphas.min() < 0 or alphas.max() > 1:
        raise ConfigError("alpha grid must lie in [0, 1]")
    X = sample_ball(cfg.n_x, cfg.d, cfg.b, seed)
    zx = z_per_x(pair, X, alphas)
    z = zx.mean(axis=1)
    se = zx.std(axis=1, ddof=1) / math.sqrt(zx.shape[1])
    d1 = np.gradient(z, alphas, edge_order=2)
    return ZProfile(alphas, z, se, d1, second_difference(z, alphas))


def fd_consistency(pair: TwoLayerPair, X, alphas, eps: float = 1e-6, kink_tol: float = 1e-6):
    """Compare per-input central differences of z_x with ``analytic_dz``.

    Inputs with any pre-activation within ``kink_tol`` of zero, or changing
    sign inside the difference window, are skipped. Returns (max abs error,
    number of (alpha, x) points checked).
    """
    A, B = _preacts(pair, X)
    worst, checked = 0.0, 0
    for a in alphas:
        lo, hi = a - eps, a + eps
        P, Plo, Phi = _mix(A, B, a), _mix(A, B, lo), _mix(A, B, hi)
        ok = ((np.abs(P) > kink_tol) & (np.sign(Plo) == np.sign(Phi))).all(axis=0)
        if not ok.any():
            continue
        Xk = X[ok]
        fd = (z_per_x(pair, Xk, [hi])[0] - z_per_x(pair, Xk, [lo])[0]) / (2 * eps)
        an = analytic_dz(pair, Xk, a)
        worst = max(worst, float(np.max(np.abs(fd - an))))
        checked += int(ok.sum())
    return worst, checked


def theorem_bounds(cfg: TheoryConfig) -> dict:
    """Right-hand sides of the three bounds (natural log)."""
    base = cfg.b * cfg.sigma_v * cfg.sigma_U * math.sqrt(cfg.h)
    h, dl = cfg.h, cfg.delta
    return {
        "B_z": math.sqrt(2) * base * math.log(8 * h / dl) * math.sqrt(1 - cfg.rho_U),
        "B_d1": 4 * math.sqrt(2) * base * math.log(24 * h / dl)
        * (math.sqrt(1 - cfg.rho_v) + math.sqrt(1 - cfg.rho_U)),
        "B_d2": 8 * base * math.log(4 * h / dl) * math.sqrt(1 - max(cfg.rho_U, cfg.rho_v)),
    }


def _trial_seeds(base_seed, trial):
    ss = np.random.SeedSequence([base_seed, trial])
    pair_seed, x_seed = ss.spawn(2)
    return pair_seed, x_seed


def _trial_maxima(cfg, base_seed, trial):
    pair_seed, x_seed = _trial_seeds(base_seed, trial)
    prof = z_profile(sample_pair(cfg, pair_seed), cfg, seed=x_seed)
    return (float(np.abs(prof.z).max()), float(np.abs(prof.d1).max()),
            float(np.abs(prof.d2).max()))


@dataclass
class BoundCheckReport:
    config: dict
    trials: int
    base_seed: int
    bounds: dict
    max_z: list
    max_d1: list
    max_d2: list
    violation_rate_z: float
    violation_rate_d1: float
    violation_rate_d2: float
    violation_rate_joint: float
    trend: dict = field(default_factory=dict)

    def to_json(self, extra: dict | None = None) -> str:
        doc = asdict(self)
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=True)


def rho_trend(cfg: TheoryConfig, trials: int = 50, base_seed: int = 0,
              ratios=TREND_RATIOS, threads: int = 1) -> dict:
    """Mean over trials of max|z| as rho_U sweeps ``ratios``, with Spearman's rho."""
    means = []
    for r in ratios:
        sub = replace(cfg, rho_U=float(r))
        vals = parallel_map(lambda t: _trial_maxima(sub, base_seed, t)[0], range(trials), threads)
        means.append(float(np.mean(vals)))
    rho = stats.spearmanr(ratios, means)[0] if np.ptp(means) > 0 else float("nan")
    return {"rho_U": list(ratios), "mean_max_z": means, "spearman": float(rho),
            "decreasing": bool(rho < 0), "trials": trials}


def bound_check(cfg: TheoryConfig, trials: int = 200, base_seed: int = 0, threads: int = 1,
                trend_trials: int | None = 50) -> BoundCheckReport:
    """Violation rate of each bound over ``trials`` independent pairs.

    A trial violates a bound when its grid maximum strictly exceeds it, so a
    fully shared pair (zero curve, zero bound) never counts as a violation.
    """
    if trials < 50:
        raise ConfigError("bound_check needs at least 50 trials")
    maxima = np.array(parallel_map(lambda t: _trial_maxima(cfg, base_seed, t), range(trials),
                                   threads))
    bounds = theorem_bounds(cfg)
    viol = maxima > np.array([bounds["B_z"], bounds["B_d1"], bounds["B_d2"]])
    trend = {} if not trend_trials else rho_trend(cfg, trend_trials, base_seed, threads=threads)
    return BoundCheckReport(
        config=asdict(cfg), trials=trials, base_seed=base_seed, bounds=bounds,
        max_z=maxima[:, 0].tolist(), max_d1=maxima[:, 1].tolist(), max_d2=maxima[:, 2].tolist(),
        violation_rate_z=float(viol[:, 0].mean()),
        violation_rate_d1=float(viol[:, 1].mean()),
        violation_rate_d2=float(viol[:, 2].mean()),
        violation_rate_joint=float(viol.any(axis=1).mean()),
        trend=trend,
    )
