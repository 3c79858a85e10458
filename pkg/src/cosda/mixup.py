"""Mixup augmentation and the centroid-squeezing view of it.

Besides ``mix_batch`` this module carries the numerical checks of the
equivalent "squeezed" form of mixup: samples pulled towards the batch
centroid by the mean of Beta(a, a) truncated to [1/2, 1], plus zero-mean
perturbations.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import roots_jacobi

from . import _kernels
from . import diffmath as dm
from .errors import ConfigError, DataError, DimensionError, DomainError

CLT_SIGMAS = 3.0


@dataclass
class MixupConfig:
    a: float = 2.0
    rng_seed: int = 0
    per_row: bool = False  # one lambda per batch unless set

    def __post_init__(self):
        if not self.a > 0:
            raise ConfigError(f"Beta shape a must be positive, got {self.a}")


@dataclass
class MixedBatch:
    x_mixed: np.ndarray
    p_mixed: np.ndarray
    lambdas: np.ndarray
    perm: np.ndarray


def sample_lambda(config: MixupConfig, rng: np.random.Generator) -> float:
    return float(rng.beta(config.a, config.a))


def mix_batch(x, p, config: MixupConfig, rng: np.random.Generator, *,
              per_row: bool | None = None, lam=None, perm=None) -> MixedBatch:
    """Convex-combine each row with a shuffled partner from the same batch.

    ``lam`` and ``perm`` override the random draws (test hooks).
    """
    x, p = dm.as_tensor(x), dm.as_tensor(p)
    if x.ndim != 2 or p.ndim != 2 or x.shape[0] != p.shape[0]:
        raise DimensionError(f"x {x.shape} and p {p.shape} need equal row counts")
    b = x.shape[0]
    per_row = config.per_row if per_row is None else per_row
    if perm is None:
        perm = rng.permutation(b)
    perm = np.asarray(perm, dtype=np.int64)
    if lam is None:
        lambdas = rng.beta(config.a, config.a, size=b) if per_row \
            else np.full(b, rng.beta(config.a, config.a))
    else:
        lambdas = np.broadcast_to(np.asarray(lam, dtype=np.float64), (b,)).copy()
    col = lambdas[:, None]
    x_mixed = col * x + (1.0 - col) * x[perm]
    p_mixed = col * p + (1.0 - col) * p[perm]
    return MixedBatch(x_mixed, p_mixed, lambdas, perm)


def expected_shrink_factor(a: float) -> float:
    """E[lam^2 + (1-lam)^2] = 2 (Var(lam) + 1/4) for lam ~ Beta(a, a)."""
    var = 1.0 / (4.0 * (2.0 * a + 1.0))
    return 2.0 * (var + 0.25)


def theta_bar_printed(a: float) -> float:
    """The closed form 2 - a(a-1)/(a-1/2), as printed."""
    if a <= 0.5:
        raise DomainError(f"closed form needs a > 1/2, got {a}")
    return 2.0 - a * (a - 1.0) / (a - 0.5)


def theta_bar_empirical(a: float, resolution: int = 64) -> float:
    """Mean of Beta(a, a) restricted to [1/2, 1], by Gauss-Jacobi quadrature.

    With x = 3/4 + u/4 the (1-x)^(a-1) factor becomes the Jacobi weight, so
    only the smooth part x^a (numerator) or x^(a-1) (mass) is sampled.
    """
    if not a > 0:
        raise DomainError(f"a must be positive, got {a}")
    u, w = roots_jacobi(int(resolution), a - 1.0, 0.0)
    x = 0.75 + 0.25 * u
    mass = np.dot(w, x ** (a - 1.0))
    first = np.dot(w, x ** a)
    return float(first / mass)


def sample_truncated_beta(a: float, n: int, rng: np.random.Generator, low: float = 0.5) -> np.ndarray:
    """Beta(a, a) draws conditioned on >= ``low``, by rejection."""
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        draw = rng.beta(a, a, size=max(2 * need + 16, 1024))
        keep = draw[draw >= low][:need]
        out[filled:filled + keep.size] = keep
        filled += keep.size
    return out


@dataclass
class Theorem1Report:
    theta_bar_printed: float
    theta_bar_empirical: float
    x_squeezed: np.ndarray
    p_squeezed: np.ndarray
    delta_mean_norm: float
    epsilon_mean_norm: float
    centroid_x: np.ndarray
    centroid_p: np.ndarray
    trials: int
    theta_bar_used: float = float("nan")
    delta_mean: np.ndarray | None = None
    delta_bound: np.ndarray | None = None
    epsilon_mean: np.ndarray | None = None
    epsilon_bound: np.ndarray | None = None
    delta_within_clt: bool | None = None
    epsilon_within_clt: bool | None = None
    printed_deviation_mean: np.ndarray | None = None
    printed_within_clt: bool | None = None
    delta_norm_ratio: float | None = None

    def to_json_record(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, (np.floating, np.bool_)):
                v = v.item()
            out[k] = v
        return out


def _centroids(x, p):
    x, p = dm.as_tensor(x), dm.as_tensor(p)
    if x.ndim != 2 or p.ndim != 2 or x.shape[0] != p.shape[0]:
        raise DimensionError(f"x {x.shape} and p {p.shape} need equal row counts")
    if x.shape[0] == 0:
        raise DataError("empty batch")
    return x, p, x.mean(axis=0), p.mean(axis=0)


def theorem1_equivalents(x, p, theta_bar: float) -> Theorem1Report:
    """Squeezed samples theta_bar * (x - centroid) + centroid, and likewise for labels."""
    x, p, cx, cp = _centroids(x, p)
    a_nan = float("nan")
    return Theorem1Report(
        theta_bar_printed=a_nan,
        theta_bar_empirical=a_nan,
        x_squeezed=theta_bar * (x - cx) + cx,
        p_squeezed=theta_bar * (p - cp) + cp,
        delta_mean_norm=a_nan,
        epsilon_mean_norm=a_nan,
        centroid_x=cx,
        centroid_p=cp,
        trials=0,
        theta_bar_used=float(theta_bar),
    )


def theorem1_oracle(x, p, a: float, trials: int, rng: np.random.Generator,
                    resolution: int = 64) -> Theorem1Report:
    """Monte-Carlo check that the perturbations around the squeezed form are zero-mean.

    For every row i, ``trials`` pairs (theta, j) are drawn with theta from the
    truncated Beta and j uniform over rows. The squeezed targets use the
    quadrature value of theta_bar; a second pass measures the same
    expectation against the printed closed form.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    x, p, cx, cp = _centroids(x, p)
    n = x.shape[0]
    tb_emp = theta_bar_empirical(a, resolution)
    try:
        tb_pr = theta_bar_printed(a)
    except DomainError:
        tb_pr = float("nan")
    rep = theorem1_equivalents(x, p, tb_emp)
    x_pr = tb_pr * (x - cx) + cx

    d_mean = np.empty_like(x)
    d_bound = np.empty_like(x)
    e_mean = np.empty_like(p)
    e_bound = np.empty_like(p)
    pr_mean = np.empty_like(x)
    ratios = np.empty(n)
    for i in range(n):
        thetas = sample_truncated_beta(a, trials, rng)
        js = rng.integers(0, n, size=trials)
        s1, s2 = _kernels.pair_moments(x[i], x, thetas, js, rep.x_squeezed[i])
        d_mean[i], d_bound[i] = _mean_and_clt(s1, s2, trials)
        s1p, s2p = _kernels.pair_moments(p[i], p, thetas, js, rep.p_squeezed[i])
        e_mean[i], e_bound[i] = _mean_and_clt(s1p, s2p, trials)
        if math.isfinite(tb_pr):
            q1, _ = _kernels.pair_moments(x[i], x, thetas, js, x_pr[i])
            pr_mean[i] = q1 / trials
        else:
            pr_mean[i] = np.nan
        norm_x = np.linalg.norm(x[i])
        ratios[i] = math.sqrt(s2.sum() / trials) / norm_x if norm_x > 0 else np.inf

    rep.theta_bar_printed = tb_pr
    rep.theta_bar_empirical = tb_emp
    rep.trials = int(trials)
    rep.delta_mean = d_mean
    rep.delta_bound = d_bound
    rep.epsilon_mean = e_mean
    rep.epsilon_bound = e_bound
    rep.delta_mean_norm = float(np.linalg.norm(d_mean, axis=1).max())
    rep.epsilon_mean_norm = float(np.linalg.norm(e_mean, axis=1).max())
    rep.delta_within_clt = bool(np.all(np.abs(d_mean) <= d_bound))
    rep.epsilon_within_clt = bool(np.all(np.abs(e_mean) <= e_bound))
    rep.printed_deviation_mean = pr_mean
    # the printed check reuses the empirical-run spread: both deviations differ by a constant
    rep.printed_within_clt = bool(np.all(np.abs(pr_mean) <= d_bound))
    rep.delta_norm_ratio = float(ratios.mean())
    return rep


def _mean_and_clt(s1, s2, n):
    mean = s1 / n
    var = np.maximum(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, CLT_SIGMAS * np.sqrt(var / n)


def covariance_shrink_ratio(x, a: float, rng: np.random.Generator) -> float:
    """trace(cov(mixed)) / trace(cov(x)) for one per-row-lambda mixup pass over ``x``."""
    x = dm.as_tensor(x)
    dummy = np.ones((x.shape[0], 1))
    mb = mix_batch(x, dummy, MixupConfig(a=a), rng, per_row=True)
    return float(np.trace(np.atleast_2d(np.cov(mb.x_mixed, rowvar=False)))
                 / np.trace(np.atleast_2d(np.cov(x, rowvar=False))))


@dataclass
class CentroidShrinkReport:
    centroid_distance_before: float
    centroid_distance_after: float
    source_spread_before: float
    source_spread_after: float
    target_spread_before: float
    target_spread_after: float
    source_rms_before: float
    source_rms_after: float
    target_rms_before: float
    target_rms_after: float
    source_centroid_z: float  # max over coords of |shift| / standard error
    target_centroid_z: float
    trials: int

    @property
    def centroids_preserved(self) -> bool:
        return self.source_centroid_z <= CLT_SIGMAS and self.target_centroid_z <= CLT_SIGMAS

    def rows(self):
        return [
            ("centroid distance", self.centroid_distance_before, self.centroid_distance_after),
            ("source mean spread", self.source_spread_before, self.source_spread_after),
            ("target mean spread", self.target_spread_before, self.target_spread_after),
            ("source rms spread", self.source_rms_before, self.source_rms_after),
            ("target rms spread", self.target_rms_before, self.target_rms_after),
        ]

    def to_table(self) -> str:
        lines = [f"{'quantity':<20} {'before':>12} {'after':>12}"]
        for name, b, a in self.rows():
            lines.append(f"{name:<20} {b:>12.6f} {a:>12.6f}")
        return "\n".join(lines)


def _mix_within(x, a, trials, rng):
    n = x.shape[0]
    i = rng.integers(0, n, size=trials)
    j = rng.integers(0, n, size=trials)
    lam = rng.beta(a, a, size=trials)[:, None]
    return lam * x[i] + (1.0 - lam) * x[j]


def _spread(x, c):
    d = np.linalg.norm(x - c, axis=1)
    return float(d.mean()), float(np.sqrt((d * d).mean()))


def _z_score(shift, samples):
    se = samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])
    z = np.where(se > 0, np.abs(shift) / np.where(se > 0, se, 1.0), np.where(shift == 0, 0.0, np.inf))
    return float(z.max())


def centroid_shrink_report(x_source, x_target, a: float, trials: int,
                           rng: np.random.Generator) -> CentroidShrinkReport:
    """Centroid distance and within-domain spread before and after within-domain mixup."""
    xs, xt = dm.as_tensor(x_source), dm.as_tensor(x_target)
    if xs.shape[0] == 0 or xt.shape[0] == 0:
        raise DataError("both point sets must be nonempty")
    cs, ct = xs.mean(axis=0), xt.mean(axis=0)
    ms, mt = _mix_within(xs, a, trials, rng), _mix_within(xt, a, trials, rng)
    cms, cmt = ms.mean(axis=0), mt.mean(axis=0)
    s_b, s_rms_b = _spread(xs, cs)
    s_a, s_rms_a = _spread(ms, cms)
    t_b, t_rms_b = _spread(xt, ct)
    t_a, t_rms_a = _spread(mt, cmt)
    return CentroidShrinkReport(
        centroid_distance_before=float(np.linalg.norm(cs - ct)),
        centroid_distance_after=float(np.linalg.norm(cms - cmt)),
        source_spread_before=s_b, source_spread_after=s_a,
        target_spread_before=t_b, target_spread_after=t_a,
        source_rms_before=s_rms_b, source_rms_after=s_rms_a,
        target_rms_before=t_rms_b, target_rms_after=t_rms_a,
        source_centroid_z=_z_score(cms - cs, ms),
        target_centroid_z=_z_score(cmt - ct, mt),
        trials=int(trials),
    )
