"""Numerical oracle suite.

Each check records what it measured, what it expected, the tolerance and
the parameters needed to re-run it. Checks marked ``expected_fail``
document a known inconsistency in the published closed forms; they are
reported but never block the suite.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffmath as dm
from .adapter import AdaptConfig, adapt_domain
from .domains import gen_two_moons
from .errors import PreconditionError
from .losses import adaptation_loss_tape, consistency_loss, mi_loss, mutual_information
from .mixup import (MixupConfig, centroid_shrink_report, covariance_shrink_ratio,
                    expected_shrink_factor, mix_batch, theorem1_oracle, theta_bar_empirical,
                    theta_bar_printed)
from .model import MlpConfig, ParamVector, forward, forward_tape, init_classifier
from .optim import ema_update, lr_schedule, momentum_schedule

MIN_TRIALS = 10_000
SCHEMA_VERSION = "cosda-oracle-report/1"


@dataclass
class CheckResult:
    name: str
    provenance: str
    measured: object
    expected: object
    tolerance: object
    passed: bool
    expected_fail: bool = False
    label: str = ""
    params: dict = field(default_factory=dict)
    wall_time: float = 0.0
    error: str | None = None

    @property
    def status(self) -> str:
        if self.error is not None:
            return "error"
        if self.expected_fail:
            return "xpass" if self.passed else "xfail"
        return "pass" if self.passed else "fail"

    @property
    def blocking(self) -> bool:
        return not self.expected_fail and self.status != "pass"


@dataclass
class OracleReport:
    seed: int
    trials: int
    checks: list[CheckResult]

    @property
    def ok(self) -> bool:
        return not any(c.blocking for c in self.checks)

    def to_dict(self, include_timing: bool = True) -> dict:
        out = []
        for c in self.checks:
            d = asdict(c)
            d["status"] = c.status
            if not include_timing:
                d.pop("wall_time")
            out.append(_jsonable(d))
        return {"schema": SCHEMA_VERSION, "seed": self.seed, "trials": self.trials,
                "ok": self.ok, "checks": out}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def summary_table(self) -> str:
        lines = [f"{'check':<40} {'status':<7} {'measured':>24}  tolerance"]
        for c in self.checks:
            lines.append(f"{c.name:<40} {c.status:<7} {_short(c.measured):>24}  {_short(c.tolerance)}"
                         + (f"  [{c.label}]" if c.label else ""))
        lines.append(f"overall: {'OK' if self.ok else 'FAILED'}")
        return "\n".join(lines)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "seed", "trials", "ok", "checks"],
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "trials": {"type": "integer"},
        "ok": {"type": "boolean"},
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "provenance", "measured", "expected", "tolerance", "passed",
                             "expected_fail", "status", "params"],
                "properties": {
                    "name": {"type": "string"},
                    "provenance": {"enum": ["PAPER", "DERIVED", "TRIVIAL"]},
                    "passed": {"type": "boolean"},
                    "expected_fail": {"type": "boolean"},
                    "status": {"enum": ["pass", "fail", "xfail", "xpass", "error"]},
                    "params": {"type": "object"},
                },
            },
        },
    },
}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def _short(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_short(x) for x in v[:3]) + (", ..." if len(v) > 3 else "") + "]"
    return str(v)


# ------------------------------------------------------------------ checks

def loss_gradient_error(seed: int, alpha: float = 1.0, sign_mode: str = "standard_im",
                        h: float = 1e-6) -> float:
    """Tape vs central-difference gradient of the adaptation loss through MLP+BN.

    Returns max_k |tape_k - fd_k| / max_k |fd_k|. The finite-difference side
    evaluates the loss with the plain numpy forward and array losses only.
    """
    rng = np.random.default_rng(seed)
    cfg = MlpConfig([3, 6, 5, 3], init_seed=seed)
    model = init_classifier(cfg)
    # perturb BN affine params away from identity so their gradients are generic
    for k in model.params:
        if k.startswith("bn"):
            model.params[k] = model.params[k] + 0.3 * rng.standard_normal(model.params[k].shape)
    b = 12
    x = rng.standard_normal((b, 3))
    teacher_logits = rng.standard_normal((b, 3))
    p = dm.softmax(teacher_logits / 0.07)
    mb = mix_batch(x, p, MixupConfig(a=2.0), rng, per_row=True)

    tape = dm.GradientTape()
    pvars = {k: tape.watch(v) for k, v in model.params.items()}
    logits, _ = forward_tape(model, tape, mb.x_mixed, pvars, mode="train")
    total, _, _ = adaptation_loss_tape(tape, mb.p_mixed, logits, alpha, sign_mode)
    g_tape = np.concatenate([g.reshape(-1) for g in tape.gradient(total, list(pvars.values()))])

    pv = model.param_vector()

    def f(flat):
        model.set_param_vector(ParamVector(flat, pv.layout))
        q = dm.softmax(forward(model, mb.x_mixed, mode="train")[0])
        return consistency_loss(mb.p_mixed, q) + alpha * mi_loss(q, sign_mode)

    g_fd = dm.finite_difference_gradient(f, pv.values.copy(), h)
    model.set_param_vector(pv)
    return float(np.max(np.abs(g_tape - g_fd)) / max(np.max(np.abs(g_fd)), 1e-300))


def check_gradients(rng, trials, seed):
    n_seeds = 100
    errs = [loss_gradient_error(seed * 1000 + s, sign_mode=("standard_im", "paper")[s % 2])
            for s in range(n_seeds)]
    worst = max(errs)
    return dict(name="gradient_oracle", provenance="DERIVED", measured=worst, expected=0.0,
                tolerance=1e-5, passed=worst < 1e-5,
                params={"seeds": n_seeds, "h": 1e-6, "base_seed": seed * 1000})


def check_mi_identity(rng, trials, seed):
    n = 1000
    worst = 0.0
    for _ in range(n):
        b = int(rng.integers(1, 65))
        c = int(rng.integers(2, 11))
        probs = dm.softmax(3.0 * rng.standard_normal((b, c)))
        br = mutual_information(probs)
        # independent direct summation
        h_inst = -np.mean([sum(v * np.log(v) for v in row if v > 0) for row in probs])
        marg = probs.mean(axis=0)
        h_marg = -sum(v * np.log(v) for v in marg if v > 0)
        worst = max(worst, abs(br.mi_eq3 - (h_inst - h_marg)))
    return dict(name="mi_decomposition_identity", provenance="DERIVED", measured=worst,
                expected=0.0, tolerance=1e-9, passed=worst < 1e-9, params={"batches": n})


def _theorem1_batch(rng):
    x = rng.standard_normal((6, 2)) * np.array([1.0, 2.0]) + np.array([0.5, -1.0])
    p = dm.softmax(rng.standard_normal((6, 3)) / 0.5)
    return x, p


def check_theorem1(rng, trials, seed):
    x, p = _theorem1_batch(rng)
    rep = theorem1_oracle(x, p, 2.0, trials, rng)
    common = {"trials_per_row": trials, "rows": x.shape[0], "a": 2.0}
    return [
        dict(name="theorem1_delta_zero_mean", provenance="DERIVED",
             measured=rep.delta_mean_norm, expected=0.0,
             tolerance="3 sigma per coordinate", passed=rep.delta_within_clt,
             params={**common, "delta_norm_ratio": rep.delta_norm_ratio}),
        dict(name="theorem1_epsilon_zero_mean", provenance="DERIVED",
             measured=rep.epsilon_mean_norm, expected=0.0,
             tolerance="3 sigma per coordinate", passed=rep.epsilon_within_clt, params=common),
        dict(name="theorem1_squeeze_printed_theta_bar", provenance="DERIVED",
             measured=float(np.abs(rep.printed_deviation_mean).max()), expected=0.0,
             tolerance="3 sigma per coordinate", passed=rep.printed_within_clt,
             expected_fail=True, label="paper discrepancy", params=common),
    ]


def check_theta_bar(rng, trials, seed):
    emp = theta_bar_empirical(2.0, 64)
    emp2 = theta_bar_empirical(2.0, 128)
    printed = theta_bar_printed(2.0)
    return [
        dict(name="theta_bar_quadrature_a2", provenance="DERIVED", measured=emp, expected=11 / 16,
             tolerance=1e-6, passed=abs(emp - 11 / 16) <= 1e-6, params={"resolution": 64}),
        dict(name="theta_bar_quadrature_convergence", provenance="TRIVIAL", measured=abs(emp2 - emp),
             expected=0.0, tolerance=1e-10, passed=abs(emp2 - emp) < 1e-10,
             params={"resolutions": [64, 128]}),
        dict(name="theta_bar_printed_a2", provenance="PAPER", measured=printed, expected=2 / 3,
             tolerance=1e-12, passed=abs(printed - 2 / 3) <= 1e-12, params={}),
        dict(name="theta_bar_printed_vs_empirical", provenance="DERIVED", measured=printed,
             expected=emp, tolerance=1e-6, passed=abs(printed - emp) <= 1e-6,
             expected_fail=True, label="paper discrepancy", params={"resolution": 64}),
    ]


def check_covariance_shrink(rng, trials, seed):
    n = 100_000
    x = rng.standard_normal((n, 2)) * np.array([1.0, 0.5]) + np.array([3.0, -2.0])
    ratio = covariance_shrink_ratio(x, 2.0, rng)
    expected = expected_shrink_factor(2.0)
    src = rng.standard_normal((2000, 2))
    tgt = rng.standard_normal((2000, 2)) * 0.7 + np.array([2.0, 1.0])
    rep = centroid_shrink_report(src, tgt, 2.0, n, rng)
    rms_ratio = rep.source_rms_after / rep.source_rms_before
    return [
        dict(name="mixup_covariance_shrink", provenance="DERIVED", measured=ratio, expected=expected,
             tolerance="2% relative", passed=abs(ratio / expected - 1.0) <= 0.02, params={"rows": n, "a": 2.0}),
        dict(name="mixup_centroid_preserved", provenance="DERIVED",
             measured=max(rep.source_centroid_z, rep.target_centroid_z), expected=0.0,
             tolerance="3 sigma", passed=rep.centroids_preserved, params={"trials": n, "a": 2.0}),
        dict(name="mixup_rms_spread_shrink", provenance="DERIVED", measured=rms_ratio,
             expected=float(np.sqrt(expected)), tolerance="3% relative",
             passed=abs(rms_ratio / np.sqrt(expected) - 1.0) <= 0.03, params={"trials": n, "a": 2.0}),
    ]


def check_schedules(rng, trials, seed):
    e = 20
    ms = [momentum_schedule(t, e) for t in range(1, e + 1)]
    return [
        dict(name="momentum_schedule_endpoint", provenance="TRIVIAL", measured=ms[-1], expected=0.99,
             tolerance=0.0, passed=ms[-1] == 0.99, params={"epochs": e}),
        dict(name="momentum_schedule_monotone", provenance="TRIVIAL", measured=min(np.diff(ms)),
             expected=">= 0", tolerance=0.0, passed=bool(np.all(np.diff(ms) >= 0)), params={"epochs": e}),
        dict(name="lr_schedule_start", provenance="TRIVIAL", measured=lr_schedule(1, e, 2e-3, 1e-3),
             expected=2e-3, tolerance=0.0, passed=lr_schedule(1, e, 2e-3, 1e-3) == 2e-3,
             params={"epochs": e, "lr_max": 2e-3, "lr_min": 1e-3}),
    ]


def check_ema(rng, trials, seed):
    a = rng.standard_normal(50)
    b = rng.standard_normal(50)
    ok_one = np.array_equal(ema_update(a, b, 1.0), a)
    ok_zero = np.array_equal(ema_update(a, b, 0.0), b)
    # m == 1 throughout a complete adaptation run leaves the global model untouched
    ds = gen_two_moons(256, 0.1, 30.0, seed)
    model = init_classifier(MlpConfig([2, 16, 16, 2], init_seed=seed)).eval()
    before = model.param_vector().values.copy()
    bn_before = [(m.copy(), v.copy()) for m, v in model.bn_running]
    cfg = AdaptConfig(epochs=3, batch_size=64, m_lo=1.0, m_hi=1.0, seed=seed)
    out, _ = adapt_domain(model, ds, cfg, log_accuracy=False)
    same = np.array_equal(out.param_vector().values, before) and all(
        np.array_equal(m0, m1) and np.array_equal(v0, v1)
        for (m0, v0), (m1, v1) in zip(bn_before, out.bn_running))
    return [
        dict(name="ema_m1_noop", provenance="TRIVIAL", measured=bool(ok_one), expected=True,
             tolerance="bit-exact", passed=bool(ok_one), params={}),
        dict(name="ema_m0_copy", provenance="TRIVIAL", measured=bool(ok_zero), expected=True,
             tolerance="bit-exact", passed=bool(ok_zero), params={}),
        dict(name="adapt_domain_m1_noop", provenance="TRIVIAL", measured=bool(same), expected=True,
             tolerance="bit-exact", passed=bool(same), params={"epochs": 3, "rows": 256}),
    ]


CHECKS: list[tuple[str, Callable]] = [
    ("gradients", check_gradients),
    ("mi_identity", check_mi_identity),
    ("theorem1", check_theorem1),
    ("theta_bar", check_theta_bar),
    ("covariance_shrink", check_covariance_shrink),
    ("schedules", check_schedules),
    ("ema", check_ema),
]


def run_all_oracles(seed: int = 0, trials: int = 1_000_000, only: list[str] | None = None) -> OracleReport:
    """Run every oracle group in order and collect one report."""
    if trials < MIN_TRIALS:
        raise PreconditionError(f"trials must be >= {MIN_TRIALS}, got {trials}")
    results: list[CheckResult] = []
    for k, (group, fn) in enumerate(CHECKS):
        if only is not None and group not in only:
            continue
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        try:
            out = fn(rng, trials, seed)
        except Exception as exc:  # an erroring oracle is recorded, the run continues
            results.append(CheckResult(name=group, provenance="DERIVED", measured=None, expected=None,
                                       tolerance=None, passed=False, error=f"{type(exc).__name__}: {exc}",
                                       params={"group": group}, wall_time=time.perf_counter() - t0))
            continue
        elapsed = time.perf_counter() - t0
        for d in out if isinstance(out, list) else [out]:
            d["params"] = {**d.get("params", {}), "group": group, "seed": seed}
            results.append(CheckResult(wall_time=elapsed, **d))
    return OracleReport(seed=seed, trials=trials, checks=results)
