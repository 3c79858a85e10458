"""Dual-speed teacher-student adaptation to unlabeled target domains.

Per mini-batch the student is trained by SGD on the mixup consistency loss
(plus the MI term) against temperature-sharpened teacher labels; at every
epoch end the teacher parameters and BatchNorm statistics move towards the
student by EMA. After the last epoch the teacher is the new global model.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .domains import LabeledDataset
from .errors import ConfigError, DataError, DimensionError, HookContractError
from .losses import SIGN_MODES, adaptation_loss_tape
from .mixup import MixupConfig, mix_batch
from .model import (Classifier, EpochBnStats, ParamVector, epoch_bn_stats, forward,
                    forward_tape)
from .optim import (DEFAULT_M_HI, DEFAULT_M_LO, SgdState, bn_ema_update, ema_update,
                    lr_schedule, momentum_schedule, sgd_step)

__all__ = [
    "ABLATIONS", "AdaptConfig", "AdaptLog", "EpochRecord", "RefinerHook", "adapt_domain",
    "bn_ema_update", "ema_update", "lr_schedule", "momentum_schedule", "pseudo_labels",
    "sequential_adapt", "sgd_step",
]

ABLATIONS = ("no_dual_speed", "no_mixup", "no_mi", "no_teacher")
SIMPLEX_TOL = 1e-9

RefinerHook = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class AdaptConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_max: float = 2e-3
    lr_min: float = 1e-3
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-3
    tau: float = 0.07
    a: float = 2.0
    alpha: float = 1.0
    m_lo: float = DEFAULT_M_LO
    m_hi: float = DEFAULT_M_HI
    # the printed sign minimizes MI and collapses predictions; see losses.mi_loss
    mi_sign_mode: str = "standard_im"
    ablations: list[str] = field(default_factory=list)
    per_row_lambda: bool = False
    seed: int = 0

    def __post_init__(self):
        self.ablations = sorted(set(self.ablations))
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not self.a > 0:
            raise ConfigError("mixup shape a must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if not 0.0 <= self.m_lo <= self.m_hi <= 1.0:
            raise ConfigError("need 0 <= m_lo <= m_hi <= 1")
        if self.lr_min > self.lr_max:
            raise ConfigError("need lr_min <= lr_max")
        if self.mi_sign_mode not in SIGN_MODES:
            raise ConfigError(f"mi_sign_mode must be one of {SIGN_MODES}")
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablations {sorted(bad)}; choose from {ABLATIONS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown adapt config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    domain: str
    epoch: int
    lr: float
    momentum: float
    mean_cons: float
    mean_mi: float
    student_acc: float
    teacher_acc: float
    batches: int
    mi_sign_mode: str
    ablations: list[str]


@dataclass
class AdaptLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def __len__(self):
        return len(self.records)


def _check_simplex(p: np.ndarray, what: str):
    if p.ndim != 2 or np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise HookContractError(f"{what} rows are not probability vectors")


def pseudo_labels(teacher: Classifier, x, tau: float, hook: RefinerHook | None = None) -> np.ndarray:
    """softmax(teacher logits / tau), evaluated with the teacher's global BN stats.

    A refiner hook receives the teacher's soft outputs and the batch; its
    refined probabilities replace the logits by their logs before sharpening.
    """
    if not tau > 0:
        raise ConfigError("tau must be positive")
    logits, _ = forward(teacher, x, mode="eval")
    if hook is not None:
        refined = np.asarray(hook(dm.softmax(logits), dm.as_tensor(x)), dtype=np.float64)
        if refined.shape != logits.shape:
            raise HookContractError(f"hook returned shape {refined.shape}, expected {logits.shape}")
        _check_simplex(refined, "refiner hook output")
        logits = np.log(np.maximum(refined, dm.LOG_FLOOR))
    return dm.softmax(logits / tau)


def _accuracy(model: Classifier, ds: LabeledDataset) -> float:
    logits, _ = forward(model, ds.features, mode="eval")
    return 100.0 * int(np.sum(np.argmax(logits, axis=1) == ds.labels)) / len(ds)


def _batches(order: np.ndarray, size: int):
    for start in range(0, order.size, size):
        idx = order[start:start + size]
        if idx.size >= 2:  # train-mode BN needs two rows
            yield idx


def adapt_domain(global_model: Classifier, target: LabeledDataset, config: AdaptConfig,
                 hook: RefinerHook | None = None, rng: np.random.Generator | None = None,
                 batch_callback: Callable[[Classifier, Classifier], None] | None = None,
                 log_accuracy: bool = True):
    """Adapt ``global_model`` to one unlabeled target set.

    Returns ``(new_global, AdaptLog)``. Target labels are only touched by the
    optional accuracy logging. ``batch_callback(teacher, student)`` is called
    after every student step.
    """
    config.validate()
    x = target.features
    if x.shape[0] < 1:
        raise DataError("target dataset is empty")
    if x.shape[1] != global_model.config.input_dim:
        raise DimensionError(
            f"target width {x.shape[1]} does not match model input width {global_model.config.input_dim}")
    if rng is None:
        rng = np.random.default_rng([config.seed, 0])
    abl = set(config.ablations)
    alpha = 0.0 if "no_mi" in abl else config.alpha
    mix_cfg = MixupConfig(a=config.a, per_row=config.per_row_lambda)

    teacher = global_model.copy(mode="eval")
    student = global_model.copy(mode="train")
    sgd = SgdState()
    log = AdaptLog()
    n = x.shape[0]

    for t in range(1, config.epochs + 1):
        lr = lr_schedule(t, config.epochs, config.lr_max, config.lr_min)
        m = momentum_schedule(t, config.epochs, config.m_lo, config.m_hi)
        acc = EpochBnStats()
        cons_sum = mi_sum = 0.0
        n_batches = 0
        for idx in _batches(rng.permutation(n), config.batch_size):
            xb = x[idx]
            if "no_teacher" in abl:
                logits_s, _ = forward(student, xb, mode="train")
                p = dm.softmax(logits_s / config.tau)
            else:
                p = pseudo_labels(teacher, xb, config.tau, hook)
            if "no_mixup" in abl:
                xm, pm = xb, p
            else:
                mb = mix_batch(xb, p, mix_cfg, rng)
                xm, pm = mb.x_mixed, mb.p_mixed

            tape = dm.GradientTape()
            pvars = {k: tape.watch(v) for k, v in student.params.items()}
            logits, stats = forward_tape(student, tape, xm, pvars, mode="train")
            total, cons, mi = adaptation_loss_tape(tape, pm, logits, alpha, config.mi_sign_mode)
            grads = tape.gradient(total, list(pvars.values()))
            pv = student.param_vector()
            flat = np.concatenate([g.reshape(-1) for g in grads])
            new = sgd_step(pv.values, flat, sgd, lr, config.sgd_momentum, config.weight_decay)
            student.set_param_vector(ParamVector(new, pv.layout))
            if stats:
                acc.add(stats)
            cons_sum += float(cons.value)
            mi_sum += float(mi.value) if mi is not None else 0.0
            n_batches += 1

            if "no_dual_speed" in abl and "no_teacher" not in abl:
                teacher.params = {k: v.copy() for k, v in student.params.items()}
                if acc.batch_count:
                    teacher.bn_running = epoch_bn_stats(acc)
            if batch_callback is not None:
                batch_callback(teacher, student)

        epoch_stats = epoch_bn_stats(acc) if acc.batch_count else None
        if epoch_stats is not None:
            student.bn_running = epoch_stats
        if not abl & {"no_dual_speed", "no_teacher"}:
            tv, sv = teacher.param_vector(), student.param_vector()
            teacher.set_param_vector(ParamVector(ema_update(tv.values, sv.values, m), tv.layout))
            if epoch_stats is not None:
                teacher.bn_running = bn_ema_update(teacher.bn_running, epoch_stats, m)

        log.records.append(EpochRecord(
            domain=target.domain_name, epoch=t, lr=lr, momentum=m,
            mean_cons=cons_sum / max(n_batches, 1), mean_mi=mi_sum / max(n_batches, 1),
            student_acc=_accuracy(student, target) if log_accuracy else float("nan"),
            teacher_acc=_accuracy(teacher, target) if log_accuracy else float("nan"),
            batches=n_batches, mi_sign_mode=config.mi_sign_mode, ablations=list(config.ablations),
        ))

    result = student if "no_teacher" in abl else teacher
    return result.copy(mode="eval"), log


def sequential_adapt(source_model: Classifier, targets: Sequence[LabeledDataset], config: AdaptConfig,
                     hook: RefinerHook | None = None, log_accuracy: bool = True):
    """Adapt through ``targets`` in order; returns ``(checkpoints, logs)`` with one entry per target."""
    if len(targets) < 1:
        raise DataError("need at least one target domain")
    model = source_model
    checkpoints, logs = [], []
    for k, target in enumerate(targets):
        rng = np.random.default_rng([config.seed, k])
        model, log = adapt_domain(model, target, config, hook, rng=rng, log_accuracy=log_accuracy)
        checkpoints.append(model)
        logs.append(log)
    return checkpoints, logs
