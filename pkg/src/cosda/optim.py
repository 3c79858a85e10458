"""SGD with momentum, EMA updates and the two cosine schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ScheduleError

# printed schedule: m_t = 0.99 - 0.1 * [cos(t*pi/E) + 1] / 2
DEFAULT_M_HI = 0.99
DEFAULT_M_LO = 0.89


@dataclass
class SgdState:
    velocity: np.ndarray | None = None

    def reset(self):
        self.velocity = None


def sgd_step(params: np.ndarray, grads: np.ndarray, state: SgdState, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> np.ndarray:
    """Classic heavy-ball step on flat vectors; returns the new parameters.

    v <- momentum * v + grads + weight_decay * params
    params <- params - lr * v
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise DimensionError(f"params {params.shape} and grads {grads.shape} differ")
    if state.velocity is None:
        state.velocity = np.zeros_like(params)
    elif state.velocity.shape != params.shape:
        raise DimensionError(f"velocity {state.velocity.shape} does not match params {params.shape}")
    d = grads + weight_decay * params if weight_decay else grads
    state.velocity = momentum * state.velocity + d
    return params - lr * state.velocity


def ema_update(teacher: np.ndarray, student: np.ndarray, m: float) -> np.ndarray:
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {m}")
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise DimensionError(f"teacher {teacher.shape} and student {student.shape} differ")
    return m * teacher + (1.0 - m) * student


def bn_ema_update(teacher_bn, student_stats, m: float):
    """EMA of per-layer (mean, var) pairs."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {m}")
    if len(teacher_bn) != len(student_stats):
        raise DimensionError(
            f"teacher has {len(teacher_bn)} BN layers, student stats have {len(student_stats)}")
    out = []
    for (mu, var), (mu_s, var_s) in zip(teacher_bn, student_stats):
        if np.shape(mu) != np.shape(mu_s) or np.shape(var) != np.shape(var_s):
            raise DimensionError(f"BN stat shapes differ: {np.shape(mu)} vs {np.shape(mu_s)}")
        if np.any(np.asarray(var_s) < 0):
            raise ValueError("student variance must be nonnegative")
        out.append((ema_update(mu, mu_s, m), ema_update(var, var_s, m)))
    return out


def _cosine_weight(phase: float) -> float:
    return (math.cos(phase * math.pi) + 1.0) / 2.0


def momentum_schedule(t: int, epochs: int, m_lo: float = DEFAULT_M_LO, m_hi: float = DEFAULT_M_HI) -> float:
    """EMA momentum for epoch ``t`` in 1..E; rises to ``m_hi`` at ``t == E``."""
    if not 1 <= t <= epochs:
        raise ScheduleError(f"epoch {t} outside 1..{epochs}")
    return m_hi - (m_hi - m_lo) * _cosine_weight(t / epochs)


def lr_schedule(t: int, epochs: int, lr_max: float, lr_min: float) -> float:
    """One cosine cycle from ``lr_max`` at t=1 down towards ``lr_min``."""
    if not 1 <= t <= epochs:
        raise ScheduleError(f"epoch {t} outside 1..{epochs}")
    if t == 1:
        return lr_max
    return lr_min + (lr_max - lr_min) * _cosine_weight((t - 1) / epochs)
