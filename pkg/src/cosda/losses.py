"""Consistency and mutual-information objectives.

Array functions evaluate the losses on probability tables; the ``*_tape``
variants build the same quantities on a :class:`~cosda.diffmath.GradientTape`
from student logits so they can be differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import diffmath as dm
from .errors import DimensionError

SIGN_MODES = ("paper", "standard_im")
_TINY = np.finfo(np.float64).tiny


def _rows(p, name="p") -> np.ndarray:
    p = dm.as_tensor(p)
    if p.ndim != 2:
        raise DimensionError(f"{name} must be a [B x C] table, got shape {p.shape}")
    return p


def consistency_loss(p_tilde, q) -> float:
    """Batch mean of KL(p_tilde_b || q_b)."""
    p_tilde, q = _rows(p_tilde, "p_tilde"), _rows(q, "q")
    if p_tilde.shape != q.shape:
        raise DimensionError(f"p_tilde {p_tilde.shape} and q {q.shape} differ")
    return float(_kernels.rowwise_kl(p_tilde, q).mean())


@dataclass(frozen=True)
class MiBreakdown:
    mi_eq3: float
    mean_instance_entropy: float
    marginal_entropy: float
    marginal: np.ndarray


def mutual_information(batch_probs) -> MiBreakdown:
    """Negated mean KL of each row to the batch marginal, with its entropy split."""
    probs = _rows(batch_probs, "batch_probs")
    if probs.shape[0] < 1:
        raise DimensionError("need at least one row")
    marginal = probs.mean(axis=0)
    # the marginal is positive wherever a row is, so no log floor is needed here
    kl = _kernels.rowwise_kl(probs, np.broadcast_to(marginal, probs.shape), _TINY)
    inst = _kernels.rowwise_entropy(probs)
    return MiBreakdown(
        mi_eq3=float(-kl.mean()),
        mean_instance_entropy=float(inst.mean()),
        marginal_entropy=float(_kernels.rowwise_entropy(marginal[None, :])[0]),
        marginal=marginal,
    )


def mi_loss(batch_probs, sign_mode: str = "paper") -> float:
    """``paper`` returns -MI (mean KL to the marginal); ``standard_im`` returns +MI."""
    mi = mutual_information(batch_probs).mi_eq3
    if sign_mode == "paper":
        return -mi
    if sign_mode == "standard_im":
        return mi
    raise ValueError(f"sign_mode must be one of {SIGN_MODES}, got {sign_mode!r}")


def total_loss(cons: float, mi: float, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return cons + alpha * mi


# ---------------------------------------------------------------- on tape

def consistency_loss_tape(tape: dm.GradientTape, p_tilde, logits: dm.Var) -> dm.Var:
    p_tilde = _rows(p_tilde, "p_tilde")
    if p_tilde.shape != logits.value.shape:
        raise DimensionError(f"p_tilde {p_tilde.shape} and logits {logits.value.shape} differ")
    b = p_tilde.shape[0]
    self_term = float(-_kernels.rowwise_entropy(p_tilde).sum())
    logq = tape.log_softmax(logits)
    cross = tape.sum(tape.mul(tape.constant(p_tilde), logq))
    # mean_b [sum_c p log p - sum_c p log q]
    return tape.scale(tape.sub(tape.constant(self_term), cross), 1.0 / b)


def mi_loss_tape(tape: dm.GradientTape, logits: dm.Var, sign_mode: str = "paper") -> dm.Var:
    if sign_mode not in SIGN_MODES:
        raise ValueError(f"sign_mode must be one of {SIGN_MODES}, got {sign_mode!r}")
    b = logits.value.shape[0]
    q = tape.softmax(logits)
    logq = tape.log_softmax(logits)
    marginal = tape.mean_rows(q)
    logm = tape.log(marginal, floor=_TINY)
    mean_kl = tape.scale(tape.sum(tape.mul(q, tape.sub(logq, logm))), 1.0 / b)
    return mean_kl if sign_mode == "paper" else tape.scale(mean_kl, -1.0)


def adaptation_loss_tape(tape: dm.GradientTape, p_tilde, logits: dm.Var, alpha: float,
                         sign_mode: str = "paper"):
    """Returns ``(total, consistency, mi)`` Vars; the MI term is skipped when alpha is 0."""
    cons = consistency_loss_tape(tape, p_tilde, logits)
    if alpha == 0:
        return cons, cons, None
    mi = mi_loss_tape(tape, logits, sign_mode)
    return tape.add(cons, tape.scale(mi, alpha)), cons, mi
