"""Classification and online-distillation losses on clean single-domain batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ContractError, DimensionError, Tensor

REL_NORMS = ("raw", "mean")


def _require_detached(t: Tensor, what: str) -> None:
    if t.requires_grad or t.node is not None:
        raise ContractError(f"{what} must be wrapped in stop_gradient")


def nsl_classification(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = ag.sum_all(ag.multiply(ag.log_softmax_rows(logits), ag.constant(onehot)))
    return ag.scalar_scale(picked, -1.0 / b)


def relational_distill(e_student: Tensor, e_teacher: Tensor, norm: str = "raw") -> Tensor:
    """Squared Frobenius distance between the two batch Gram matrices.

    ``e_teacher`` must already be detached. With ``norm="mean"`` the sum is
    divided by B^2.
    """
    _require_detached(e_teacher, "teacher embeddings")
    if e_student.shape[0] != e_teacher.shape[0]:
        raise DimensionError(f"batch sizes differ: {e_student.shape[0]} vs {e_teacher.shape[0]}")
    if norm not in REL_NORMS:
        raise ContractError(f"rel_norm must be one of {REL_NORMS}")
    gram_s = ag.matmul(e_student, ag.transpose(e_student))
    gram_t = ag.matmul(e_teacher, ag.transpose(e_teacher))
    loss = ag.frobenius_sq_diff(gram_s, gram_t)
    if norm == "mean":
        loss = ag.scalar_scale(loss, 1.0 / e_student.shape[0] ** 2)
    return loss


def logit_distill(l_student: Tensor, l_teacher: Tensor, temperature: float) -> Tensor:
    """Batch mean of KL(softmax(l_s/T) || softmax(l_t/T)); no T^2 factor."""
    _require_detached(l_teacher, "teacher logits")
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    if l_student.shape != l_teacher.shape:
        raise DimensionError(f"logit shapes differ: {l_student.shape} vs {l_teacher.shape}")
    p_log = ag.log_softmax_rows(ag.scalar_scale(l_student, 1.0 / temperature))
    q_log = ag.log_softmax_rows(ag.scalar_scale(l_teacher, 1.0 / temperature))
    return ag.mean_all(ag.kl_rows(p_log, q_log))


@dataclass(frozen=True)
class LossFlags:
    no_logit_distill: bool = False
    no_any_distill: bool = False
    no_student_ce: bool = False
    no_teacher_ce: bool = False

    @property
    def use_teacher_ce(self) -> bool:
        return not self.no_teacher_ce

    @property
    def use_student_ce(self) -> bool:
        return not self.no_student_ce

    @property
    def use_rel(self) -> bool:
        return not self.no_any_distill

    @property
    def use_log(self) -> bool:
        return not (self.no_any_distill or self.no_logit_distill)


@dataclass
class LossBundle:
    cls_teacher: Tensor | None
    cls_student: Tensor | None
    rel: Tensor | None
    log_distill: Tensor | None
    total: Tensor
    enabled: dict[str, bool]

    def values(self) -> dict[str, float]:
        out = {}
        for name in ("cls_teacher", "cls_student", "rel", "log_distill", "total"):
            t = getattr(self, name)
            out[name] = float("nan") if t is None else t.item()
        return out


TERM_ORDER = ("cls_teacher", "cls_student", "rel", "log_distill")


def total_loss(cls_teacher: Tensor | None, cls_student: Tensor | None,
               rel: Tensor | None, log_distill: Tensor | None,
               flags: LossFlags = LossFlags()) -> LossBundle:
    """Unweighted sum of the enabled terms, added in a fixed order.

    Disabled or absent (``None``) terms are still reported but do not enter
    the total.
    """
    terms = {"cls_teacher": cls_teacher, "cls_student": cls_student,
             "rel": rel, "log_distill": log_distill}
    wanted = {"cls_teacher": flags.use_teacher_ce, "cls_student": flags.use_student_ce,
              "rel": flags.use_rel, "log_distill": flags.use_log}
    enabled = {k: wanted[k] and terms[k] is not None for k in TERM_ORDER}
    picked = [terms[k] for k in TERM_ORDER if enabled[k]]
    if not picked:
        raise ContractError("every loss term is disabled")
    total = picked[0]
    for t in picked[1:]:
        total = ag.add(total, t)
    return LossBundle(cls_teacher, cls_student, rel, log_distill, total, enabled)
