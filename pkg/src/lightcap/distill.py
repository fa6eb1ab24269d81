"""Knowledge distillation: trace matching, soft predictions, ensembles.

A student trunk mimics a deeper teacher three ways: per-layer attention
scores (MSE over mapped layer pairs, averaged over heads), per-layer
hidden states through a shared trainable adapter that bridges the width
gap, and softened output distributions at temperature tau (token
predictions always, pollution probabilities only while pre-training).
With an ensemble head, each branch is distilled from its own teacher;
the attention/hidden terms use a single trunk teacher since several
trunk targets would conflict.

Teachers are frozen by construction: their parameters have
``requires_grad=False`` so no graph is ever recorded through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParameterError
from .fusion import ForwardTrace
from .model import AssembledItem, CaptionModel, ItemForward, forward_item
from .objectives import batch_caption_loss, batch_concept_loss
from .tensor import Tensor

PRETRAIN = "pretrain"
FINETUNE = "finetune"


@dataclass
class KDPlan:
    """Teacher/student wiring plus loss weights for one distillation run."""

    student_layers: int
    teacher_layers: int
    adapter: Tensor  # [d_student x d_teacher] linear, no bias, trainable
    stage: str = PRETRAIN
    tau: float = 1.0
    layer_map: tuple[int, ...] | None = None  # 1-based teacher layer per student layer
    teacher_assignment: tuple[int, ...] = (0,)  # head branch -> teacher index
    kd1: float = 1.0  # attention + hidden weight
    kd2: float = 1.0  # prediction weight
    task_weight: float = 1.0
    phase_split: float | None = None  # fraction of steps with kd2 off, then kd1 off

    def __post_init__(self):
        if self.layer_map is None:
            self.layer_map = tuple(3 * j for j in range(1, self.student_layers + 1))
        if len(self.layer_map) != self.student_layers:
            raise ConfigError(
                f"layer map covers {len(self.layer_map)} layers, "
                f"student has {self.student_layers}"
            )
        if any(b >= a for a, b in zip(self.layer_map[1:], self.layer_map)):
            raise ConfigError(f"layer map must be strictly increasing: {self.layer_map}")
        if self.layer_map[0] < 1 or self.layer_map[-1] > self.teacher_layers:
            raise ConfigError(
                f"layer map {self.layer_map} outside teacher depth {self.teacher_layers}"
            )
        if self.tau <= 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if self.stage not in (PRETRAIN, FINETUNE):
            raise ConfigError(f"unknown stage {self.stage!r}")

    def weights_at(self, step: int, total_steps: int) -> tuple[float, float]:
        """(kd1, kd2) for this step under the two-phase schedule.

        Phase A trains attention/hidden matching only; phase B switches to
        prediction matching. Without a split both run jointly.
        """
        if self.phase_split is None or total_steps <= 0:
            return self.kd1, self.kd2
        if step < self.phase_split * total_steps:
            return self.kd1, 0.0
        return 0.0, self.kd2


def identity_adapter(d: int) -> Tensor:
    return Tensor(np.eye(d), requires_grad=True, name="kd.adapter")


def random_adapter(d_student: int, d_teacher: int, seed: int = 0) -> Tensor:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d_student)
    return Tensor(rng.normal(0, scale, (d_student, d_teacher)),
                  requires_grad=True, name="kd.adapter")


def attention_kd(student: ForwardTrace, teacher: ForwardTrace, plan: KDPlan) -> Tensor:
    """Mean over mapped layers of the per-head-averaged score MSE."""
    terms = []
    for j, m in enumerate(plan.layer_map, start=1):
        a_s = student.attentions[j - 1]
        a_t = teacher.attentions[m - 1]
        if a_s.shape[0] != a_t.shape[0]:
            raise ConfigError(
                f"head counts differ: student {a_s.shape[0]} vs teacher {a_t.shape[0]}"
            )
        if a_s.shape != a_t.shape:
            raise ConfigError(f"attention shapes differ: {a_s.shape} vs {a_t.shape}")
        # MSE over [h, T, T] equals the mean over heads of per-head MSE
        terms.append(T.mse(a_s, a_t))
    return _mean_terms(terms)


def hidden_kd(student: ForwardTrace, teacher: ForwardTrace, plan: KDPlan) -> Tensor:
    """Mean over mapped layers of MSE(H_s W, H_t); W takes gradient."""
    terms = []
    for j, m in enumerate(plan.layer_map, start=1):
        h_s = student.hiddens[j - 1]
        h_t = teacher.hiddens[m - 1]
        projected = T.matmul(h_s, plan.adapter)
        if projected.shape != h_t.shape:
            raise ConfigError(
                f"adapted hidden {projected.shape} vs teacher {h_t.shape}"
            )
        terms.append(T.mse(projected, h_t))
    return _mean_terms(terms)


def prediction_kd(
    student_logits: Tensor,
    teacher_logits: Tensor,
    plan: KDPlan,
    student_pollution: Tensor | None = None,
    teacher_pollution: Tensor | None = None,
) -> Tensor:
    """Soft token-prediction CE, plus soft pollution CE while pre-training.

    Pollution logits arrive as [n] tensors; each becomes a two-way
    distribution over (clean, polluted) via the logit pair (0, l).
    """
    loss = T.cross_entropy_soft(student_logits, teacher_logits, plan.tau)
    if plan.stage == PRETRAIN and student_pollution is not None:
        loss = T.add(
            loss,
            T.cross_entropy_soft(
                _binary_rows(student_pollution), _binary_rows(teacher_pollution), plan.tau
            ),
        )
    return loss


def _binary_rows(logits: Tensor) -> Tensor:
    flat = T.reshape(logits, (logits.size, 1))
    zeros = Tensor(np.zeros((logits.size, 1)))
    return T.concat([zeros, flat], axis=1)


def ensemble_kd(
    student_branch_logits: list[Tensor],
    teacher_logits,
    plan: KDPlan,
    student_pollution: Tensor | None = None,
    teacher_pollutions=None,
) -> Tensor:
    """Each head branch mimics its assigned teacher; branch mean.

    ``teacher_logits`` maps teacher index -> [S x V] logits (a list or a
    dict); ``teacher_pollutions`` likewise when pre-training.
    """
    n_branches = len(student_branch_logits)
    if len(plan.teacher_assignment) < n_branches:
        raise ConfigError(
            f"{n_branches} branches but assignment covers "
            f"{len(plan.teacher_assignment)}"
        )
    if isinstance(teacher_logits, list):
        teacher_logits = dict(enumerate(teacher_logits))
    if isinstance(teacher_pollutions, list):
        teacher_pollutions = dict(enumerate(teacher_pollutions))
    terms = []
    for b, z_s in enumerate(student_branch_logits):
        t = plan.teacher_assignment[b]
        if t not in teacher_logits:
            raise ConfigError(f"branch {b} assigned to missing teacher {t}")
        terms.append(
            prediction_kd(
                z_s,
                teacher_logits[t],
                plan,
                student_pollution,
                teacher_pollutions[t] if teacher_pollutions else None,
            )
        )
    return _mean_terms(terms)


def _mean_terms(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.div(acc, Tensor(float(len(terms)))) if len(terms) > 1 else acc


# ---------------------------------------------------------------------------
# batch-level orchestration
# ---------------------------------------------------------------------------


def freeze(model: CaptionModel) -> CaptionModel:
    for p in model.parameters():
        p.requires_grad = False
    return model


@dataclass
class StageLossParts:
    total: Tensor
    task: float
    trunk_kd: float
    prediction: float


def stage_loss(
    student: CaptionModel,
    teachers: list[CaptionModel],
    batch: list[AssembledItem],
    plan: KDPlan,
    step: int = 0,
    total_steps: int = 0,
) -> StageLossParts:
    """task + kd1 * (attention + hidden) + kd2 * ensemble prediction KD."""
    kd1, kd2 = plan.weights_at(step, total_steps)
    student_fwd = [forward_item(student, item) for item in batch]
    teacher_fwd: dict[int, list[ItemForward]] = {}
    needed = {plan.teacher_assignment[0]} if kd1 != 0.0 else set()
    if kd2 != 0.0:
        needed.update(plan.teacher_assignment[: student.head.n_branches])
    for t in sorted(needed):
        teacher_fwd[t] = [forward_item(teachers[t], item) for item in batch]

    task = batch_caption_loss(student_fwd, batch)
    if plan.stage == PRETRAIN:
        task = T.add(task, batch_concept_loss(student_fwd, batch))

    total = T.mul(task, Tensor(plan.task_weight))
    trunk_val = 0.0
    pred_val = 0.0
    if kd1 != 0.0:
        trunk = teacher_fwd[plan.teacher_assignment[0]]
        terms = [
            T.add(
                attention_kd(s.trace, t.trace, plan),
                hidden_kd(s.trace, t.trace, plan),
            )
            for s, t in zip(student_fwd, trunk)
        ]
        trunk_loss = _mean_terms(terms)
        trunk_val = trunk_loss.item()
        total = T.add(total, T.mul(trunk_loss, Tensor(kd1)))
    if kd2 != 0.0:
        branch_logits = [
            T.concat([f.branch_logits[b] for f in student_fwd], axis=0)
            for b in range(student.head.n_branches)
        ]
        teacher_logits = {
            t: T.concat([f.branch_logits[0] for f in fwd], axis=0)
            for t, fwd in teacher_fwd.items()
        }
        student_pol, teacher_pols = _stack_pollution(student_fwd, teacher_fwd, plan)
        pred_loss = ensemble_kd(
            branch_logits,
            teacher_logits,
            plan,
            student_pollution=student_pol,
            teacher_pollutions=teacher_pols,
        )
        pred_val = pred_loss.item()
        total = T.add(total, T.mul(pred_loss, Tensor(kd2)))
    return StageLossParts(
        total=total, task=task.item(), trunk_kd=trunk_val, prediction=pred_val
    )


def _stack_pollution(student_fwd, teacher_fwd, plan):
    if plan.stage != PRETRAIN:
        return None, None
    pols = [f.pollution for f in student_fwd if f.pollution is not None]
    if not pols:
        return None, None
    student = T.concat([T.reshape(p, (1,)) for p in pols], axis=0)
    teachers = {
        t: T.concat(
            [T.reshape(f.pollution, (1,)) for f in fwd if f.pollution is not None],
            axis=0,
        )
        for t, fwd in teacher_fwd.items()
    }
    return student, teachers
