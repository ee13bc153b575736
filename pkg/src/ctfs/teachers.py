"""Three EMA teachers and the epoch-indexed rotation between them."""
from __future__ import annotations

import copy

import torch

from . import TEACHER_TAGS
from .model import model_from_state, model_state, predict

SUPERVISED = "supervised"


def schedule(epoch: int, warmup: int) -> str:
    """Active teacher for an epoch: supervised during warm-up, then a fixed
    general -> sonar_a -> sonar_b cycle."""
    if epoch < 0 or warmup < 0:
        raise ValueError("epoch and warm-up length must be non-negative")
    if epoch < warmup:
        return SUPERVISED
    return TEACHER_TAGS[(epoch - warmup) % 3]


class TeacherBank:
    """Weight-averaged replicas of the student, one per perturbation family."""

    def __init__(self, teachers: dict, ema_decay: float = 0.999, warmup_epochs: int = 10):
        if set(teachers) != set(TEACHER_TAGS):
            raise ValueError(f"teachers must be exactly {TEACHER_TAGS}")
        if not 0.0 <= ema_decay <= 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1], got {ema_decay}")
        self.teachers = {tag: teachers[tag] for tag in TEACHER_TAGS}
        for net in self.teachers.values():
            net.eval()
            net.requires_grad_(False)
        self.ema_decay = float(ema_decay)
        self.warmup_epochs = int(warmup_epochs)

    @classmethod
    def from_student(cls, student, ema_decay=0.999, warmup_epochs=10) -> "TeacherBank":
        return cls({tag: copy.deepcopy(student) for tag in TEACHER_TAGS}, ema_decay, warmup_epochs)

    def __getitem__(self, tag):
        try:
            return self.teachers[tag]
        except KeyError:
            raise KeyError(f"unknown teacher tag {tag!r}") from None

    @torch.no_grad()
    def ema_update(self, tag: str, student) -> None:
        """teacher[tag] <- m * teacher[tag] + (1 - m) * student; other teachers untouched."""
        teacher = self[tag]
        m = self.ema_decay
        t_state, s_state = teacher.state_dict(), student.state_dict()
        if t_state.keys() != s_state.keys():
            raise ValueError("teacher and student architectures differ")
        for k, t in t_state.items():
            s = s_state[k]
            if t.shape != s.shape:
                raise ValueError(f"shape mismatch for {k}")
            if t.is_floating_point():
                t.mul_(m).add_(s.detach(), alpha=1.0 - m)
            else:
                t.copy_(s)

    def predict(self, tag: str, img) -> torch.Tensor:
        return predict(self[tag], img)

    def state(self) -> dict:
        return {
            "teachers": {tag: model_state(net) for tag, net in self.teachers.items()},
            "ema_decay": self.ema_decay,
            "warmup_epochs": self.warmup_epochs,
        }

    @classmethod
    def from_state(cls, state: dict, num_classes: int | None = None) -> "TeacherBank":
        nets = {tag: model_from_state(s, num_classes) for tag, s in state["teachers"].items()}
        return cls(nets, state["ema_decay"], state["warmup_epochs"])


def teacher_predict(bank: TeacherBank, tag: str, img_weak) -> torch.Tensor:
    return bank.predict(tag, img_weak)


def make_pseudo_label(prob: torch.Tensor) -> torch.Tensor:
    """Hard labels by argmax over the class axis (dim -3); ties go to the lower index."""
    prob = torch.as_tensor(prob)
    return prob.argmax(dim=-3)
