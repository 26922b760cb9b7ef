# core/schedule.py
from dataclasses import dataclass
from typing import Tuple

from core.errors import ConfigurationError


@dataclass(frozen=True)
class Schedule:
    """Step learning-rate schedule: base_lr multiplied by `decay` at every milestone epoch."""

    epochs: int = 30
    batch_size: int = 128
    base_lr: float = 0.1
    milestones: Tuple[int, ...] = (15, 23)
    decay: float = 0.1
    max_iterations: int = 0  # 0 = full epochs; otherwise stop the run after this many iterations

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError(f"schedule.epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"schedule.batch_size must be positive, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ConfigurationError(f"schedule.base_lr must be positive, got {self.base_lr}")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigurationError(f"schedule.milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] < 1 or ms[-1] >= self.epochs):
            raise ConfigurationError(f"schedule.milestones must lie in [1, epochs), got {ms}")
        if not 0.0 < self.decay < 1.0:
            raise ConfigurationError(f"schedule.decay must be in (0, 1), got {self.decay}")
        if self.max_iterations < 0:
            raise ConfigurationError("schedule.max_iterations must be >= 0")
        return self

    def lr_at(self, epoch: int) -> float:
        """LR for a 0-based epoch; an epoch equal to a milestone already uses the decayed rate."""
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.decay ** passed

    @classmethod
    def desk(cls):
        return cls(epochs=30, batch_size=128, base_lr=0.1, milestones=(15, 23), decay=0.1)

    @classmethod
    def full_scale(cls):
        return cls(epochs=300, batch_size=128, base_lr=0.1, milestones=(150, 225), decay=0.1)

    @classmethod
    def scaled(cls, factor: float, batch_size=128, base_lr=0.1):
        """The full-length schedule with epochs and milestones scaled by `factor`."""
        full = cls.full_scale()
        epochs = max(1, round(full.epochs * factor))
        milestones = cls.scale_milestones(full.milestones, full.epochs, epochs)
        return cls(epochs=epochs, batch_size=batch_size, base_lr=base_lr, milestones=milestones).validate()

    @staticmethod
    def scale_milestones(milestones, epochs: int, new_epochs: int):
        """Milestones moved proportionally from `epochs` to `new_epochs`; those that land on or past the end drop out."""
        factor = new_epochs / epochs
        scaled = (max(1, round(m * factor)) for m in milestones)
        return tuple(sorted({m for m in scaled if m < new_epochs}))
