"""Cubic sparsity schedule with warm-up/cool-down, and a linear learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SparsitySchedule:
    target_p: float
    total_steps: int
    warmup_frac: float = 0.10
    cooldown_frac: float = 0.30

    def __post_init__(self):
        if not 0.0 <= self.target_p <= 1.0:
            raise ValueError(f"target_p must lie in [0, 1], got {self.target_p}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")
        if self.warmup_frac < 0 or self.cooldown_frac < 0:
            raise ValueError("warmup_frac and cooldown_frac must be non-negative")
        if self.warmup_frac + self.cooldown_frac >= 1.0:
            raise ValueError(
                f"warmup_frac + cooldown_frac must be < 1, got "
                f"{self.warmup_frac} + {self.cooldown_frac}"
            )

    @property
    def ramp_start(self) -> float:
        return self.warmup_frac * self.total_steps

    @property
    def ramp_end(self) -> float:
        return (1.0 - self.cooldown_frac) * self.total_steps

    def __call__(self, t: int) -> float:
        return sparsity_at(self, t)


def sparsity_at(s: SparsitySchedule, t: int) -> float:
    """Sparsity at step ``t``.

    Zero before the ramp, ``p * (1 - (1 - tau)**3)`` on the ramp with
    ``tau`` the fraction of the ramp elapsed, ``p`` from the ramp end on.
    """
    if not 0 <= t <= s.total_steps:
        raise ValueError(f"step {t} outside [0, {s.total_steps}]")
    t_w, t_c = s.ramp_start, s.ramp_end
    if t < t_w:
        return 0.0
    if t >= t_c:
        return s.target_p
    tau = (t - t_w) / (t_c - t_w)
    return s.target_p * (1.0 - (1.0 - tau) ** 3)


def lr_at(base_lr: float, t: int, total: int) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return base_lr * (1.0 - t / total)
