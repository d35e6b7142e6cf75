"""Diffusion-trajectory algebra: noise schedules, forward sampling, and the
deterministic reference step used by the path-consistency objective.

All schedule coefficients are computed and stored in float64; the running
product of alphas underflows in single precision for long chains. Tensor
operations cast coefficients to the tensor's dtype at the point of use.

Index conventions: diffusion timesteps run t = 1..T with ``alpha_bar[0] == 1``.
The generator chain counts steps in the opposite direction (quality improves
0 -> T); chain state x_c corresponds to diffusion timestep T - c.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

BETA_CAP = 0.999  # rescaled-linear defaults exceed 1 for short chains


@dataclass(frozen=True)
class DiffusionSchedule:
    """Beta/alpha sequences with ``beta[i]`` holding beta_{i+1}.

    ``alpha_bar`` has length ``T_steps + 1`` with ``alpha_bar[0] == 1`` so
    ``alpha_bar[t]`` is directly the cumulative product through timestep t.
    """

    T_steps: int
    beta: np.ndarray
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.beta.shape != (self.T_steps,):
            raise ValueError(f"beta must have shape ({self.T_steps},)")
        if not (np.all(self.beta > 0) and np.all(self.beta < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        ab = self.alpha_bar
        if ab.shape != (self.T_steps + 1,) or ab[0] != 1.0:
            raise ValueError("alpha_bar must have length T+1 with alpha_bar[0] == 1")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not (0.0 < ab[-1] < 1.0):
            raise ValueError("alpha_bar[T] must lie in (0, 1)")

    def summary(self) -> dict:
        """Checkpoint form; elementwise arrays are recomputed on load."""
        return {
            "T_steps": self.T_steps,
            "kind": self.kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @staticmethod
    def from_summary(d: dict) -> "DiffusionSchedule":
        return build_schedule(d["T_steps"], d["beta_start"], d["beta_end"], d["kind"])


def default_beta_bounds(T_steps: int, cap: float = BETA_CAP) -> tuple[float, float]:
    """Linear-schedule bounds rescaled from the conventional 1000-step values.

    Rescaling by 1000/T preserves the total noise budget for short chains;
    the cap keeps each beta inside (0, 1), which the raw formula violates for
    T < 21.
    """
    scale = 1000.0 / T_steps
    return min(1e-4 * scale, cap), min(2e-2 * scale, cap)


def build_schedule(
    T_steps: int,
    beta_start: float,
    beta_end: float,
    kind: str = "linear",
) -> DiffusionSchedule:
    """Construct a schedule of ``T_steps`` betas.

    ``linear`` interpolates beta uniformly from ``beta_start`` to ``beta_end``.
    ``cosine`` uses the squared-cosine cumulative-alpha shape (offset 0.008,
    betas clipped at 0.999); the bounds are validated but do not affect the
    cosine shape.
    """
    if T_steps < 1:
        raise ValueError("T_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T_steps, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008

        def f(u: float) -> float:
            return math.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2

        beta = np.array(
            [
                min(1.0 - f(t / T_steps) / f((t - 1) / T_steps), BETA_CAP)
                for t in range(1, T_steps + 1)
            ],
            dtype=np.float64,
        )
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return DiffusionSchedule(
        T_steps=T_steps,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        kind=kind,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def _check_step(t: int, sched: DiffusionSchedule) -> None:
    if not (1 <= t <= sched.T_steps):
        raise ValueError(f"timestep {t} outside [1, {sched.T_steps}]")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(
    x0: torch.Tensor, t: int, eps: torch.Tensor, sched: DiffusionSchedule
) -> torch.Tensor:
    """Forward-noised state: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    _check_step(t, sched)
    _check_shapes(x0, eps)
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def estimate_x0(
    x_t: torch.Tensor, t: int, eps_pred: torch.Tensor, sched: DiffusionSchedule
) -> torch.Tensor:
    """Clean-image estimate (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)."""
    _check_step(t, sched)
    _check_shapes(x_t, eps_pred)
    ab = sched.alpha_bar[t]
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def ddim_step(
    x_t: torch.Tensor, t: int, eps_pred: torch.Tensor, sched: DiffusionSchedule
) -> torch.Tensor:
    """Deterministic (eta = 0) update from timestep t to t - 1.

    At t == 1 this returns the clean estimate exactly since alpha_bar[0] == 1.
    """
    _check_step(t, sched)
    _check_shapes(x_t, eps_pred)
    ab_prev = sched.alpha_bar[t - 1]
    x0_hat = estimate_x0(x_t, t, eps_pred, sched)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_pred
