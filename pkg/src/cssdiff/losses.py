"""Training objectives and formulation-level diagnostics.

Sign conventions: every returned loss is minimized by its owner except
``adv_d_loss``'s perfect-discriminator limit, which is 0+ (the discriminator
minimizes that cross-entropy form directly). Detachment is the caller's job:
pass ``D(x_T.detach())`` when training D, and apply D with frozen parameters
(``models.apply_frozen``) when training the generators, so cross-gradients
are exactly zero.

The path-consistency loss follows the chain/diffusion index convention of the
schedule module (chain state x_c lives at diffusion timestep T - c): the sum
runs over the T-1 chain transitions x_{c} -> x_{c+1} for c >= 1, each
compared against the deterministic reference step from x_c. Epsilon
predictions are recovered from the chain itself (``recover_eps_preds``)
using the chain's final state as the clean estimate, rather than through a
separate noise-prediction head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import phantom
from .schedule import DiffusionSchedule, ddim_step

SCORE_GUARD = 1e-12  # keeps logs finite without distorting moderate scores


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 1.0
    rho: float = 1.0
    eta_t: tuple[float, ...] = ()

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3, self.rho, *self.eta_t)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("all loss weights must be finite and >= 0")

    @staticmethod
    def default(T_steps: int, **kwargs) -> "LossWeights":
        eta = tuple([1.0 / (T_steps - 1)] * (T_steps - 1)) if T_steps > 1 else ()
        return LossWeights(eta_t=eta, **kwargs)


@dataclass
class LossParts:
    adv_g: torch.Tensor
    adv_d: torch.Tensor
    cyc: torch.Tensor
    path: torch.Tensor


def _checked_log(scores: torch.Tensor, name: str) -> torch.Tensor:
    if torch.any(scores <= 0) or torch.any(scores >= 1):
        raise ValueError(f"{name} scores must lie strictly inside (0, 1)")
    return torch.log(scores.clamp(SCORE_GUARD, 1.0 - SCORE_GUARD))


def adv_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """-mean log D(real) - mean log(1 - D(fake)).

    ``d_fake`` must be scored on generator outputs detached from the
    generator graph.
    """
    return -_checked_log(d_real, "real").mean() - _checked_log(1.0 - d_fake, "fake").mean()


def adv_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term -mean log D(fake)."""
    return -_checked_log(d_fake, "fake").mean()


def cycle_loss(
    x0: torch.Tensor,
    F_of_G_x0: torch.Tensor,
    y: torch.Tensor,
    G_of_F_y: torch.Tensor,
    rho: float,
) -> torch.Tensor:
    """Mean-L1 forward reconstruction plus rho-weighted backward term."""
    if x0.shape != F_of_G_x0.shape or y.shape != G_of_F_y.shape:
        raise ValueError("cycle pairs must share shapes")
    forward = (x0 - F_of_G_x0).abs().mean()
    backward = (y - G_of_F_y).abs().mean()
    return forward + rho * backward


def recover_eps_preds(
    chain_states: list[torch.Tensor], sched: DiffusionSchedule
) -> list[torch.Tensor]:
    """Implied noise predictions for chain states [x_1 .. x_T].

    With the chain's final state as the clean estimate, the noise at chain
    state x_{k+1} (diffusion timestep tau = T - k - 1) is
    (x_{k+1} - sqrt(ab_tau) * x_T) / sqrt(1 - ab_tau). Returns T - 1 tensors,
    one per path-consistency term.
    """
    T = sched.T_steps
    if len(chain_states) != T:
        raise ValueError(f"expected {T} chain states, got {len(chain_states)}")
    x_clean = chain_states[-1]
    preds = []
    for k in range(T - 1):
        tau = T - (k + 1)
        ab = sched.alpha_bar[tau]
        preds.append((chain_states[k] - math.sqrt(ab) * x_clean) / math.sqrt(1.0 - ab))
    return preds


def path_consistency_loss(
    chain_states: list[torch.Tensor],
    eps_preds: list[torch.Tensor],
    sched: DiffusionSchedule,
    eta: tuple[float, ...] | list[float],
) -> torch.Tensor:
    """Weighted squared deviation of each chain state from its deterministic
    reference: sum_k eta[k] * mean|x_{k+2} - ddim(x_{k+1}, T-k-1)|^2."""
    T = sched.T_steps
    if len(chain_states) != T:
        raise ValueError(f"expected {T} chain states, got {len(chain_states)}")
    if len(eps_preds) != T - 1 or len(eta) != T - 1:
        raise ValueError(f"expected {T - 1} eps predictions and eta weights")
    total = chain_states[-1].new_zeros(())
    for k in range(T - 1):
        tau = T - (k + 1)
        ref = ddim_step(chain_states[k], tau, eps_preds[k], sched)
        total = total + eta[k] * ((chain_states[k + 1] - ref) ** 2).mean()
    return total


def total_objective(
    parts: LossParts, w: LossWeights
) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator loss, discriminator loss) for the two optimization phases."""
    gen = w.lambda1 * parts.adv_g + w.lambda2 * parts.cyc + w.lambda3 * parts.path
    return gen, parts.adv_d


def cycle_error(x0: torch.Tensor, F_of_G_x0: torch.Tensor) -> torch.Tensor:
    """Per-sample mean-L1 reconstruction error, shape (B,).

    Diagnostic proxy for hallucinated content; logged per validation epoch.
    """
    if x0.shape != F_of_G_x0.shape:
        raise ValueError("shape mismatch")
    diff = (x0 - F_of_G_x0).abs()
    return diff.reshape(diff.shape[0], -1).mean(dim=1)


def alignment_error(
    pred: phantom.Volume, hf: phantom.Volume, shifts: list[int]
) -> float:
    """Mean over re-indexings of the MSE between pred and shifted hf."""
    if len(shifts) == 0:
        raise ValueError("shifts must be a nonempty set")
    errs = []
    for s in shifts:
        shifted = phantom.inject_slice_shift(hf, s)
        errs.append(float(np.mean((pred.data - shifted.data) ** 2)))
    return float(np.mean(errs))
