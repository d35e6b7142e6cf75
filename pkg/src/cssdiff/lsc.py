"""Local structure correction: block-wise corruption (rotation + masking),
self-reconstruction training of the corrector, and the patch-adversarial
objective.

Corruption partitions an image into a non-overlapping block grid, rotates one
uniformly sampled subset of blocks and masks a disjoint second subset with 0
(MR background). Subset sizes are exactly round(fraction * n_blocks),
half-up.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import TrainingError
from .losses import _checked_log
from .metrics import psnr, ssim_torch
from .models import ModelBundle, apply_frozen
from .phantom import PairedSample

_ALLOWED_ANGLES = (90, 180, 270)
MASK_FILL = 0.0


@dataclass(frozen=True)
class CorruptionSpec:
    grid: tuple[int, int] = (8, 8)
    rotate_fraction: float = 0.1
    mask_fraction: float = 0.3
    angles: tuple[int, ...] = (90, 180, 270)
    seed: int = 0

    def __post_init__(self):
        if len(self.grid) != 2 or any(g < 1 for g in self.grid):
            raise ValueError("grid must be two positive ints")
        if not (0.0 <= self.rotate_fraction <= 1.0 and 0.0 <= self.mask_fraction <= 1.0):
            raise ValueError("fractions must lie in [0, 1]")
        if self.rotate_fraction + self.mask_fraction > 1.0:
            raise ValueError("rotate_fraction + mask_fraction must be <= 1")
        if any(a not in _ALLOWED_ANGLES for a in self.angles):
            raise ValueError(f"angles must be a subset of {_ALLOWED_ANGLES}")
        if self.rotate_fraction > 0 and not self.angles:
            raise ValueError("angles must be nonempty when rotate_fraction > 0")


@dataclass(frozen=True)
class LscConfig:
    corruption: CorruptionSpec = CorruptionSpec()
    epochs: int = 15
    batch: int = 8
    lr: float = 1e-3
    mu: float = 0.01
    alpha: float = 0.5
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("invalid training scalars")
        if self.mu < 0 or self.alpha < 0:
            raise ValueError("mu and alpha must be >= 0")
        if not (0.0 < self.holdout_fraction < 1.0):
            raise ValueError("holdout_fraction must lie in (0, 1)")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def rotate_block(block: np.ndarray, angle: int) -> np.ndarray:
    """Counter-clockwise rotation by 90/180/270 degrees."""
    if angle not in _ALLOWED_ANGLES:
        raise ValueError(f"angle must be one of {_ALLOWED_ANGLES}")
    return np.rot90(block, k=angle // 90)


def corrupt(y: np.ndarray, spec: CorruptionSpec) -> tuple[np.ndarray, np.ndarray]:
    """Apply rotation then masking to disjoint block subsets.

    Returns the corrupted image and a (rows, cols) label array with entries
    'clean', 'rot90', 'rot180', 'rot270' or 'masked'. Deterministic in
    ``spec.seed``; untouched blocks are bit-identical to the input.
    """
    y = np.asarray(y)
    if y.ndim != 2:
        raise ValueError("expected a 2-D image")
    rows, cols = spec.grid
    h, w = y.shape
    if h % rows or w % cols:
        raise ValueError(f"image dims {(h, w)} not divisible by grid {(rows, cols)}")
    bh, bw = h // rows, w // cols
    needs_square = spec.rotate_fraction > 0 and any(a in (90, 270) for a in spec.angles)
    if needs_square and bh != bw:
        raise ValueError("blocks must be square for 90/270 degree rotations")

    n_blocks = rows * cols
    n_rot = _round_half_up(spec.rotate_fraction * n_blocks)
    n_mask = _round_half_up(spec.mask_fraction * n_blocks)
    if n_rot + n_mask > n_blocks:
        raise ValueError("rounded subset sizes exceed the block count")

    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n_blocks)
    rot_ids = perm[:n_rot]
    mask_ids = perm[n_rot : n_rot + n_mask]

    out = y.copy()
    labels = np.full((rows, cols), "clean", dtype="<U6")

    def block_view(bid: int):
        r, c = divmod(int(bid), cols)
        return (slice(r * bh, (r + 1) * bh), slice(c * bw, (c + 1) * bw)), (r, c)

    for bid in rot_ids:
        sl, (r, c) = block_view(bid)
        angle = int(rng.choice(spec.angles))
        out[sl] = rotate_block(out[sl], angle)
        labels[r, c] = f"rot{angle}"
    for bid in mask_ids:
        sl, (r, c) = block_view(bid)
        out[sl] = MASK_FILL
        labels[r, c] = "masked"
    return out, labels


def lsc_recon_loss(
    y: torch.Tensor, y_hat: torch.Tensor, alpha: float
) -> torch.Tensor:
    """Root-mean-square error plus alpha * (1 - SSIM)."""
    if y.shape != y_hat.shape:
        raise ValueError("shape mismatch")
    rms = torch.sqrt(((y - y_hat) ** 2).mean())
    if alpha == 0:
        return rms
    return rms + alpha * (1.0 - ssim_torch(y, y_hat))


def lsc_adversarial(
    corrector: torch.nn.Module,
    patch_disc: torch.nn.Module,
    y: torch.Tensor,
    y_lsc: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(gen_term, disc_term) of the patch-adversarial objective.

    disc_term = mean log D(y) + mean log(1 - D(E_T(y_lsc))) is the value the
    discriminator maximizes (train D by descending -disc_term); gen_term is
    the non-saturating -mean log D(E_T(y_lsc)) minimized by the corrector.
    """
    y_hat = corrector(y_lsc)
    d_real = patch_disc(y)
    d_fake_d = patch_disc(y_hat.detach())
    disc_term = _checked_log(d_real, "real").mean() + _checked_log(
        1.0 - d_fake_d, "fake"
    ).mean()
    d_fake_g = apply_frozen(patch_disc, y_hat)
    gen_term = -_checked_log(d_fake_g, "fake").mean()
    return gen_term, disc_term


_EVAL_EPOCH_TAG = 999_999_937  # out-of-band epoch id for held-out corruption


def _corruption_seed(base: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([base, epoch, index]).generate_state(1)[0])


def _corrupt_batch(
    images: np.ndarray, spec: CorruptionSpec, epoch: int, start_index: int
) -> np.ndarray:
    out = np.empty_like(images)
    for i, img in enumerate(images):
        s = replace(spec, seed=_corruption_seed(spec.seed, epoch, start_index + i))
        out[i], _ = corrupt(img, s)
    return out


def _holdout_psnrs(
    corrector: torch.nn.Module, images: np.ndarray, spec: CorruptionSpec
) -> tuple[float, float]:
    corrupted = _corrupt_batch(images, spec, epoch=_EVAL_EPOCH_TAG, start_index=0)
    with torch.no_grad():
        recon = corrector(torch.from_numpy(corrupted).unsqueeze(1)).squeeze(1).numpy()
    recon = np.clip(recon, 0.0, 1.0)
    p_rec = float(np.mean([psnr(r, y) for r, y in zip(recon, images)]))
    p_cor = float(np.mean([psnr(c, y) for c, y in zip(corrupted, images)]))
    return p_rec, p_cor


def pretrain_lsc(
    pairs: list[PairedSample],
    bundle: ModelBundle,
    cfg: LscConfig,
    seed: int = 0,
) -> dict:
    """Train the corrector (and patch discriminator) on corrupted high-field
    slices; returns the stage report with held-out reconstruction PSNR."""
    slices = np.concatenate([p.hf.data for p in pairs], axis=0).astype(np.float32)
    rng_split = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    order = rng_split.permutation(len(slices))
    n_hold = max(1, int(len(slices) * cfg.holdout_fraction))
    hold, train = slices[order[:n_hold]], slices[order[n_hold:]]

    corrector, patch_disc = bundle.corrector, bundle.patch_disc
    opt_g = torch.optim.Adam(corrector.parameters(), lr=cfg.lr)
    opt_d = torch.optim.Adam(patch_disc.parameters(), lr=cfg.lr)
    last_good = {
        "corrector": copy.deepcopy(corrector.state_dict()),
        "patch_disc": copy.deepcopy(patch_disc.state_dict()),
    }
    final_recon = float("nan")

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        order = rng.permutation(len(train))
        epoch_losses = []
        for start in range(0, len(train), cfg.batch):
            batch_idx = order[start : start + cfg.batch]
            y_np = train[batch_idx]
            y_lsc_np = _corrupt_batch(y_np, cfg.corruption, epoch, start)
            y = torch.from_numpy(y_np).unsqueeze(1)
            y_lsc = torch.from_numpy(y_lsc_np).unsqueeze(1)

            y_hat = corrector(y_lsc)

            d_real = patch_disc(y)
            d_fake = patch_disc(y_hat.detach())
            disc_term = _checked_log(d_real, "real").mean() + _checked_log(
                1.0 - d_fake, "fake"
            ).mean()
            opt_d.zero_grad()
            (-disc_term).backward()
            opt_d.step()

            gen_term = -_checked_log(apply_frozen(patch_disc, y_hat), "fake").mean()
            recon = lsc_recon_loss(y, y_hat, cfg.alpha)
            loss = recon + cfg.mu * gen_term
            if not math.isfinite(float(loss.detach())):
                corrector.load_state_dict(last_good["corrector"])
                patch_disc.load_state_dict(last_good["patch_disc"])
                raise TrainingError(
                    f"LSC loss diverged at epoch {epoch}", last_good=last_good
                )
            opt_g.zero_grad()
            loss.backward()
            opt_g.step()
            epoch_losses.append(float(recon.detach()))
        if epoch_losses:
            final_recon = float(np.mean(epoch_losses))
        last_good = {
            "corrector": copy.deepcopy(corrector.state_dict()),
            "patch_disc": copy.deepcopy(patch_disc.state_dict()),
        }

    p_rec, p_cor = _holdout_psnrs(corrector, hold, cfg.corruption)
    return {
        "holdout_psnr_recon": p_rec,
        "holdout_psnr_corrupted": p_cor,
        "gain_db": p_rec - p_cor,
        "final_recon_loss": final_recon,
        "epochs_run": cfg.epochs,
    }
