"""Slice-wise gap perception: contrastive pretraining that matches
corresponding slices across field strengths and exports the slice embeddings
used to condition the generator chain.

Batches are drawn from one subject at a time and shuffled on the high-field
side. Positives come from cosine-similarity hard mining with the live
encoder; the first ``warmup_epochs`` epochs use the known within-batch
pairing instead, because argmax positives from a randomly initialized encoder
are noise and invite collapse.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import TrainingError
from .models import ModelBundle
from .phantom import PairedSample


@dataclass(frozen=True)
class SgpConfig:
    tau: float = 0.1
    epochs: int = 30
    batch_slices: int = 16
    lr: float = 1e-3
    warmup_epochs: int = 2

    def __post_init__(self):
        if not (0.0 < self.tau <= 10.0):
            raise ValueError("tau must lie in (0, 10]")
        if self.epochs < 0 or self.batch_slices < 2 or self.lr <= 0:
            raise ValueError("invalid training scalars")


@dataclass
class SliceBatch:
    """Paired slice batch; hf_slices[true_perm[i]] matches lf_slices[i]."""

    lf_slices: torch.Tensor
    hf_slices: torch.Tensor
    true_perm: np.ndarray

    def __post_init__(self):
        n = self.lf_slices.shape[0]
        if n < 2:
            raise ValueError("a slice batch needs at least 2 slices")
        if self.lf_slices.shape != self.hf_slices.shape:
            raise ValueError("lf and hf slices must share shapes")
        if sorted(self.true_perm.tolist()) != list(range(n)):
            raise ValueError("true_perm must be a permutation of [0..N-1]")


def valid_slice_indices(pair: PairedSample) -> np.ndarray:
    """Slice indices whose shifted counterpart exists (no edge replication)."""
    z = pair.hf.shape[0]
    idx = np.arange(z)
    return idx[(idx + pair.slice_shift >= 0) & (idx + pair.slice_shift < z)]


def make_slice_batch(
    pair: PairedSample,
    indices: np.ndarray,
    rng: np.random.Generator,
    shuffle: bool = True,
) -> SliceBatch:
    lf = torch.from_numpy(pair.lf.data[indices].copy())
    matched = pair.hf.data[indices + pair.slice_shift]
    n = len(indices)
    if shuffle:
        p = rng.permutation(n)
        hf = torch.from_numpy(matched[p].copy())
        true_perm = np.argsort(p)
    else:
        hf = torch.from_numpy(matched.copy())
        true_perm = np.arange(n)
    return SliceBatch(lf_slices=lf, hf_slices=hf, true_perm=true_perm)


def iter_batches(
    pairs: list[PairedSample],
    batch_slices: int,
    rng: np.random.Generator,
    shuffle: bool = True,
):
    """Yield per-subject slice batches in a deterministic rng-driven order."""
    order = rng.permutation(len(pairs))
    for pair_idx in order:
        pair = pairs[pair_idx]
        idx = valid_slice_indices(pair)
        idx = idx[rng.permutation(len(idx))]
        for start in range(0, len(idx) - 1, batch_slices):
            chunk = np.sort(idx[start : start + batch_slices])
            if len(chunk) >= 2:
                yield make_slice_batch(pair, chunk, rng, shuffle=shuffle)


def mine_positive(lf_slice, hf_batch, encoder) -> int:
    """Index of the most cosine-similar high-field slice (ties -> lowest)."""
    if len(hf_batch) == 0:
        raise ValueError("hf_batch must be nonempty")
    lf_t = torch.as_tensor(np.asarray(lf_slice), dtype=torch.float32)
    hf_t = torch.as_tensor(np.asarray(hf_batch), dtype=torch.float32)
    with torch.no_grad():
        z_lf = encoder(lf_t)
        z_hf = encoder(hf_t)
        z_lf = z_lf / (z_lf.norm() + 1e-12)
        z_hf = z_hf / (z_hf.norm(dim=-1, keepdim=True) + 1e-12)
        sims = z_hf @ z_lf
    return int(torch.argmax(sims))


def info_nce_loss(
    lf_embs: torch.Tensor,
    hf_embs: torch.Tensor,
    positives,
    tau: float,
) -> torch.Tensor:
    """Temperature-scaled softmax classification of the positive pair.

    Embeddings must already be unit-norm (deviation beyond 1e-3 is a contract
    violation), so the similarity matrix is a plain inner product.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    for name, embs in (("lf", lf_embs), ("hf", hf_embs)):
        norms = embs.norm(dim=-1)
        if torch.any((norms - 1.0).abs() > 1e-3):
            raise ValueError(f"{name} embeddings are not unit-norm")
    n = lf_embs.shape[0]
    pos = torch.as_tensor(np.asarray(positives), dtype=torch.long)
    if pos.shape != (n,) or pos.min() < 0 or pos.max() >= n:
        raise ValueError("positives must be N valid indices")
    logits = (lf_embs @ hf_embs.T) / tau
    return F.cross_entropy(logits, pos)


def condition_embedding(encoder, lf_slice) -> torch.Tensor:
    """Unit-norm embedding used as the chain's slice-conditioning vector."""
    lf_t = torch.as_tensor(np.asarray(lf_slice), dtype=torch.float32)
    with torch.no_grad():
        z = encoder(lf_t)
    return z / (z.norm(dim=-1, keepdim=True) + 1e-12)


def mining_accuracy(
    pairs: list[PairedSample],
    encoder,
    batch_slices: int,
    seed: int = 9999,
) -> float:
    """Fraction of slices whose mined positive equals the true counterpart."""
    rng = np.random.default_rng(seed)
    hits = 0
    total = 0
    for batch in iter_batches(pairs, batch_slices, rng, shuffle=True):
        with torch.no_grad():
            z_lf = encoder(batch.lf_slices)
            z_hf = encoder(batch.hf_slices)
            mined = torch.argmax(z_lf @ z_hf.T, dim=1).numpy()
        hits += int((mined == batch.true_perm).sum())
        total += len(batch.true_perm)
    return hits / max(total, 1)


def pretrain_sgp(
    pairs: list[PairedSample],
    bundle: ModelBundle,
    cfg: SgpConfig,
    seed: int = 0,
    sanity_mode: bool = False,
) -> dict:
    """Train the slice encoder in place; returns the stage report.

    ``sanity_mode`` replaces mined positives with the ground-truth pairing
    throughout (test-only supervision). NaN loss raises TrainingError with the
    last healthy encoder state restored.
    """
    encoder = bundle.slice_encoder
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr)
    last_good = copy.deepcopy(encoder.state_dict())
    final_loss = float("nan")

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        epoch_losses = []
        for batch in iter_batches(pairs, cfg.batch_slices, rng, shuffle=True):
            z_lf = encoder(batch.lf_slices)
            z_hf = encoder(batch.hf_slices)
            if sanity_mode or epoch < cfg.warmup_epochs:
                positives = batch.true_perm
            else:
                with torch.no_grad():
                    positives = torch.argmax(z_lf @ z_hf.T, dim=1).numpy()
            loss = info_nce_loss(z_lf, z_hf, positives, cfg.tau)
            if not math.isfinite(float(loss.detach())):
                encoder.load_state_dict(last_good)
                raise TrainingError(
                    f"SGP loss diverged at epoch {epoch}", last_good=last_good
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        if epoch_losses:
            final_loss = float(np.mean(epoch_losses))
        last_good = copy.deepcopy(encoder.state_dict())

    return {
        "final_loss": final_loss,
        "mining_accuracy": mining_accuracy(pairs, encoder, cfg.batch_slices),
        "epochs_run": cfg.epochs,
    }
