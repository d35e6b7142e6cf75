"""Shared fixtures and micro-model builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from cssdiff.models import ModelBundle
from cssdiff.phantom import (
    DegradationParams,
    PairedSample,
    degrade_to_low_field,
    generate_phantom,
    inject_slice_shift,
)


class MicroGen(nn.Module):
    """Chain generator small enough for finite-difference gradient checks.

    cond_dim must be twice the encoder embedding (slice embedding plus the
    sinusoidal step embedding that apply_chain appends).
    """

    def __init__(self, cond_dim: int = 8, width: int = 3):
        super().__init__()
        self.cond_dim = cond_dim
        self.conv1 = nn.Conv2d(2, width, 3, padding=1)
        self.film = nn.Linear(cond_dim, 2 * width)
        self.conv2 = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, x, z=None, cond=None):
        if z is None:
            z = torch.zeros_like(x)
        if cond is None:
            cond = x.new_zeros(x.shape[0], self.cond_dim)
        elif cond.dim() == 1:
            cond = cond.unsqueeze(0).expand(x.shape[0], -1)
        h = F.silu(self.conv1(torch.cat([x, z], dim=1)))
        scale, shift = self.film(cond).chunk(2, dim=-1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return x + self.conv2(h)


class MicroImageNet(nn.Module):
    """Residual image->image map (reverse generator / corrector stand-in)."""

    def __init__(self, width: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(1, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(x)))


class MicroDisc(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 2, 3, stride=2, padding=1)
        self.head = nn.Linear(2, 1)

    def forward(self, x):
        h = F.leaky_relu(self.conv(x), 0.2).mean(dim=(2, 3))
        return torch.sigmoid(self.head(h)).clamp(1e-7, 1 - 1e-7).squeeze(1)


class MicroPatchDisc(nn.Module):
    patch_stride = 2

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 2, 3, stride=2, padding=1)
        self.out = nn.Conv2d(2, 1, 1)

    def forward(self, x):
        h = F.leaky_relu(self.conv(x), 0.2)
        return torch.sigmoid(self.out(h)).clamp(1e-7, 1 - 1e-7).squeeze(1)


class MicroEncoder(nn.Module):
    def __init__(self, embed_dim: int = 4):
        super().__init__()
        self.conv = nn.Conv2d(1, 2, 3, stride=2, padding=1)
        self.head = nn.Linear(2, embed_dim)

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None, None]
        elif x.dim() == 3:
            x = x.unsqueeze(1)
        h = F.silu(self.conv(x)).mean(dim=(2, 3))
        e = self.head(h)
        e = e / (e.norm(dim=-1, keepdim=True) + 1e-12)
        return e.squeeze(0) if squeeze else e


def build_micro_bundle(T: int = 2, seed: int = 0, dtype=torch.float64) -> ModelBundle:
    torch.manual_seed(seed)
    bundle = ModelBundle(
        chain=[MicroGen() for _ in range(T)],
        reverse=MicroImageNet(),
        disc=MicroDisc(),
        patch_disc=MicroPatchDisc(),
        slice_encoder=MicroEncoder(),
        corrector=MicroImageNet(),
        cfg=None,
    )
    return bundle.to(dtype)


@pytest.fixture(scope="session")
def micro_bundle() -> ModelBundle:
    return build_micro_bundle()


def make_pair(
    seed: int,
    shape=(16, 32, 32),
    shift: int = 0,
    degradation: DegradationParams | None = None,
    n_lesions: int = 1,
) -> PairedSample:
    hf = generate_phantom(seed, shape, n_lesions=n_lesions)
    lf = inject_slice_shift(
        degrade_to_low_field(hf, degradation or DegradationParams(), seed=seed), shift
    )
    return PairedSample(lf, hf, shift, f"p{seed}", seed)


@pytest.fixture(scope="session")
def small_pairs() -> list[PairedSample]:
    rng = np.random.default_rng(5)
    return [
        make_pair(400 + i, shape=(16, 32, 32), shift=int(rng.integers(-2, 3)))
        for i in range(3)
    ]
