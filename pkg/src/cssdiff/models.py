"""Trainable function set: the forward generator chain, reverse generator,
global and patch discriminators, slice encoder, and structure corrector.

All image-to-image networks are small residual U-Nets whose final output is
added to the input image, so a network with all-zero parameters is the
identity map. Chain generators receive a per-step noise map (concatenated as
an input channel) and a conditioning vector (slice embedding + sinusoidal
step index) injected through feature-wise modulation at every level; the
modulation layers start near-identity (weight std 1e-3) so pretrained weights
transferred into a generator are not scrambled by random modulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 16
    depth: int = 2
    embed_dim: int = 16
    cond_mode: str = "film"
    dropout: float = 0.2
    T_steps: int = 4
    patch_stride: int = 16
    share_chain_weights: bool = False

    def __post_init__(self):
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.embed_dim < 4:
            raise ValueError("embed_dim must be >= 4")
        if self.cond_mode not in ("film", "concat"):
            raise ValueError("cond_mode must be 'film' or 'concat'")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if self.T_steps < 1:
            raise ValueError("T_steps must be >= 1")
        p = self.patch_stride
        if p < 2 or (p & (p - 1)) != 0:
            raise ValueError("patch_stride must be a power of two >= 2")


def step_embedding(t: int, dim: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of the chain-step index."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, device=device, dtype=dtype)
        / max(half - 1, 1)
    )
    ang = float(t) * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, device=device, dtype=dtype)])
    return emb


class FiLM(nn.Module):
    """Per-channel scale/shift from a conditioning vector, near-identity init."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(cond_dim, 2 * channels)
        nn.init.normal_(self.proj.weight, std=1e-3)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(cond).chunk(2, dim=-1)
        return h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, cond_dim: int = 0, dropout: float = 0.0):
        super().__init__()
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.film = FiLM(cond_dim, ch_out) if cond_dim > 0 else None
        self.drop = nn.Dropout2d(dropout) if dropout > 0 else None
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else None

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        if self.film is not None:
            h = self.film(h, cond)
        if self.drop is not None:
            h = self.drop(h)
        h = self.conv2(h)
        return (self.skip(x) if self.skip is not None else x) + h


class ConditionalUNet(nn.Module):
    """Shape-preserving residual U-Net, out = x + head(features)."""

    def __init__(
        self,
        extra_channels: int = 0,
        cond_dim: int = 0,
        base_channels: int = 16,
        depth: int = 2,
        dropout: float = 0.0,
        cond_mode: str = "film",
    ):
        super().__init__()
        self.depth = depth
        self.cond_dim = cond_dim
        self.cond_mode = cond_mode
        film_dim = cond_dim if (cond_dim > 0 and cond_mode == "film") else 0
        in_ch = 1 + extra_channels
        if cond_dim > 0 and cond_mode == "concat":
            in_ch += cond_dim

        chs = [base_channels * 2**level for level in range(depth + 1)]
        self.in_conv = nn.Conv2d(in_ch, chs[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(
            [ResBlock(chs[i], chs[i], film_dim, dropout) for i in range(depth)]
        )
        self.downs = nn.ModuleList(
            [nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1) for i in range(depth)]
        )
        self.mid = ResBlock(chs[-1], chs[-1], film_dim, dropout)
        self.up_convs = nn.ModuleList(
            [nn.Conv2d(chs[i + 1], chs[i], 3, padding=1) for i in reversed(range(depth))]
        )
        self.up_blocks = nn.ModuleList(
            [ResBlock(2 * chs[i], chs[i], film_dim, dropout) for i in reversed(range(depth))]
        )
        self.out_conv = nn.Conv2d(chs[0], 1, 3, padding=1)

    def forward(
        self,
        x: torch.Tensor,
        z: torch.Tensor | None = None,
        cond: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        h_px, w_px = x.shape[-2], x.shape[-1]
        factor = 2**self.depth
        if h_px % factor or w_px % factor:
            raise ValueError(
                f"spatial dims {(h_px, w_px)} not divisible by 2^depth = {factor}"
            )
        if self.cond_dim > 0:
            if cond is None:
                cond = x.new_zeros(x.shape[0], self.cond_dim)
            elif cond.dim() == 1:
                cond = cond.unsqueeze(0).expand(x.shape[0], -1)

        parts = [x]
        if z is not None:
            if z.shape != x.shape:
                raise ValueError("latent z must match the image shape")
            parts.append(z)
        if self.cond_dim > 0 and self.cond_mode == "concat":
            parts.append(cond[:, :, None, None].expand(-1, -1, h_px, w_px))
        h = self.in_conv(torch.cat(parts, dim=1))

        film_cond = cond if self.cond_mode == "film" else None
        skips = []
        for block, down in zip(self.down_blocks, self.downs):
            h = block(h, film_cond)
            skips.append(h)
            h = down(h)
        h = self.mid(h, film_cond)
        for up_conv, block in zip(self.up_convs, self.up_blocks):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = up_conv(h)
            h = block(torch.cat([h, skips.pop()], dim=1), film_cond)
        return x + self.out_conv(F.silu(h))


_SCORE_EPS = 1e-7  # keeps sigmoid outputs inside the open interval in float32
_LOGIT_CAP = 12.0


def _bounded_score(logits: torch.Tensor) -> torch.Tensor:
    """Sigmoid score with smoothly capped logits.

    A hard clamp on saturated scores has zero gradient, which freezes the
    discriminator exactly when the generator saturates it; the tanh cap keeps
    scores inside (0, 1) with a usable gradient everywhere.
    """
    bounded = _LOGIT_CAP * torch.tanh(logits / _LOGIT_CAP)
    return torch.sigmoid(bounded).clamp(_SCORE_EPS, 1 - _SCORE_EPS)


class Discriminator(nn.Module):
    """Whole-image realism score in (0, 1).

    A full-resolution first convolution feeds the strided stack (noise
    texture lives at pixel scale), and the head scores mean-pooled local
    logits so every region must look real, which a single globally pooled
    feature does not enforce.
    """

    def __init__(self, base_channels: int = 16, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(1, base_channels, 3, padding=1), nn.LeakyReLU(0.2)]
        ch = base_channels
        for i in range(n_layers):
            nxt = base_channels * 2**i
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch = nxt
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        return _bounded_score(self.net(x).mean(dim=(1, 2, 3)))


class PatchDiscriminator(nn.Module):
    """Per-patch realism scores on a (H/p, W/p) grid for patch stride p."""

    def __init__(self, patch_stride: int = 16, base_channels: int = 16):
        super().__init__()
        self.patch_stride = patch_stride
        n_layers = int(math.log2(patch_stride))
        layers = []
        ch = 1
        for i in range(n_layers):
            nxt = base_channels * min(2**i, 4)
            layers += [nn.Conv2d(ch, nxt, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch = nxt
        layers.append(nn.Conv2d(ch, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        p = self.patch_stride
        if x.shape[-2] % p or x.shape[-1] % p:
            raise ValueError(f"spatial dims must be divisible by patch stride {p}")
        return _bounded_score(self.net(x)).squeeze(1)


class SliceEncoder(nn.Module):
    """2-D slice -> unit-norm embedding.

    Features are pooled to a coarse spatial grid rather than a single vector;
    slice identity lives in the layout of region boundaries, which global
    average pooling would erase.
    """

    def __init__(self, embed_dim: int = 16, base_channels: int = 16, pool: int = 4):
        super().__init__()
        chs = [base_channels, 2 * base_channels, 4 * base_channels]
        self.convs = nn.Sequential(
            nn.Conv2d(1, chs[0], 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(chs[0], chs[1], 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(chs[1], chs[2], 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(pool)
        self.head = nn.Linear(chs[2] * pool * pool, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = False
        if x.dim() == 2:
            x = x[None, None]
            squeeze = True
        elif x.dim() == 3:
            x = x.unsqueeze(1)
        elif x.dim() != 4:
            raise ValueError(f"expected 2-D, 3-D or 4-D input, got {x.dim()}-D")
        h = self.pool(self.convs(x)).flatten(1)
        emb = self.head(h)
        emb = emb / (emb.norm(dim=-1, keepdim=True) + 1e-12)
        return emb.squeeze(0) if squeeze else emb


class ModelBundle(nn.Module):
    """Container for the full trainable function set.

    ``init_models`` builds the standard networks; tests may assemble a bundle
    from any modules satisfying the same contracts.
    """

    def __init__(
        self,
        chain: list[nn.Module],
        reverse: nn.Module,
        disc: nn.Module,
        patch_disc: nn.Module,
        slice_encoder: nn.Module,
        corrector: nn.Module,
        cfg: NetConfig | None = None,
    ):
        super().__init__()
        self.chain = nn.ModuleList(chain)
        self.reverse = reverse
        self.disc = disc
        self.patch_disc = patch_disc
        self.slice_encoder = slice_encoder
        self.corrector = corrector
        self.cfg = cfg

    @property
    def T_steps(self) -> int:
        return len(self.chain)

    def param_counts(self) -> dict[str, int]:
        counts = {
            f"gen_{t}": sum(p.numel() for p in g.parameters())
            for t, g in enumerate(self.chain)
        }
        for name in ("reverse", "disc", "patch_disc", "slice_encoder", "corrector"):
            counts[name] = sum(p.numel() for p in getattr(self, name).parameters())
        counts["total"] = sum(p.numel() for p in self.parameters())
        return counts

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "gen_chain": [p for g in self.chain for p in g.parameters()],
            "reverse": list(self.reverse.parameters()),
            "disc": list(self.disc.parameters()),
            "patch_disc": list(self.patch_disc.parameters()),
            "slice_encoder": list(self.slice_encoder.parameters()),
            "corrector": list(self.corrector.parameters()),
        }


def init_models(cfg: NetConfig, seed: int) -> ModelBundle:
    """Deterministic bundle construction for a fixed (cfg, seed)."""
    torch.manual_seed(seed)
    cond_dim = 2 * cfg.embed_dim  # slice embedding + step embedding

    def make_gen() -> ConditionalUNet:
        return ConditionalUNet(
            extra_channels=1,
            cond_dim=cond_dim,
            base_channels=cfg.base_channels,
            depth=cfg.depth,
            dropout=cfg.dropout,
            cond_mode=cfg.cond_mode,
        )

    if cfg.share_chain_weights:
        shared = make_gen()
        chain = [shared for _ in range(cfg.T_steps)]
    else:
        chain = [make_gen() for _ in range(cfg.T_steps)]

    def make_plain() -> ConditionalUNet:
        return ConditionalUNet(
            extra_channels=0,
            cond_dim=0,
            base_channels=cfg.base_channels,
            depth=cfg.depth,
            dropout=cfg.dropout,
        )

    return ModelBundle(
        chain=chain,
        reverse=make_plain(),
        disc=Discriminator(base_channels=cfg.base_channels),
        patch_disc=PatchDiscriminator(cfg.patch_stride, cfg.base_channels),
        slice_encoder=SliceEncoder(cfg.embed_dim, cfg.base_channels),
        corrector=make_plain(),
        cfg=cfg,
    )


def apply_chain(
    bundle: ModelBundle,
    x0: torch.Tensor,
    zs: list[torch.Tensor],
    cond: torch.Tensor | None,
) -> list[torch.Tensor]:
    """Run the full generator chain, returning all states [x_1 .. x_T]."""
    T = bundle.T_steps
    if len(zs) != T:
        raise ValueError(f"expected {T} latents, got {len(zs)}")
    embed_dim = bundle.cfg.embed_dim if bundle.cfg else _infer_embed_dim(bundle)
    if cond is None:
        cond = x0.new_zeros(x0.shape[0], embed_dim)
    elif cond.dim() == 1:
        cond = cond.unsqueeze(0).expand(x0.shape[0], -1)

    states = []
    x = x0
    for t, gen in enumerate(bundle.chain):
        t_emb = step_embedding(t, embed_dim, device=x0.device, dtype=x0.dtype)
        full_cond = torch.cat([cond, t_emb.unsqueeze(0).expand(cond.shape[0], -1)], dim=-1)
        x = gen(x, z=zs[t], cond=full_cond)
        states.append(x)
    return states


def _infer_embed_dim(bundle: ModelBundle) -> int:
    gen_cond = getattr(bundle.chain[0], "cond_dim", 0)
    return gen_cond // 2 if gen_cond else 0


def apply_reverse(bundle: ModelBundle, y: torch.Tensor) -> torch.Tensor:
    if y.dim() == 3:
        return bundle.reverse(y.unsqueeze(0)).squeeze(0)
    if y.dim() == 4:
        return bundle.reverse(y)
    raise ValueError(f"expected 3-D or 4-D input, got {y.dim()}-D")


def discriminate(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    return bundle.disc(x)


def discriminate_patches(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    return bundle.patch_disc(x)


def embed_slice(bundle: ModelBundle, slice_2d: torch.Tensor) -> torch.Tensor:
    return bundle.slice_encoder(slice_2d)


def apply_frozen(module: nn.Module, *args) -> torch.Tensor:
    """Apply a module with its parameters detached from the autograd graph.

    Gradients still flow to the *inputs*, so a generator can be trained
    against a discriminator whose own parameters receive exactly zero
    gradient from the generator loss.
    """
    state = {k: v.detach() for k, v in module.named_parameters()}
    state.update(dict(module.named_buffers()))
    return torch.func.functional_call(module, state, args)


def zero_parameters(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def transfer_corrector_weights(bundle: ModelBundle) -> int:
    """Initialize the last chain generator from the trained corrector.

    Copies every parameter whose name and shape match; the generator's input
    convolution (which has extra latent/conditioning channels) receives the
    corrector's weights in its image-channel slice. Returns the number of
    tensors copied.
    """
    src = dict(bundle.corrector.named_parameters())
    copied = 0
    with torch.no_grad():
        for name, dst in bundle.chain[-1].named_parameters():
            if name not in src:
                continue
            s = src[name]
            if s.shape == dst.shape:
                dst.copy_(s)
                copied += 1
            elif (
                name == "in_conv.weight"
                and s.dim() == 4
                and dst.dim() == 4
                and s.shape[0] == dst.shape[0]
                and s.shape[2:] == dst.shape[2:]
                and dst.shape[1] >= s.shape[1]
            ):
                dst[:, : s.shape[1]].copy_(s)
                copied += 1
    return copied
