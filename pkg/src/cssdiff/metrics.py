"""Image-quality metrics and dataset-level evaluation.

PSNR, SSIM and local mutual information follow their textbook definitions.
The perceptual distance is a deterministic stand-in for learned perceptual
similarity: fixed random multi-scale convolutional features, channel-wise
unit-normalized and L2-compared. Its numbers are self-consistent but not
comparable to any published perceptual metric.

SSIM has a single implementation (torch, differentiable, valid-window
Gaussian weighting) so the training losses and the reported metric cannot
drift apart; ``ssim`` is the numpy-facing wrapper.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .phantom import DatasetManifest, load_manifest, read_f32

PSNR_CAP_DB = 100.0
DEFAULT_PERCEPTUAL_SEED = 20250101  # baked into the release; do not change casually

_METRIC_PARAMS = {
    "psnr_data_range": 1.0,
    "ssim_window": 7,
    "ssim_k1": 0.01,
    "ssim_k2": 0.03,
    "ssim_sigma": 1.5,
    "lmi_window": 16,
    "lmi_bins": 16,
    "perceptual_seed": DEFAULT_PERCEPTUAL_SEED,
}


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); identical inputs return the 100 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(data_range**2 / mse), PSNR_CAP_DB)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _gaussian_window(window: int, sigma: float, dtype, device) -> torch.Tensor:
    x = torch.arange(window, dtype=dtype, device=device) - (window - 1) / 2.0
    g = torch.exp(-(x**2) / (2.0 * sigma**2))
    g = g / g.sum()
    k = torch.outer(g, g)
    return k.reshape(1, 1, window, window)


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x.unsqueeze(0).unsqueeze(0)
    if x.dim() == 3:
        return x.unsqueeze(1)
    if x.dim() == 4:
        return x
    raise ValueError(f"expected 2-D, 3-D or 4-D tensor, got {x.dim()}-D")


def ssim_torch(
    a: torch.Tensor,
    b: torch.Tensor,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
    sigma: float = 1.5,
) -> torch.Tensor:
    """Mean local SSIM over a sliding Gaussian window (valid positions only).

    Differentiable; accepts (H, W), (B, H, W) or (B, 1, H, W).
    """
    a = _as_batched(a)
    b = _as_batched(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image smaller than the {window}x{window} window")

    kern = _gaussian_window(window, sigma, a.dtype, a.device)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    mu_a = F.conv2d(a, kern)
    mu_b = F.conv2d(b, kern)
    var_a = F.conv2d(a * a, kern) - mu_a * mu_a
    var_b = F.conv2d(b * b, kern) - mu_b * mu_b
    cov = F.conv2d(a * b, kern) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> float:
    value = ssim_torch(
        torch.from_numpy(np.asarray(a, dtype=np.float64)),
        torch.from_numpy(np.asarray(b, dtype=np.float64)),
        window=window,
        k1=k1,
        k2=k2,
        data_range=data_range,
    )
    return float(value)


# ---------------------------------------------------------------------------
# Perceptual distance (fixed random features)
# ---------------------------------------------------------------------------

_FEATURE_SCALES = (1, 2, 4)
_FEATURE_CHANNELS = 8
_FEATURE_KSIZE = 5
_feature_banks: dict[tuple[int, torch.dtype], list[torch.Tensor]] = {}


def _feature_bank(seed: int, dtype: torch.dtype) -> list[torch.Tensor]:
    key = (seed, dtype)
    if key not in _feature_banks:
        gen = torch.Generator().manual_seed(seed)
        fan_in = _FEATURE_KSIZE * _FEATURE_KSIZE
        weights = []
        for _ in _FEATURE_SCALES:
            w = torch.randn(
                _FEATURE_CHANNELS, 1, _FEATURE_KSIZE, _FEATURE_KSIZE, generator=gen
            ) / np.sqrt(fan_in)
            weights.append(w.to(dtype))
        _feature_banks[key] = weights
    return _feature_banks[key]


def _perceptual_features(x: torch.Tensor, seed: int) -> list[torch.Tensor]:
    weights = _feature_bank(seed, x.dtype)
    feats = []
    for scale, w in zip(_FEATURE_SCALES, weights):
        xs = F.avg_pool2d(x, scale) if scale > 1 else x
        f = torch.tanh(F.conv2d(xs, w, padding=_FEATURE_KSIZE // 2))
        f = f / (f.norm(dim=1, keepdim=True) + 1e-8)
        feats.append(f)
    return feats


def perceptual_distance_torch(
    a: torch.Tensor, b: torch.Tensor, seed: int = DEFAULT_PERCEPTUAL_SEED
) -> torch.Tensor:
    """Per-item distances, shape (B,). Zero iff the raw images are identical
    (the raw image enters as an identity feature alongside the random ones)."""
    a = _as_batched(a)
    b = _as_batched(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    d2 = ((a - b) ** 2).mean(dim=(1, 2, 3))
    for fa, fb in zip(_perceptual_features(a, seed), _perceptual_features(b, seed)):
        d2 = d2 + ((fa - fb) ** 2).mean(dim=(1, 2, 3))
    return torch.sqrt(d2)


def perceptual_distance(
    a: np.ndarray, b: np.ndarray, seed: int = DEFAULT_PERCEPTUAL_SEED
) -> float:
    value = perceptual_distance_torch(
        torch.from_numpy(np.asarray(a, dtype=np.float64)),
        torch.from_numpy(np.asarray(b, dtype=np.float64)),
        seed=seed,
    )
    return float(value.mean())


# ---------------------------------------------------------------------------
# Local mutual information
# ---------------------------------------------------------------------------

class LocalMI(NamedTuple):
    values: np.ndarray
    mean: float


def local_mutual_information(
    a: np.ndarray, b: np.ndarray, window: int = 16, bins: int = 16
) -> LocalMI:
    """Joint-histogram MI (nats) per non-overlapping window tile.

    Intensities are binned over the fixed [0, 1] range (inputs are clipped);
    trailing pixels beyond the last full tile are ignored.
    """
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("expected 2-D images")
    h, w = a.shape
    if h < window or w < window:
        raise ValueError(f"image smaller than the {window}x{window} window")

    edges = np.linspace(0.0, 1.0, bins + 1)
    mis = []
    for i in range(h // window):
        for j in range(w // window):
            ta = a[i * window : (i + 1) * window, j * window : (j + 1) * window]
            tb = b[i * window : (i + 1) * window, j * window : (j + 1) * window]
            hist, _, _ = np.histogram2d(ta.ravel(), tb.ravel(), bins=[edges, edges])
            pxy = hist / hist.sum()
            px = pxy.sum(axis=1)
            py = pxy.sum(axis=0)
            nz = pxy > 0
            mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / np.outer(px, py)[nz])))
            mis.append(mi)
    values = np.array(mis)
    return LocalMI(values=values, mean=float(values.mean()))


# ---------------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    per_sample: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    config_hash: str = ""
    missing: list[str] = field(default_factory=list)

    METRICS = ("psnr_db", "ssim", "perceptual", "lmi_cross")

    def to_dict(self) -> dict:
        return {
            "per_sample": self.per_sample,
            "aggregate": self.aggregate,
            "config_hash": self.config_hash,
            "missing": self.missing,
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricReport":
        return MetricReport(
            per_sample=d["per_sample"],
            aggregate=d["aggregate"],
            config_hash=d["config_hash"],
            missing=d.get("missing", []),
        )

    def save(self, out_dir: Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "metrics.json"
        csv_path = out_dir / "metrics.csv"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", *self.METRICS])
            for row in self.per_sample:
                writer.writerow([row["sample_id"], *(row[m] for m in self.METRICS)])
        return json_path, csv_path


def _aggregate(per_sample: list[dict]) -> dict:
    agg = {}
    for m in MetricReport.METRICS:
        vals = np.array([row[m] for row in per_sample], dtype=np.float64)
        agg[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return agg


def config_hash() -> str:
    blob = json.dumps(_METRIC_PARAMS, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def volume_metrics(pred: np.ndarray, ref: np.ndarray) -> dict:
    """All per-sample metrics for one (prediction, reference) volume pair.

    SSIM, perceptual distance and LMI are 2-D measures averaged over z-slices;
    PSNR is computed over the full volume.
    """
    pred_t = torch.from_numpy(np.asarray(pred, dtype=np.float64))
    ref_t = torch.from_numpy(np.asarray(ref, dtype=np.float64))
    lmi_means = [
        local_mutual_information(
            pred[z], ref[z], _METRIC_PARAMS["lmi_window"], _METRIC_PARAMS["lmi_bins"]
        ).mean
        for z in range(pred.shape[0])
    ]
    return {
        "psnr_db": psnr(pred, ref),
        "ssim": float(ssim_torch(pred_t, ref_t)),
        "perceptual": float(perceptual_distance_torch(pred_t, ref_t).mean()),
        "lmi_cross": float(np.mean(lmi_means)),
    }


def evaluate_dataset(
    pred_dir: Path | str,
    ref_manifest: DatasetManifest | Path | str,
    out_dir: Path | str | None = None,
) -> MetricReport:
    """Compare ``<id>_pred.f32`` volumes against the manifest's hf references.

    Writes metrics.json and metrics.csv (to ``out_dir``, default ``pred_dir``).
    Missing predictions produce a partial report on disk and then a
    FileNotFoundError listing every missing id.
    """
    pred_dir = Path(pred_dir)
    manifest = (
        ref_manifest
        if isinstance(ref_manifest, DatasetManifest)
        else load_manifest(ref_manifest)
    )
    out_dir = Path(out_dir) if out_dir is not None else pred_dir

    per_sample = []
    missing = []
    for entry in manifest.samples:
        sid = entry["sample_id"]
        pred_path = pred_dir / f"{sid}_pred.f32"
        if not pred_path.exists():
            missing.append(sid)
            continue
        shape = tuple(entry["shape"])
        pred = read_f32(pred_path, shape)
        ref = read_f32(manifest.root / f"{sid}_hf.f32", shape)
        per_sample.append({"sample_id": sid, **volume_metrics(pred, ref)})

    report = MetricReport(
        per_sample=per_sample,
        aggregate=_aggregate(per_sample) if per_sample else {},
        config_hash=config_hash(),
        missing=missing,
    )
    report.save(out_dir)
    if missing:
        raise FileNotFoundError(
            f"missing predictions for {len(missing)} sample(s): {', '.join(missing)}"
        )
    return report
