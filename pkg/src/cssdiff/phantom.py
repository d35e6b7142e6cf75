"""Synthetic brain-like phantoms and their paired low-field degradations.

Generation is a pure function of (seed, params): every random draw comes from
a keyed ``numpy.random.SeedSequence`` stream, so re-runs are byte-identical
and adding lesions perturbs nothing outside the lesion supports.

On-disk sample format (one directory per dataset):
    <id>_lf.f32 / <id>_hf.f32   raw little-endian float32, C-order (z, y, x)
    <id>.json                   shape, spacing, field strengths, shift, seed
    manifest.json               all sidecars plus dataset-level parameters
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

# Keyed sub-stream tags so the structure field is independent of lesion count.
_STREAM_STRUCTURE = 0
_STREAM_LESIONS = 1
_STREAM_DEGRADE = 2
_STREAM_META = 3

_FWHM_TO_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))

# Tissue mean intensities (T1-like ordering: CSF dark, WM bright).
_I_GM = 0.52
_I_WM = 0.70
_I_CSF = 0.15
_TEXTURE_AMP = 0.05
_LESION_AMP = 0.25

LABEL_BACKGROUND, LABEL_GM, LABEL_WM, LABEL_CSF = 0, 1, 2, 3


@dataclass
class Volume:
    """A 3-D scalar image, axis order (z, y, x), intensities in [0, 1]."""

    data: np.ndarray
    spacing_mm: np.ndarray
    field_strength_T: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing_mm = np.asarray(self.spacing_mm, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3-D (z, y, x)")
        if any(n < 4 for n in self.data.shape):
            raise ValueError(f"every axis must be >= 4, got {self.data.shape}")
        if self.spacing_mm.shape != (3,) or np.any(self.spacing_mm <= 0):
            raise ValueError("spacing_mm must be 3 positive floats")
        if self.field_strength_T <= 0:
            raise ValueError("field_strength_T must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite intensities")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class DegradationParams:
    """Low-field acquisition model: blur -> bias -> gamma -> noise -> clamp.

    ``base_noise_sigma`` is the noise std at the high field strength; the
    low-field std scales by (b_high / b_low)^2 per the quadratic SNR law.
    """

    b_low_T: float = 0.064
    b_high_T: float = 3.0
    base_noise_sigma: float = 2e-5
    blur_fwhm_mm: tuple[float, float, float] = (2.5, 2.5, 2.5)
    contrast_gamma: float = 1.0
    bias_field_amplitude: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.b_low_T < self.b_high_T):
            raise ValueError("require 0 < b_low_T < b_high_T")
        if self.base_noise_sigma < 0:
            raise ValueError("base_noise_sigma must be >= 0")
        if any(f < 0 for f in self.blur_fwhm_mm):
            raise ValueError("blur_fwhm_mm must be >= 0 componentwise")
        if not (0.0 <= self.bias_field_amplitude < 1.0):
            raise ValueError("bias_field_amplitude must lie in [0, 1)")
        if self.contrast_gamma <= 0:
            raise ValueError("contrast_gamma must be positive")

    @property
    def noise_multiplier(self) -> float:
        return (self.b_high_T / self.b_low_T) ** 2

    @property
    def noise_sigma_lf(self) -> float:
        return self.base_noise_sigma * self.noise_multiplier


@dataclass
class PairedSample:
    """A registered (low-field, high-field) pair with shift ground truth."""

    lf: Volume
    hf: Volume
    slice_shift: int
    sample_id: str
    rng_seed: int

    def __post_init__(self):
        if self.lf.shape != self.hf.shape:
            raise ValueError("lf and hf must share a shape")
        if abs(self.slice_shift) >= self.hf.shape[0] / 4:
            raise ValueError("|slice_shift| must be < z-extent / 4")


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def _smoothstep(u: np.ndarray, width: float) -> np.ndarray:
    s = np.clip(u / width + 0.5, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _ellipsoid_radius(shape, center_frac, semi_frac) -> np.ndarray:
    """Normalized radius field; 1.0 on the ellipsoid surface."""
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = np.zeros(shape, dtype=np.float64)
    for g, n, c, a in zip(grids, shape, center_frac, semi_frac):
        half = n / 2.0
        r2 = r2 + (((g - n * c) / (a * half)) ** 2)
    return np.sqrt(r2)


def _phantom_fields(seed: int, shape) -> tuple[np.ndarray, np.ndarray]:
    """Base intensity (before lesions) and the hard tissue label map.

    The head ellipsoid overflows the z field of view (axial stacks crop the
    head) so every slice carries tissue, and its radius tapers linearly along
    z; without that taper, slices mirrored about the equator are nearly
    identical and slice matching is ill-posed.
    """
    rng = _rng(seed, _STREAM_STRUCTURE)
    jitter = lambda lo, hi, size=None: rng.uniform(lo, hi, size)
    z_extent = shape[0]

    head_center = 0.5 + jitter(-0.02, 0.02, 3)
    head_semi = np.array([1.15, 0.85, 0.78]) * (1.0 + jitter(-0.03, 0.03, 3))
    r_head = _ellipsoid_radius(shape, head_center, head_semi)
    zhat = (np.arange(z_extent)[:, None, None] - z_extent * head_center[0]) / (
        z_extent / 2.0
    )
    taper = 0.15 * (1.0 + jitter(-0.2, 0.2))
    r_head = r_head * (1.0 + taper * zhat)

    wm_cut = 0.62 * (1.0 + jitter(-0.05, 0.05))

    vent_center = head_center + np.array([-0.07, 0.0, 0.0]) + jitter(-0.02, 0.02, 3)
    vent_semi = head_semi * np.array([0.22, 0.34, 0.22]) * (1.0 + jitter(-0.1, 0.1, 3))
    r_vent = _ellipsoid_radius(shape, vent_center, vent_semi)

    w = 0.06
    head = _smoothstep(1.0 - r_head, w)
    intensity = _I_GM * head
    intensity += (_I_WM - _I_GM) * _smoothstep(wm_cut - r_head, w)
    intensity += (_I_CSF - _I_WM) * _smoothstep(1.0 - r_vent, w)

    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(1.2, 2.0, 2.0))
    texture /= texture.std() + 1e-12
    intensity += _TEXTURE_AMP * texture * head

    labels = np.full(shape, LABEL_BACKGROUND, dtype=np.int8)
    labels[r_head < 1.0] = LABEL_GM
    labels[r_head < wm_cut] = LABEL_WM
    labels[r_vent < 1.0] = LABEL_CSF
    return intensity, labels


def phantom_regions(seed: int, shape) -> np.ndarray:
    """Hard tissue label map (0 bg, 1 GM, 2 WM, 3 CSF) for a given phantom."""
    _, labels = _phantom_fields(seed, tuple(shape))
    return labels


def generate_phantom(
    seed: int,
    shape: tuple[int, int, int],
    n_lesions: int = 0,
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0),
    field_strength_T: float = 3.0,
) -> Volume:
    """Brain-like phantom: nested CSF/GM/WM regions plus compact lesion blobs.

    Deterministic in ``seed``; the lesion stream is independent of the
    structure stream, so phantoms with different ``n_lesions`` agree exactly
    outside the lesion supports.
    """
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or any(n < 16 for n in shape):
        raise ValueError(f"every shape dim must be >= 16, got {shape}")
    if n_lesions < 0:
        raise ValueError("n_lesions must be >= 0")

    intensity, labels = _phantom_fields(seed, shape)

    if n_lesions > 0:
        rng = _rng(seed, _STREAM_LESIONS)
        wm_idx = np.argwhere(labels == LABEL_WM)
        if len(wm_idx) == 0:
            raise ValueError("phantom too small to host lesions")
        centers: list[np.ndarray] = []
        radii: list[float] = []
        for _ in range(n_lesions):
            for _attempt in range(200):
                c = wm_idx[rng.integers(len(wm_idx))].astype(np.float64)
                r = rng.uniform(2.0, 3.5)
                ok = all(
                    np.linalg.norm(c - c2) > r + r2 + 2.0
                    for c2, r2 in zip(centers, radii)
                )
                if ok:
                    centers.append(c)
                    radii.append(r)
                    break
            else:
                raise ValueError("could not place non-overlapping lesions")
        grids = np.ogrid[tuple(slice(0, n) for n in shape)]
        for c, r in zip(centers, radii):
            d2 = sum(((g - ci) ** 2) for g, ci in zip(grids, c))
            bump = np.clip(1.0 - d2 / r**2, 0.0, None) ** 2
            intensity = intensity + _LESION_AMP * bump

    data = np.clip(intensity, 0.0, 1.0).astype(np.float32)
    return Volume(data, np.asarray(spacing_mm), field_strength_T)


def degrade_to_low_field(
    hf: Volume, p: DegradationParams, seed: int
) -> Volume:
    """Low-field simulation: clamp(gamma(blur(hf) * bias) + noise, 0, 1).

    The noise std is ``p.base_noise_sigma * (b_high / b_low)^2``. Output keeps
    the grid of ``hf`` (resolution matching is the blur's job).
    """
    rng = _rng(seed, _STREAM_DEGRADE)
    x = hf.data.astype(np.float64)

    sigma_vox = np.asarray(p.blur_fwhm_mm) / hf.spacing_mm / _FWHM_TO_SIGMA
    if np.any(sigma_vox > 0):
        x = ndimage.gaussian_filter(x, sigma=sigma_vox, mode="nearest")

    if p.bias_field_amplitude > 0:
        raw = rng.standard_normal(hf.shape)
        smooth = ndimage.gaussian_filter(raw, sigma=[n / 6.0 for n in hf.shape])
        smooth /= np.max(np.abs(smooth)) + 1e-12
        x = x * (1.0 + p.bias_field_amplitude * smooth)

    if p.contrast_gamma != 1.0:
        x = np.clip(x, 0.0, None) ** p.contrast_gamma

    if p.noise_sigma_lf > 0:
        x = x + rng.normal(0.0, p.noise_sigma_lf, hf.shape)

    data = np.clip(x, 0.0, 1.0).astype(np.float32)
    return Volume(data, hf.spacing_mm.copy(), p.b_low_T)


def inject_slice_shift(v: Volume, shift: int) -> Volume:
    """Re-index slices so output slice k equals input slice k + shift.

    Out-of-range slices replicate the nearest valid slice (no black borders).
    """
    z = v.shape[0]
    if abs(shift) >= z:
        raise ValueError(f"|shift| must be < z-extent {z}, got {shift}")
    idx = np.clip(np.arange(z) + shift, 0, z - 1)
    return Volume(v.data[idx], v.spacing_mm.copy(), v.field_strength_T)


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Parsed manifest.json plus the directory it lives in."""

    root: Path
    samples: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    @property
    def sample_ids(self) -> list[str]:
        return [s["sample_id"] for s in self.samples]

    def entry(self, sample_id: str) -> dict:
        for s in self.samples:
            if s["sample_id"] == sample_id:
                return s
        raise KeyError(sample_id)

    def load_pair(self, sample_id: str) -> PairedSample:
        e = self.entry(sample_id)
        shape = tuple(e["shape"])
        spacing = np.asarray(e["spacing_mm"])
        lf = Volume(
            read_f32(self.root / f"{sample_id}_lf.f32", shape),
            spacing,
            e["field_strength_T_lf"],
        )
        hf = Volume(
            read_f32(self.root / f"{sample_id}_hf.f32", shape),
            spacing,
            e["field_strength_T"],
        )
        return PairedSample(lf, hf, e["slice_shift"], sample_id, e["rng_seed"])

    def load_pairs(self) -> list[PairedSample]:
        return [self.load_pair(sid) for sid in self.sample_ids]


def write_f32(path: Path, data: np.ndarray) -> None:
    np.ascontiguousarray(data, dtype="<f4").tofile(path)


def read_f32(path: Path, shape) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} voxels, found {data.size}")
    return data.reshape(shape)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    payload = json.loads(path.read_text())
    return DatasetManifest(
        root=path.parent, samples=payload["samples"], params=payload["params"]
    )


def make_dataset(
    n_samples: int,
    shape: tuple[int, int, int],
    degradation: DegradationParams,
    shift_range: int,
    root_seed: int,
    out_dir: Path | str,
    n_lesions: int | tuple[int, int] = (0, 3),
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> DatasetManifest:
    """Write ``n_samples`` paired volumes plus manifest.json under ``out_dir``.

    Shifts are sampled uniformly from [-shift_range, shift_range] and applied
    to the degraded volume; the high-field volume stays unshifted.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    shape = tuple(int(n) for n in shape)
    if shift_range < 0:
        raise ValueError("shift_range must be >= 0")
    if shift_range >= shape[0] / 4:
        raise ValueError("shift_range must be < z-extent / 4")

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory not writable: {out_dir}") from exc

    seeds = np.random.SeedSequence(root_seed).generate_state(n_samples, dtype=np.uint32)
    entries = []
    for i, sample_seed in enumerate(int(s) for s in seeds):
        sample_id = f"s{i:04d}"
        meta_rng = _rng(sample_seed, _STREAM_META)
        if isinstance(n_lesions, tuple):
            k = int(meta_rng.integers(n_lesions[0], n_lesions[1] + 1))
        else:
            k = int(n_lesions)
        shift = int(meta_rng.integers(-shift_range, shift_range + 1)) if shift_range else 0

        hf = generate_phantom(
            sample_seed, shape, n_lesions=k, spacing_mm=spacing_mm,
            field_strength_T=degradation.b_high_T,
        )
        lf = inject_slice_shift(
            degrade_to_low_field(hf, degradation, seed=sample_seed), shift
        )

        write_f32(out_dir / f"{sample_id}_lf.f32", lf.data)
        write_f32(out_dir / f"{sample_id}_hf.f32", hf.data)
        entry = {
            "sample_id": sample_id,
            "shape": list(shape),
            "spacing_mm": list(map(float, spacing_mm)),
            "field_strength_T": float(degradation.b_high_T),
            "field_strength_T_lf": float(degradation.b_low_T),
            "slice_shift": shift,
            "rng_seed": sample_seed,
        }
        _write_json(out_dir / f"{sample_id}.json", entry)
        entries.append(entry)

    params = {
        "n_samples": n_samples,
        "shape": list(shape),
        "shift_range": shift_range,
        "root_seed": root_seed,
        "n_lesions": list(n_lesions) if isinstance(n_lesions, tuple) else n_lesions,
        "degradation": asdict(degradation),
    }
    _write_json(out_dir / "manifest.json", {"samples": entries, "params": params})
    return DatasetManifest(root=out_dir, samples=entries, params=params)
