import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cssdiff.metrics import (
    MetricReport,
    evaluate_dataset,
    local_mutual_information,
    perceptual_distance,
    psnr,
    ssim,
    ssim_torch,
)
from cssdiff.phantom import DegradationParams, make_dataset, write_f32


# -- PSNR -------------------------------------------------------------------

def test_psnr_identical_hits_cap():
    x = np.random.default_rng(0).random((8, 8))
    assert psnr(x, x) == 100.0


def test_psnr_constant_difference_by_hand():
    a = np.zeros((16, 16))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 0.01) == pytest.approx(40.0, abs=1e-9)


def test_psnr_strictly_decreasing_in_mse():
    a = np.zeros((16, 16))
    vals = [psnr(a, a + d) for d in (0.01, 0.02, 0.05, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# -- SSIM -------------------------------------------------------------------

def _ssim_reference(a, b, window=7, k1=0.01, k2=0.03, data_range=1.0, sigma=1.5):
    """Literal per-window formula: loop over every valid window position."""
    x = np.arange(window) - (window - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    w = np.outer(g, g)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    h, wid = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(wid - window + 1):
            pa = a[i : i + window, j : j + window]
            pb = b[i : i + window, j : j + window]
            mu_a = (w * pa).sum()
            mu_b = (w * pb).sum()
            var_a = (w * pa * pa).sum() - mu_a**2
            var_b = (w * pb * pb).sum() - mu_b**2
            cov = (w * pa * pb).sum() - mu_a * mu_b
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(vals))


def test_ssim_self_is_one():
    rng = np.random.default_rng(3)
    x = rng.random((20, 20))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_inverted_halfplane_negative():
    x = np.zeros((8, 8))
    x[:, 4:] = 1.0
    value = ssim(x, 1.0 - x)
    reference = _ssim_reference(x, 1.0 - x)
    assert value < 0.0
    assert value == pytest.approx(reference, abs=1e-6)


def test_ssim_matches_literal_reference_on_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(10):
        a = rng.random((32, 32))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(_ssim_reference(a, b), abs=1e-6)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))


def test_ssim_torch_matches_numpy_and_is_differentiable():
    rng = np.random.default_rng(4)
    a = rng.random((16, 16))
    b = rng.random((16, 16))
    at = torch.tensor(a, requires_grad=True)
    val = ssim_torch(at, torch.tensor(b))
    assert float(val.detach()) == pytest.approx(ssim(a, b), abs=1e-12)
    val.backward()
    assert at.grad is not None and torch.isfinite(at.grad).all()


# -- perceptual distance -----------------------------------------------------

def test_perceptual_identity_and_symmetry():
    rng = np.random.default_rng(5)
    a = rng.random((32, 32))
    b = rng.random((32, 32))
    assert perceptual_distance(a, a) == 0.0
    assert perceptual_distance(a, b) == pytest.approx(perceptual_distance(b, a), abs=0)
    assert perceptual_distance(a, b) > 0


def test_perceptual_deterministic():
    rng = np.random.default_rng(6)
    a, b = rng.random((24, 24)), rng.random((24, 24))
    assert perceptual_distance(a, b) == perceptual_distance(a, b)


def test_perceptual_monotone_in_noise():
    rng = np.random.default_rng(7)
    base = rng.random((32, 32))
    vals = []
    for s in (0.01, 0.05, 0.1):
        noisy = np.clip(base + rng.normal(0, s, base.shape), 0, 1)
        vals.append(perceptual_distance(base, noisy))
    assert vals[0] < vals[1] < vals[2]


# -- local mutual information ------------------------------------------------

def test_lmi_identical_equals_marginal_entropy():
    rng = np.random.default_rng(8)
    a = rng.random((32, 32))
    result = local_mutual_information(a, a, window=16, bins=16)
    # entropy oracle per window
    for k, (i, j) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        tile = a[i * 16 : (i + 1) * 16, j * 16 : (j + 1) * 16]
        hist, _ = np.histogram(tile, bins=16, range=(0, 1))
        p = hist / hist.sum()
        entropy = -np.sum(p[p > 0] * np.log(p[p > 0]))
        assert result.values[k] == pytest.approx(entropy, abs=1e-12)


def test_lmi_independent_noise_near_zero():
    rng = np.random.default_rng(9)
    a = rng.random((64, 64))
    b = rng.random((64, 64))
    result = local_mutual_information(a, b, window=64, bins=8)
    assert result.mean < 0.05


def test_lmi_constant_window_is_zero():
    a = np.full((16, 16), 0.5)
    b = np.random.default_rng(10).random((16, 16))
    assert local_mutual_information(a, b, window=16).values[0] == 0.0


def test_lmi_rejects_small_images():
    with pytest.raises(ValueError):
        local_mutual_information(np.zeros((8, 8)), np.zeros((8, 8)), window=16)


# -- shared invariances -------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_metrics_invariant_to_common_slice_permutation(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((4, 16, 16))
    b = rng.random((4, 16, 16))
    perm = rng.permutation(4)
    assert psnr(a, b) == pytest.approx(psnr(a[perm], b[perm]), abs=1e-12)
    s1 = float(ssim_torch(torch.tensor(a), torch.tensor(b)))
    s2 = float(ssim_torch(torch.tensor(a[perm]), torch.tensor(b[perm])))
    assert s1 == pytest.approx(s2, abs=1e-12)


# -- evaluate_dataset ---------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    manifest = make_dataset(
        3, (16, 32, 32), DegradationParams(), shift_range=0, root_seed=2, out_dir=root
    )
    return manifest


def test_evaluate_dataset_round_trip(tiny_dataset, tmp_path):
    pred_dir = tmp_path / "preds"
    pred_dir.mkdir()
    for pair in tiny_dataset.load_pairs():
        write_f32(pred_dir / f"{pair.sample_id}_pred.f32", pair.lf.data)
    report = evaluate_dataset(pred_dir, tiny_dataset)
    assert len(report.per_sample) == 3
    for metric in MetricReport.METRICS:
        vals = [row[metric] for row in report.per_sample]
        assert report.aggregate[metric]["mean"] == pytest.approx(
            float(np.mean(vals)), abs=1e-9
        )
        assert report.aggregate[metric]["std"] == pytest.approx(
            float(np.std(vals)), abs=1e-9
        )
    assert (pred_dir / "metrics.json").exists()
    assert (pred_dir / "metrics.csv").exists()
    # deterministic re-run
    report2 = evaluate_dataset(pred_dir, tiny_dataset)
    assert report.to_dict() == report2.to_dict()


def test_evaluate_dataset_missing_predictions(tiny_dataset, tmp_path):
    pred_dir = tmp_path / "empty"
    pred_dir.mkdir()
    with pytest.raises(FileNotFoundError) as exc:
        evaluate_dataset(pred_dir, tiny_dataset)
    for sid in tiny_dataset.sample_ids:
        assert sid in str(exc.value)
    partial = json.loads((pred_dir / "metrics.json").read_text())
    assert partial["missing"] == tiny_dataset.sample_ids
