import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cssdiff.losses import (
    LossParts,
    LossWeights,
    adv_d_loss,
    adv_g_loss,
    alignment_error,
    cycle_error,
    cycle_loss,
    path_consistency_loss,
    recover_eps_preds,
    total_objective,
)
from cssdiff.models import apply_chain, apply_frozen
from cssdiff.phantom import generate_phantom, inject_slice_shift
from cssdiff.schedule import build_schedule, ddim_step

from conftest import build_micro_bundle


# -- adversarial terms -------------------------------------------------------

def test_adv_d_at_half_is_2ln2():
    half = torch.tensor([0.5, 0.5])
    assert float(adv_d_loss(half, half)) == pytest.approx(2 * math.log(2), abs=1e-6)


def test_adv_d_perfect_discriminator_limit():
    real = torch.tensor([1 - 1e-6])
    fake = torch.tensor([1e-6])
    assert float(adv_d_loss(real, fake)) == pytest.approx(0.0, abs=1e-5)


def test_adv_scores_domain_errors():
    half = torch.tensor([0.5])
    for bad in (0.0, 1.0, -0.1, 1.1):
        with pytest.raises(ValueError):
            adv_d_loss(torch.tensor([bad]), half)
        with pytest.raises(ValueError):
            adv_d_loss(half, torch.tensor([bad]))
        with pytest.raises(ValueError):
            adv_g_loss(torch.tensor([bad]))


def test_adv_g_values():
    assert float(adv_g_loss(torch.tensor([0.5]))) == pytest.approx(math.log(2), abs=1e-6)
    assert float(adv_g_loss(torch.tensor([1 - 1e-7]))) == pytest.approx(0.0, abs=1e-5)
    # tiny but in-domain scores pass through the guard un-clamped
    assert float(adv_g_loss(torch.tensor([1e-9], dtype=torch.float64))) == pytest.approx(
        -math.log(1e-9), rel=1e-6
    )


# -- cycle loss ---------------------------------------------------------------

def test_cycle_zero_at_identity():
    x = torch.rand(2, 1, 8, 8)
    y = torch.rand(2, 1, 8, 8)
    assert float(cycle_loss(x, x, y, y, rho=3.0)) == 0.0


def test_cycle_constant_residual():
    x = torch.zeros(2, 1, 8, 8)
    y = torch.rand(2, 1, 8, 8)
    assert float(cycle_loss(x, x + 0.1, y, y, rho=12.3)) == pytest.approx(0.1, abs=1e-7)


def test_cycle_rho_zero_ignores_backward():
    x = torch.zeros(1, 1, 4, 4)
    y = torch.zeros(1, 1, 4, 4)
    assert float(cycle_loss(x, x + 0.2, y, y + 9.0, rho=0.0)) == pytest.approx(0.2, abs=1e-6)


def test_cycle_shape_mismatch():
    with pytest.raises(ValueError):
        cycle_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5), torch.zeros(1), torch.zeros(1), 1.0)


# -- path consistency ----------------------------------------------------------

def _ddim_consistent_chain(sched, seed=0):
    """Chain states lying exactly on the deterministic references."""
    g = torch.Generator().manual_seed(seed)
    T = sched.T_steps
    x_first = torch.rand(1, 1, 8, 8, generator=g)
    x_clean = torch.rand(1, 1, 8, 8, generator=g)
    states = [x_first]
    for k in range(T - 1):
        tau = T - (k + 1)
        ab = sched.alpha_bar[tau]
        eps = (states[k] - math.sqrt(ab) * x_clean) / math.sqrt(1.0 - ab)
        states.append(ddim_step(states[k], tau, eps, sched))
    # force the clean state the eps recovery assumes
    states[-1] = x_clean if T > 1 else x_first
    return states


def test_path_zero_on_consistent_chain():
    sched = build_schedule(4, 0.05, 0.3)
    # consistency requires the recovered-eps convention and states on refs;
    # construct iteratively from the final state backwards instead
    g = torch.Generator().manual_seed(1)
    x_clean = torch.rand(1, 1, 8, 8, generator=g)
    T = sched.T_steps
    # choose x_1 freely, derive following states from the reference map
    states = [torch.rand(1, 1, 8, 8, generator=g)]
    for k in range(T - 1):
        tau = T - (k + 1)
        ab = sched.alpha_bar[tau]
        eps = (states[k] - math.sqrt(ab) * x_clean) / math.sqrt(1.0 - ab)
        states.append(ddim_step(states[k], tau, eps, sched))
    # the construction converges on x_clean at the last step by design only if
    # eps is recovered against the true final state; recompute eps accordingly
    eps_preds = [
        (states[k] - math.sqrt(sched.alpha_bar[T - k - 1]) * states[-1])
        / math.sqrt(1.0 - sched.alpha_bar[T - k - 1])
        for k in range(T - 1)
    ]
    refs = [ddim_step(states[k], T - k - 1, eps_preds[k], sched) for k in range(T - 1)]
    states = [states[0]] + refs
    loss = path_consistency_loss(
        states, recover_eps_preds(states, sched), sched, [1.0] * (T - 1)
    )
    assert float(loss) < 1e-9


def test_path_zero_eta_ignores_states():
    sched = build_schedule(3, 0.1, 0.2)
    states = [torch.rand(1, 1, 8, 8) for _ in range(3)]
    eps = recover_eps_preds(states, sched)
    assert float(path_consistency_loss(states, eps, sched, [0.0, 0.0])) == 0.0


def test_path_single_constant_mismatch():
    sched = build_schedule(3, 0.1, 0.2)
    g = torch.Generator().manual_seed(2)
    states = [torch.rand(1, 1, 8, 8, generator=g) for _ in range(3)]
    eps = recover_eps_preds(states, sched)
    ref0 = ddim_step(states[0], 2, eps[0], sched)
    states_fixed = [states[0], ref0 + 0.2, states[2]]
    # keep the same eps so only the first transition mismatches
    loss = path_consistency_loss(states_fixed, eps, sched, [1.0, 0.0])
    assert float(loss) == pytest.approx(0.04, abs=1e-6)


def test_path_arity_mismatch():
    sched = build_schedule(3, 0.1, 0.2)
    states = [torch.rand(1, 1, 8, 8) for _ in range(3)]
    with pytest.raises(ValueError):
        path_consistency_loss(states, [], sched, [1.0, 1.0])
    with pytest.raises(ValueError):
        path_consistency_loss(states[:2], recover_eps_preds(states, sched), sched, [1.0, 1.0])


def test_recover_eps_matches_forward_model():
    # if the chain actually followed q_sample with shared eps, recovery finds it
    from cssdiff.schedule import q_sample

    sched = build_schedule(4, 0.02, 0.3)
    g = torch.Generator().manual_seed(3)
    x_clean = torch.rand(1, 1, 8, 8, generator=g)
    eps = torch.randn(1, 1, 8, 8, generator=g)
    states = [q_sample(x_clean, 4 - c, eps, sched) for c in range(1, 4)] + [x_clean]
    recovered = recover_eps_preds(states, sched)
    for r in recovered:
        assert (r - eps).abs().max() < 1e-5


# -- total objective ------------------------------------------------------------

def _parts(adv_g=0.3, adv_d=0.7, cyc=0.1, path=0.05):
    return LossParts(
        adv_g=torch.tensor(adv_g),
        adv_d=torch.tensor(adv_d),
        cyc=torch.tensor(cyc),
        path=torch.tensor(path),
    )


def test_total_objective_selects_terms():
    gen, disc = total_objective(_parts(), LossWeights(1, 0, 0, 1, ()))
    assert float(gen) == pytest.approx(0.3)
    assert float(disc) == pytest.approx(0.7)
    gen, _ = total_objective(_parts(cyc=0.1), LossWeights(0, 1, 0, 1, ()))
    assert float(gen) == pytest.approx(0.1)
    gen, _ = total_objective(_parts(), LossWeights(0, 0, 0, 1, ()))
    assert float(gen) == 0.0


@settings(max_examples=30, deadline=None)
@given(
    l1=st.floats(0, 5),
    l2=st.floats(0, 5),
    l3=st.floats(0, 5),
    scale=st.sampled_from([2.0, 3.0]),
)
def test_total_objective_linear_in_lambda(l1, l2, l3, scale):
    parts = _parts()
    gen1, _ = total_objective(parts, LossWeights(l1, l2, l3, 1.0, ()))
    gen2, _ = total_objective(parts, LossWeights(scale * l1, scale * l2, scale * l3, 1.0, ()))
    assert float(gen2) == pytest.approx(scale * float(gen1), rel=1e-6, abs=1e-7)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1.0)
    with pytest.raises(ValueError):
        LossWeights(eta_t=(float("nan"),))


# -- diagnostics -----------------------------------------------------------------

def test_cycle_error_per_sample():
    x = torch.zeros(3, 1, 4, 4)
    rec = x.clone()
    rec[1] += 0.05
    err = cycle_error(x, rec)
    assert err.shape == (3,)
    assert float(err[0]) == 0.0
    assert float(err[1]) == pytest.approx(0.05, abs=1e-7)


def test_alignment_error_examples():
    hf = generate_phantom(3, (16, 32, 32))
    assert alignment_error(hf, hf, [0]) == 0.0
    a = alignment_error(hf, hf, [1])
    b = alignment_error(hf, hf, [2])
    two = alignment_error(hf, hf, [1, 2])
    assert two == pytest.approx((a + b) / 2, rel=1e-9)
    with pytest.raises(ValueError):
        alignment_error(hf, hf, [])
    with pytest.raises(ValueError):
        alignment_error(hf, hf, [16])


def test_alignment_error_prefers_true_shift():
    hf = generate_phantom(4, (16, 32, 32))
    shifted = inject_slice_shift(hf, 2)
    assert alignment_error(shifted, hf, [2]) < alignment_error(shifted, hf, [0])


# -- gradient flow per loss/parameter group ---------------------------------------

def _micro_losses(bundle, sched, weights, seed=0):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64)
    y = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64)
    zs = [torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64) for _ in bundle.chain]
    cond = bundle.slice_encoder(x0.squeeze(1)).detach()
    states = apply_chain(bundle, x0, zs, cond)
    x_t = states[-1]
    d_loss = adv_d_loss(bundle.disc(y), bundle.disc(x_t.detach()))
    g_adv = adv_g_loss(apply_frozen(bundle.disc, x_t))
    x0_rec = bundle.reverse(x_t)
    y_rec = apply_chain(bundle, bundle.reverse(y), zs, cond)[-1]
    cyc = cycle_loss(x0, x0_rec, y, y_rec, weights.rho)
    path = path_consistency_loss(states, recover_eps_preds(states, sched), sched, weights.eta_t)
    gen, disc = total_objective(LossParts(g_adv, d_loss.detach(), cyc, path), weights)
    return gen, d_loss


def test_gradient_flow_every_group():
    bundle = build_micro_bundle(T=2, seed=1)
    sched = build_schedule(2, 0.05, 0.3)
    weights = LossWeights(1.0, 1.0, 1.0, 1.0, (1.0,))
    gen, disc = _micro_losses(bundle, sched, weights)

    gen_groups = {f"gen_{t}": list(g.parameters()) for t, g in enumerate(bundle.chain)}
    gen_groups["reverse"] = list(bundle.reverse.parameters())
    grads = torch.autograd.grad(
        gen, [p for ps in gen_groups.values() for p in ps], retain_graph=True, allow_unused=True
    )
    i = 0
    for name, ps in gen_groups.items():
        total = 0.0
        for _ in ps:
            assert grads[i] is not None, name
            total += float(grads[i].abs().sum())
            i += 1
        assert total > 0, f"group {name} received zero gradient"

    d_params = list(bundle.disc.parameters())
    d_grads = torch.autograd.grad(disc, d_params, retain_graph=True)
    assert sum(float(g.abs().sum()) for g in d_grads) > 0


def test_detachment_contracts_exact_zero():
    bundle = build_micro_bundle(T=2, seed=2)
    sched = build_schedule(2, 0.05, 0.3)
    weights = LossWeights(1.0, 1.0, 1.0, 1.0, (1.0,))
    gen, disc = _micro_losses(bundle, sched, weights)

    gen_params = [p for g in bundle.chain for p in g.parameters()]
    gen_params += list(bundle.reverse.parameters())
    d_params = list(bundle.disc.parameters())

    cross_d = torch.autograd.grad(gen, d_params, retain_graph=True, allow_unused=True)
    assert all(g is None or g.abs().sum() == 0 for g in cross_d)
    cross_g = torch.autograd.grad(disc, gen_params, retain_graph=True, allow_unused=True)
    assert all(g is None or g.abs().sum() == 0 for g in cross_g)
