import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sfod.afsp import (AFSP, EPS, StylePredictor, channel_stats, grl, l1_renormalize, mix_styles, positive,
                       restyle)
from sfod.detector import Detector, detection_loss
from sfod.core import BoundingBox, LabeledSample
from sfod.synthdata import PRESETS, SceneSpec, image_rng, render_scene


def test_grl_identity_forward_negated_backward():
    x = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, 4, dtype=torch.float64)
    y = grl(x)
    assert torch.equal(y, x)
    (y * w).sum().backward()
    assert torch.equal(x.grad, -w)


def test_channel_stats_examples():
    fm = torch.tensor([[[[1.0, 3.0], [1.0, 3.0]], [[2.0, 2.0], [2.0, 2.0]]]], dtype=torch.float64)
    mu, sigma = channel_stats(fm)
    assert torch.allclose(mu, torch.tensor([[2.0, 2.0]], dtype=torch.float64))
    assert sigma[0, 0].item() == pytest.approx(np.sqrt(1.0 + EPS**2), abs=1e-15)
    assert sigma[0, 1].item() == pytest.approx(EPS, rel=1e-12)
    with pytest.raises(ValueError):
        channel_stats(torch.zeros(1, 2, 1, 1))


def test_mix_endpoints():
    mu, sigma = torch.randn(2, 5), torch.rand(2, 5) + 0.1
    mu_a, sigma_a = torch.randn(2, 5), torch.rand(2, 5) + 0.1
    m0, s0 = mix_styles(mu, sigma, mu_a, sigma_a, 0.0)
    m1, s1 = mix_styles(mu, sigma, mu_a, sigma_a, 1.0)
    assert torch.equal(m0, mu) and torch.equal(s0, sigma)
    assert torch.equal(m1, mu_a) and torch.equal(s1, sigma_a)
    with pytest.raises(ValueError):
        mix_styles(mu, sigma, mu_a, sigma_a, 1.5)


def test_restyle_reaches_target_statistics():
    torch.manual_seed(0)
    fm = torch.randn(2, 4, 8, 8, dtype=torch.float64) * 3 + 1
    mu, sigma = channel_stats(fm, eps=0.0)
    mu_t, sigma_t = torch.randn(2, 4, dtype=torch.float64), torch.rand(2, 4, dtype=torch.float64) + 0.5
    out = restyle(fm, mu, sigma, mu_t, sigma_t)
    m2, s2 = channel_stats(out, eps=0.0)
    assert torch.allclose(m2, mu_t, atol=1e-12)
    assert torch.allclose(s2, sigma_t, atol=1e-12)
    # restyling to the original statistics is the identity
    assert torch.allclose(restyle(fm, mu, sigma, mu, sigma), fm, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_l1_renormalize_preserves_reference_norm(seed, scale):
    g = torch.Generator().manual_seed(seed)
    ref = torch.randn(3, 2, 4, 4, generator=g, dtype=torch.float64)
    fp = torch.randn(3, 2, 4, 4, generator=g, dtype=torch.float64) * scale
    out = l1_renormalize(fp, ref)
    n_out = out.abs().flatten(1).sum(1)
    n_ref = ref.abs().flatten(1).sum(1)
    assert torch.all((n_out - n_ref).abs() / n_ref <= 1e-12)


def test_l1_renormalize_zero_perturbation_falls_back():
    ref = torch.ones(2, 1, 2, 2)
    fp = torch.zeros(2, 1, 2, 2)
    fp[1] = 2.0
    out = l1_renormalize(fp, ref)
    assert torch.equal(out[0], ref[0])
    assert torch.allclose(out[1], ref[1])


def test_positive_is_at_least_eps():
    x = torch.tensor([-1e4, -5.0, 0.0, 3.0])
    y = positive(x)
    assert torch.all(y >= EPS)


def test_eval_mode_is_identity():
    m = AFSP(8).eval()
    fm = torch.randn(2, 8, 5, 5)
    assert m(fm) is fm


def test_afsp_output_keeps_norm_and_records():
    torch.manual_seed(1)
    m = AFSP(8, alpha=0.5)
    m.recorder = []
    fm = torch.randn(3, 8, 6, 6)
    out = m(fm)
    assert out.shape == fm.shape
    assert len(m.recorder) == 3 and max(m.recorder) <= 1e-5


def _samples(n=2, seed=5):
    out = []
    for i in range(n):
        img, boxes, classes, _ = render_scene(PRESETS["source"], SceneSpec(), image_rng(seed, i))
        out.append(LabeledSample(img, tuple(BoundingBox(*map(float, b)) for b in boxes), tuple(classes)))
    return out


def _twin_grads(seed):
    """Gradients of the detection loss with the reversal layers on and off."""
    samples = _samples(2, seed)
    results = []
    for use_grl in (True, False):
        torch.manual_seed(0)
        det = Detector().double()
        det.train()
        afsp = AFSP(det.cfg.channels[0], alpha=0.5).double()
        afsp.use_grl = use_grl
        lc, lr = detection_loss(det, samples, perturb_hook=afsp, generator=torch.Generator().manual_seed(seed))
        (lc + lr).backward()
        results.append(({n: p.grad.clone() for n, p in afsp.named_parameters()},
                         {n: p.grad.clone() for n, p in det.backbone.stages[0].named_parameters()}))
    return results


@pytest.mark.parametrize("seed", range(3))
def test_twin_backward_predictor_negated_backbone_identical(seed):
    (pred_on, bb_on), (pred_off, bb_off) = _twin_grads(seed)
    for name in pred_on:
        assert torch.max(torch.abs(pred_on[name] + pred_off[name])) <= 1e-6
    assert any(pred_on[n].abs().max() > 0 for n in pred_on)
    for name in bb_on:
        assert torch.max(torch.abs(bb_on[name] - bb_off[name])) <= 1e-12


def test_afsp_path_finite_differences():
    torch.manual_seed(3)
    afsp = AFSP(4, alpha=0.5).double()
    with torch.no_grad():
        for p in afsp.parameters():
            p.normal_(0, 0.3)
    afsp.use_grl = False
    fm = torch.randn(2, 4, 5, 5, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 4, 5, 5, dtype=torch.float64)

    def f(x):
        return (afsp(x) * w).sum()

    f(fm).backward()
    h = 1e-6
    flat = fm.detach().flatten()
    for k in range(0, flat.numel(), 7):
        up, down = flat.clone(), flat.clone()
        up[k] += h
        down[k] -= h
        fd = (f(up.view_as(fm)) - f(down.view_as(fm))).item() / (2 * h)
        bp = fm.grad.flatten()[k].item()
        assert abs(fd - bp) <= 1e-2 * max(abs(fd), abs(bp)) + 1e-8
    # predictor parameters too
    afsp.zero_grad()
    f(fm.detach()).backward()
    for p in afsp.parameters():
        idx = tuple(0 for _ in p.shape)
        bp = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = f(fm.detach()).item()
            p[idx] = orig - h
            down = f(fm.detach()).item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        assert abs(fd - bp) <= 1e-2 * max(abs(fd), abs(bp)) + 1e-8


def test_adversarial_step_does_not_decrease_loss():
    """One gradient step on the predictor alone, through the reversal layers, raises the loss."""
    samples = _samples(2, seed=9)
    torch.manual_seed(0)
    det = Detector().double()
    det.eval()  # fixed statistics, deterministic forward
    for p in det.parameters():
        p.requires_grad_(False)
    afsp = AFSP(det.cfg.channels[0], alpha=1.0).double()
    with torch.no_grad():
        for p in afsp.parameters():
            p.normal_(0, 0.05)

    def loss():
        lc, lr = detection_loss(det, samples, perturb_hook=afsp, generator=torch.Generator().manual_seed(0))
        return lc + lr

    afsp.train()
    before = loss()
    afsp.zero_grad()
    before.backward()
    with torch.no_grad():
        for p in afsp.parameters():
            p -= 1e-3 * p.grad  # descent on the reversed gradient is ascent on the loss
    after = loss().item()
    assert after >= before.item() - 1e-12


def test_predictor_shapes():
    p = StylePredictor(6)
    mu, sigma = p(torch.randn(3, 6), torch.rand(3, 6))
    assert mu.shape == sigma.shape == (3, 6)
