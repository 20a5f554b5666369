"""Adversarial feature style perturbation.

The module reads the per-channel mean/std ("style") of a low-level feature
map, predicts an adversarial style with a two-layer perceptron, blends it
with the original style, re-styles the map AdaIN-fashion and rescales the
result to the input's per-sample L1 norm.

Two gradient reversal layers make the predictor adversarial without
touching the backbone: one sits on the predictor output, so the predictor
ascends the detection loss the rest of the student descends; the other sits
on the predictor input, so the gradient that flows back into the backbone
through the predictor is flipped twice and arrives with its ordinary sign.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-5


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -grad


def grl(x: torch.Tensor) -> torch.Tensor:
    """Identity forward, negated gradient backward."""
    return _GradReverse.apply(x)


def channel_stats(fm: torch.Tensor, eps: float = EPS):
    """Per-sample, per-channel spatial mean and ``sqrt(var + eps**2)`` (population variance)."""
    if fm.shape[-1] * fm.shape[-2] < 2:
        raise ValueError("channel statistics need at least two spatial positions")
    flat = fm.flatten(2)
    mu = flat.mean(dim=2)
    var = flat.var(dim=2, unbiased=False)
    return mu, torch.sqrt(var + eps * eps)


class StylePredictor(nn.Module):
    """FC -> ReLU -> FC from concat(mu, sigma) (N, 2d) to (mu_adv, sigma_adv)."""

    def __init__(self, channels: int, hidden: Optional[int] = None, init_std: float = 0.01):
        super().__init__()
        hidden = hidden or channels
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.fc2 = nn.Linear(hidden, 2 * channels)
        for layer in (self.fc1, self.fc2):
            nn.init.normal_(layer.weight, std=init_std)
            nn.init.zeros_(layer.bias)

    def forward(self, mu: torch.Tensor, sigma: torch.Tensor):
        out = self.fc2(F.relu(self.fc1(torch.cat((mu, sigma), dim=1))))
        return out.chunk(2, dim=1)


def predict_adversarial_style(mu, sigma, predictor: StylePredictor):
    return predictor(mu, sigma)


def mix_styles(mu, sigma, mu_adv, sigma_adv, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * mu_adv + (1 - alpha) * mu, alpha * sigma_adv + (1 - alpha) * sigma


def restyle(fm, mu, sigma, mu_mix, sigma_mix):
    """Standardize by the original statistics, then scale/shift to the mixed ones."""
    normed = (fm - mu[..., None, None]) / sigma[..., None, None]
    return sigma_mix[..., None, None] * normed + mu_mix[..., None, None]


def l1_renormalize(fp: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Rescale each sample of ``fp`` to the L1 norm of the matching ``reference`` sample.

    Samples whose perturbed norm is zero fall back to the reference.
    """
    dims = tuple(range(1, fp.dim()))
    norm_p = fp.abs().sum(dim=dims, keepdim=True)
    norm_r = reference.abs().sum(dim=dims, keepdim=True)
    degenerate = norm_p == 0
    scaled = fp * (norm_r / torch.where(degenerate, torch.ones_like(norm_p), norm_p))
    return torch.where(degenerate, reference, scaled)


def positive(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Map raw predictor output to a valid standard deviation (>= eps)."""
    return F.softplus(x) + eps


class AFSP(nn.Module):
    """Feature-style perturbation hook for the backbone's stage-1 output.

    ``alpha`` is a plain attribute (not learned); the training loop may ramp
    it. In eval mode the module is the identity. ``use_grl=False`` swaps both
    reversal layers for identities (used only for gradient comparisons).
    """

    def __init__(self, channels: int, alpha: float = 0.5, hidden: Optional[int] = None):
        super().__init__()
        self.predictor = StylePredictor(channels, hidden)
        self.alpha = alpha
        self.use_grl = True
        self.recorder: Optional[list] = None

    def forward(self, fm: torch.Tensor) -> torch.Tensor:
        if not self.training:
            return fm
        rev = grl if self.use_grl else (lambda t: t)
        mu, sigma = channel_stats(fm)
        mu_adv, sigma_adv = self.predictor(rev(mu), rev(sigma))
        mu_adv, sigma_adv = rev(mu_adv), rev(positive(sigma_adv))
        mu_mix, sigma_mix = mix_styles(mu, sigma, mu_adv, sigma_adv, self.alpha)
        out = l1_renormalize(restyle(fm, mu, sigma, mu_mix, sigma_mix), fm)
        if self.recorder is not None:
            with torch.no_grad():
                n_in = fm.detach().double().abs().flatten(1).sum(1)
                n_out = out.detach().double().abs().flatten(1).sum(1)
                self.recorder.extend(((n_out - n_in).abs() / n_in).tolist())
        return out
