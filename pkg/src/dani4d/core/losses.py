"""Losses of one slice model.

Shapes: a generated sequence is ``(B, A, S, S)``; an input batch ``(B, S, S)``;
age-bin indices ``a`` are 0-based ``(B,)`` integer tensors. Per-sample losses
come back as ``(B,)`` tensors; summing over subjects is left to the caller.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

LOSS_NAMES = ("reg", "vox", "b", "z", "rec")
PROB_CLAMP = 1e-7
EPSILON = 0.1


def _mse(a, b):
    return ((a - b) ** 2).flatten(-2).mean(-1)


def loss_rec(x, seq, mu, form: str = "literal"):
    """Fuzzy-membership reconstruction loss.

    ``literal``: sum_i MSE(x, seq_i * mu_i).
    ``weighted``: sum_i mu_i * MSE(x, seq_i).
    """
    x = torch.as_tensor(x)
    seq = torch.as_tensor(seq)
    mu = torch.as_tensor(mu, dtype=seq.dtype)
    if form == "literal":
        return _mse(x.unsqueeze(-3), seq * mu[..., None, None]).sum(-1)
    if form == "weighted":
        return (mu * _mse(x.unsqueeze(-3), seq)).sum(-1)
    raise ValueError(f"unknown rec form {form!r}")


def loss_vox(seq, a, form: str = "literal"):
    """Voxel-level monotonicity loss around the input's own age bin.

    ``literal``: 1/2 [MSE(G_a, min(G_<a)) + MSE(G_a, max(G_>a))].
    ``hinge``: the same but only penalizing G_a above the earlier minimum or
    below the later maximum. Missing sides at boundary bins contribute 0.
    """
    seq = torch.as_tensor(seq)
    a = torch.as_tensor(a, dtype=torch.long).reshape(-1)
    B, A = seq.shape[:2]
    rows = torch.arange(B)
    g_a = seq[rows, a]
    prev_min = torch.cummin(seq, dim=1).values  # prev_min[:, k] = min(G_0..G_k)
    next_max = torch.flip(torch.cummax(torch.flip(seq, [1]), dim=1).values, [1])  # max(G_k..G_{A-1})
    lo = prev_min[rows, (a - 1).clamp(min=0)]
    hi = next_max[rows, (a + 1).clamp(max=A - 1)]
    if form == "literal":
        t_lo = _mse(g_a, lo)
        t_hi = _mse(g_a, hi)
    elif form == "hinge":
        t_lo = (F.relu(g_a - lo) ** 2).flatten(-2).mean(-1)
        t_hi = (F.relu(hi - g_a) ** 2).flatten(-2).mean(-1)
    else:
        raise ValueError(f"unknown vox form {form!r}")
    t_lo = torch.where(a > 0, t_lo, torch.zeros_like(t_lo))
    t_hi = torch.where(a < A - 1, t_hi, torch.zeros_like(t_hi))
    return 0.5 * (t_lo + t_hi)


def region_sums(seq, masks, mean=None, std=None):
    """Regional intensity sums ``(B, A, R)``.

    ``masks`` is ``(R, S, S)`` (already intersected with the brain mask).
    With ``mean``/``std`` ``(B,)`` the sequence is de-standardized first.
    """
    if mean is not None:
        seq = seq * std[:, None, None, None] + mean[:, None, None, None]
    return torch.einsum("bahw,rhw->bar", seq, masks.to(seq.dtype))


def loss_reg(seq, a, d, masks, sizes, lr_table, mean=None, std=None,
             form: str = "literal", eps: float = EPSILON):
    """Region-level progression loss against pre-fitted ratio regressors.

    ``lr_table[q, i, j, d]`` is the predicted intensity ratio of region q from
    bin i to later bin j for diagnosis d. ``literal`` sums the signed
    differences scaled by sqrt(region size); ``squared`` sums their squares.
    Both are normalized by ``R_n (A - 1)``.
    """
    seq = torch.as_tensor(seq)
    a = torch.as_tensor(a, dtype=torch.long).reshape(-1)
    d = torch.as_tensor(d, dtype=torch.long).reshape(-1)
    masks = torch.as_tensor(masks)
    B, A = seq.shape[:2]
    R = masks.shape[0]
    if R == 0:
        return seq.new_zeros(B)
    sizes = torch.as_tensor(sizes, dtype=seq.dtype)
    table = torch.as_tensor(lr_table, dtype=seq.dtype)
    sums = region_sums(seq, masks, mean, std) + eps  # (B, A, R)
    o = torch.arange(A).expand(B, A)
    lo = torch.minimum(o, a[:, None])
    hi = torch.maximum(o, a[:, None])
    s_lo = torch.gather(sums, 1, lo[..., None].expand(B, A, R))
    s_hi = torch.gather(sums, 1, hi[..., None].expand(B, A, R))
    observed = s_hi / s_lo
    predicted = table.permute(1, 2, 3, 0)[lo, hi, d[:, None].expand(B, A)]  # (B, A, R)
    diff = (predicted - observed) * torch.sqrt(sizes)
    if form == "squared":
        diff = diff**2
    elif form != "literal":
        raise ValueError(f"unknown reg form {form!r}")
    keep = (o != a[:, None]).to(seq.dtype)[..., None]
    return (diff * keep).sum(dim=(1, 2)) / (R * (A - 1))


def adversarial_terms(p_real, p_fake):
    """(discriminator loss, non-saturating generator loss) from probabilities."""
    p_real = p_real.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    p_fake = p_fake.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    d_loss = -torch.log(p_real).mean() - torch.log(1 - p_fake).mean()
    g_loss = -torch.log(p_fake).mean()
    return d_loss, g_loss


def loss_adv_brain(disc, real, fake):
    """Brain-realism adversarial loss: ``(D^b loss, generator loss)``."""
    return adversarial_terms(disc(real), disc(fake))


def loss_adv_latent(disc, z, z_star):
    """Latent-prior adversarial loss: ``(D^z loss, encoder loss)``; ``z_star`` are prior samples."""
    return adversarial_terms(disc(z_star), disc(z))


def sample_prior(n: int, dim: int, generator: torch.Generator | None = None, dtype=torch.float32):
    """Uniform prior samples on [-1, 1]^dim."""
    return torch.rand(n, dim, generator=generator, dtype=dtype) * 2 - 1


def loss_total(losses: dict, weights: dict):
    """Weighted sum over the five named components."""
    total = 0.0
    for name in LOSS_NAMES:
        w = weights.get(name, 0.0)
        if w != 0:
            total = total + w * losses[name]
    return total


TWO_LOG_TWO = 2 * math.log(2)
