from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..dataio import N_DIAGNOSES


def _n_down(size: int) -> int:
    # downsample to a 4x4 map
    n, s = 0, size
    while s > 4 and s % 2 == 0:
        s //= 2
        n += 1
    if s != 4:
        raise ValueError(f"image side must be 4 * 2**k, got {size}")
    return n


class Encoder(nn.Module):
    def __init__(self, size=32, latent_dim=200, channels=16):
        super().__init__()
        layers, c_in = [], 1
        for i in range(_n_down(size)):
            c_out = channels * 2**i
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = c_out
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in * 16, latent_dim)

    def forward(self, x):
        h = self.conv(x.unsqueeze(1))
        return torch.tanh(self.fc(h.flatten(1)))


class Generator(nn.Module):
    """Decodes ``[z, onehot(age bin), onehot(diagnosis)]`` into a slice."""

    def __init__(self, size=32, latent_dim=200, n_bins=10, channels=16):
        super().__init__()
        n = _n_down(size)
        self.n_bins = n_bins
        self.c0 = channels * 2 ** (n - 1)
        self.fc = nn.Linear(latent_dim + n_bins + N_DIAGNOSES, self.c0 * 16)
        layers, c_in = [], self.c0
        for i in range(n):
            last = i == n - 1
            c_out = 1 if last else c_in // 2
            layers.append(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1))
            if not last:
                layers.append(nn.ReLU())
            c_in = c_out
        self.deconv = nn.Sequential(*layers)

    def forward(self, z, age_bin, diagnosis):
        cond = torch.cat([
            F.one_hot(age_bin, self.n_bins).to(z.dtype),
            F.one_hot(diagnosis, N_DIAGNOSES).to(z.dtype),
        ], dim=1)
        h = F.relu(self.fc(torch.cat([z, cond], dim=1)))
        return self.deconv(h.view(-1, self.c0, 4, 4)).squeeze(1)

    def sequence(self, z, diagnosis):
        """All ``A`` age bins for each latent: ``(B, A, S, S)``."""
        B, A = z.shape[0], self.n_bins
        zz = z.repeat_interleave(A, dim=0)
        bins = torch.arange(A).repeat(B)
        dd = diagnosis.repeat_interleave(A)
        out = self.forward(zz, bins, dd)
        return out.view(B, A, *out.shape[1:])


class BrainDiscriminator(nn.Module):
    def __init__(self, size=32, channels=16):
        super().__init__()
        layers, c_in = [], 1
        for i in range(_n_down(size)):
            c_out = channels * 2**i
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = c_out
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in * 16, 1)

    def forward(self, x):
        return torch.sigmoid(self.fc(self.conv(x.unsqueeze(1)).flatten(1))).squeeze(1)


class LatentDiscriminator(nn.Module):
    def __init__(self, latent_dim=200, hidden=(64, 32, 16)):
        super().__init__()
        layers, c_in = [], latent_dim
        for h in hidden:
            layers += [nn.Linear(c_in, h), nn.ReLU()]
            c_in = h
        layers.append(nn.Linear(c_in, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.net(z)).squeeze(1)
