"""A ~90-parameter float64 toy model exercising every loss, for finite-difference checks."""
from __future__ import annotations

import numpy as np
import torch

from dani4d.core import losses as L

A, S, R = 3, 4, 2


class Toy:
    """Flat parameter vector: sequence (48), linear D^b (17), latents (16), linear D^z (9)."""

    def __init__(self, seed: int, ascending: bool = False):
        rng = np.random.default_rng(seed)
        # bins 0.5 apart so cummin/cummax never tie within a finite-difference step
        seq = 1.0 + 0.5 * np.arange(A)[:, None, None] + 0.05 * rng.random((A, S, S))
        self.parts = {
            "seq": (seq if ascending else seq[::-1]).copy().ravel(),
            "db": 0.3 * rng.normal(size=S * S + 1),
            "z": rng.uniform(-0.8, 0.8, size=2 * 8),
            "dz": 0.3 * rng.normal(size=8 + 1),
        }
        self.order = list(self.parts)
        self.theta = np.concatenate([self.parts[k] for k in self.order])
        self.x = torch.as_tensor(seq[1] + 0.1 * rng.normal(size=(S, S)))[None]
        self.mu = torch.as_tensor(rng.uniform(0.2, 1, size=(1, A)))
        self.masks = torch.as_tensor(rng.random((R, S, S)) < 0.5).double()
        self.masks[:, 0, 0] = 1
        self.table = torch.as_tensor(rng.uniform(0.8, 1.2, size=(R, A, A, 4)))
        self.z_star = torch.as_tensor(rng.uniform(-1, 1, size=(2, 8)))
        self.a = torch.tensor([1])
        self.d = torch.tensor([2])
        self.mean = torch.tensor([0.3], dtype=torch.float64)
        self.std = torch.tensor([0.7], dtype=torch.float64)

    def slices(self) -> dict:
        out, start = {}, 0
        for k in self.order:
            out[k] = slice(start, start + self.parts[k].size)
            start += self.parts[k].size
        return out

    def _unpack(self, theta):
        sl = self.slices()
        seq = theta[sl["seq"]].view(1, A, S, S)
        db = theta[sl["db"]]
        z = theta[sl["z"]].view(2, 8)
        dz = theta[sl["dz"]]
        return seq, db, z, dz

    def loss(self, name: str, theta, form: str | None = None):
        seq, db, z, dz = self._unpack(theta)
        disc_b = lambda img: torch.sigmoid(img.flatten(1) @ db[:-1] + db[-1])
        disc_z = lambda v: torch.sigmoid(v @ dz[:-1] + dz[-1])
        if name == "rec":
            return L.loss_rec(self.x, seq, self.mu, form or "literal").sum()
        if name == "vox":
            return L.loss_vox(seq, self.a, form or "literal").sum()
        if name == "reg":
            return L.loss_reg(seq, self.a, self.d, self.masks, self.masks.sum((1, 2)), self.table,
                              self.mean, self.std, form or "literal").sum()
        if name == "b":
            fake = seq[:, self.a[0]]
            d_loss, g_loss = L.loss_adv_brain(disc_b, self.x, fake)
            return d_loss + g_loss
        if name == "z":
            d_loss, e_loss = L.loss_adv_latent(disc_z, z, self.z_star)
            return d_loss + e_loss
        raise KeyError(name)

    @property
    def n_params(self) -> int:
        return self.theta.size


def gradient_check(name: str, seed: int = 0, n_coords: int = 24, step: float = 1e-3, form: str | None = None,
                   ascending: bool = False):
    """Max relative error between autograd and central differences over random active coordinates."""
    toy = Toy(seed, ascending)
    theta = torch.tensor(toy.theta, dtype=torch.float64, requires_grad=True)
    loss = toy.loss(name, theta, form)
    (grad,) = torch.autograd.grad(loss, theta)
    grad = grad.numpy()
    active = np.flatnonzero(np.abs(grad) > 1e-8)
    rng = np.random.default_rng(seed + 1)
    coords = rng.choice(active, size=min(n_coords, active.size), replace=False)
    worst = 0.0
    with torch.no_grad():
        for c in coords:
            tp = torch.tensor(toy.theta, dtype=torch.float64)
            tm = tp.clone()
            tp[c] += step
            tm[c] -= step
            fd = (toy.loss(name, tp, form).item() - toy.loss(name, tm, form).item()) / (2 * step)
            rel = abs(fd - grad[c]) / max(abs(fd), abs(grad[c]))
            worst = max(worst, rel)
    return worst, len(coords)
