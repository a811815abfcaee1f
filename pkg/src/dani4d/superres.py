"""Same-grid 3D detail restoration trained on (pipeline reconstruction, real scan) pairs.

The low-resolution inputs are blurred reconstructions on the template grid,
so the network predicts a residual correction rather than upsampling.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class SRDivergence(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite SR loss ({value}) at epoch {epoch}")
        self.epoch = epoch


class DenseResidualSR(nn.Module):
    """A single densely connected block of 3x3x3 convolutions plus a global skip."""

    def __init__(self, depth: int = 4, growth: int = 8):
        super().__init__()
        self.head = nn.Conv3d(1, growth, 3, padding=1)
        self.layers = nn.ModuleList(
            nn.Conv3d(growth * (i + 1), growth, 3, padding=1) for i in range(depth)
        )
        self.fuse = nn.Conv3d(growth * (depth + 1), 1, 1)

    def residual(self, x):
        feats = [F.relu(self.head(x))]
        for conv in self.layers:
            feats.append(F.relu(conv(torch.cat(feats, dim=1))))
        return self.fuse(torch.cat(feats, dim=1))

    def forward(self, x):
        return x + self.residual(x)

    def zero_residual(self) -> None:
        with torch.no_grad():
            self.fuse.weight.zero_()
            self.fuse.bias.zero_()


@dataclass
class SRModel:
    net: DenseResidualSR
    depth: int = 4
    growth: int = 8
    patch: int = 16
    epochs: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, depth: int = 4, growth: int = 8, patch: int = 16, seed: int = 0) -> "SRModel":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = DenseResidualSR(depth, growth)
        return cls(net, depth, growth, patch)

    def manifest(self) -> dict:
        return {"depth": self.depth, "growth": self.growth, "patch": self.patch,
                "epochs": self.epochs, "history": self.history}

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), d / "params.pt")
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "SRModel":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        model = cls.create(man["depth"], man["growth"], man["patch"])
        model.net.load_state_dict(torch.load(d / "params.pt", weights_only=True))
        model.epochs = man["epochs"]
        model.history = man["history"]
        return model

    def parameter_bytes(self) -> bytes:
        return b"".join(p.detach().numpy().tobytes() for p in self.net.state_dict().values())


def make_lr_hr_pairs(reconstruct: Callable, stacks: Sequence, real_volume: Callable) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair each training scan's own-age reconstruction (LR) with its real volume (HR).

    ``reconstruct(stack)`` must run the progression pipeline with SR
    disabled; ``real_volume(stack)`` returns the preprocessed real volume.
    Pairs whose shapes disagree are dropped with a warning.
    """
    pairs = []
    for s in stacks:
        lr = np.asarray(reconstruct(s), dtype=np.float64)
        hr = np.asarray(real_volume(s), dtype=np.float64)
        if lr.shape != hr.shape:
            logger.warning("dropping SR pair for %s: LR %s vs HR %s", getattr(s, "scan_id", "?"), lr.shape, hr.shape)
            continue
        pairs.append((lr, hr))
    return pairs


def _random_patch(lr, hr, patch, gen):
    starts = []
    for dim in lr.shape:
        size = min(patch, dim)
        starts.append((int(torch.randint(0, dim - size + 1, (1,), generator=gen)), size))
    sl = tuple(slice(s, s + k) for s, k in starts)
    return lr[sl], hr[sl]


def train_sr(pairs, epochs: int, patch: int = 16, seed: int = 0, depth: int = 4, growth: int = 8,
             lr: float = 1e-3, batch_size: int = 8, model: SRModel | None = None) -> SRModel:
    """Patch-wise MSE training; one random patch per pair per epoch."""
    if not pairs:
        raise ValueError("SR training needs at least one pair")
    shape = pairs[0][0].shape
    if any(a.shape != shape or b.shape != shape for a, b in pairs):
        raise ValueError("all SR pairs must share one shape")
    model = model or SRModel.create(depth, growth, patch, seed)
    if epochs <= 0:
        return model
    gen = torch.Generator().manual_seed(int(seed))
    opt = torch.optim.Adam(model.net.parameters(), lr=lr)
    lrs = [torch.as_tensor(a, dtype=torch.float32) for a, _ in pairs]
    hrs = [torch.as_tensor(b, dtype=torch.float32) for _, b in pairs]
    model.net.train()
    for ep in range(epochs):
        order = torch.randperm(len(pairs), generator=gen).tolist()
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            xs, ys = zip(*(_random_patch(lrs[i], hrs[i], patch, gen) for i in order[start:start + batch_size]))
            x = torch.stack(xs)[:, None]
            y = torch.stack(ys)[:, None]
            loss = F.mse_loss(model.net(x), y)
            v = loss.item()
            if not math.isfinite(v):
                raise SRDivergence(model.epochs, v)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += v * len(xs)
            count += len(xs)
        model.history.append(total / count)
        model.epochs += 1
    return model


@torch.no_grad()
def apply_sr(model: SRModel, volume) -> np.ndarray:
    """Enhanced volume on the same grid as ``volume``."""
    v = np.asarray(volume, dtype=np.float64)
    out = model.net(torch.as_tensor(v, dtype=torch.float32)[None, None])[0, 0].double().numpy()
    if not np.all(np.isfinite(out)):
        raise SRDivergence(model.epochs, float("nan"))
    return out


def trilinear_control(volume) -> np.ndarray:
    """Degrade-then-restore control: 2x trilinear downsampling followed by trilinear upsampling."""
    v = torch.as_tensor(np.asarray(volume, dtype=np.float64))[None, None]
    small = [max(2, math.ceil(s / 2)) for s in v.shape[2:]]
    down = F.interpolate(v, size=small, mode="trilinear", align_corners=True)
    return F.interpolate(down, size=list(v.shape[2:]), mode="trilinear", align_corners=True)[0, 0].numpy()


def psnr(pred, ref, data_range: float | None = None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    rng = float(ref.max() - ref.min()) if data_range is None else float(data_range)
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(rng**2 / mse)
