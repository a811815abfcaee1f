"""Per-slice model bundles: construction, alternating adversarial training, inference."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses as L
from .binning import AgeBinning
from .networks import BrainDiscriminator, Encoder, Generator, LatentDiscriminator

logger = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, component: str, epoch: int, value: float):
        super().__init__(f"non-finite {component} loss ({value}) at epoch {epoch}")
        self.component = component
        self.epoch = epoch


@dataclass
class TrainConfig:
    latent_dim: int = 200
    channels: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 100
    rec_form: str = "weighted"
    vox_form: str = "literal"
    reg_form: str = "squared"


@dataclass
class SliceData:
    """Training tensors for one slice position."""

    x: torch.Tensor  # (N, S, S) standardized slices
    age: torch.Tensor
    a: torch.Tensor  # 0-based age-bin index
    d: torch.Tensor
    mean: torch.Tensor
    std: torch.Tensor
    mu: torch.Tensor  # (N, A) fuzzy memberships
    subjects: list = field(default_factory=list)

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "SliceData":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return SliceData(self.x[idx], self.age[idx], self.a[idx], self.d[idx], self.mean[idx],
                         self.std[idx], self.mu[idx], [self.subjects[i] for i in idx.tolist()])

    @classmethod
    def from_stacks(cls, stacks: Sequence, n: int, binning: AgeBinning, dtype=torch.float32) -> "SliceData":
        if not stacks:
            raise ValueError("no slice stacks supplied")
        t = lambda v, dt=dtype: torch.as_tensor(np.asarray(v), dtype=dt)
        ages = [s.age for s in stacks]
        return cls(
            x=t(np.stack([s.slices[n] for s in stacks])),
            age=t(ages, torch.float64),
            a=t([binning.bin_index(g) for g in ages], torch.long),
            d=t([s.diagnosis for s in stacks], torch.long),
            mean=t([s.slice_means[n] for s in stacks]),
            std=t([s.slice_stds[n] for s in stacks]),
            mu=t(np.stack([binning.memberships(g) for g in ages])),
            subjects=[s.subject_id for s in stacks],
        )


@dataclass
class RegionContext:
    """Region masks (already restricted to brain voxels), sizes and LR table for one slice."""

    masks: torch.Tensor  # (R, S, S)
    sizes: torch.Tensor  # (R,)
    table: torch.Tensor  # (R, A, A, 4)

    @classmethod
    def empty(cls, size: int, n_bins: int, dtype=torch.float32) -> "RegionContext":
        return cls(torch.zeros(0, size, size, dtype=dtype), torch.zeros(0, dtype=dtype),
                   torch.ones(0, n_bins, n_bins, 4, dtype=dtype))

    @classmethod
    def build(cls, regions, n, lr_bank, bin_centers, brain_slice=None, dtype=torch.float32):
        masks = regions.masks(n)
        if masks.shape[0] == 0:
            size = brain_slice.shape[0] if brain_slice is not None else 0
            return cls.empty(size, len(bin_centers), dtype)
        sizes = masks.reshape(len(masks), -1).sum(1)
        if brain_slice is not None:
            masks = masks & np.asarray(brain_slice, dtype=bool)[None]
        table = lr_bank.table(n, len(masks), bin_centers)
        return cls(torch.as_tensor(masks, dtype=dtype), torch.as_tensor(sizes, dtype=dtype),
                   torch.as_tensor(table, dtype=dtype))


class ConstantSchedule:
    """Fixed loss weights (no profile)."""

    def __init__(self, weights: dict):
        self._w = dict(weights)

    def weights(self, t: int) -> dict:
        return dict(self._w)


class SliceModelBundle:
    def __init__(self, n: int, size: int, n_bins: int, config: TrainConfig | None = None, seed: int = 0):
        self.n = n
        self.size = size
        self.n_bins = n_bins
        self.config = config or TrainConfig()
        self.epoch = 0
        self.history: list[dict] = []
        c = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.E = Encoder(size, c.latent_dim, c.channels)
            self.G = Generator(size, c.latent_dim, n_bins, c.channels)
            self.Db = BrainDiscriminator(size, c.channels)
            self.Dz = LatentDiscriminator(c.latent_dim)
        self.reset_optimizers()

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def networks(self) -> dict:
        return {"E": self.E, "G": self.G, "Db": self.Db, "Dz": self.Dz}

    def reset_optimizers(self) -> None:
        c = self.config
        betas = (c.beta1, c.beta2)
        self.opt_eg = torch.optim.Adam(list(self.E.parameters()) + list(self.G.parameters()), lr=c.lr, betas=betas)
        self.opt_d = torch.optim.Adam(list(self.Db.parameters()) + list(self.Dz.parameters()), lr=c.lr, betas=betas)

    def parameters_state(self) -> dict:
        return {k: copy.deepcopy(m.state_dict()) for k, m in self.networks().items()}

    def load_parameters(self, state: dict) -> None:
        for k, m in self.networks().items():
            m.load_state_dict(state[k])
        self.reset_optimizers()

    def clone(self) -> "SliceModelBundle":
        return copy.deepcopy(self)

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().flatten() for m in self.networks().values() for p in m.parameters()])

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.parameters_state(), d / "params.pt")
        manifest = {"n": self.n, "latent_dim": self.latent_dim, "A": self.n_bins, "epoch": self.epoch,
                    "size": self.size, "config": asdict(self.config), "history": self.history}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "SliceModelBundle":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        b = cls(man["n"], man["size"], man["A"], TrainConfig(**man["config"]))
        b.load_parameters(torch.load(d / "params.pt", weights_only=True))
        b.epoch = man["epoch"]
        b.history = man["history"]
        return b


def _batch_losses(bundle, batch: SliceData, regions: RegionContext, z_star):
    """Forward pass plus every loss term for one mini-batch."""
    c = bundle.config
    z = bundle.E(batch.x)
    seq = bundle.G.sequence(z, batch.d)
    rows = torch.arange(len(batch))
    fake = seq[rows, batch.a]
    return z, seq, fake, {
        "rec": L.loss_rec(batch.x, seq, batch.mu, c.rec_form).sum(),
        "vox": L.loss_vox(seq, batch.a, c.vox_form).sum(),
        "reg": L.loss_reg(seq, batch.a, batch.d, regions.masks, regions.sizes, regions.table,
                          batch.mean, batch.std, c.reg_form).sum(),
    }


def train_slice_model(bundle: SliceModelBundle, data: SliceData, regions: RegionContext | None,
                      schedule, epochs: int, batch_size: int | None = None, seed: int = 0,
                      active: Sequence[str] = L.LOSS_NAMES) -> tuple[SliceModelBundle, list[dict]]:
    """Alternating updates: discriminators first, then encoder+generator on the weighted total.

    Mutates and returns ``bundle``; the returned history holds one dict of
    per-component epoch means per epoch run here. ``active`` restricts which
    components enter the encoder/generator objective.
    """
    if len(data) == 0:
        raise ValueError("empty training data")
    if regions is None:
        regions = RegionContext.empty(bundle.size, bundle.n_bins)
    bs = batch_size or bundle.config.batch_size
    gen = torch.Generator().manual_seed(int(seed))
    new_history = []
    for _ in range(epochs):
        t = bundle.epoch
        w = schedule.weights(t)
        w = {k: (v if k in active else 0.0) for k, v in w.items()}
        perm = torch.randperm(len(data), generator=gen)
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(data), bs):
            batch = data.subset(perm[start:start + bs])
            z_star = L.sample_prior(len(batch), bundle.latent_dim, gen)
            z, seq, fake, terms = _batch_losses(bundle, batch, regions, z_star)
            d_b, _ = L.adversarial_terms(bundle.Db(batch.x), bundle.Db(fake.detach()))
            d_z, _ = L.adversarial_terms(bundle.Dz(z_star), bundle.Dz(z.detach()))
            bundle.opt_d.zero_grad()
            (d_b + d_z).backward()
            bundle.opt_d.step()

            _, g_b = L.adversarial_terms(bundle.Db(batch.x).detach(), bundle.Db(fake))
            _, e_z = L.adversarial_terms(bundle.Dz(z_star).detach(), bundle.Dz(z))
            terms["b"] = g_b
            terms["z"] = e_z
            total = L.loss_total(terms, w)
            for name, val in [*terms.items(), ("tot", total), ("disc_b", d_b), ("disc_z", d_z)]:
                v = float(val.detach()) if torch.is_tensor(val) else float(val)
                if not math.isfinite(v):
                    raise TrainingDivergence(name, t, v)
                sums[name] = sums.get(name, 0.0) + v
            bundle.opt_eg.zero_grad()
            if torch.is_tensor(total) and total.requires_grad:
                total.backward()
                bundle.opt_eg.step()
            n_batches += 1
        record = {k: v / n_batches for k, v in sums.items()}
        record["epoch"] = t
        new_history.append(record)
        bundle.history.append(record)
        bundle.epoch += 1
    return bundle, new_history


@torch.no_grad()
def evaluate_losses(bundle: SliceModelBundle, data: SliceData, regions: RegionContext | None,
                    weights: dict, seed: int = 0) -> dict:
    """Per-component losses and weighted total over ``data`` (no parameter updates)."""
    if regions is None:
        regions = RegionContext.empty(bundle.size, bundle.n_bins)
    gen = torch.Generator().manual_seed(int(seed))
    z_star = L.sample_prior(len(data), bundle.latent_dim, gen)
    z, seq, fake, terms = _batch_losses(bundle, data, regions, z_star)
    _, terms["b"] = L.adversarial_terms(bundle.Db(data.x), bundle.Db(fake))
    _, terms["z"] = L.adversarial_terms(bundle.Dz(z_star), bundle.Dz(z))
    out = {k: float(v.detach()) for k, v in terms.items()}
    out["tot"] = float(L.loss_total(terms, weights))
    return out


@torch.no_grad()
def generate_sequence(bundle: SliceModelBundle, x, diagnosis) -> np.ndarray:
    """Age-bin sequence for one slice ``(S, S)`` -> ``(A, S, S)``, or a batch ``(B, S, S)`` -> ``(B, A, S, S)``."""
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    single = x.dim() == 2
    if single:
        x = x[None]
    d = torch.as_tensor(np.broadcast_to(np.asarray(diagnosis), (x.shape[0],)).copy(), dtype=torch.long)
    seq = bundle.G.sequence(bundle.E(x), d).double().numpy()
    return seq[0] if single else seq
