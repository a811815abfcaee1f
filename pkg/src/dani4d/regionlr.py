"""Per-slice, per-region logistic regressors of regional intensity change.

Each regressor maps (baseline age ``o``, follow-up age ``a``, diagnosis
``d``) to the expected ratio of regional intensity sums between the two
ages. The prediction is

    r_max * sigmoid(logit(1 / r_max) + (a - o) * min(0, beta_d + beta_age * (o - age_center) / age_scale))

so it is exactly 1 when no time elapses and saturates at ``r_max``. The
rate is capped at zero because the monotone filter only ever yields
non-increasing training series.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import least_squares

from .dataio import N_DIAGNOSES

logger = logging.getLogger(__name__)

EPSILON = 0.1
R_MAX = 1.2
MIN_SAMPLES = 5


def region_ratio(earlier, later, mask, brain_mask=None, eps: float = EPSILON) -> float:
    """(sum of ``later`` in region + eps) / (sum of ``earlier`` in region + eps).

    Sums run over region voxels inside ``brain_mask`` (all voxels if None).
    """
    earlier = np.asarray(earlier, dtype=float)
    later = np.asarray(later, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if earlier.shape != later.shape or earlier.shape != mask.shape:
        raise ValueError(f"shape mismatch: {earlier.shape}, {later.shape}, mask {mask.shape}")
    if brain_mask is not None:
        mask = mask & np.asarray(brain_mask, dtype=bool)
    return float((later[mask].sum() + eps) / (earlier[mask].sum() + eps))


def monotonic_filter(series: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Keep a point only if its intensity does not exceed the last kept one."""
    out: list[tuple[float, float]] = []
    for age, value in series:
        if not out or value <= out[-1][1]:
            out.append((age, value))
    return out


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


@dataclass
class RegionLR:
    n: int
    q: int
    coef: np.ndarray = field(default_factory=lambda: np.zeros(N_DIAGNOSES + 1))
    r_max: float = R_MAX
    age_center: float = 75.0
    age_scale: float = 10.0
    fallback: bool = False
    n_samples: int = 0

    def score(self, o, a, d):
        o = np.asarray(o, dtype=float)
        a = np.asarray(a, dtype=float)
        d = np.asarray(d, dtype=int)
        slope = self.coef[d] + self.coef[N_DIAGNOSES] * (o - self.age_center) / self.age_scale
        return (a - o) * np.minimum(slope, 0.0)

    def predict(self, o, a, d):
        if self.fallback:
            return np.ones(np.broadcast(np.asarray(o), np.asarray(a), np.asarray(d)).shape)
        z = _logit(1.0 / self.r_max) + self.score(o, a, d)
        return self.r_max / (1.0 + np.exp(-z))

    def to_dict(self) -> dict:
        return {"n": self.n, "q": self.q, "coef": [float(c) for c in self.coef], "r_max": self.r_max,
                "age_center": self.age_center, "age_scale": self.age_scale,
                "fallback": self.fallback, "n_samples": self.n_samples}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionLR":
        d = dict(d)
        d["coef"] = np.asarray(d["coef"], dtype=float)
        return cls(**d)


def fit_logistic_ratio(o, a, d, y, r_max=R_MAX, age_center=75.0, age_scale=10.0, ridge=1e-6):
    """Least-squares fit of the anchored logistic ratio law; returns the coefficient vector."""
    o, a, y = (np.asarray(v, dtype=float) for v in (o, a, y))
    d = np.asarray(d, dtype=int)
    y = np.clip(y, 1e-6, r_max * (1 - 1e-6))
    probe = RegionLR(0, 0, np.zeros(N_DIAGNOSES + 1), r_max, age_center, age_scale)
    present = np.zeros(N_DIAGNOSES + 1, dtype=bool)
    present[np.unique(d)] = True
    present[N_DIAGNOSES] = True

    def residuals(theta):
        probe.coef = np.zeros(N_DIAGNOSES + 1)
        probe.coef[present] = theta
        return np.concatenate([probe.predict(o, a, d) - y, math.sqrt(ridge) * theta])

    start = np.where(np.arange(N_DIAGNOSES + 1)[present] < N_DIAGNOSES, -1e-2, 0.0)
    sol = least_squares(residuals, start, method="lm" if len(y) > present.sum() else "trf")
    coef = np.zeros(N_DIAGNOSES + 1)
    coef[present] = sol.x
    # diagnoses absent from training borrow the mean effect of those seen
    seen = present[:N_DIAGNOSES]
    coef[:N_DIAGNOSES][~seen] = coef[:N_DIAGNOSES][seen].mean()
    return coef


@dataclass
class LRBank:
    models: dict[tuple[int, int], RegionLR] = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def get(self, n: int, q: int) -> RegionLR:
        m = self.models.get((n, q))
        if m is None:
            logger.warning("no regressor for slice %d region %d; using identity", n, q)
            return RegionLR(n, q, fallback=True)
        return m

    def table(self, n: int, n_regions: int, bin_centers: Sequence[float]) -> np.ndarray:
        """``P[q, i, j, d] = LR_{n,q}(m_i, m_j, d)`` for all bin pairs and diagnoses."""
        m = np.asarray(bin_centers, dtype=float)
        A = len(m)
        oi, aj, dd = np.meshgrid(m, m, np.arange(N_DIAGNOSES), indexing="ij")
        out = np.ones((n_regions, A, A, N_DIAGNOSES))
        for q in range(n_regions):
            out[q] = self.get(n, q).predict(oi, aj, dd)
        return out

    def save(self, path: str | Path) -> None:
        payload = {f"{n},{q}": m.to_dict() for (n, q), m in sorted(self.models.items())}
        Path(path).write_text(json.dumps({"models": payload, "report": self.report}, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "LRBank":
        raw = json.loads(Path(path).read_text())
        models = {}
        for key, d in raw["models"].items():
            n, q = (int(v) for v in key.split(","))
            models[(n, q)] = RegionLR.from_dict(d)
        return cls(models, raw.get("report", {}))


def ratio_samples(series_by_subject, eps=EPSILON):
    """Pairwise (o, a, d, ratio) samples from monotone-filtered regional series.

    ``series_by_subject`` maps subject -> (diagnosis, [(age, regional sum), ...]).
    Every kept age also contributes an (o, o, d) -> 1 anchor.
    """
    o, a, d, y = [], [], [], []
    for diag, series in series_by_subject.values():
        kept = monotonic_filter(sorted(series))
        for i, (ai, si) in enumerate(kept):
            o.append(ai); a.append(ai); d.append(diag); y.append(1.0)
            for aj, sj in kept[i + 1:]:
                o.append(ai); a.append(aj); d.append(diag); y.append((sj + eps) / (si + eps))
    return np.array(o), np.array(a), np.array(d, dtype=int), np.array(y)


def fit_region_lrs(stacks_by_subject, regions, brain_mask_slices=None, eps=EPSILON,
                   min_samples=MIN_SAMPLES, r_max=R_MAX) -> LRBank:
    """Fit one regressor per (slice, region) from training slice stacks.

    ``stacks_by_subject`` maps subject id -> list of :class:`SliceStack`.
    ``brain_mask_slices`` is an optional ``(T, S, S)`` mask restricting the
    regional sums. Regions with fewer than ``min_samples`` non-anchor ratio
    samples get the identity fallback.
    """
    all_ages = [s.age for stacks in stacks_by_subject.values() for s in stacks]
    center = float(np.mean(all_ages)) if all_ages else 75.0
    scale = float(max(np.ptp(all_ages), 1.0)) if all_ages else 10.0
    intens = {sid: [(s.age, s.diagnosis, s.destandardize()) for s in sorted(stacks, key=lambda s: s.age)]
              for sid, stacks in stacks_by_subject.items()}
    bank = LRBank(report={"underfit": [], "fitted": 0})
    for n in regions.slices:
        masks = regions.masks(n)
        if brain_mask_slices is not None:
            masks = masks & np.asarray(brain_mask_slices[n], dtype=bool)[None]
        for q in range(len(masks)):
            series = {}
            for sid, visits in intens.items():
                series[sid] = (visits[0][1], [(age, float(img[n][masks[q]].sum())) for age, _, img in visits])
            o, a, d, y = ratio_samples(series, eps)
            n_real = int(np.sum(o != a))
            if n_real < min_samples:
                bank.models[(n, q)] = RegionLR(n, q, r_max=r_max, age_center=center, age_scale=scale,
                                               fallback=True, n_samples=n_real)
                bank.report["underfit"].append([n, q, n_real])
                continue
            coef = fit_logistic_ratio(o, a, d, y, r_max, center, scale)
            bank.models[(n, q)] = RegionLR(n, q, coef, r_max, center, scale, False, n_real)
            bank.report["fitted"] += 1
    return bank


def group_by_subject(stacks: Iterable) -> dict[str, list]:
    out: dict[str, list] = {}
    for s in stacks:
        out.setdefault(s.subject_id, []).append(s)
    return out
