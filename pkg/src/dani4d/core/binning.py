from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGMA_MIN = 0.5


@dataclass(frozen=True)
class AgeBinning:
    """Equal-frequency age bins with Gaussian fuzzy membership.

    ``edges`` has ``A + 1`` entries; bin ``i`` covers ``[edges[i], edges[i+1])``
    (the last bin is closed). Indices are 0-based throughout the code.
    """

    centers: tuple[float, ...]
    deltas: tuple[float, ...]
    sigmas: tuple[float, ...]
    edges: tuple[float, ...]

    @property
    def n_bins(self) -> int:
        return len(self.centers)

    def bin_index(self, age: float) -> int:
        inner = np.asarray(self.edges[1:-1])
        return int(np.searchsorted(inner, age, side="right"))

    def membership(self, age: float, i: int) -> float:
        return membership(self, age, i)

    def memberships(self, age: float) -> np.ndarray:
        c = np.asarray(self.centers)
        s = np.asarray(self.sigmas)
        return np.exp(-((age - c) ** 2) / (2 * s**2))

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("centers", "deltas", "sigmas", "edges")}

    @classmethod
    def from_dict(cls, d: dict) -> "AgeBinning":
        return cls(*(tuple(float(v) for v in d[k]) for k in ("centers", "deltas", "sigmas", "edges")))


def build_age_binning(ages, n_bins: int = 10, c_sigma: float = 1.0, sigma_min: float = SIGMA_MIN) -> AgeBinning:
    """Split ``ages`` into ``n_bins`` equal-frequency groups.

    Each bin's center is its members' mean age, ``delta`` the max in-bin age
    difference and ``sigma = max(c_sigma * sqrt(delta), sigma_min)``.
    """
    a = np.sort(np.asarray(ages, dtype=float))
    if n_bins < 2:
        raise ValueError("need at least 2 age bins")
    if a.size < n_bins or a[-1] - a[0] <= 0:
        raise ValueError("ages must span a positive range with at least one sample per bin")
    if c_sigma <= 0:
        raise ValueError("c_sigma must be positive")
    groups = np.array_split(a, n_bins)
    centers = tuple(float(g.mean()) for g in groups)
    deltas = tuple(float(g[-1] - g[0]) for g in groups)
    sigmas = tuple(max(c_sigma * math.sqrt(dl), sigma_min) for dl in deltas)
    inner = [0.5 * (groups[i][-1] + groups[i + 1][0]) for i in range(n_bins - 1)]
    edges = (float(a[0]), *map(float, inner), float(a[-1]))
    return AgeBinning(centers, deltas, sigmas, edges)


def membership(binning: AgeBinning, age: float, i: int) -> float:
    m, s = binning.centers[i], binning.sigmas[i]
    return math.exp(-((age - m) ** 2) / (2 * s * s))
