"""Profile weight functions: per-epoch loss weights, their grid search, and common initialization.

Each loss weight follows ``f(t) = rho**t * b + (1 - rho**t) * b * v**u``,
starting at ``b`` and relaxing geometrically towards ``b * v**u``.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .core.losses import LOSS_NAMES
from .core.training import (
    ConstantSchedule,
    SliceModelBundle,
    evaluate_losses,
    train_slice_model,
)

logger = logging.getLogger(__name__)

DEFAULT_BASES = {"reg": 1.25, "vox": 1.25, "b": 0.002, "z": 0.05, "rec": 100.0}
DEFAULT_EXPONENTS = {"reg": 1, "vox": 1, "b": 1, "z": 1, "rec": -1}
DEFAULT_RHO = 0.99
DEFAULT_V = 10.0


@dataclass(frozen=True)
class PWFParams:
    bases: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_BASES))
    v: float = DEFAULT_V
    exponents: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_EXPONENTS))
    rho: float = DEFAULT_RHO
    v_override: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.v <= 0 or any(x <= 0 for x in self.v_override.values()):
            raise ValueError("v must be positive")
        for name in LOSS_NAMES:
            if self.bases.get(name, 0) <= 0:
                raise ValueError(f"base weight for {name!r} must be positive")
            if self.exponents.get(name) not in (-1, 1):
                raise ValueError(f"exponent for {name!r} must be -1 or +1")

    def v_for(self, loss: str) -> float:
        return self.v_override.get(loss, self.v)

    def asymptote(self, loss: str) -> float:
        return self.bases[loss] * self.v_for(loss) ** self.exponents[loss]

    def weights(self, t: int) -> dict:
        return {name: pwf_value(self, name, t) for name in LOSS_NAMES}

    def asymptotic_weights(self) -> dict:
        return {name: self.asymptote(name) for name in LOSS_NAMES}

    def to_dict(self) -> dict:
        flat = {"rho": self.rho, "v": self.v}
        for name in LOSS_NAMES:
            flat[f"b_{name}"] = self.bases[name]
            flat[f"u_{name}"] = self.exponents[name]
        for name, val in self.v_override.items():
            flat[f"v_{name}"] = val
        return flat

    @classmethod
    def from_dict(cls, flat: Mapping) -> "PWFParams":
        base = cls()
        bases = {n: float(flat.get(f"b_{n}", base.bases[n])) for n in LOSS_NAMES}
        exps = {n: int(flat.get(f"u_{n}", base.exponents[n])) for n in LOSS_NAMES}
        over = {n: float(flat[f"v_{n}"]) for n in LOSS_NAMES if f"v_{n}" in flat}
        return cls(bases, float(flat.get("v", base.v)), exps, float(flat.get("rho", base.rho)), over)


def pwf_value(params: PWFParams, loss: str, t: int) -> float:
    if t < 0:
        raise ValueError("epoch must be >= 0")
    r = params.rho**t
    b = params.bases[loss]
    return r * b + (1 - r) * b * params.v_for(loss) ** params.exponents[loss]


def constant_schedule(params: PWFParams, at: str = "asymptote") -> ConstantSchedule:
    """Fixed weights taken from the profile's start (``"start"``) or limit (``"asymptote"``)."""
    w = params.weights(0) if at == "start" else params.asymptotic_weights()
    return ConstantSchedule(w)


# --------------------------------------------------------------------------
# grid search


class SearchError(RuntimeError):
    def __init__(self, msg, log):
        super().__init__(msg)
        self.log = log


def expand_grid(grid: Mapping[str, list]) -> list[dict]:
    """Cartesian product of a ``{key: [values]}`` grid, in key-sorted order."""
    keys = sorted(grid)
    if not keys or any(len(grid[k]) == 0 for k in keys):
        raise ValueError("grid must be nonempty")
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def grid_search_pwf(grid: Mapping[str, list], objective: Callable[[PWFParams], float], budget: int,
                    seed: int = 0, base: PWFParams | None = None):
    """Random search without replacement over ``grid``; lower objective wins.

    Each grid point is a partial flat PWF config (``rho``, ``v``, ``b_rec``, ...)
    overlaid on ``base``. Ties go to the first-sampled candidate. Returns
    ``(best params, log)`` where the log lists ``{tuple, score, order}`` records.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    points = expand_grid(grid)
    base_flat = (base or PWFParams()).to_dict()
    order = np.random.default_rng(seed).permutation(len(points))[:budget]
    log, best, best_score = [], None, math.inf
    for k, idx in enumerate(order):
        point = points[int(idx)]
        params = PWFParams.from_dict({**base_flat, **point})
        try:
            score = float(objective(params))
        except Exception as e:  # a diverging candidate is a result, not a crash
            logger.warning("candidate %s failed: %s", point, e)
            score = math.nan
        log.append({"tuple": point, "score": score, "order": k})
        if math.isfinite(score) and score < best_score:
            best, best_score = params, score
    if best is None:
        raise SearchError("every PWF candidate diverged", log)
    return best, log


def write_search_log(log, path: str | Path, epochs: int | None = None) -> None:
    with open(path, "w") as f:
        for rec in log:
            f.write(json.dumps({**rec, "epochs": epochs}) + "\n")


def proxy_objective(train_data, val_data, regions, size, n_bins, train_config, epochs=15,
                    seed=0, score_weights: Mapping[str, float] | None = None):
    """Short proxy training on one slice; score = validation total loss at the final epoch.

    Candidates are scored under one fixed weighting (by default the
    asymptotic weights) so that different profiles stay comparable.
    """
    score_w = dict(score_weights or PWFParams().asymptotic_weights())

    def objective(params: PWFParams) -> float:
        bundle = SliceModelBundle(0, size, n_bins, train_config, seed=seed)
        train_slice_model(bundle, train_data, regions, params, epochs, seed=seed)
        return evaluate_losses(bundle, val_data, regions, score_w, seed=seed)["tot"]

    return objective


DEFAULT_GRID = {
    "rho": [0.9, 0.95, 0.99],
    "v": [5.0, 10.0, 20.0],
    "b_rec": [10.0, 100.0],
    "b_reg": [0.5, 1.25],
}


# --------------------------------------------------------------------------
# common initialization


def common_init(central_data, size, n_bins, train_config, schedule, regions=None, iterations=10, seed=0):
    """Parameters of a bundle pre-trained for ``iterations`` epochs on central-slice data.

    With ``iterations=0`` this is the plain seeded random initialization.
    """
    bundle = SliceModelBundle(0, size, n_bins, train_config, seed=seed)
    if iterations > 0:
        train_slice_model(bundle, central_data, regions, schedule, iterations, seed=seed)
    return bundle.parameters_state()


def bundle_from_init(n, size, n_bins, train_config, init_state=None, seed=0) -> SliceModelBundle:
    bundle = SliceModelBundle(n, size, n_bins, train_config, seed=seed)
    if init_state is not None:
        bundle.load_parameters(init_state)
    return bundle


__all__ = [
    "PWFParams", "pwf_value", "constant_schedule", "grid_search_pwf", "expand_grid", "proxy_objective",
    "common_init", "bundle_from_init", "SearchError", "write_search_log", "DEFAULT_GRID",
]
