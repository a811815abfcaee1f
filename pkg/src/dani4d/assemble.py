"""From per-slice generated sequences to volumes, and from age bins to arbitrary ages.

A sequence for slice ``n`` is ``(A, S, S)``; stacking ``T`` of them yields
``(A, S, S, T)``, i.e. ``A`` volumes laid out ``(x, y, z)`` like every other
volume in the package.
"""
from __future__ import annotations

import json
import warnings
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import read_array, write_array

SMOOTH_SIGMA = 1.5
SMOOTH_WINDOW = 2


class MissingSliceError(KeyError):
    def __init__(self, n: int):
        super().__init__(f"no generated sequence for slice {n}")
        self.n = n


def gaussian_weights(n_slices: int, sigma: float = SMOOTH_SIGMA, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """``(T, T)`` matrix whose row ``n`` holds the normalized weights of slices ``n-window..n+window``.

    Neighbours outside the volume are dropped and the remaining weights
    renormalized, so every row sums to one.
    """
    if sigma <= 0 or window < 0:
        raise ValueError("sigma must be positive and window non-negative")
    idx = np.arange(n_slices)
    k = idx[None, :] - idx[:, None]
    w = np.where(np.abs(k) <= window, np.exp(-(k.astype(float) ** 2) / (2 * sigma**2)), 0.0)
    return w / w.sum(axis=1, keepdims=True)


def _as_list(sequences, n_slices: int | None):
    if isinstance(sequences, Mapping):
        T = n_slices if n_slices is not None else (max(sequences) + 1 if sequences else 0)
        missing = [n for n in range(T) if n not in sequences]
        if missing:
            raise MissingSliceError(missing[0])
        return [np.asarray(sequences[n], dtype=float) for n in range(T)]
    seqs = [None if s is None else np.asarray(s, dtype=float) for s in sequences]
    for n, s in enumerate(seqs):
        if s is None:
            raise MissingSliceError(n)
    return seqs


def stack_and_smooth(sequences, slice_means=None, slice_stds=None, sigma: float = SMOOTH_SIGMA,
                     window: int = SMOOTH_WINDOW, smooth: bool = True, n_slices: int | None = None) -> np.ndarray:
    """Stack ``T`` per-slice sequences into ``(A, S, S, T)`` volumes.

    ``sequences`` is a list indexed by slice, or a ``{n: sequence}`` mapping
    (then ``n_slices`` fixes T). Each output slice is the Gaussian-weighted
    mean of its generated neighbours, then mapped back to intensities with
    the stored per-slice mean and std. ``smooth=False`` skips the averaging.
    """
    seqs = _as_list(sequences, n_slices)
    if not seqs:
        raise ValueError("no slice sequences")
    shape = seqs[0].shape
    for n, s in enumerate(seqs):
        if s.shape != shape:
            raise ValueError(f"slice {n} sequence has shape {s.shape}, expected {shape}")
    stack = np.stack(seqs, axis=-1)  # (A, S, S, T)
    T = stack.shape[-1]
    if smooth:
        stack = stack @ gaussian_weights(T, sigma, window).T
    if slice_means is not None:
        m = np.asarray(slice_means, dtype=float)
        s = np.ones(T) if slice_stds is None else np.asarray(slice_stds, dtype=float)
        if m.shape != (T,) or s.shape != (T,):
            raise ValueError("slice_means/slice_stds must have one entry per slice")
        stack = stack * s + m
    return stack


def interpolate_age(volumes, centers: Sequence[float], age: float) -> np.ndarray:
    """Linear interpolation between the two bin volumes bracketing ``age``.

    Ages outside ``[centers[0], centers[-1]]`` are clamped with a warning.
    """
    Y = np.asarray(volumes, dtype=float)
    c = np.asarray(centers, dtype=float)
    if Y.shape[0] != c.size or c.size == 0:
        raise ValueError("need one volume per bin center")
    if np.any(np.diff(c) <= 0):
        raise ValueError("bin centers must be strictly increasing")
    if age < c[0] or age > c[-1]:
        warnings.warn(f"age {age} outside [{c[0]:.3f}, {c[-1]:.3f}]; clamped", stacklevel=2)
        age = float(np.clip(age, c[0], c[-1]))
    i = int(np.searchsorted(c, age, side="right")) - 1
    if i >= c.size - 1:
        return Y[-1].copy()
    lo, hi = c[i], c[i + 1]
    if age == lo:
        return Y[i].copy()
    return ((hi - age) * Y[i] + (age - lo) * Y[i + 1]) / (hi - lo)


def write_series(volumes, centers, out_dir: str | Path, subject_id: str, diagnosis: int,
                 gender: int = 0, suffix: str = ".nii.gz", extra: dict | None = None) -> Path:
    """One file per age bin plus ``series.json`` listing them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (vol, age) in enumerate(zip(volumes, centers)):
        meta = {"subject_id": subject_id, "age": float(age), "diagnosis": int(diagnosis), "gender": int(gender)}
        path = write_array(vol, out / f"{subject_id}_bin{i:02d}{suffix}", meta)
        files.append({"bin": i, "age": float(age), "file": path.name})
    manifest = {"subject_id": subject_id, "diagnosis": int(diagnosis), "gender": int(gender),
                "volumes": files, **(extra or {})}
    path = out / "series.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_series(out_dir: str | Path) -> tuple[np.ndarray, tuple[float, ...]]:
    """Volumes ``(A, ...)`` and ages written by :func:`write_series`."""
    out = Path(out_dir)
    path = out / "series.json"
    if not path.exists():
        raise FileNotFoundError(f"no prediction series at {path}")
    man = json.loads(path.read_text())
    vols = [read_array(out / v["file"])[0] for v in man["volumes"]]
    return np.stack(vols), tuple(float(v["age"]) for v in man["volumes"])
