"""Per-slice region masks from a label atlas, with morphological augmentation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage


def disk(radius: int) -> np.ndarray:
    """4-connected (diamond) structuring element of the given radius."""
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return (np.abs(x) + np.abs(y)) <= r


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    # border_value=0: pixels outside the slice count as background
    return ndimage.binary_erosion(mask, structure=disk(radius), border_value=0)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=disk(radius))


@dataclass
class Region:
    mask: np.ndarray
    label: int
    op: str = "base"  # "base", "erode", "dilate"
    radius: int = 0

    @property
    def size(self) -> int:
        return int(self.mask.sum())


@dataclass
class RegionSet:
    """Region masks keyed by slice index ``n`` (position in the slice stack)."""

    regions: dict[int, list[Region]] = field(default_factory=dict)

    def __getitem__(self, n: int) -> list[Region]:
        return self.regions.get(n, [])

    def count(self, n: int) -> int:
        return len(self[n])

    def sizes(self, n: int) -> np.ndarray:
        return np.array([r.size for r in self[n]], dtype=float)

    def masks(self, n: int) -> np.ndarray:
        """``(R_n, S, S)`` boolean stack (empty first axis if no regions)."""
        regs = self[n]
        if not regs:
            return np.zeros((0, 0, 0), dtype=bool)
        return np.stack([r.mask for r in regs])

    @property
    def slices(self) -> list[int]:
        return sorted(self.regions)

    def stats(self) -> dict:
        counts = [self.count(n) for n in self.slices]
        sizes = [r.size for n in self.slices for r in self[n]]
        return {
            "n_slices": len(counts),
            "total_regions": int(sum(counts)),
            "mean_regions_per_slice": float(np.mean(counts)) if counts else 0.0,
            "mean_region_size": float(np.mean(sizes)) if sizes else 0.0,
        }

    def save(self, directory: str | Path) -> None:
        """One compressed mask stack per slice plus ``index.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        index = {}
        for n in self.slices:
            regs = self[n]
            np.savez_compressed(d / f"slice_{n:03d}.npz", masks=np.packbits(self.masks(n), axis=-1),
                                shape=np.array(regs[0].mask.shape))
            index[str(n)] = [
                {"q": q, "size": r.size, "label": r.label, "op": r.op, "radius": r.radius}
                for q, r in enumerate(regs)
            ]
        (d / "index.json").write_text(json.dumps(index, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "RegionSet":
        d = Path(directory)
        index = json.loads((d / "index.json").read_text())
        regions = {}
        for key, entries in index.items():
            n = int(key)
            with np.load(d / f"slice_{n:03d}.npz") as z:
                shape = tuple(z["shape"])
                masks = np.unpackbits(z["masks"], axis=-1, count=shape[-1]).astype(bool)
            regions[n] = [
                Region(masks[e["q"]], e["label"], e["op"], e["radius"]) for e in entries
            ]
        return cls(regions)


def build_regions(atlas_labels: np.ndarray, slice_positions: Sequence[int]) -> RegionSet:
    """One base mask per label present on each selected axial slice.

    ``atlas_labels`` is an integer ``(x, y, z)`` volume in template space
    (0 = outside). Slice ``n`` of the result is axial plane
    ``slice_positions[n]``.
    """
    lab = np.rint(np.asarray(atlas_labels)).astype(int)
    labels = [int(v) for v in np.unique(lab) if v != 0]
    out = {}
    for n, z in enumerate(slice_positions):
        plane = lab[:, :, int(z)]
        out[n] = [Region(plane == v, v) for v in labels if np.any(plane == v)]
    return RegionSet(out)


def augment_regions(regions: RegionSet, radii: Sequence[int] = (1, 2)) -> RegionSet:
    """Add an eroded and a dilated copy of every base mask for each radius.

    Base masks keep their order at the front of each slice's list; eroded
    variants that vanish are dropped.
    """
    radii = [int(r) for r in radii]
    if any(r < 1 for r in radii):
        raise ValueError(f"radii must be >= 1, got {radii}")
    out = {}
    for n in regions.slices:
        base = [r for r in regions[n] if r.op == "base"]
        extra = []
        for reg in base:
            for rad in radii:
                er = erode(reg.mask, rad)
                if er.any():
                    extra.append(Region(er, reg.label, "erode", rad))
                extra.append(Region(dilate(reg.mask, rad), reg.label, "dilate", rad))
        out[n] = list(base) + extra
    return RegionSet(out)
