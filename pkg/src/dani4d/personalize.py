"""Per-subject fine-tuning of every slice model on that subject's baseline scan."""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

from .core.binning import AgeBinning
from .core.training import RegionContext, SliceData, SliceModelBundle, train_slice_model
from .pwf import PWFParams, constant_schedule

PERSONALIZE_ITERATIONS = 50


class MissingSliceError(KeyError):
    def __init__(self, n: int, scan_id: str):
        super().__init__(f"baseline scan {scan_id} has no slice {n}")
        self.n = n


def bundle_digest(bundle: SliceModelBundle) -> str:
    h = hashlib.sha256()
    for net in bundle.networks().values():
        for k, v in net.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().numpy().tobytes())
    return h.hexdigest()


def fine_tune(bundles: Mapping[int, SliceModelBundle], baseline, binning: AgeBinning,
              regions: Mapping[int, RegionContext] | None = None, pwf: PWFParams | None = None,
              iterations: int = PERSONALIZE_ITERATIONS, seed: int = 0, rec_only: bool = True,
              sr_model=None) -> dict[int, SliceModelBundle]:
    """Copies of ``bundles`` adapted to one subject's baseline ``SliceStack``.

    Each copy runs ``iterations`` single-image updates under the profile's
    asymptotic weights with fresh optimizer state. By default only the
    reconstruction term drives the updates: with one image, the regional and
    adversarial terms pull the progression away from the subject. ``sr_model`` is accepted
    only to check that it comes out untouched. The inputs are never modified.
    """
    for n in bundles:
        if n >= baseline.n_slices:
            raise MissingSliceError(n, baseline.scan_id)
    sr_before = sr_model.parameter_bytes() if sr_model is not None else None
    schedule = constant_schedule(pwf or PWFParams())
    active = ("rec",) if rec_only else ("reg", "vox", "b", "z", "rec")
    out = {}
    for n, bundle in bundles.items():
        tuned = bundle.clone()
        tuned.reset_optimizers()
        if iterations > 0:
            data = SliceData.from_stacks([baseline], n, binning)
            ctx = regions.get(n) if regions is not None else None
            train_slice_model(tuned, data, ctx, schedule, iterations, batch_size=1, seed=seed + n, active=active)
        out[n] = tuned
    if sr_model is not None and sr_model.parameter_bytes() != sr_before:
        raise RuntimeError("super-resolution parameters changed during personalization")
    return out


def personalized_dir(checkpoint: str | Path, subject_id: str) -> Path:
    return Path(checkpoint) / "personalized" / subject_id


def save_personalized(bundles: Mapping[int, SliceModelBundle], checkpoint: str | Path, subject_id: str) -> Path:
    d = personalized_dir(checkpoint, subject_id)
    for n, b in bundles.items():
        b.save(d / f"slice_{n:02d}")
    return d
