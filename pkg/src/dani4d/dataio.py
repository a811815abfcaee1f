"""Phantom cohorts, volume I/O and the preprocessing chain.

Volumes are stored as ``(x, y, z)`` arrays with ``z`` the axial axis, so
axial slice ``k`` of a volume ``v`` is ``v[:, :, k]``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

N_DIAGNOSES = 4
DIAGNOSIS_NAMES = ("CN", "SMC", "LMCI", "AD")
# cohort composition used for phantom diagnosis draws
DIAGNOSIS_FREQUENCIES = (0.28, 0.04, 0.54, 0.14)

MIN_STD = 1e-8


class MetadataError(ValueError):
    """Scan metadata (age, diagnosis, ...) is missing or invalid."""


class VolumeIOError(OSError):
    """A volume file exists but cannot be decoded."""


class PreprocessingError(RuntimeError):
    """A scan failed preprocessing and must be excluded."""


class ConfigurationError(ValueError):
    pass


@dataclass
class VolumeScan:
    subject_id: str
    age: float
    diagnosis: int
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gender: int = 0

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.age = float(self.age)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 8:
            raise MetadataError(f"voxels must be 3D with every axis >= 8, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise MetadataError("voxels contain non-finite values")
        if int(self.diagnosis) != self.diagnosis or not 0 <= self.diagnosis < N_DIAGNOSES:
            raise MetadataError(f"diagnosis must be an integer in 0..3, got {self.diagnosis!r}")
        self.diagnosis = int(self.diagnosis)
        if not (self.age > 0 and math.isfinite(self.age)):
            raise MetadataError(f"age must be positive, got {self.age!r}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise MetadataError(f"spacing must be 3 positive reals, got {self.spacing!r}")
        if self.gender not in (0, 1):
            raise MetadataError(f"gender must be 0 or 1, got {self.gender!r}")

    @property
    def scan_id(self) -> str:
        return f"{self.subject_id}_{self.age:07.3f}"

    def metadata(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "age": self.age,
            "diagnosis": self.diagnosis,
            "gender": self.gender,
            "shape": list(self.voxels.shape),
            "spacing": list(self.spacing),
        }


@dataclass
class SliceStack:
    """The standardized axial slices of one scan.

    ``slices[k] * slice_stds[k] + slice_means[k]`` recovers the
    pre-standardization slice.
    """

    slices: np.ndarray  # (T, S, S)
    slice_means: np.ndarray
    slice_stds: np.ndarray
    positions: np.ndarray
    subject_id: str
    age: float
    diagnosis: int
    gender: int = 0
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float64)
        self.slice_means = np.asarray(self.slice_means, dtype=np.float64)
        self.slice_stds = np.asarray(self.slice_stds, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=int)
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.slices), dtype=bool)
        self.degenerate = np.asarray(self.degenerate, dtype=bool)

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def scan_id(self) -> str:
        return f"{self.subject_id}_{self.age:07.3f}"

    def destandardize(self) -> np.ndarray:
        """Intensity-space slices, ``(T, S, S)``."""
        return self.slices * self.slice_stds[:, None, None] + self.slice_means[:, None, None]

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path,
            slices=self.slices,
            slice_means=self.slice_means,
            slice_stds=self.slice_stds,
            positions=self.positions,
            degenerate=self.degenerate,
            meta=json.dumps(
                {"subject_id": self.subject_id, "age": self.age,
                 "diagnosis": self.diagnosis, "gender": self.gender}
            ),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SliceStack":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            return cls(
                slices=z["slices"], slice_means=z["slice_means"], slice_stds=z["slice_stds"],
                positions=z["positions"], degenerate=z["degenerate"], **meta,
            )


# --------------------------------------------------------------------------
# phantoms


DEFAULT_ATROPHY_RATES = {
    # diagnosis: (ventricle volume growth /yr, grey-tissue intensity decay /yr)
    0: (0.010, 0.004),
    1: (0.012, 0.005),
    2: (0.020, 0.008),
    3: (0.030, 0.012),
}


@dataclass
class PhantomSpec:
    n_subjects: int = 60
    visits_per_subject: int = 4
    age_range: tuple[float, float] = (60.0, 85.0)
    image_side: int = 32
    n_slices: int = 9
    atrophy_rates: dict = field(default_factory=lambda: dict(DEFAULT_ATROPHY_RATES))
    noise_std: float = 0.02
    seed: int = 0
    visit_interval: float = 1.0
    gender_effect: float = 0.05
    subject_jitter: float = 0.15

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigurationError(f"PhantomSpec.{name}: {why}")

        if self.n_subjects < 1:
            bad("n_subjects", "must be >= 1")
        if self.visits_per_subject < 1:
            bad("visits_per_subject", "must be >= 1")
        lo, hi = self.age_range
        if not 0 < lo < hi:
            bad("age_range", f"need 0 < lo < hi, got {self.age_range}")
        if self.image_side < 16:
            bad("image_side", "must be >= 16")
        if self.n_slices < 1:
            bad("n_slices", "must be >= 1")
        if self.noise_std < 0:
            bad("noise_std", "must be >= 0")
        if self.visit_interval <= 0:
            bad("visit_interval", "must be > 0")
        if not 0 <= self.subject_jitter < 0.5:
            bad("subject_jitter", "must be in [0, 0.5)")
        for d in range(N_DIAGNOSES):
            if d not in self.atrophy_rates:
                bad("atrophy_rates", f"missing diagnosis {d}")
            g, k = self.atrophy_rates[d]
            if g < 0 or k < 0:
                bad("atrophy_rates", f"rates must be >= 0 (diagnosis {d})")
            followup = self.visit_interval * (self.visits_per_subject - 1)
            if (1 - k * (hi - lo)) * (1 - k * followup) <= 0.1:
                bad("atrophy_rates", f"intensity decay for diagnosis {d} exhausts tissue within the age span")
            worst = (1 + self.subject_jitter) * (1 + max(self.gender_effect, 0.0)) \
                * (1 + g * (hi - lo)) * (1 + g * followup)
            if worst > _geometry(self.image_side).max_ventricle_area_factor:
                bad("atrophy_rates", f"ventricle growth for diagnosis {d} overflows the white matter")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "atrophy_rates" in d:
            d["atrophy_rates"] = {int(k): tuple(v) for k, v in d["atrophy_rates"].items()}
        if "age_range" in d:
            d["age_range"] = tuple(d["age_range"])
        return cls(**d)


# tissue intensities of the phantom (arbitrary units)
SKULL_LEVEL = 0.4
CSF_LEVEL = 0.15
WM_LEVEL = 1.0
GM_LEVEL = 0.7

LABEL_VENTRICLE, LABEL_INNER, LABEL_RIM, LABEL_SHELL = 1, 2, 3, 4
LABEL_NAMES = {LABEL_VENTRICLE: "ventricle", LABEL_INNER: "inner_tissue",
               LABEL_RIM: "cortical_rim", LABEL_SHELL: "shell"}


def _ellipsoid_occupancy(shape, center, semi, supersample=3) -> np.ndarray:
    """Fraction of each voxel inside an axis-aligned ellipsoid."""
    k = supersample
    offs = (np.arange(k) + 0.5) / k - 0.5
    occ = np.zeros(shape)
    grids = [np.arange(n, dtype=float) for n in shape]
    # loop over sub-voxel offsets so memory stays O(volume)
    for ox in offs:
        qx = ((grids[0] + ox - center[0]) / semi[0]) ** 2
        for oy in offs:
            qy = ((grids[1] + oy - center[1]) / semi[1]) ** 2
            qxy = qx[:, None] + qy[None, :]
            for oz in offs:
                qz = ((grids[2] + oz - center[2]) / semi[2]) ** 2
                occ += (qxy[:, :, None] + qz[None, None, :]) <= 1.0
    return occ / k**3


def _ellipse_occupancy_2d(shape2, center2, semi2, supersample=32) -> np.ndarray:
    k = supersample
    offs = (np.arange(k) + 0.5) / k - 0.5
    x = (np.arange(shape2[0])[:, None] + offs[None, :]).ravel()
    y = (np.arange(shape2[1])[:, None] + offs[None, :]).ravel()
    inside = ((x[:, None] - center2[0]) / semi2[0]) ** 2 + ((y[None, :] - center2[1]) / semi2[1]) ** 2 <= 1
    return inside.reshape(shape2[0], k, shape2[1], k).mean(axis=(1, 3))


class _PhantomGeometry:
    """Static nested-ellipsoid layout of the phantom head for one image side."""

    def __init__(self, side: int):
        s = float(side)
        self.shape = (side, side, side)
        self.center = ((side - 1) / 2.0,) * 3
        self.head_semi = (0.44 * s, 0.47 * s, 0.44 * s)
        self.brain_semi = (0.37 * s, 0.41 * s, 0.37 * s)
        shell, rim = max(1.0, 0.06 * s), max(1.5, 0.10 * s)
        self.shell_semi = tuple(a - shell for a in self.brain_semi)
        self.wm_semi = tuple(a - shell - rim for a in self.brain_semi)
        self.vent_semi = (0.065 * s, 0.10 * s)
        half = max(1, int(round(0.12 * s)))
        mid = side // 2
        self.vent_z = (mid - half, mid + half)  # [z0, z1), whole voxels
        self.head = _ellipsoid_occupancy(self.shape, self.center, self.head_semi)
        self.brain = _ellipsoid_occupancy(self.shape, self.center, self.brain_semi)
        self.shell = _ellipsoid_occupancy(self.shape, self.center, self.shell_semi)
        self.wm = _ellipsoid_occupancy(self.shape, self.center, self.wm_semi)
        self.brain_mask = self.brain >= 0.5

    @property
    def max_ventricle_area_factor(self) -> float:
        """Largest ventricle area factor that keeps it one voxel inside the white matter."""
        z0, z1 = self.vent_z
        dz = max(abs(z0 - self.center[2]), abs(z1 - 1 - self.center[2])) + 0.5
        shrink = math.sqrt(max(0.0, 1 - (dz / self.wm_semi[2]) ** 2))
        room = min((self.wm_semi[0] * shrink - 1) / self.vent_semi[0],
                   (self.wm_semi[1] * shrink - 1) / self.vent_semi[1])
        return room**2

    @property
    def brain_volume(self) -> float:
        a, b, c = self.brain_semi
        return 4.0 / 3.0 * math.pi * a * b * c

    def ventricle_occupancy(self, area_factor: float) -> np.ndarray:
        scale = math.sqrt(area_factor)
        semi2 = (self.vent_semi[0] * scale, self.vent_semi[1] * scale)
        plane = _ellipse_occupancy_2d(self.shape[:2], self.center[:2], semi2)
        occ = np.zeros(self.shape)
        z0, z1 = self.vent_z
        occ[:, :, z0:z1] = plane[:, :, None]
        return occ

    def ventricle_volume(self, area_factor: float) -> float:
        a, b = self.vent_semi
        z0, z1 = self.vent_z
        return math.pi * a * b * area_factor * (z1 - z0)

    def render(self, area_factor: float, grey: float, with_skull: bool = True) -> np.ndarray:
        vent = self.ventricle_occupancy(area_factor)
        img = grey * (self.brain - self.wm) + WM_LEVEL * (self.wm - vent) + CSF_LEVEL * vent
        if with_skull:
            img = img + SKULL_LEVEL * (self.head - self.brain)
        return img

    def labels(self) -> np.ndarray:
        vent = self.ventricle_occupancy(1.0)
        parts = np.stack([vent, self.wm - vent, self.shell - self.wm, self.brain - self.shell])
        lab = np.argmax(parts, axis=0) + 1
        lab[~self.brain_mask] = 0
        return lab.astype(np.int16)


_GEOMETRY_CACHE: dict[int, _PhantomGeometry] = {}


def _geometry(side: int) -> _PhantomGeometry:
    if side not in _GEOMETRY_CACHE:
        _GEOMETRY_CACHE[side] = _PhantomGeometry(side)
    return _GEOMETRY_CACHE[side]


@dataclass
class PhantomScan:
    scan: VolumeScan
    truth: dict


def ventricle_area_factor(rates, baseline_age, age, age_lo, subject_scale=1.0, gender_factor=1.0):
    """Ventricle size relative to the template, linear in elapsed time from baseline."""
    g = rates[0]
    return subject_scale * gender_factor * (1 + g * (baseline_age - age_lo)) * (1 + g * (age - baseline_age))


def tissue_intensity(rates, baseline_age, age, age_lo, subject_scale=1.0):
    k = rates[1]
    return GM_LEVEL * subject_scale * (1 - k * (baseline_age - age_lo)) * (1 - k * (age - baseline_age))


def generate_phantom_cohort(spec: PhantomSpec) -> list[PhantomScan]:
    """Procedurally generate a longitudinal cohort with known atrophy.

    Each subject gets a ventricle that grows linearly (in volume) and grey
    tissue whose intensity decays linearly with time since baseline, at the
    rates of its diagnosis. Scans are pre-aligned to the template geometry.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    geo = _geometry(spec.image_side)
    lo, hi = spec.age_range
    out = []
    for p in range(spec.n_subjects):
        sid = f"sub{p:04d}"
        diagnosis = int(rng.choice(N_DIAGNOSES, p=DIAGNOSIS_FREQUENCIES))
        gender = int(rng.integers(0, 2))
        baseline = float(np.round(rng.uniform(lo, hi), 2))
        j = spec.subject_jitter
        vent_scale = float(rng.uniform(1 - j, 1 + j))
        grey_scale = float(rng.uniform(1 - j / 3, 1 + j / 3))
        rates = spec.atrophy_rates[diagnosis]
        gfac = 1.0 + spec.gender_effect * gender
        for v in range(spec.visits_per_subject):
            age = baseline + v * spec.visit_interval
            area = ventricle_area_factor(rates, baseline, age, lo, vent_scale, gfac)
            grey = tissue_intensity(rates, baseline, age, lo, grey_scale)
            vox = geo.render(area, grey)
            if spec.noise_std > 0:
                vox = vox + rng.normal(0.0, spec.noise_std, size=vox.shape)
            scan = VolumeScan(sid, age, diagnosis, vox, gender=gender)
            truth = {
                "ventricle_volume": geo.ventricle_volume(area),
                "brain_volume": geo.brain_volume,
                "brain_mask_volume": float(geo.brain_mask.sum()),
                "tissue_intensity": grey,
                "ventricle_area_factor": area,
                "baseline_age": baseline,
            }
            out.append(PhantomScan(scan, truth))
    return out


def phantom_template(spec: PhantomSpec) -> VolumeScan:
    """Noise-free reference head (skull included) in template space."""
    geo = _geometry(spec.image_side)
    return VolumeScan("template", float(np.mean(spec.age_range)), 0, geo.render(1.0, GM_LEVEL))


def phantom_brain_mask(spec: PhantomSpec) -> np.ndarray:
    return _geometry(spec.image_side).brain_mask.copy()


def phantom_atlas(spec: PhantomSpec) -> VolumeScan:
    """Integer label volume aligned with :func:`phantom_template`."""
    geo = _geometry(spec.image_side)
    return VolumeScan("atlas", float(np.mean(spec.age_range)), 0, geo.labels().astype(float))


def phantom_geometry(spec: PhantomSpec) -> _PhantomGeometry:
    return _geometry(spec.image_side)


# --------------------------------------------------------------------------
# volume files


def _stem(path: Path) -> Path:
    name = path.name
    for suf in (".nii.gz", ".nii", ".raw"):
        if name.endswith(suf):
            return path.with_name(name[: -len(suf)])
    return path.with_suffix("")


def sidecar_path(path: str | Path) -> Path:
    return _stem(Path(path)).with_suffix(".json")


def write_array(voxels: np.ndarray, path: str | Path, meta: dict, spacing=(1.0, 1.0, 1.0)) -> Path:
    """Write a 3D array as NIfTI-1 (``.nii``/``.nii.gz``) or raw float32 (``.raw``) plus JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    voxels = np.asarray(voxels)
    meta = {**meta, "shape": list(voxels.shape), "spacing": [float(z) for z in spacing]}
    if path.name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        affine = np.diag(list(spacing) + [1.0])
        nib.save(nib.Nifti1Image(voxels.astype(np.float32), affine), str(path))
    elif path.suffix == ".raw":
        voxels.astype("<f4").tofile(path)
    else:
        raise ValueError(f"unsupported volume extension: {path.name}")
    sidecar_path(path).write_text(json.dumps(meta, indent=1))
    return path


def write_volume(scan: VolumeScan, path: str | Path) -> Path:
    return write_array(scan.voxels, path, scan.metadata(), scan.spacing)


def _read_sidecar(path: Path) -> dict:
    sc = sidecar_path(path)
    if not sc.exists():
        return {}
    try:
        return json.loads(sc.read_text())
    except json.JSONDecodeError as e:
        raise MetadataError(f"{sc}: invalid JSON sidecar ({e})") from e


def read_array(path: str | Path) -> tuple[np.ndarray, dict]:
    """Voxels and sidecar metadata (``spacing`` filled from the header when absent)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume: {path}")
    meta = _read_sidecar(path)
    if path.name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        try:
            img = nib.load(str(path))
            vox = np.asarray(img.get_fdata(), dtype=np.float64)
        except Exception as e:  # nibabel raises a zoo of types on corrupt input
            raise VolumeIOError(f"{path}: cannot read NIfTI ({e})") from e
        meta.setdefault("spacing", [float(z) for z in img.header.get_zooms()[:3]])
    elif path.suffix == ".raw":
        if "shape" not in meta:
            raise MetadataError(f"{path}: raw volume needs 'shape' in sidecar")
        try:
            vox = np.fromfile(path, dtype="<f4").astype(np.float64).reshape(meta["shape"])
        except ValueError as e:
            raise VolumeIOError(f"{path}: size does not match sidecar shape {meta['shape']}") from e
        meta.setdefault("spacing", [1.0, 1.0, 1.0])
    else:
        raise VolumeIOError(f"unsupported volume format: {path.name}")
    return vox, meta


def ingest_volume(path: str | Path) -> VolumeScan:
    path = Path(path)
    vox, meta = read_array(path)
    for key in ("age", "diagnosis"):
        if key not in meta:
            raise MetadataError(f"{path}: missing '{key}' metadata")
    subject = meta.get("subject_id", _stem(path).name)
    return VolumeScan(subject, meta["age"], meta["diagnosis"], vox, meta["spacing"], int(meta.get("gender", 0)))


# --------------------------------------------------------------------------
# cohort manifest (JSON lines)


def write_manifest(records: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# --------------------------------------------------------------------------
# preprocessing


@dataclass
class Alignment:
    """Maps template coordinates to scan coordinates: ``x_scan = scale * (x_t - c_t) + c_s``."""

    scale: float
    template_center: np.ndarray
    scan_center: np.ndarray

    @property
    def is_identity(self) -> bool:
        return abs(self.scale - 1.0) < 1e-9 and np.allclose(self.template_center, self.scan_center, atol=1e-9)


def _moments(vol: np.ndarray, thresh: float):
    mask = vol > thresh
    if mask.sum() < 4:
        raise PreprocessingError("too few foreground voxels to align")
    coords = np.argwhere(mask).astype(float)
    c = coords.mean(axis=0)
    spread = ((coords - c) ** 2).sum(axis=1).mean()
    return c, spread


# sub-voxel corrections below these are treated as already aligned
SNAP_SCALE = 0.01
SNAP_SHIFT = 0.25


def fit_alignment(scan: VolumeScan, template: VolumeScan) -> Alignment:
    """Least-squares centroid + isotropic scale fit between foreground masks.

    Foreground is everything above 10% of the template's 99th percentile.
    Fits within ``SNAP_SCALE``/``SNAP_SHIFT`` of the identity snap to it.
    """
    t = template.voxels
    thresh = 0.1 * float(np.percentile(t, 99))
    ct, st = _moments(t, thresh)
    cs, ss = _moments(scan.voxels, thresh)
    scale = float(np.sqrt(ss / st))
    if abs(scale - 1.0) < SNAP_SCALE and np.all(np.abs(cs - ct) < SNAP_SHIFT):
        return Alignment(1.0, ct, ct.copy())
    return Alignment(scale, ct, cs)


def apply_alignment(vol: np.ndarray, align: Alignment, out_shape) -> np.ndarray:
    if not (np.isfinite(align.scale) and align.scale > 0 and np.all(np.isfinite(align.scan_center))):
        raise PreprocessingError(f"non-finite alignment transform: {align}")
    if align.is_identity and vol.shape == tuple(out_shape):
        return vol.copy()
    matrix = np.eye(3) * align.scale
    offset = align.scan_center - align.scale * align.template_center
    return ndimage.affine_transform(vol, matrix, offset=offset, output_shape=out_shape, order=1)


def standardize_slice(sl: np.ndarray) -> tuple[np.ndarray, float, float, bool]:
    """Zero-mean unit-std slice; constant slices come back as zeros with std 1."""
    mean = float(sl.mean())
    std = float(sl.std())
    if std < MIN_STD:
        return np.zeros_like(sl, dtype=np.float64), mean, 1.0, True
    return (sl - mean) / std, mean, std, False


def slice_positions(brain_mask: np.ndarray, n_slices: int) -> np.ndarray:
    """``n_slices`` evenly spaced axial indices spanning the mask's axial extent."""
    zs = np.flatnonzero(brain_mask.any(axis=(0, 1)))
    if zs.size == 0:
        raise PreprocessingError("empty brain mask")
    return np.round(np.linspace(zs[0], zs[-1], n_slices)).astype(int)


def template_brain_mask(template: VolumeScan) -> np.ndarray:
    """Fallback mask for skull-stripped templates: every nonzero voxel."""
    return template.voxels != 0


def preprocess(
    scan: VolumeScan,
    template: VolumeScan,
    n_slices: int = 9,
    positions: Sequence[int] | None = None,
    brain_mask: np.ndarray | None = None,
) -> SliceStack:
    """Align, skull-strip, extract axial slices and standardize each slice."""
    mask = template_brain_mask(template) if brain_mask is None else np.asarray(brain_mask, bool)
    if positions is None:
        positions = slice_positions(mask, n_slices)
    positions = np.asarray(positions, dtype=int)
    try:
        align = fit_alignment(scan, template)
        aligned = apply_alignment(scan.voxels, align, template.voxels.shape)
    except (PreprocessingError, ValueError, FloatingPointError) as e:
        raise PreprocessingError(f"{scan.scan_id}: alignment failed ({e})") from e
    if not np.all(np.isfinite(aligned)):
        raise PreprocessingError(f"{scan.scan_id}: alignment produced non-finite voxels")
    stripped = aligned * mask
    out, means, stds, degen = [], [], [], []
    for z in positions:
        s, m, sd, dg = standardize_slice(stripped[:, :, z])
        out.append(s)
        means.append(m)
        stds.append(sd)
        degen.append(dg)
    return SliceStack(np.stack(out), means, stds, positions, scan.subject_id, scan.age,
                      scan.diagnosis, scan.gender, np.array(degen))


def preprocess_cohort(scans, template, n_slices=9, positions=None):
    """Preprocess many scans; failures are logged and excluded."""
    stacks, failed = [], []
    for s in scans:
        try:
            stacks.append(preprocess(s, template, n_slices, positions))
        except PreprocessingError as e:
            logger.warning("excluding scan: %s", e)
            failed.append(s.scan_id)
    return stacks, failed


# --------------------------------------------------------------------------
# cohort splits


def _subject_ages(cohort) -> dict[str, list[float]]:
    ages: dict[str, list[float]] = {}
    for item in cohort:
        sid, age = _sid_age(item)
        ages.setdefault(sid, []).append(age)
    return ages


def _sid_age(item):
    if isinstance(item, PhantomScan):
        item = item.scan
    if isinstance(item, dict):
        return item["subject_id"], float(item["age"])
    return item.subject_id, float(item.age)


def split_cohort(cohort, ratios=(0.72, 0.14, 0.14), seed=0, min_followup=2.0):
    """Subject-level train/val/test split.

    Test subjects are drawn only from subjects with a visit at least
    ``min_followup`` years after their baseline.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigurationError(f"ratios must be 3 non-negative numbers summing to 1, got {ratios}")
    ages = _subject_ages(cohort)
    subjects = sorted(ages)
    n = len(subjects)
    if n < 3:
        raise ConfigurationError(f"need >= 3 subjects to split, got {n}")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(n)]
    n_test = int(round(ratios[2] * n))
    n_val = int(round(ratios[1] * n))
    eligible = [s for s in order if max(ages[s]) - min(ages[s]) >= min_followup - 1e-9]
    if n_test > 0 and not eligible:
        raise ConfigurationError(f"no subject has a follow-up >= {min_followup} years after baseline")
    if len(eligible) < n_test:
        logger.warning("only %d eligible test subjects (wanted %d)", len(eligible), n_test)
    test = eligible[:n_test]
    rest = [s for s in order if s not in set(test)]
    val = rest[:n_val]
    train = rest[n_val:]
    return sorted(train), sorted(val), sorted(test)
