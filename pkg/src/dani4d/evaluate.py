"""Regional volumetry, error reports, regression baselines and ablation bookkeeping.

Volumes are expressed as a percentage of the total brain volume. A region
may carry two reference intensities (its own pure tissue and the tissue it
displaces) so that partial-volume voxels count fractionally.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage

from .assemble import interpolate_age
from .dataio import CSF_LEVEL, LABEL_INNER, LABEL_RIM, LABEL_SHELL, LABEL_VENTRICLE, WM_LEVEL

logger = logging.getLogger(__name__)

VOLUME_MODES = ("binary", "weighted")
FEATURES = ("age", "gender", "diagnosis")
SVR_C = 10.0
SVR_COEF0 = 0.0
TRIM_FRACTION = 0.2
MIN_LME_SUBJECTS = 5  # fewer groups cannot pin down a random intercept and slope
# regions reported as volumes; "grey" only tracks intensity
VOLUME_REGIONS = ("ventricle", "tissue")


# --------------------------------------------------------------------------
# masks and volumes


def _inplane(radius_iters: int, op, mask):
    struct = np.zeros((3, 3, 3), dtype=bool)
    struct[:, :, 1] = ndimage.generate_binary_structure(2, 1)
    if mask.ndim == 2:
        struct = struct[:, :, 1]
    return op(mask, structure=struct, iterations=radius_iters)


@dataclass(frozen=True)
class EvalRegion:
    """A region mask plus optional pure-tissue levels for partial-volume counting.

    With ``target``/``other`` set, a voxel's membership is
    ``clip((I - other) / (target - other), 0, 1)``; in binary mode it counts
    when that exceeds one half. Without levels every masked voxel counts.
    """

    mask: np.ndarray
    target: float | None = None
    other: float | None = None
    exclude: "EvalRegion | None" = None

    def fractions(self, volume: np.ndarray, mode: str = "weighted") -> np.ndarray:
        if mode not in VOLUME_MODES:
            raise ValueError(f"volume mode must be one of {VOLUME_MODES}")
        f = self.mask.astype(float)
        if self.target is not None:
            frac = np.clip((volume - self.other) / (self.target - self.other), 0.0, 1.0)
            if mode == "binary":
                frac = (frac > 0.5).astype(float)
            f = f * frac
        if self.exclude is not None:
            f = f - self.exclude.fractions(volume, mode)
        return f


def region_volumes(volume, regions: Mapping[str, EvalRegion | np.ndarray], brain_mask,
                   mode: str = "weighted") -> dict[str, float]:
    """Volume of each region inside ``brain_mask`` as a percentage of the brain's voxel count."""
    volume = np.asarray(volume, dtype=float)
    brain = np.asarray(brain_mask, dtype=bool)
    if brain.shape != volume.shape:
        raise ValueError(f"brain mask {brain.shape} does not match volume {volume.shape}")
    total = brain.sum()
    if total == 0:
        raise ValueError("brain mask is empty")
    out = {}
    for name, reg in regions.items():
        if not isinstance(reg, EvalRegion):
            reg = EvalRegion(np.asarray(reg, dtype=bool))
        if reg.mask.shape != volume.shape:
            raise ValueError(f"region {name!r} mask {reg.mask.shape} does not match volume {volume.shape}")
        out[name] = float((reg.fractions(volume, mode) * brain).sum() / total * 100.0)
    return out


def mean_intensity(volume, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    return float(np.asarray(volume, dtype=float)[mask].mean())


def fit_unmixing_levels(volumes: Sequence[np.ndarray], mask, iterations: int = 50) -> tuple[float, float]:
    """(dark, bright) pure-tissue levels inside ``mask``: medians of a 1D two-means split."""
    mask = np.asarray(mask, dtype=bool)
    vals = np.concatenate([np.asarray(v, dtype=float)[mask] for v in volumes])
    if vals.size < 2:
        raise ValueError("need at least two voxels to fit levels")
    lo, hi = np.percentile(vals, [5, 95])
    for _ in range(iterations):
        cut = 0.5 * (lo + hi)
        a, b = vals[vals <= cut], vals[vals > cut]
        if a.size == 0 or b.size == 0:
            break
        new = (float(np.median(a)), float(np.median(b)))
        if new == (lo, hi):
            break
        lo, hi = new
    return float(lo), float(hi)


def phantom_regions(labels, brain_mask, levels: tuple[float, float] | None = None) -> dict[str, EvalRegion]:
    """Evaluation regions for a phantom label volume (or a stack of its slices).

    ``ventricle`` counts CSF fractionally inside a band around the labelled
    ventricle that excludes grey partial volume; ``tissue`` is its
    complement within the brain; ``grey`` is the cortical shell and rim,
    used for intensity tracking.
    """
    labels = np.asarray(labels)
    brain = np.asarray(brain_mask, dtype=bool)
    csf, wm = levels if levels is not None else (CSF_LEVEL, WM_LEVEL)
    vent = labels == LABEL_VENTRICLE
    band = _inplane(3, ndimage.binary_dilation, vent)
    core = _inplane(1, ndimage.binary_erosion, np.isin(labels, [LABEL_VENTRICLE, LABEL_INNER]))
    ventricle = EvalRegion(band & core & brain, csf, wm)
    return {
        "ventricle": ventricle,
        "tissue": EvalRegion(brain, exclude=ventricle),
        "grey": EvalRegion(np.isin(labels, [LABEL_RIM, LABEL_SHELL]) & brain),
    }


def volume_regions(regions: Mapping[str, EvalRegion]) -> dict[str, EvalRegion]:
    return {k: regions[k] for k in VOLUME_REGIONS if k in regions}


# --------------------------------------------------------------------------
# error reports


@dataclass
class VolumeReport:
    label: str
    mae: dict[str, float]
    std: dict[str, float]
    n_cases: int
    errors: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def rows(self) -> list[dict]:
        return [{"region": r, "config": self.label, "mae": self.mae[r], "std": self.std[r]} for r in self.mae]


def volume_mae_pairs(pairs: Sequence[tuple[np.ndarray, np.ndarray]], regions, brain_mask,
                     mode: str = "weighted", label: str = "") -> VolumeReport:
    """Mean and population std of |predicted - real| regional volume over (predicted, real) pairs."""
    if not pairs:
        raise ValueError("no cases to evaluate")
    errs: dict[str, list[float]] = {}
    for pred, real in pairs:
        vp = region_volumes(pred, regions, brain_mask, mode)
        vr = region_volumes(real, regions, brain_mask, mode)
        for r in vp:
            errs.setdefault(r, []).append(abs(vp[r] - vr[r]))
    arr = {r: np.asarray(e) for r, e in errs.items()}
    return VolumeReport(label, {r: float(e.mean()) for r, e in arr.items()},
                        {r: float(e.std()) for r, e in arr.items()}, len(pairs), arr)


@dataclass
class HeldOutCase:
    """A held-out subject: baseline input plus real follow-up volumes."""

    subject_id: str
    baseline: object
    followups: list[tuple[float, np.ndarray]]


def volume_mae(series: Mapping[str, tuple[np.ndarray, Sequence[float]]], cases: Sequence[HeldOutCase],
               regions, brain_mask, mode: str = "weighted", label: str = "") -> VolumeReport:
    """Compare each subject's predicted series, interpolated to every real follow-up age."""
    pairs = []
    for case in cases:
        vols, centers = series[case.subject_id]
        for age, real in case.followups:
            pairs.append((interpolate_age(vols, centers, age), real))
    return volume_mae_pairs(pairs, regions, brain_mask, mode, label)


def write_report_csv(reports: Sequence[VolumeReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["region", "config", "mae", "std"])
        w.writeheader()
        for rep in reports:
            w.writerows(rep.rows())


def render_table(reports: Sequence[VolumeReport], title: str = "Regional volume error (% of brain)") -> str:
    regions = list(reports[0].mae) if reports else []
    width = max([len(r.label) for r in reports] + [6])
    lines = [title, "config".ljust(width) + "".join(f"  {r:>18}" for r in regions)]
    for rep in reports:
        cells = "".join(f"  {rep.mae[r]:8.3f} ± {rep.std[r]:7.3f}" for r in regions)
        lines.append(rep.label.ljust(width) + cells)
    return "\n".join(lines)


def plot_reports(reports: Sequence[VolumeReport], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    regions = list(reports[0].mae)
    fig, axes = plt.subplots(1, len(regions), figsize=(3 * len(regions) + 1, 3), squeeze=False)
    for ax, r in zip(axes[0], regions):
        labels = [rep.label for rep in reports]
        ax.bar(labels, [rep.mae[r] for rep in reports], yerr=[rep.std[r] for rep in reports], capsize=3)
        ax.set_title(r)
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# --------------------------------------------------------------------------
# regression baselines on volume tables


def volume_table(records: Sequence[dict]) -> pd.DataFrame:
    """Rows of ``{subject_id, age, gender, diagnosis, <region>: %}``."""
    df = pd.DataFrame.from_records(list(records))
    missing = [c for c in ("subject_id", *FEATURES) if c not in df.columns]
    if missing:
        raise ValueError(f"volume table lacks columns {missing}")
    return df.reset_index(drop=True)


class SVRBaseline:
    """One RBF support-vector regressor per region on (age, gender, diagnosis)."""

    def __init__(self, models: dict, regions: list[str]):
        self.models = models
        self.regions = regions

    def predict(self, table: pd.DataFrame) -> pd.DataFrame:
        X = table[list(FEATURES)].to_numpy(dtype=float)
        return pd.DataFrame({r: self.models[r].predict(X) for r in self.regions}, index=table.index)


def fit_svr_baseline(table: pd.DataFrame, regions: Sequence[str], C: float = SVR_C, coef0: float = SVR_COEF0,
                     epsilon: float = 0.1, gamma="scale") -> SVRBaseline:
    """Features are standardized; targets too, so ``epsilon`` is in target standard deviations."""
    from sklearn.compose import TransformedTargetRegressor
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler
    from sklearn.svm import SVR

    X = table[list(FEATURES)].to_numpy(dtype=float)
    models = {}
    for r in regions:
        reg = make_pipeline(StandardScaler(), SVR(kernel="rbf", C=C, coef0=coef0, epsilon=epsilon, gamma=gamma))
        model = TransformedTargetRegressor(regressor=reg, transformer=StandardScaler())
        models[r] = model.fit(X, table[r].to_numpy(dtype=float))
    return SVRBaseline(models, list(regions))


@dataclass
class _LinearFit:
    params: np.ndarray  # intercept, age, gender
    kind: str
    age_center: float = 0.0

    def predict(self, age, gender):
        age = np.asarray(age, float) - self.age_center
        return self.params[0] + self.params[1] * age + self.params[2] * np.asarray(gender, float)


def _design(df, age_center):
    age = df["age"].to_numpy(float) - age_center
    return np.column_stack([np.ones(len(df)), age, df["gender"].to_numpy(float)])


def _ols(df, region) -> _LinearFit:
    center = float(df["age"].mean())
    beta, *_ = np.linalg.lstsq(_design(df, center), df[region].to_numpy(float), rcond=None)
    return _LinearFit(beta, "ols", center)


def _lme(df, region) -> _LinearFit:
    import statsmodels.api as sm
    from statsmodels.tools.sm_exceptions import ConvergenceWarning

    n_subjects = df["subject_id"].nunique()
    if n_subjects < MIN_LME_SUBJECTS:
        what = "single-subject group" if n_subjects == 1 else f"only {n_subjects} subjects"
        warnings.warn(f"{what}: falling back to ordinary least squares", stacklevel=3)
        return _ols(df, region)
    y = df[region].to_numpy(float)
    center = float(df["age"].mean())  # centred age keeps the random intercept and slope decorrelated
    X = _design(df, center)
    Z = X[:, :2]  # random intercept and age slope per subject
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", ConvergenceWarning)
            warnings.simplefilter("ignore", RuntimeWarning)
            warnings.simplefilter("ignore", UserWarning)
            res = sm.MixedLM(y, X, groups=df["subject_id"].to_numpy(), exog_re=Z).fit(reml=True)
        fe = np.asarray(res.fe_params, dtype=float)
        if not res.converged or not np.all(np.isfinite(fe)):
            raise ValueError("mixed model did not converge")
        return _LinearFit(fe, "lme", center)
    except (ConvergenceWarning, ValueError, np.linalg.LinAlgError) as e:
        warnings.warn(f"mixed model failed ({e}); falling back to ordinary least squares", stacklevel=3)
        return _ols(df, region)


class LMEBaseline:
    """Per-diagnosis mixed models; unseen subjects are predicted from fixed effects only."""

    def __init__(self, fits: dict, fallback: dict, regions: list[str]):
        self.fits = fits
        self.fallback = fallback
        self.regions = regions

    def predict(self, table: pd.DataFrame) -> pd.DataFrame:
        out = {}
        for r in self.regions:
            pred = np.empty(len(table))
            for i, (age, gender, dx) in enumerate(table[list(FEATURES)].itertuples(index=False)):
                fit = self.fits.get((int(dx), r), self.fallback[r])
                pred[i] = fit.predict(age, gender)
            out[r] = pred
        return pd.DataFrame(out, index=table.index)


def fit_lme_baseline(table: pd.DataFrame, regions: Sequence[str]) -> LMEBaseline:
    """Fixed age and gender effects, random per-subject intercept and age slope, one model per diagnosis."""
    fits, fallback = {}, {}
    for r in regions:
        fallback[r] = _ols(table, r)
        for dx, grp in table.groupby("diagnosis"):
            fits[(int(dx), r)] = _lme(grp.reset_index(drop=True), r)
    return LMEBaseline(fits, fallback, list(regions))


BASELINE_FAMILIES = {"svr": fit_svr_baseline, "lme": fit_lme_baseline}


def trim_outliers(table: pd.DataFrame, region: str, family: str = "svr", fraction: float = TRIM_FRACTION,
                  residuals: np.ndarray | None = None) -> pd.DataFrame:
    """Drop the ``floor(fraction * n)`` samples with the largest absolute residual.

    Residuals come from a preliminary fit of ``family`` on the full table
    unless given. Ties break towards keeping the lower row index.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    n = len(table)
    k = int(math.floor(fraction * n))
    if k == 0:
        return table.copy()
    if residuals is None:
        model = BASELINE_FAMILIES[family](table, [region])
        residuals = table[region].to_numpy(float) - model.predict(table)[region].to_numpy()
    res = np.abs(np.asarray(residuals, dtype=float))
    order = np.lexsort((np.arange(n), -res))  # largest residual first, then lowest index
    drop = np.sort(order[:k])
    return table.drop(table.index[drop]).reset_index(drop=True)


def baseline_mae(model, table: pd.DataFrame, regions: Sequence[str]) -> dict[str, float]:
    pred = model.predict(table)
    return {r: float(np.mean(np.abs(pred[r].to_numpy() - table[r].to_numpy(float)))) for r in regions}


def constant_mae(train: pd.DataFrame, test: pd.DataFrame, regions: Sequence[str]) -> dict[str, float]:
    return {r: float(np.mean(np.abs(test[r].to_numpy(float) - train[r].mean()))) for r in regions}


# --------------------------------------------------------------------------
# ablation


def percent_improvement(without: float, with_: float) -> float:
    """Relative error reduction from adding a component, in percent."""
    if without == 0:
        return 0.0 if with_ == 0 else -math.inf
    return (without - with_) / without * 100.0


@dataclass
class AblationResult:
    reports: dict[str, VolumeReport]
    improvements: dict[str, dict[str, float]]
    full: str

    def table_rows(self) -> list[dict]:
        rows = []
        for comp, per_region in self.improvements.items():
            for r, v in per_region.items():
                rows.append({"component": comp, "region": r, "improvement_pct": v})
        return rows


def run_ablation(configs: Mapping[str, Callable], cases: Sequence[HeldOutCase], regions, brain_mask,
                 full: str, removed: Mapping[str, str] | None = None, mode: str = "weighted") -> AblationResult:
    """Evaluate each configuration on the same cases and compare against ``full``.

    ``configs[name](case)`` returns ``(volumes, bin_centers)`` for a test
    case. ``removed`` maps a component name to the configuration lacking
    it; its improvement is measured relative to ``full`` per region.
    """
    if full not in configs:
        raise ValueError(f"full configuration {full!r} not among configs")
    reports = {}
    for name, predict in configs.items():
        series = {c.subject_id: predict(c) for c in cases}
        reports[name] = volume_mae(series, cases, regions, brain_mask, mode, label=name)
    improvements = {}
    for comp, name in (removed or {}).items():
        improvements[comp] = {r: percent_improvement(reports[name].mae[r], reports[full].mae[r])
                              for r in reports[full].mae}
    return AblationResult(reports, improvements, full)
