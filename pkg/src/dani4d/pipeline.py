"""End-to-end orchestration: cohort, preprocessing, slice models, SR, personalization, evaluation."""
from __future__ import annotations

import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import dataio as D
from .assemble import interpolate_age, stack_and_smooth
from .atlas import RegionSet, augment_regions, build_regions
from .config import RunConfig
from .core.binning import AgeBinning, build_age_binning
from .core.training import (
    RegionContext,
    SliceData,
    SliceModelBundle,
    TrainConfig,
    generate_sequence,
    train_slice_model,
)
from .evaluate import (
    EvalRegion,
    HeldOutCase,
    fit_unmixing_levels,
    mean_intensity,
    phantom_regions,
    region_volumes,
    run_ablation,
    volume_regions,
)
from .personalize import fine_tune
from .pwf import (
    PWFParams,
    common_init,
    constant_schedule,
    grid_search_pwf,
    proxy_objective,
    DEFAULT_GRID,
)
from .regionlr import LRBank, fit_region_lrs, group_by_subject
from .superres import SRModel, apply_sr, make_lr_hr_pairs, train_sr

logger = logging.getLogger(__name__)


def phantom_spec(cfg: RunConfig) -> D.PhantomSpec:
    return D.PhantomSpec(
        n_subjects=cfg.n_subjects, visits_per_subject=cfg.visits_per_subject,
        age_range=(cfg.age_lo, cfg.age_hi), image_side=cfg.image_side, n_slices=cfg.n_slices,
        noise_std=cfg.noise_std, seed=cfg.seed, visit_interval=cfg.visit_interval,
        gender_effect=cfg.gender_effect, subject_jitter=cfg.subject_jitter,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(latent_dim=cfg.latent_dim, channels=cfg.channels, lr=cfg.lr, batch_size=cfg.batch_size,
                       rec_form=cfg.rec_form, vox_form=cfg.vox_form, reg_form=cfg.reg_form)


def pwf_params(cfg: RunConfig) -> PWFParams:
    return PWFParams.from_dict(cfg.pwf_dict())


def stack_volume(stack: D.SliceStack) -> np.ndarray:
    """Intensity-space slices of a stack laid out ``(S, S, T)``."""
    return np.moveaxis(stack.destandardize(), 0, -1)


# --------------------------------------------------------------------------
# data preparation


@dataclass
class Prepared:
    stacks: list
    split: dict
    positions: np.ndarray
    brain: np.ndarray  # (S, S, T) brain mask on the selected slices
    labels: np.ndarray  # (S, S, T) atlas labels on the selected slices
    regions: RegionSet
    lr_bank: LRBank
    binning: AgeBinning
    truth: dict = field(default_factory=dict)

    def part(self, name: str) -> list:
        ids = set(self.split[name])
        return [s for s in self.stacks if s.subject_id in ids]

    @property
    def n_slices(self) -> int:
        return len(self.positions)

    def brain_slice(self, n: int) -> np.ndarray:
        return self.brain[:, :, n]

    def context(self, n: int) -> RegionContext:
        return RegionContext.build(self.regions, n, self.lr_bank, self.binning.centers, self.brain_slice(n))

    def slice_data(self, n: int, part: str = "train") -> SliceData:
        return SliceData.from_stacks(self.part(part), n, self.binning)

    def eval_regions(self, levels: tuple[float, float] | None = None) -> dict[str, EvalRegion]:
        return phantom_regions(self.labels, self.brain, levels)

    def fitted_eval_regions(self) -> dict[str, EvalRegion]:
        """Evaluation regions whose unmixing levels are fitted on training volumes."""
        base = self.eval_regions()
        levels = fit_unmixing_levels([stack_volume(s) for s in self.part("train")], base["ventricle"].mask)
        return self.eval_regions(levels)

    def save(self, preprocessed_dir: str | Path, atlas_dir: str | Path) -> None:
        save_preprocessed(preprocessed_dir, self.stacks, self.split, self.positions, self.brain, self.labels,
                          self.truth)
        save_atlas(atlas_dir, self.regions, self.lr_bank, self.binning)

    @classmethod
    def load(cls, preprocessed_dir: str | Path, atlas_dir: str | Path) -> "Prepared":
        stacks, split, positions, brain, labels, truth = load_preprocessed(preprocessed_dir)
        regions, bank, binning = load_atlas(atlas_dir)
        return cls(stacks, split, positions, brain, labels, regions, bank, binning, truth)


def save_preprocessed(directory, stacks, split, positions, brain, labels, truth=None) -> None:
    """``brain``/``labels`` may be full volumes or already restricted to ``positions``."""
    d = Path(directory)
    (d / "stacks").mkdir(parents=True, exist_ok=True)
    for s in stacks:
        s.save(d / "stacks" / f"{s.scan_id}.npz")
    np.savez_compressed(d / "grid.npz", positions=positions, brain=brain, labels=labels)
    (d / "split.json").write_text(json.dumps(split, indent=1))
    (d / "truth.json").write_text(json.dumps(truth or {}, indent=1))


def load_preprocessed(directory):
    d = Path(directory)
    if not (d / "grid.npz").exists():
        raise FileNotFoundError(f"no preprocessed data in {d}")
    stacks = [D.SliceStack.load(p) for p in sorted((d / "stacks").glob("*.npz"))]
    with np.load(d / "grid.npz") as g:
        positions, brain, labels = g["positions"], g["brain"], g["labels"]
    truth = json.loads((d / "truth.json").read_text()) if (d / "truth.json").exists() else {}
    return stacks, json.loads((d / "split.json").read_text()), positions, brain, labels, truth


def save_atlas(directory, regions: RegionSet, bank: LRBank, binning: AgeBinning) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    regions.save(d / "regions")
    bank.save(d / "lr_bank.json")
    (d / "binning.json").write_text(json.dumps(binning.to_dict(), indent=1))


def load_atlas(directory):
    d = Path(directory)
    if not (d / "lr_bank.json").exists():
        raise FileNotFoundError(f"no atlas regressors in {d}")
    return (RegionSet.load(d / "regions"), LRBank.load(d / "lr_bank.json"),
            AgeBinning.from_dict(json.loads((d / "binning.json").read_text())))


def generate_cohort(cfg: RunConfig):
    """Phantom scans plus the template, brain mask and atlas labels they share."""
    spec = phantom_spec(cfg)
    cohort = D.generate_phantom_cohort(spec)
    return cohort, D.phantom_template(spec), D.phantom_brain_mask(spec), D.phantom_atlas(spec).voxels


def preprocess_scans(cfg: RunConfig, scans, template, brain_mask):
    positions = D.slice_positions(brain_mask, cfg.n_slices)
    stacks = []
    for s in scans:
        try:
            stacks.append(D.preprocess(s, template, cfg.n_slices, positions, brain_mask))
        except D.PreprocessingError as e:
            logger.warning("excluding scan: %s", e)
    if not stacks:
        raise D.PreprocessingError("every scan failed preprocessing")
    train, val, test = D.split_cohort(stacks, (cfg.split_train, cfg.split_val, cfg.split_test),
                                      cfg.seed, cfg.min_followup)
    return stacks, {"train": train, "val": val, "test": test}, positions


def fit_atlas_lrs(cfg: RunConfig, stacks, split, positions, brain_mask, labels):
    ids = set(split["train"])
    train = [s for s in stacks if s.subject_id in ids]
    regions = augment_regions(build_regions(labels, positions), cfg.radii())
    brain_t = np.moveaxis(np.asarray(brain_mask)[:, :, positions], -1, 0)
    bank = fit_region_lrs(group_by_subject(train), regions, brain_t)
    binning = build_age_binning([s.age for s in train], cfg.n_bins, cfg.c_sigma)
    return regions, bank, binning


def fit_atlas_lrs_on_slices(cfg: RunConfig, stacks, split, brain_slices, label_slices):
    """Same as :func:`fit_atlas_lrs` with brain and labels already restricted to the slices."""
    T = brain_slices.shape[-1]
    return fit_atlas_lrs(cfg, stacks, split, np.arange(T), brain_slices, label_slices)


def prepare(cfg: RunConfig, scans, template, brain_mask, labels, truth: dict | None = None) -> Prepared:
    stacks, split, positions = preprocess_scans(cfg, scans, template, brain_mask)
    lab = np.rint(np.asarray(labels)).astype(int)[:, :, positions]
    brain = np.asarray(brain_mask, bool)[:, :, positions]
    regions, bank, binning = fit_atlas_lrs_on_slices(cfg, stacks, split, brain, lab)
    return Prepared(stacks, split, positions, brain, lab, regions, bank, binning, truth or {})


def prepare_phantom(cfg: RunConfig) -> Prepared:
    cohort, template, brain, labels = generate_cohort(cfg)
    truth = {p.scan.scan_id: p.truth for p in cohort}
    return prepare(cfg, [p.scan for p in cohort], template, brain, labels, truth)


# --------------------------------------------------------------------------
# slice-model training


def _train_job(job):
    torch.set_num_threads(1)
    n, size, n_bins, tcfg, init_state, data, ctx, schedule, epochs, seed = job
    bundle = SliceModelBundle(n, size, n_bins, tcfg, seed=seed)
    if init_state is not None:
        bundle.load_parameters(init_state)
    train_slice_model(bundle, data, ctx, schedule, epochs, seed=seed)
    return n, bundle


def slice_seed(seed: int, n: int) -> int:
    return int(seed) * 1000 + n


def train_progression(prep: Prepared, cfg: RunConfig, pwf: PWFParams | None = None, workers: int = 1,
                      tc: bool | None = None) -> dict[int, SliceModelBundle]:
    """Train all slice models.

    With temporal consistency the weights follow the profile schedule and
    every slice starts from a shared initialization pre-trained on the
    central slice; without it weights are held at their asymptotes and
    each slice starts from its own random initialization.
    """
    tc = cfg.temporal_consistency if tc is None else tc
    pwf = pwf or pwf_params(cfg)
    tcfg = train_config(cfg)
    size = prep.brain.shape[0]
    A = prep.binning.n_bins
    if tc:
        schedule = pwf
        central = prep.n_slices // 2
        init = common_init(prep.slice_data(central), size, A, tcfg, pwf, prep.context(central),
                           cfg.init_iterations, seed=slice_seed(cfg.seed, 999))
    else:
        schedule = constant_schedule(pwf)
        init = None
    jobs = [(n, size, A, tcfg, init, prep.slice_data(n), prep.context(n), schedule, cfg.epochs,
             slice_seed(cfg.seed, n)) for n in range(prep.n_slices)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]
    return dict(sorted(results, key=lambda r: r[0]))


def search_pwf(prep: Prepared, cfg: RunConfig, grid: Mapping | None = None):
    """Random grid search of profile parameters scored on the central slice's validation data."""
    n = prep.n_slices // 2
    objective = proxy_objective(prep.slice_data(n), prep.slice_data(n, "val"), prep.context(n),
                                prep.brain.shape[0], prep.binning.n_bins, train_config(cfg),
                                epochs=cfg.search_epochs, seed=cfg.seed)
    return grid_search_pwf(grid or DEFAULT_GRID, objective, cfg.search_budget, seed=cfg.seed, base=pwf_params(cfg))


# --------------------------------------------------------------------------
# simulation


class Simulator:
    """Turns a subject's preprocessed baseline into volumes at every age bin."""

    def __init__(self, bundles: Mapping[int, SliceModelBundle], binning: AgeBinning, brain: np.ndarray,
                 smooth: bool = True, sigma: float = 1.5, window: int = 2, sr: SRModel | None = None):
        self.bundles = dict(bundles)
        self.binning = binning
        self.brain = np.asarray(brain, dtype=bool)
        self.smooth = smooth
        self.sigma = sigma
        self.window = window
        self.sr = sr

    @classmethod
    def from_config(cls, bundles, prep: Prepared, cfg: RunConfig, sr: SRModel | None = None,
                    tc: bool | None = None) -> "Simulator":
        tc = cfg.temporal_consistency if tc is None else tc
        return cls(bundles, prep.binning, prep.brain, tc, cfg.smooth_sigma, cfg.smooth_window, sr)

    def with_models(self, bundles=None, sr="keep") -> "Simulator":
        return Simulator(bundles if bundles is not None else self.bundles, self.binning, self.brain,
                         self.smooth, self.sigma, self.window, self.sr if sr == "keep" else sr)

    @property
    def centers(self) -> tuple[float, ...]:
        return self.binning.centers

    def series(self, stack: D.SliceStack) -> np.ndarray:
        """``(A, S, S, T)`` intensity volumes, one per age bin."""
        seqs = {n: generate_sequence(b, stack.slices[n], stack.diagnosis) for n, b in self.bundles.items()}
        vols = stack_and_smooth(seqs, stack.slice_means, stack.slice_stds, self.sigma, self.window,
                                self.smooth, n_slices=stack.n_slices) * self.brain
        if self.sr is not None:
            vols = np.stack([apply_sr(self.sr, v) for v in vols]) * self.brain
        return vols

    def predict(self, stack) -> tuple[np.ndarray, tuple[float, ...]]:
        return self.series(stack), self.centers

    def at_age(self, stack, age: float) -> np.ndarray:
        return interpolate_age(self.series(stack), self.centers, age)


def train_superres(sim: Simulator, stacks: Sequence, cfg: RunConfig) -> SRModel:
    """Train SR on (own-age reconstruction without SR, real volume) pairs."""
    base = sim.with_models(sr=None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # own ages beyond the outer bin centres clamp silently here
        pairs = make_lr_hr_pairs(lambda s: base.at_age(s, s.age), stacks, stack_volume)
    return train_sr(pairs, cfg.sr_epochs, cfg.sr_patch, seed=cfg.seed, depth=cfg.sr_depth,
                    growth=cfg.sr_growth, lr=cfg.sr_lr, batch_size=cfg.sr_batch)


def held_out_cases(prep: Prepared, part: str = "test") -> list[HeldOutCase]:
    cases = []
    for sid, stacks in sorted(group_by_subject(prep.part(part)).items()):
        stacks = sorted(stacks, key=lambda s: s.age)
        cases.append(HeldOutCase(sid, stacks[0], [(s.age, stack_volume(s)) for s in stacks[1:]]))
    return cases


def personalize_cases(sim: Simulator, cases: Sequence[HeldOutCase], prep: Prepared, cfg: RunConfig,
                      pwf: PWFParams | None = None) -> dict[str, dict[int, SliceModelBundle]]:
    contexts = {n: prep.context(n) for n in sim.bundles}
    return {c.subject_id: fine_tune(sim.bundles, c.baseline, prep.binning, contexts, pwf or pwf_params(cfg),
                                    cfg.tl_iterations, seed=cfg.seed, rec_only=cfg.tl_rec_only, sr_model=sim.sr)
            for c in cases}


def progression_curves(vols: np.ndarray, regions: Mapping[str, EvalRegion], brain: np.ndarray,
                       mode: str = "weighted") -> tuple[np.ndarray, np.ndarray]:
    """Per-bin ventricle volume (% of brain) and mean grey intensity of a simulated series."""
    vent = np.array([region_volumes(v, {"ventricle": regions["ventricle"]}, brain, mode)["ventricle"] for v in vols])
    grey = np.array([mean_intensity(v, regions["grey"].mask) for v in vols])
    return vent, grey


# --------------------------------------------------------------------------
# full experiment with ablations


ABLATION_FULL = "L*_TC_SR_TL"
ABLATION_REMOVED = {"TL": "L*_TC_SR", "SR": "L*_TC_TL", "TC": "L*_SR_TL"}


@dataclass
class Experiment:
    prep: Prepared
    cases: list
    regions: dict
    simulators: dict  # "tc" / "notc" -> Simulator (with SR)
    personalized: dict  # "tc" / "notc" -> {subject: bundles}
    ablation: object = None
    timings: dict = field(default_factory=dict)  # seconds per stage

    def full_series(self, case) -> tuple[np.ndarray, tuple]:
        sim = self.simulators["tc"].with_models(self.personalized["tc"][case.subject_id])
        return sim.predict(case.baseline)


def ablation_configs(sims: Mapping[str, Simulator], personalized: Mapping[str, dict]) -> dict:
    tc, notc = sims["tc"], sims["notc"]

    def with_tl(sim, key, sr="keep"):
        return lambda case: sim.with_models(personalized[key][case.subject_id], sr).predict(case.baseline)

    return {
        ABLATION_FULL: with_tl(tc, "tc"),
        ABLATION_REMOVED["TL"]: lambda case: tc.predict(case.baseline),
        ABLATION_REMOVED["SR"]: with_tl(tc, "tc", sr=None),
        ABLATION_REMOVED["TC"]: with_tl(notc, "notc"),
    }


CHECKPOINT_MANIFEST = "pipeline.json"


def save_checkpoint(directory, bundles: Mapping[int, SliceModelBundle], binning: AgeBinning,
                    sr: SRModel | None, meta: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for n, b in bundles.items():
        b.save(d / f"slice_{n:02d}")
    if sr is not None:
        sr.save(d / "sr")
    man = {"slices": sorted(bundles), "binning": binning.to_dict(), "sr": sr is not None, **meta}
    (d / CHECKPOINT_MANIFEST).write_text(json.dumps(man, indent=1))
    return d


def load_bundles(directory, slices: Sequence[int]) -> dict[int, SliceModelBundle]:
    return {n: SliceModelBundle.load(Path(directory) / f"slice_{n:02d}") for n in slices}


def load_checkpoint(directory):
    """``(bundles, binning, sr or None, manifest)``; raises FileNotFoundError if absent."""
    d = Path(directory)
    if not (d / CHECKPOINT_MANIFEST).exists():
        raise FileNotFoundError(f"no checkpoint in {d}")
    man = json.loads((d / CHECKPOINT_MANIFEST).read_text())
    sr = SRModel.load(d / "sr") if man.get("sr") else None
    return load_bundles(d, man["slices"]), AgeBinning.from_dict(man["binning"]), sr, man


def run_experiment(cfg: RunConfig, workers: int = 1, prep: Prepared | None = None) -> Experiment:
    """Train both temporal-consistency variants, their SR stages and personalizations; run the ablation."""
    prep = prep or prepare_phantom(cfg)
    cases = held_out_cases(prep)
    regions = prep.fitted_eval_regions()
    pwf = pwf_params(cfg)
    sims, pers, timings = {}, {}, {}
    for key, tc in (("tc", True), ("notc", False)):
        t0 = time.perf_counter()
        bundles = train_progression(prep, cfg, pwf, workers, tc=tc)
        t1 = time.perf_counter()
        sim = Simulator.from_config(bundles, prep, cfg, tc=tc)
        sr = train_superres(sim, prep.part("train"), cfg) if cfg.sr_enabled else None
        sims[key] = sim.with_models(sr=sr)
        t2 = time.perf_counter()
        pers[key] = personalize_cases(sims[key], cases, prep, cfg, pwf)
        timings[key] = {"train": t1 - t0, "sr": t2 - t1, "personalize": time.perf_counter() - t2}
    result = run_ablation(ablation_configs(sims, pers), cases, volume_regions(regions), prep.brain, ABLATION_FULL,
                          ABLATION_REMOVED, cfg.volume_mode)
    return Experiment(prep, cases, regions, sims, pers, result, timings)
