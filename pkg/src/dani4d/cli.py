"""``dani4d`` command line.

Every subcommand reads earlier stages from, and writes its own stage into,
one run directory (``--out``)::

    cohort/  preprocessed/  atlas/  search/  checkpoint/  simulate/  evaluate/  ablate/

Failures print one JSON line ``{"error": kind, "message": ...}`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import dataio as D
from .config import RunConfig, dump_config, load_config, parse_overrides

logger = logging.getLogger("dani4d")

EXIT_USAGE = 2
EXIT_MISSING_CHECKPOINT = 3
EXIT_DATA = 4


class CLIError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message, EXIT_USAGE)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")


def _versions() -> dict:
    import scipy
    import sklearn
    import statsmodels
    import torch

    return {"dani4d": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__, "scikit-learn": sklearn.__version__,
            "statsmodels": statsmodels.__version__}


def _write_manifest(stage_dir: Path, args, cfg: RunConfig, started: float, extra: dict | None = None) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, stage_dir / "config.yaml")
    man = {"command": args.command, "argv": args.argv, "seed": cfg.seed, "config_hash": cfg.digest(),
           "config": cfg.to_dict(), "versions": _versions(), "workers": args.workers,
           "started": started, "finished": time.time(), **(extra or {})}
    (stage_dir / "run_manifest.json").write_text(json.dumps(man, indent=1, default=str))


# --------------------------------------------------------------------------
# stage helpers


def _run(args) -> Path:
    return Path(args.out)


def _require(path: Path, what: str, code: int = EXIT_DATA) -> Path:
    if not path.exists():
        kind = "missing_checkpoint" if code == EXIT_MISSING_CHECKPOINT else "missing_input"
        raise CLIError(kind, f"{what} not found at {path}", code)
    return path


def _load_prepared(run: Path):
    from .pipeline import Prepared

    _require(run / "preprocessed" / "grid.npz", "preprocessed data (run `preprocess`)")
    _require(run / "atlas" / "lr_bank.json", "atlas regressors (run `fit-atlas-lrs`)")
    return Prepared.load(run / "preprocessed", run / "atlas")


def _load_checkpoint(run: Path):
    from .pipeline import load_checkpoint

    ckpt = run / "checkpoint"
    _require(ckpt / "pipeline.json", "checkpoint (run `train`)", EXIT_MISSING_CHECKPOINT)
    return load_checkpoint(ckpt)


def _simulator(run: Path, prep, cfg, subject: str | None = None):
    from .pipeline import Simulator, load_bundles
    from .personalize import personalized_dir

    bundles, binning, sr, man = _load_checkpoint(run)
    if subject is not None:
        pdir = personalized_dir(run / "checkpoint", subject)
        if pdir.exists():
            bundles = load_bundles(pdir, man["slices"])
    return Simulator(bundles, binning, prep.brain, man.get("temporal_consistency", True),
                     cfg.smooth_sigma, cfg.smooth_window, sr), man


def _subject_stacks(prep, subject: str):
    stacks = sorted((s for s in prep.stacks if s.subject_id == subject), key=lambda s: s.age)
    if not stacks:
        raise CLIError("data", f"subject {subject!r} not in preprocessed data", EXIT_DATA)
    return stacks


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args, cfg):
    from .pipeline import generate_cohort

    out = _run(args) / "cohort"
    cohort, template, brain, labels = generate_cohort(cfg)
    records = []
    for p in cohort:
        path = D.write_volume(p.scan, out / "scans" / f"{p.scan.scan_id}.nii.gz")
        records.append({**p.scan.metadata(), "file": str(path.relative_to(out)), "truth": p.truth})
    D.write_manifest(records, out / "manifest.jsonl")
    D.write_volume(template, out / "template.nii.gz")
    D.write_volume(D.VolumeScan("brain_mask", template.age, 0, brain.astype(float)), out / "brain_mask.nii.gz")
    D.write_volume(D.VolumeScan("atlas", template.age, 0, labels), out / "atlas.nii.gz")
    return out, {"n_scans": len(records)}


def cmd_preprocess(args, cfg):
    from .pipeline import preprocess_scans, save_preprocessed

    src = Path(args.data) if args.data else _run(args) / "cohort"
    _require(src / "manifest.jsonl", "cohort manifest (run `phantom` or pass --data)")
    records = D.read_manifest(src / "manifest.jsonl")
    scans = [D.ingest_volume(src / r["file"]) for r in records]
    template = D.ingest_volume(_require(src / "template.nii.gz", "template"))
    brain = D.ingest_volume(_require(src / "brain_mask.nii.gz", "brain mask")).voxels > 0.5
    labels = np.rint(D.ingest_volume(_require(src / "atlas.nii.gz", "atlas")).voxels).astype(int)
    stacks, split, positions = preprocess_scans(cfg, scans, template, brain)
    truth = {f"{r['subject_id']}_{float(r['age']):07.3f}": r["truth"] for r in records if "truth" in r}
    out = _run(args) / "preprocessed"
    save_preprocessed(out, stacks, split, positions, brain[:, :, positions], labels[:, :, positions], truth)
    return out, {"n_stacks": len(stacks), "excluded": len(scans) - len(stacks),
                 "split": {k: len(v) for k, v in split.items()}}


def cmd_fit_atlas_lrs(args, cfg):
    from .pipeline import fit_atlas_lrs_on_slices, load_preprocessed, save_atlas

    src = _run(args) / "preprocessed"
    _require(src / "grid.npz", "preprocessed data (run `preprocess`)")
    stacks, split, _, brain, labels, _ = load_preprocessed(src)
    regions, bank, binning = fit_atlas_lrs_on_slices(cfg, stacks, split, brain, labels)
    out = _run(args) / "atlas"
    save_atlas(out, regions, bank, binning)
    return out, {"regions": regions.stats(), "fitted": bank.report["fitted"],
                 "underfit": len(bank.report["underfit"])}


def cmd_search_pwf(args, cfg):
    from .pipeline import search_pwf
    from .pwf import write_search_log

    prep = _load_prepared(_run(args))
    best, log = search_pwf(prep, cfg)
    out = _run(args) / "search"
    out.mkdir(parents=True, exist_ok=True)
    write_search_log(log, out / "search_log.jsonl", cfg.search_epochs)
    (out / "best_pwf.json").write_text(json.dumps(best.to_dict(), indent=1))
    return out, {"best": best.to_dict()}


def _pwf_for(args, cfg):
    from .pipeline import pwf_params
    from .pwf import PWFParams

    if getattr(args, "pwf", None):
        return PWFParams.from_dict(json.loads(_require(Path(args.pwf), "PWF file").read_text()))
    return pwf_params(cfg)


def cmd_train(args, cfg):
    from .pipeline import Simulator, save_checkpoint, train_progression, train_superres

    prep = _load_prepared(_run(args))
    pwf = _pwf_for(args, cfg)
    bundles = train_progression(prep, cfg, pwf, args.workers)
    sim = Simulator.from_config(bundles, prep, cfg)
    sr = train_superres(sim, prep.part("train"), cfg) if cfg.sr_enabled else None
    out = _run(args) / "checkpoint"
    save_checkpoint(out, bundles, prep.binning, sr, {"temporal_consistency": cfg.temporal_consistency,
                                                      "pwf": pwf.to_dict(), "config_hash": cfg.digest()})
    histories = {n: b.history[-1] if b.history else {} for n, b in bundles.items()}
    return out, {"final_losses": histories}


def cmd_personalize(args, cfg):
    from .pipeline import held_out_cases
    from .personalize import fine_tune, save_personalized

    run = _run(args)
    prep = _load_prepared(run)
    sim, man = _simulator(run, prep, cfg)
    pwf = _pwf_for(args, cfg)
    subjects = [args.subject] if args.subject else list(prep.split["test"])
    contexts = {n: prep.context(n) for n in sim.bundles}
    done = []
    for sid in subjects:
        baseline = _subject_stacks(prep, sid)[0]
        tuned = fine_tune(sim.bundles, baseline, prep.binning, contexts, pwf, cfg.tl_iterations,
                          seed=cfg.seed, rec_only=cfg.tl_rec_only, sr_model=sim.sr)
        save_personalized(tuned, run / "checkpoint", sid)
        done.append(sid)
    return run / "checkpoint" / "personalized", {"subjects": done}


def cmd_simulate(args, cfg):
    from .assemble import interpolate_age, write_series

    run = _run(args)
    prep = _load_prepared(run)
    baseline = _subject_stacks(prep, args.subject)[0]
    sim, _ = _simulator(run, prep, cfg, args.subject)
    vols = sim.series(baseline)
    out = run / "simulate" / args.subject
    write_series(vols, sim.centers, out / "bins", args.subject, baseline.diagnosis, baseline.gender)
    ages = [float(a) for a in args.ages.split(",")] if args.ages else []
    written = []
    for age in ages:
        vol = interpolate_age(vols, sim.centers, age)
        meta = {"subject_id": args.subject, "age": age, "diagnosis": baseline.diagnosis, "gender": baseline.gender}
        written.append(D.write_array(vol, out / f"{args.subject}_{age:07.3f}.nii.gz", meta).name)
    return out, {"bins": len(vols), "ages": ages, "files": written}


def cmd_evaluate(args, cfg):
    from .assemble import read_series
    from .evaluate import plot_reports, render_table, volume_mae, volume_regions, write_report_csv
    from .pipeline import held_out_cases

    run = _run(args)
    prep = _load_prepared(run)
    cases = held_out_cases(prep)
    regions = volume_regions(prep.fitted_eval_regions())
    if args.predictions:
        root = Path(args.predictions)
        series = {c.subject_id: read_series(root / c.subject_id) for c in cases}
        label = "predictions"
    else:
        series = {}
        for c in cases:
            sim, _ = _simulator(run, prep, cfg, c.subject_id)
            series[c.subject_id] = sim.predict(c.baseline)
        label = "model"
    report = volume_mae(series, cases, regions, prep.brain, cfg.volume_mode, label)
    out = run / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv([report], out / "report.csv")
    (out / "report.txt").write_text(render_table([report]) + "\n")
    if args.plot:
        plot_reports([report], out / "report.png")
    return out, {"mae": report.mae, "std": report.std, "n_cases": report.n_cases}


def cmd_ablate(args, cfg):
    from .evaluate import render_table, write_report_csv
    from .pipeline import run_experiment

    run = _run(args)
    prep = _load_prepared(run)
    exp = run_experiment(cfg, args.workers, prep=prep)
    out = run / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    reports = list(exp.ablation.reports.values())
    write_report_csv(reports, out / "ablation.csv")
    (out / "ablation.txt").write_text(render_table(reports, "Ablation: regional volume error (% of brain)") + "\n")
    (out / "improvements.json").write_text(json.dumps(exp.ablation.improvements, indent=1))
    return out, {"improvements": exp.ablation.improvements}


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "fit-atlas-lrs": cmd_fit_atlas_lrs,
    "search-pwf": cmd_search_pwf,
    "train": cmd_train,
    "personalize": cmd_personalize,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file of flat key: value settings")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--workers", type=int, default=1, help="processes for per-slice training")
    common.add_argument("--out", default="run", help="run directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dani4d", description="Longitudinal brain MRI simulation on phantom cohorts.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("phantom", parents=[common], help="generate a phantom cohort")
    sp = sub.add_parser("preprocess", parents=[common], help="align, strip, slice and standardize")
    sp.add_argument("--data", help="cohort directory (default: <out>/cohort)")
    sub.add_parser("fit-atlas-lrs", parents=[common], help="atlas regions and regional ratio regressors")
    sub.add_parser("search-pwf", parents=[common], help="random grid search of loss-weight profiles")
    sp = sub.add_parser("train", parents=[common], help="train slice models and the SR stage")
    sp.add_argument("--pwf", help="JSON file of profile parameters (e.g. search/best_pwf.json)")
    sp = sub.add_parser("personalize", parents=[common], help="fine-tune on test baselines")
    sp.add_argument("--subject", help="one subject id (default: every test subject)")
    sp.add_argument("--pwf", help="JSON file of profile parameters")
    sp = sub.add_parser("simulate", parents=[common], help="simulate one subject's future scans")
    sp.add_argument("--subject", required=True)
    sp.add_argument("--ages", help="comma-separated target ages")
    sp = sub.add_parser("evaluate", parents=[common], help="regional volume error on test follow-ups")
    sp.add_argument("--predictions", help="directory of <subject>/series.json predictions to score instead")
    sp.add_argument("--plot", action="store_true")
    sub.add_parser("ablate", parents=[common], help="component ablation (TC, SR, TL)")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.verbose:
            warnings.simplefilter("ignore")
        overrides = parse_overrides(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        if args.workers < 1:
            raise CLIError("usage", "--workers must be >= 1", EXIT_USAGE)
        import torch

        torch.set_num_threads(1)
        started = time.time()
        stage_dir, extra = COMMANDS[args.command](args, cfg)
        _write_manifest(Path(stage_dir), args, cfg, started, extra)
        print(json.dumps({"ok": True, "command": args.command, "output": str(stage_dir)}))
        return 0
    except CLIError as e:
        _emit_error(e.kind, e)
        return e.code
    except D.ConfigurationError as e:
        _emit_error("config", e)
        return EXIT_USAGE
    except (D.MetadataError, D.VolumeIOError, D.PreprocessingError, FileNotFoundError) as e:
        _emit_error("data", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
