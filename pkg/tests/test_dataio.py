import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dani4d import dataio as D


def rates(g, k):
    return {d: (g, k) for d in range(4)}


# --------------------------------------------------------------------------
# phantom cohort


def test_zero_rates_give_identical_visits():
    spec = D.PhantomSpec(n_subjects=4, visits_per_subject=3, atrophy_rates=rates(0.0, 0.0), noise_std=0.0, seed=1)
    cohort = D.generate_phantom_cohort(spec)
    by_subject = {}
    for p in cohort:
        by_subject.setdefault(p.scan.subject_id, []).append(p.scan.voxels)
    for vols in by_subject.values():
        assert all(np.array_equal(vols[0], v) for v in vols[1:])


def test_same_seed_is_bit_identical(small_spec):
    a, b = D.generate_phantom_cohort(small_spec), D.generate_phantom_cohort(small_spec)
    assert all(np.array_equal(x.scan.voxels, y.scan.voxels) and x.truth == y.truth for x, y in zip(a, b))


def test_ventricle_growth_ratio_closed_form():
    spec = D.PhantomSpec(n_subjects=5, visits_per_subject=2, visit_interval=5.0, atrophy_rates=rates(0.02, 0.004),
                         seed=2)
    cohort = D.generate_phantom_cohort(spec)
    for first, second in zip(cohort[::2], cohort[1::2]):
        assert second.scan.age - first.scan.age == pytest.approx(5.0)
        ratio = second.truth["ventricle_volume"] / first.truth["ventricle_volume"]
        assert ratio == pytest.approx(1 + 0.02 * 5, abs=1e-12)


def test_ground_truth_monotone(small_cohort):
    by = {}
    for p in small_cohort:
        by.setdefault(p.scan.subject_id, []).append(p)
    for visits in by.values():
        visits.sort(key=lambda p: p.scan.age)
        v = [p.truth["ventricle_volume"] for p in visits]
        g = [p.truth["tissue_intensity"] for p in visits]
        assert all(b > a for a, b in zip(v, v[1:]))
        assert all(b < a for a, b in zip(g, g[1:]))


def test_rendered_ventricle_matches_ledger(small_spec):
    geo = D.phantom_geometry(small_spec)
    for area in (0.9, 1.0, 1.5):
        assert geo.ventricle_occupancy(area).sum() == pytest.approx(geo.ventricle_volume(area), abs=1.0)


@pytest.mark.parametrize("field,value", [("n_subjects", 0), ("image_side", 8), ("noise_std", -1.0),
                                         ("age_range", (80.0, 60.0)), ("atrophy_rates", rates(0.5, 0.0)),
                                         ("subject_jitter", 0.7)])
def test_invalid_spec_names_field(field, value):
    spec = D.PhantomSpec(**{field: value})
    with pytest.raises(D.ConfigurationError, match=field):
        D.generate_phantom_cohort(spec)


# --------------------------------------------------------------------------
# volume I/O


@pytest.mark.parametrize("suffix", [".nii.gz", ".nii", ".raw"])
def test_roundtrip(tmp_path, small_cohort, suffix):
    scan = small_cohort[0].scan
    path = D.write_volume(scan, tmp_path / f"vol{suffix}")
    back = D.ingest_volume(path)
    assert np.max(np.abs(back.voxels - scan.voxels)) < 1e-6
    assert (back.subject_id, back.age, back.diagnosis, back.gender) == \
        (scan.subject_id, scan.age, scan.diagnosis, scan.gender)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        D.ingest_volume(tmp_path / "nope.nii.gz")


def test_bad_diagnosis_is_metadata_error(tmp_path, small_cohort):
    path = D.write_volume(small_cohort[0].scan, tmp_path / "v.nii.gz")
    meta = json.loads(D.sidecar_path(path).read_text())
    meta["diagnosis"] = 7
    D.sidecar_path(path).write_text(json.dumps(meta))
    with pytest.raises(D.MetadataError):
        D.ingest_volume(path)


def test_missing_age_is_metadata_error(tmp_path, small_cohort):
    path = D.write_volume(small_cohort[0].scan, tmp_path / "v.nii")
    D.sidecar_path(path).write_text(json.dumps({"diagnosis": 1}))
    with pytest.raises(D.MetadataError, match="age"):
        D.ingest_volume(path)


def test_corrupt_files_are_io_errors(tmp_path, small_cohort):
    bad = tmp_path / "x.nii.gz"
    bad.write_bytes(b"not a volume")
    D.sidecar_path(bad).write_text(json.dumps({"age": 70, "diagnosis": 0}))
    with pytest.raises(D.VolumeIOError):
        D.ingest_volume(bad)
    raw = D.write_volume(small_cohort[0].scan, tmp_path / "r.raw")
    raw.write_bytes(raw.read_bytes()[:-8])
    with pytest.raises(D.VolumeIOError):
        D.ingest_volume(raw)


def test_manifest_roundtrip(tmp_path):
    recs = [{"subject_id": "a", "age": 70.0}, {"subject_id": "b", "age": 71.5}]
    D.write_manifest(recs, tmp_path / "m.jsonl")
    assert D.read_manifest(tmp_path / "m.jsonl") == recs


# --------------------------------------------------------------------------
# preprocessing


def test_standardize_examples():
    sl = np.arange(1.0, 17.0).reshape(4, 4)
    s, m, sd, degen = D.standardize_slice(sl)
    assert abs(s.mean()) < 1e-12 and s.std() == pytest.approx(1.0, abs=1e-12) and not degen
    s, m, sd, degen = D.standardize_slice(np.full((4, 4), 3.0))
    assert degen and sd == 1.0 and np.all(s == 0) and m == 3.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_standardization_idempotent_and_invertible(seed):
    sl = np.random.default_rng(seed).normal(3, 2, size=(6, 6))
    s, m, sd, _ = D.standardize_slice(sl)
    assert np.max(np.abs(s * sd + m - sl)) < 1e-6
    s2, *_ = D.standardize_slice(s)
    assert np.max(np.abs(s2 - s)) < 1e-6


def test_template_aligns_to_identity(small_spec):
    t = D.phantom_template(small_spec)
    assert D.fit_alignment(t, t).is_identity


def test_alignment_recovers_shift(small_spec):
    t = D.phantom_template(small_spec)
    shifted = D.VolumeScan("s", 70, 0, np.roll(t.voxels, 2, axis=0))
    stack = D.preprocess(shifted, t, positions=[16], brain_mask=D.phantom_brain_mask(small_spec))
    ref = D.preprocess(t, t, positions=[16], brain_mask=D.phantom_brain_mask(small_spec))
    assert np.max(np.abs(stack.destandardize() - ref.destandardize())) < 0.05


def test_preprocess_stack(small_spec, small_cohort):
    brain = D.phantom_brain_mask(small_spec)
    scan = small_cohort[0].scan
    st_ = D.preprocess(scan, D.phantom_template(small_spec), n_slices=5, brain_mask=brain)
    assert st_.slices.shape == (5, 32, 32)
    for k, z in enumerate(st_.positions):
        assert np.max(np.abs(st_.destandardize()[k] - scan.voxels[:, :, z] * brain[:, :, z])) < 1e-6


def test_slice_positions_span_mask(small_spec):
    brain = D.phantom_brain_mask(small_spec)
    zs = np.flatnonzero(brain.any(axis=(0, 1)))
    pos = D.slice_positions(brain, 9)
    assert pos[0] == zs[0] and pos[-1] == zs[-1] and np.all(np.diff(pos) > 0)


def test_failed_alignment_is_excluded(small_spec, small_cohort):
    t = D.phantom_template(small_spec)
    empty = D.VolumeScan("bad", 70, 0, np.zeros((32, 32, 32)))
    stacks, failed = D.preprocess_cohort([empty, small_cohort[0].scan], t, positions=[10, 16])
    assert failed == [empty.scan_id] and len(stacks) == 1


def test_stack_save_load(tmp_path, small_spec, small_cohort):
    st_ = D.preprocess(small_cohort[1].scan, D.phantom_template(small_spec), n_slices=3,
                       brain_mask=D.phantom_brain_mask(small_spec))
    st_.save(tmp_path / "s.npz")
    back = D.SliceStack.load(tmp_path / "s.npz")
    assert np.array_equal(back.slices, st_.slices) and back.scan_id == st_.scan_id


# --------------------------------------------------------------------------
# splits


def records(n, visits=3, interval=1.0):
    return [{"subject_id": f"s{i:03d}", "age": 60.0 + v * interval} for i in range(n) for v in range(visits)]


def test_one_year_followups_only_is_an_error():
    with pytest.raises(D.ConfigurationError):
        D.split_cohort(records(10, visits=2), seed=0)


def test_split_sizes_and_determinism():
    tr, va, te = D.split_cohort(records(100), (0.72, 0.14, 0.14), seed=4)
    assert (len(tr), len(va), len(te)) == (72, 14, 14)
    assert (tr, va, te) == D.split_cohort(records(100), (0.72, 0.14, 0.14), seed=4)


def test_split_validates_ratios():
    with pytest.raises(D.ConfigurationError):
        D.split_cohort(records(10), (0.5, 0.5, 0.5))
    with pytest.raises(D.ConfigurationError):
        D.split_cohort(records(2), seed=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_split_disjoint_for_any_seed(seed):
    recs = records(20) + [{"subject_id": f"t{i}", "age": 70.0} for i in range(5)]
    tr, va, te = D.split_cohort(recs, seed=seed)
    assert not (set(tr) & set(va)) and not (set(tr) & set(te)) and not (set(va) & set(te))
    assert len(tr) + len(va) + len(te) == 25
    assert all(s.startswith("s") for s in te)  # single-visit subjects never reach test
