import math

import numpy as np
import pytest
import torch

from dani4d.superres import (
    DenseResidualSR,
    SRDivergence,
    SRModel,
    apply_sr,
    make_lr_hr_pairs,
    psnr,
    train_sr,
    trilinear_control,
)


def _vol(rng, shape=(12, 12, 6)):
    return rng.normal(size=shape)


def test_zero_residual_is_identity(rng):
    m = SRModel.create(seed=1)
    m.net.zero_residual()
    v = _vol(rng)
    assert np.allclose(apply_sr(m, v), v, atol=1e-6)


def test_zero_epochs_returns_initial_model(rng):
    v = _vol(rng)
    init = SRModel.create(seed=4)
    trained = train_sr([(v, v)], epochs=0, seed=4)
    assert trained.parameter_bytes() == init.parameter_bytes()
    assert trained.epochs == 0


def test_shape_preserved_for_odd_grids(rng):
    m = SRModel.create(depth=2, growth=4, seed=0)
    for shape in [(7, 9, 5), (32, 32, 9), (3, 3, 3)]:
        assert apply_sr(m, rng.normal(size=shape)).shape == shape


def test_learns_identity_on_identical_pairs(rng):
    pairs = [(v, v) for v in (_vol(rng, (16, 16, 8)) for _ in range(4))]
    m = train_sr(pairs, epochs=120, patch=8, seed=0, depth=2, growth=4, lr=3e-3)
    assert m.history[-1] < m.history[0]
    assert np.mean(m.history[-10:]) < 1e-3


def test_training_reduces_error_on_a_learnable_degradation(rng):
    hrs = [_vol(rng, (16, 16, 8)) for _ in range(6)]
    pairs = [(0.5 * h, h) for h in hrs]
    m = train_sr(pairs, epochs=80, patch=8, seed=0, depth=2, growth=4, lr=3e-3)
    lr, hr = pairs[0]
    assert np.mean((apply_sr(m, lr) - hr) ** 2) < np.mean((lr - hr) ** 2)


def test_training_is_deterministic(rng):
    pairs = [(_vol(rng), _vol(rng)) for _ in range(3)]
    a = train_sr(pairs, epochs=3, patch=8, seed=9, depth=2, growth=4)
    b = train_sr(pairs, epochs=3, patch=8, seed=9, depth=2, growth=4)
    assert a.parameter_bytes() == b.parameter_bytes()
    assert a.history == b.history


def test_divergence_raises():
    v = np.full((8, 8, 4), np.nan)
    with pytest.raises(SRDivergence):
        train_sr([(v, v)], epochs=1, patch=4, depth=1, growth=2)


def test_input_validation(rng):
    with pytest.raises(ValueError):
        train_sr([], epochs=1)
    with pytest.raises(ValueError):
        train_sr([(_vol(rng), _vol(rng)), (_vol(rng, (4, 4, 4)),) * 2], epochs=1)


def test_pair_construction_drops_mismatches(rng, caplog):
    items = ["a", "b", "c"]
    recon = {"a": np.zeros((4, 4, 2)), "b": np.zeros((4, 4, 2)), "c": np.zeros((4, 4, 3))}
    real = {k: np.ones((4, 4, 2)) for k in items}
    pairs = make_lr_hr_pairs(recon.__getitem__, items, real.__getitem__)
    assert len(pairs) == 2
    again = make_lr_hr_pairs(recon.__getitem__, items, real.__getitem__)
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(pairs, again))


def test_save_load_roundtrip(tmp_path, rng):
    m = train_sr([(_vol(rng), _vol(rng))], epochs=2, patch=8, depth=2, growth=4)
    m.save(tmp_path / "sr")
    back = SRModel.load(tmp_path / "sr")
    assert back.parameter_bytes() == m.parameter_bytes()
    assert back.manifest() == m.manifest()
    v = _vol(rng)
    assert np.array_equal(apply_sr(back, v), apply_sr(m, v))


def test_trilinear_control_keeps_linear_ramps():
    x, y, z = np.meshgrid(np.arange(8.0), np.arange(8.0), np.arange(5.0), indexing="ij")
    ramp = 0.3 * x - 0.2 * y + 0.1 * z
    out = trilinear_control(ramp)
    assert out.shape == ramp.shape
    assert np.allclose(out, ramp, atol=1e-9)


def test_psnr_values():
    ref = np.array([0.0, 1.0, 0.0, 1.0])
    assert psnr(ref, ref) == math.inf
    pred = ref + 0.1
    assert psnr(pred, ref) == pytest.approx(20.0, abs=1e-9)
    assert psnr(pred, ref, data_range=10.0) == pytest.approx(40.0, abs=1e-9)
