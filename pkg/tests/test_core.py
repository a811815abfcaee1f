import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dani4d.core import (
    AgeBinning,
    ConstantSchedule,
    RegionContext,
    SliceData,
    SliceModelBundle,
    TrainConfig,
    TrainingDivergence,
    build_age_binning,
    evaluate_losses,
    generate_sequence,
    train_slice_model,
)
from dani4d.core import losses as L
from dani4d.core.binning import membership
from dani4d.core.networks import Encoder, Generator

SMALL = TrainConfig(latent_dim=16, channels=4, batch_size=8)


# --------------------------------------------------------------------------
# binning


def test_hand_computed_binning():
    b = build_age_binning(list(range(60, 70)), 5, 1.0)
    assert b.centers == (60.5, 62.5, 64.5, 66.5, 68.5)
    assert b.deltas == (1.0,) * 5
    assert b.sigmas == (1.0,) * 5
    assert [b.bin_index(a) for a in range(60, 70)] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]


def test_equal_frequency_edges_near_deciles():
    ages = np.linspace(60, 90, 1001)
    b = build_age_binning(ages, 10)
    assert np.allclose(b.edges[1:-1], np.arange(63, 90, 3), atol=0.05)
    counts = np.bincount([b.bin_index(a) for a in ages], minlength=10)
    assert counts.max() - counts.min() <= 1


def test_degenerate_bin_sigma_floor():
    b = build_age_binning([70.0] * 5 + [80.0, 81.0, 82.0, 83.0, 84.0], 2)
    assert b.deltas[0] == 0.0
    assert b.sigmas[0] == 0.5


def test_binning_preconditions():
    with pytest.raises(ValueError):
        build_age_binning([60, 61, 62], 1)
    with pytest.raises(ValueError):
        build_age_binning([70, 70, 70, 70], 2)
    with pytest.raises(ValueError):
        build_age_binning([60, 61], 3)


def test_membership_examples():
    b = build_age_binning(np.linspace(60, 80, 50), 4)
    for i in range(4):
        m, s = b.centers[i], b.sigmas[i]
        assert membership(b, m, i) == 1.0
        assert membership(b, m + s, i) == pytest.approx(math.exp(-0.5))
        assert membership(b, m - s, i) == pytest.approx(math.exp(-0.5))
    thetas = b.centers[1] + np.linspace(0, 20, 100)
    vals = [membership(b, t, 1) for t in thetas]
    assert all(x > y for x, y in zip(vals, vals[1:]))
    assert np.allclose(b.memberships(71.3), [membership(b, 71.3, i) for i in range(4)])


def test_binning_roundtrip():
    b = build_age_binning(np.linspace(60, 80, 30), 3)
    assert AgeBinning.from_dict(b.to_dict()) == b


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(50, 95), min_size=10, max_size=80), st.integers(2, 8))
def test_binning_invariants(ages, A):
    if max(ages) - min(ages) <= 0 or len(ages) < A:
        return
    b = build_age_binning(ages, A)
    assert all(np.diff(b.edges) >= 0)
    assert b.edges[0] == min(ages) and b.edges[-1] == max(ages)
    assert all(s > 0 for s in b.sigmas)
    assert all(0 <= b.bin_index(a) < A for a in ages)


# --------------------------------------------------------------------------
# spec-stated loss examples


def test_rec_examples():
    x = torch.rand(1, 4, 4, dtype=torch.float64)
    mu = torch.tensor([[0.5, 0.8, 1.0]], dtype=torch.float64)
    seq = (x[:, None] / mu[..., None, None])
    assert L.loss_rec(x, seq, mu).item() == pytest.approx(0.0, abs=1e-15)
    assert L.loss_rec(x, (x + 1)[:, None], torch.ones(1, 1)).item() == pytest.approx(1.0)


def test_vox_examples():
    seq = torch.tensor([3.0, 2.0, 1.0]).view(1, 3, 1, 1)
    assert L.loss_vox(seq, torch.tensor([1])).item() == pytest.approx(1.0)
    const = torch.full((1, 4, 3, 3), 0.7)
    assert L.loss_vox(const, torch.tensor([2])).item() == 0.0


def test_vox_reversal_changes_value(rng):
    for _ in range(10):
        seq = torch.as_tensor(rng.normal(size=(1, 4, 3, 3)))
        a = torch.tensor([1])
        fwd = L.loss_vox(seq, a).item()
        rev = L.loss_vox(torch.flip(seq, [1]), a).item()
        assert fwd != rev


def test_reg_hand_example():
    # A=2, one 4-voxel region, own bin is the later one; prediction 0.9 vs observed 1.0
    seq = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    masks = torch.ones(1, 2, 2, dtype=torch.float64)
    table = torch.full((1, 2, 2, 4), 0.9, dtype=torch.float64)
    got = L.loss_reg(seq, torch.tensor([1]), torch.tensor([0]), masks, torch.tensor([4.0]), table)
    assert got.item() == pytest.approx(-0.2)


def test_reg_all_zero_closed_form(rng):
    A, R = 4, 3
    table = torch.as_tensor(rng.uniform(0.7, 1.3, size=(R, A, A, 4)))
    sizes = torch.tensor([4.0, 9.0, 16.0], dtype=torch.float64)
    masks = torch.ones(R, 3, 3, dtype=torch.float64)
    a, d = 2, 1
    got = L.loss_reg(torch.zeros(1, A, 3, 3, dtype=torch.float64), torch.tensor([a]), torch.tensor([d]),
                     masks, sizes, table).item()
    want = sum((table[q, min(o, a), max(o, a), d].item() - 1.0) * math.sqrt(sizes[q].item())
               for q in range(R) for o in range(A) if o != a) / (R * (A - 1))
    assert got == pytest.approx(want, abs=1e-12)


def test_total_examples():
    losses = {k: torch.tensor(float(i + 1)) for i, k in enumerate(L.LOSS_NAMES)}
    assert L.loss_total(losses, {k: 0.0 for k in L.LOSS_NAMES}) == 0
    for k in L.LOSS_NAMES:
        assert L.loss_total(losses, {j: float(j == k) for j in L.LOSS_NAMES}).item() == losses[k].item()


def test_latent_encoder_loss_descends_toward_prior_like_region():
    # fixed toy D^z on 2-D latents scoring x[0] > 0 as prior-like
    disc = lambda v: torch.sigmoid(3.0 * v[:, 0])
    z = torch.tensor([[-0.5, 0.2], [-0.3, -0.1]], requires_grad=True)
    z_star = L.sample_prior(4, 2, torch.Generator().manual_seed(0))
    _, before = L.loss_adv_latent(disc, z, z_star)
    before.backward()
    with torch.no_grad():
        z2 = z - 0.1 * z.grad
    _, after = L.loss_adv_latent(disc, z2, z_star)
    assert after.item() < before.item()
    same = L.sample_prior(4, 2, torch.Generator().manual_seed(0))
    assert torch.equal(z_star, same)


# --------------------------------------------------------------------------
# networks, bundles, training


def _toy_data(n=24, size=8, A=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    ages = torch.linspace(60, 80, n, dtype=torch.float64)
    b = build_age_binning(ages.numpy(), A)
    x = torch.rand(n, size, size, generator=g) * 0.2 + torch.linspace(1, 0, n)[:, None, None]
    mu = torch.as_tensor(np.stack([b.memberships(a) for a in ages.numpy()]), dtype=torch.float32)
    data = SliceData(x, ages, torch.tensor([b.bin_index(a) for a in ages.numpy()]), torch.arange(n) % 4,
                     torch.zeros(n), torch.ones(n), mu, [f"s{i}" for i in range(n)])
    return data, b


def test_network_shapes():
    with pytest.raises(ValueError):
        Encoder(size=12)
    E, G = Encoder(16, 8, 4), Generator(16, 8, 5, 4)
    z = E(torch.rand(3, 16, 16))
    assert z.shape == (3, 8) and z.abs().max() <= 1
    assert G.sequence(z, torch.tensor([0, 1, 3])).shape == (3, 5, 16, 16)


def test_epochs_zero_leaves_bundle_unchanged():
    data, b = _toy_data()
    bundle = SliceModelBundle(0, 8, 3, SMALL, seed=1)
    before = bundle.flat_parameters().clone()
    train_slice_model(bundle, data, None, ConstantSchedule({"rec": 1.0}), 0)
    assert torch.equal(before, bundle.flat_parameters())
    assert bundle.epoch == 0


def test_smoke_training_reduces_rec():
    data, b = _toy_data()
    bundle = SliceModelBundle(0, 8, 3, SMALL, seed=2)
    sched = ConstantSchedule({"rec": 10.0, "vox": 1.0, "reg": 1.0, "b": 0.01, "z": 0.05})
    _, hist = train_slice_model(bundle, data, None, sched, 20, seed=0)
    assert len(hist) == 20
    assert hist[-1]["rec"] < hist[0]["rec"]
    assert torch.isfinite(bundle.flat_parameters()).all()


def test_training_is_bit_reproducible():
    data, b = _toy_data()
    sched = ConstantSchedule({"rec": 10.0, "vox": 1.0, "b": 0.01, "z": 0.05})
    runs = []
    for _ in range(2):
        bundle = SliceModelBundle(0, 8, 3, SMALL, seed=5)
        train_slice_model(bundle, data, None, sched, 3, seed=9)
        runs.append((bundle.history, bundle.flat_parameters()))
    assert runs[0][0] == runs[1][0]
    assert torch.equal(runs[0][1], runs[1][1])


def test_divergence_names_component_and_epoch():
    data, b = _toy_data()
    data.x[0, 0, 0] = float("nan")
    bundle = SliceModelBundle(0, 8, 3, SMALL, seed=0)
    with pytest.raises(TrainingDivergence) as e:
        train_slice_model(bundle, data, None, ConstantSchedule({"rec": 1.0}), 2)
    assert e.value.epoch == 0
    assert e.value.component in ("rec", "b", "z", "tot", "disc_b", "disc_z", "vox", "reg")


def test_empty_data_rejected():
    data, _ = _toy_data()
    with pytest.raises(ValueError):
        train_slice_model(SliceModelBundle(0, 8, 3, SMALL), data.subset([]), None, ConstantSchedule({}), 1)


def test_generation_deterministic_and_conditioned():
    data, b = _toy_data()
    bundle = SliceModelBundle(0, 8, 3, SMALL, seed=3)
    train_slice_model(bundle, data, None, ConstantSchedule({"rec": 10.0, "b": 0.01, "z": 0.05}), 3)
    x = data.x[0].numpy()
    s1, s2 = generate_sequence(bundle, x, 1), generate_sequence(bundle, x, 1)
    assert s1.shape == (3, 8, 8)
    assert np.array_equal(s1, s2)
    assert not np.array_equal(s1, generate_sequence(bundle, x, 3))
    assert generate_sequence(bundle, data.x[:4].numpy(), 0).shape == (4, 3, 8, 8)


def test_bundle_save_load_roundtrip(tmp_path):
    data, b = _toy_data()
    bundle = SliceModelBundle(2, 8, 3, SMALL, seed=4)
    train_slice_model(bundle, data, None, ConstantSchedule({"rec": 1.0}), 2)
    bundle.save(tmp_path / "b")
    back = SliceModelBundle.load(tmp_path / "b")
    assert back.n == 2 and back.epoch == 2 and back.latent_dim == 16
    assert back.history == bundle.history
    assert torch.equal(back.flat_parameters(), bundle.flat_parameters())


def test_evaluate_losses_reports_total():
    data, b = _toy_data()
    bundle = SliceModelBundle(0, 8, 3, SMALL, seed=4)
    w = {"rec": 2.0, "vox": 1.0, "reg": 0.0, "b": 0.5, "z": 0.5}
    out = evaluate_losses(bundle, data, None, w, seed=1)
    assert out["tot"] == pytest.approx(sum(w[k] * out[k] for k in w), rel=1e-5)
    assert out == evaluate_losses(bundle, data, None, w, seed=1)


def test_region_context_empty_and_sizes():
    ctx = RegionContext.empty(8, 3)
    assert ctx.masks.shape == (0, 8, 8) and ctx.table.shape == (0, 3, 3, 4)
