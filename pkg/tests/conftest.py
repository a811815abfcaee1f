import numpy as np
import pytest
import torch

from dani4d import dataio as D

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return D.PhantomSpec(n_subjects=12, visits_per_subject=3, image_side=32, n_slices=5, seed=3)


@pytest.fixture(scope="session")
def small_cohort(small_spec):
    return D.generate_phantom_cohort(small_spec)


TINY = dict(n_subjects=40, visits_per_subject=3, n_slices=5, n_bins=3, epochs=30, latent_dim=32, channels=8,
            init_iterations=2, sr_epochs=5, tl_iterations=10, seed=5)


@pytest.fixture(scope="session")
def tiny_cfg():
    from dani4d.config import RunConfig

    return RunConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_prep(tiny_cfg):
    from dani4d.pipeline import prepare_phantom

    return prepare_phantom(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_bundles(tiny_prep, tiny_cfg):
    from dani4d.pipeline import train_progression

    return train_progression(tiny_prep, tiny_cfg)


@pytest.fixture(scope="session")
def experiment():
    """The default-configuration phantom experiment (both TC variants, SR, personalization, ablation)."""
    import warnings

    from dani4d.config import RunConfig
    from dani4d.pipeline import run_experiment

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_experiment(RunConfig())


# acceptance criteria record their outcome here; printed at the end of the run
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
