import numpy as np
import pytest

from crbpr.data import Dataset, SynthConfig, generate_synthetic, split_triplets
from crbpr.history import build_index
from crbpr.model import CRBPR, BranchToggles, Hyperparams


def toy_config(seed=0, **overrides):
    base = dict(n_users=5, n_givens=8, n_matchers=8, n_triplets=30, latent_dim=3, visual_dim=6,
                textual_dim=5, persona_clusters=2, pool_size=8, seed=seed)
    base.update(overrides)
    return SynthConfig(**base)


def toy_hyperparams(**overrides):
    base = dict(d_e=4, d_v=4, d_w=4, K=1, batch_size=3, init_scale=1.0, lam=0.01, max_epochs=3, patience=2)
    base.update(overrides)
    return Hyperparams(**base)


@pytest.fixture
def toy_data():
    syn = generate_synthetic(toy_config())
    triplets = split_triplets(syn.triplets, (0.6, 0.2, 0.2), seed=0)
    return Dataset(syn.catalog, syn.features, triplets)


@pytest.fixture
def toy_index(toy_data):
    return build_index(toy_data.triplets, toy_data.features)


@pytest.fixture
def make_model(toy_data, toy_index):
    def factory(hp=None, toggles=None, **hp_overrides):
        hp = hp or toy_hyperparams(**hp_overrides)
        return CRBPR(toy_data.catalog, toy_data.features, toy_index, hp, toggles or BranchToggles())
    return factory


@pytest.fixture
def toy_batch():
    rng = np.random.default_rng(3)
    u = rng.integers(5, size=3)
    g = rng.integers(8, size=3)
    r_pos = rng.integers(8, size=3)
    r_neg = (r_pos + 1 + rng.integers(7, size=3)) % 8
    return u, g, r_pos, r_neg


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion and print it immediately."""
    def record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
        request.config.acceptance_lines.append((number, line))
        print(line)
        return passed
    return record
