import numpy as np
import pytest
import torch

from cinema import backbone, dataio, phantom

torch.set_num_threads(1)


def tiny_config(**overrides) -> backbone.ModelConfig:
    """Smallest multi-view model that still exercises every code path."""
    base = dict(
        views=(backbone.sax_view((32, 32, 2)),) + tuple(backbone.lax_view(v, (32, 32)) for v in phantom.LAX_VIEWS),
        embed_dim=16,
        encoder_depth=2,
        encoder_heads=2,
        decoder_dim=8,
        decoder_depth=1,
        decoder_heads=2,
        conv_channels=(4, 8),
    )
    base.update(overrides)
    return backbone.ModelConfig(**base)


DESK_SAX = dataio.GridSpec((2.0, 2.0, 10.0), (64, 64, 4))
DESK_LAX = dataio.GridSpec((2.0, 2.0), (64, 64))


def desk_cohort(n: int, seed: int):
    return [dataio.preprocess_study(phantom.generate_study(p), DESK_SAX, DESK_LAX) for p in phantom.sample_cohort(n, seed)]


@pytest.fixture(scope="session")
def desk_study():
    return phantom.generate_study(phantom.desk_params())


@pytest.fixture(scope="session")
def default_study():
    return phantom.generate_study(phantom.PhantomParams(noise_sigma=0.0))


@pytest.fixture(scope="session")
def small_cohort():
    return desk_cohort(4, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_SAX = dataio.GridSpec((4.0, 4.0, 20.0), (32, 32, 2))
TINY_LAX = dataio.GridSpec((4.0, 4.0), (32, 32))


@pytest.fixture(scope="session")
def tiny_studies():
    """Desk phantoms resampled onto the tiny model's grids."""
    params = [phantom.desk_params(seed=s, n_phases=4) for s in range(4)]
    return [dataio.preprocess_study(phantom.generate_study(p), TINY_SAX, TINY_LAX) for p in params]


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
