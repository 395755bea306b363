import numpy as np
import pytest
import torch

from petprompt.data import DatasetConfig, build_dataset
from petprompt.model import ModelConfig, PromptConfig


class Poison:
    """A count level that raises the moment anything reads it."""

    def _boom(self, *a, **k):
        raise AssertionError("delta was read")

    __float__ = __index__ = __array__ = __len__ = __iter__ = __getitem__ = _boom


@pytest.fixture
def poison():
    return Poison()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_model_config(mode="dual", levels=1, base=4):
    return ModelConfig(
        levels=levels,
        base_channels=base,
        mode=mode,
        prompt=PromptConfig(clp_dim=8, clp_hidden=8, heads=2, base_size=(4, 4, 2), film_hidden=8),
    )


def small_data_config(**kw):
    d = dict(
        n_train=2,
        n_val=1,
        n_test=1,
        train_realizations=2,
        val_realizations=2,
        test_realizations=3,
        dims=(16, 16, 8),
        seed=3,
    )
    d.update(kw)
    return DatasetConfig(**d)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_data")
    return build_dataset(small_data_config(), out)


def randomize_head(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.head.weight.copy_(torch.randn(model.head.weight.shape, generator=g) * 0.3)
    return model


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
