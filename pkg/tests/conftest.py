import sys

import pytest

from uniremoval import degradations as D
from uniremoval.config import TrainConfig

TINY = {
    "batch_size": 3, "patch_size": 32, "tau": 1.0, "holdout_fraction": 0.2, "log_every": 1,
    "backbone": {"stages": 1, "base_channels": 4, "depth": 2, "blocks_per_level": 1},
    "discriminator": {"base_channels": 4, "n_layers": 1},
    "phi": {"mode": "random", "width_divisor": 16, "tap": "relu2_1"},
    "lr": 1e-3, "workdir": "runs",
}


def tiny_config(stage, **kw):
    d = dict(TINY, stage=stage)
    d.update(kw)
    return TrainConfig.from_dict(d)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    D.write_clean_corpus(root / "clean", 10, 32, seed=11)
    D.write_clean_corpus(root / "clean_real", 12, 32, seed=12)
    D.build_synthetic_dataset(root / "clean", root / "synthetic", seed=1)
    D.build_real_dataset(root / "clean_real", root / "real", seed=2)
    return root


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
