import pytest

from slr.config import Config

TINY = dict(width=32, height=32, n_train=4, n_test=2, warmup_epochs=1, finetune_epochs=1,
            channels="4,4,4", batch_size=2)


def tiny_config(**overrides) -> Config:
    return Config().replace(**{**TINY, **overrides}).validate()


def tiny_config_text(**overrides) -> str:
    return tiny_config(**overrides).dumps()


@pytest.fixture
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(tiny_config_text())
    return path
