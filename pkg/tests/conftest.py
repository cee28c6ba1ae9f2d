import json

import pytest

from sfpose.config import RunConfig


def tiny_config() -> RunConfig:
    """Seconds-scale configuration exercising every stage."""
    d = RunConfig().to_dict()
    d["data"]["source"].update(n_train=48, n_test=24)
    d["data"]["n_aux"] = 200
    d["model"].update(enc_channels=[4, 8, 8, 8], dec_channels=[8])
    d["source_train"].update(epochs=1, batch_size=16)
    d["prior_train"].update(epochs=2, k_prime=50, batch_size=128)
    d["adapt"].update(epochs=2, iters_per_epoch=2, batch_size=8, lr_drops=[1])
    d["seeds"] = [0, 1]
    return RunConfig.from_dict(d)


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    tiny_config().save(path)
    return path


def read_json(path):
    return json.loads(path.read_text())
