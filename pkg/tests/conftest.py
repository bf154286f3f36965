import copy
import warnings

import pytest
import torch
from hypothesis import HealthCheck, settings

from knowmvg.config import RunConfig
from knowmvg.data import generate_dataset, split_dataset
from knowmvg.pipeline import fixture_graph
from knowmvg.train import build_model

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

warnings.filterwarnings("ignore", message="Converting a tensor with requires_grad")


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def tiny_cfg() -> RunConfig:
    cfg = RunConfig()
    cfg.data.n_samples = 48
    cfg.train.steps = 12
    cfg.train.eval_every = 6
    cfg.phase0.steps = 4
    cfg.phase0.min_mask_iou = 0.0
    return cfg


@pytest.fixture(scope="session")
def samples():
    return generate_dataset(0, 16, 128)


@pytest.fixture(scope="session")
def splits(tiny_cfg):
    data = generate_dataset(tiny_cfg.seed, tiny_cfg.data.n_samples, tiny_cfg.data.image_size)
    return split_dataset(data, tiny_cfg.data.val_fraction, tiny_cfg.data.test_fraction)


@pytest.fixture(scope="session")
def kg(splits, tmp_path_factory):
    return fixture_graph(splits["train"], tmp_path_factory.mktemp("fixtures"))


@pytest.fixture
def model(tiny_cfg, kg):
    m = build_model(tiny_cfg, kg)
    m.eval()
    return m


def with_cells(cfg, kps=True, gla=True):
    c = copy.deepcopy(cfg)
    c.ablation.kps_on, c.ablation.gla_on = kps, gla
    return c
