import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from app.models import Dataset, ModelSpec  # noqa: E402
from config import Config  # noqa: E402


def pytest_collection_modifyitems(config, items):
    if os.getenv('UPLIFT_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason='设置 UPLIFT_RUN_SLOW=1 运行')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def tiny_spec(backbone='tarnet_cfrnet', head='sa', disc='none', **overrides):
    """测试用的小网络：不走参数预算"""
    rep = (6,) if backbone == 'drcfr' else (4,)
    payload = dict(backbone=backbone, head=head, disc=disc, rep_widths=rep, head_widths=(3,),
                   param_budget=None, lambda2=0.5, learning_rate=1e-2)
    payload.update(overrides)
    return ModelSpec(**payload)


@pytest.fixture
def tiny_batch():
    """12 行、3 个处理、每组 4 行"""
    rng = np.random.default_rng(7)
    X = rng.standard_normal((12, 3))
    t = np.arange(12) % 3
    y = rng.integers(0, 2, 12)
    return X, t, y


@pytest.fixture
def constant_dataset():
    """结果与 X、T 都独立的数据"""
    rng = np.random.default_rng(11)
    n = 6000
    return Dataset(X=rng.standard_normal((n, 4)), T=rng.integers(0, 3, n),
                   Y=(rng.random(n) < 0.3).astype(int), m=3)


@pytest.fixture
def app_config(tmp_path):
    class TestConfig(Config):
        OUTPUT_DIR = str(tmp_path / 'output')
        LOG_LEVEL = 'WARNING'
        BENCH_WORKERS = 1
        BENCH_SEEDS = 2
        EPOCHS = 2
        PATIENCE = 30
        BATCH_SIZE = 128
    return TestConfig


@pytest.fixture
def app(app_config):
    from app import create_app
    return create_app(app_config)
