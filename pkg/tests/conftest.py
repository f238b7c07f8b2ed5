"""测试公共夹具"""

import sys
from pathlib import Path

import numpy as np
import pytest

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from app.core.setnn import SetBatch, init_model
from app.schemas import AggregatorKind, AggregatorSpec, MlpSpec
from app.utils.numerics import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def positive_sets(rng):
    """正值元素的小集合 (大小 1..6，d = 2)"""
    sizes = [1, 2, 3, 4, 5, 6]
    return [rng.child(i).uniform(0.5, 1.5, size=(m, 2)) for i, m in enumerate(sizes)]


def make_model(kind=AggregatorKind.MEAN, p=None, learnable=False, d=2, latent=4, out=1, seed=0,
               activation='tanh', rho_identity=False, **agg_fields):
    """小型 SetModel: φ: d → 8 → latent，ρ: latent → 8 → out (或恒等)"""
    agg = AggregatorSpec(kind=kind, p=p, learnable=learnable, **agg_fields)
    phi = MlpSpec(layer_widths=[d, 8, latent], activation=activation,
                  positive_output=agg.requires_positive or kind in (AggregatorKind.MAX, AggregatorKind.MIN))
    rho = MlpSpec(layer_widths=[latent] if rho_identity else [latent, 8, out], activation=activation)
    return init_model(phi, agg, rho, Rng(seed))


def make_batch(sets, targets=None):
    return SetBatch.from_sets(sets, targets)


@pytest.fixture
def model_factory():
    return make_model


@pytest.fixture
def batch_of(positive_sets):
    rng = Rng(99)
    return SetBatch.from_sets(positive_sets, rng.uniform(0.0, 1.0, size=len(positive_sets)))
