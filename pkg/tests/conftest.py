import numpy as np
import pytest

from dlmfp.models import ModelSpec, random_transformer
from dlmfp.rules import RuleModel, rule_prompt


def make_transformer(d=8, h=2, layers=1, d_ff=16, V=11, L=48, mode="bidirectional", seed=0):
    return random_transformer(ModelSpec(d, h, layers, d_ff, V, L, mode), seed)


def random_prompt(V, length, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, V - 1, size=length)


@pytest.fixture
def tiny():
    return make_transformer(seed=3)


@pytest.fixture
def rule_pair():
    dlm = RuleModel(11, 1.0, seed=1)
    ar = RuleModel(11, 1.0, seed=2, mode="causal")
    return dlm, ar, rule_prompt(11, 4, 0)
