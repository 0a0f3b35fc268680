import numpy as np
import pytest

from inkdiff import autograd as ag
from inkdiff.data import PROMPTS
from inkdiff.denoiser import Denoiser, DenoiserConfig, TokenVocabulary
from inkdiff.diffusion import make_schedule
from inkdiff.rng import RandomStream

CHINESE = PROMPTS["chinese"]
MODERN = PROMPTS["modern"]


def tiny_config(**kw) -> DenoiserConfig:
    base = dict(image_size=8, channels=(4, 8), res_blocks=1, groups=2, time_dim=8, context_dim=16, max_tokens=8, T=20)
    base.update(kw)
    return DenoiserConfig(**base)


@pytest.fixture
def vocab():
    return TokenVocabulary.from_prompts([CHINESE, MODERN, "a landscape painting"])


@pytest.fixture
def tiny_model(vocab):
    cfg = tiny_config()
    return Denoiser.fresh(cfg, vocab, RandomStream(3))


@pytest.fixture
def tiny_schedule():
    return make_schedule(20, 1e-3, 0.2)


@pytest.fixture
def float64():
    with ag.default_dtype(np.float64):
        yield


class ZeroModel:
    """Predicts zero noise everywhere."""

    def __call__(self, x, t, ids):
        return ag.Tensor(np.zeros_like(np.asarray(x)))
