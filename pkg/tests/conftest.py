import pytest
import torch

from seqdiff.denoiser import DenoiserConfig, init_denoiser
from seqdiff.schedule import make_sqrt_schedule
from seqdiff.tasks import gen_mult
from seqdiff.textspace import Vocabulary


def pytest_configure(config):
    torch.set_num_threads(2)


@pytest.fixture(scope="session")
def sched():
    return make_sqrt_schedule(2000)


@pytest.fixture(scope="session")
def small_sched():
    return make_sqrt_schedule(10)


@pytest.fixture(scope="session")
def mult_vocab():
    exs = gen_mult(1, 1, mode="enumerate")
    return Vocabulary.from_texts([e.question for e in exs] + [e.target_text() for e in exs])


@pytest.fixture()
def tiny_model(mult_vocab):
    cfg = DenoiserConfig(
        layers=1, model_dim=16, heads=2, ff_dim=32, max_len=16,
        vocab_size=len(mult_vocab), embed_dim=8, self_conditioning=True,
    )
    return init_denoiser(cfg, seed=0)


def gen(seed: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(seed)
