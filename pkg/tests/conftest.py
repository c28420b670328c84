import numpy as np
import pytest

from udmlab.core import LinearSchedule
from udmlab.denoiser import Arch, init_params
from udmlab.pretrain import OptimConfig, run_pretrain
from udmlab.rng import stream
from udmlab.tasks import SyntheticTask


@pytest.fixture
def tiny_arch():
    return Arch(vocab_size=4, seq_len=3, num_prompts=2, embed_dim=6, hidden_dim=5, num_blocks=2, time_dim=4)


@pytest.fixture
def tiny_params(tiny_arch):
    return init_params(tiny_arch, np.random.default_rng(7), scale=0.5)


@pytest.fixture
def linear():
    return LinearSchedule()


@pytest.fixture(scope="session")
def small_task():
    return SyntheticTask.default(vocab_size=8, seq_len=8, num_prompts=2)


@pytest.fixture(scope="session")
def small_pretrained(small_task):
    """A few hundred CE steps on an 8x8 task: enough for a clearly non-uniform model."""
    arch = Arch(8, 8, 2, embed_dim=16, hidden_dim=32)
    params = init_params(arch, stream(0, "init"))
    params, losses = run_pretrain(params, small_task, LinearSchedule(), 400, stream(0, "pretrain"),
                                  batch_size=32, optim=OptimConfig(lr=3e-3), wallclock=False)
    return params, losses
