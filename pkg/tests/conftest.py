import numpy as np
import pytest
from hypothesis import settings

from advrm.adversarial import SFTBank
from advrm.reward import RMConfig, train_rm
from advrm.world import WorldConfig, build_world, gen_preference_dataset, make_sft_policy

settings.register_profile("advrm", deadline=None, max_examples=50)
settings.load_profile("advrm")


def small_world_config(**kw):
    base = dict(n_train_prompts=32, n_eval_prompts=16, sft_epochs=5)
    base.update(kw)
    return WorldConfig(**base)


@pytest.fixture(scope="session")
def small():
    """A small calibrated world with SFT policy, bank, dataset and two proxies."""
    world = build_world(small_world_config(), seed=0)
    sft = make_sft_policy(world, 0)
    bank = SFTBank.sample(world, sft, 64, 0)
    calib = bank.subset(world.train_ids, 4)
    world.gold.calibrate(calib)
    ds = gen_preference_dataset(world, sft, 512, 0)
    cfg = RMConfig(epochs=5)
    rms = [train_rm(ds, world.features, cfg, seed=10 + k, init_seed=20 + k, reference=calib) for k in range(2)]
    return {"world": world, "sft": sft, "bank": bank, "calib": calib, "dataset": ds, "rms": rms}


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
