import numpy as np
import pytest
import torch

from cotrain_vla.model.config import TINY
from cotrain_vla.model.sequence import Role, build_sequence, collate
from cotrain_vla.train.examples import fit_tokenizer
from cotrain_vla.world.datasets import DataConfig, build_datasets

torch.set_num_threads(1)


def small_data_config(**kw) -> DataConfig:
    base = dict(train_envs=(0, 1), episodes_per_env=1, me_envs=(100,), me_episodes_per_env=1, ce_envs=(900,),
                ce_episodes_per_env=1, wd_count=30, vi_episodes_per_env=1)
    base.update(kw)
    return DataConfig(**base)


@pytest.fixture(scope="session")
def small_data():
    return build_datasets(small_data_config())


@pytest.fixture(scope="session")
def small_tok(small_data):
    return fit_tokenizer(small_data, merges=16)


def tiny_sequence(rng, cfg=TINY, n_prompt=3, targets=None, noisy=True):
    images = rng.random((cfg.n_cam, cfg.image_size, cfg.image_size, 3))
    prompt = rng.integers(3, cfg.vocab_size, size=n_prompt).tolist()
    proprio = rng.integers(3, cfg.vocab_size, size=cfg.proprio_dim).tolist()
    if targets is None:
        n = int(rng.integers(1, cfg.max_target + 1))
        targets = [(int(rng.integers(0, cfg.vocab_size)), Role.FAST if rng.random() < 0.5 else Role.TEXT)
                   for _ in range(n)]
    kw = {}
    if noisy:
        kw = dict(noisy=rng.standard_normal((cfg.horizon, cfg.d_max)), tau=float(rng.uniform(0, 0.999)),
                  flow_target=rng.standard_normal((cfg.horizon, cfg.d_max)))
    return build_sequence(cfg, images, prompt, proprio, targets, **kw)


def tiny_batch(seed=0, cfg=TINY, n=3, noisy=True, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    return collate([tiny_sequence(rng, cfg, noisy=noisy) for _ in range(n)], cfg.horizon).to(dtype)
