"""Small systems shared by the adaptation and meta-training tests."""

import numpy as np

from robustbf import beamformers as bf
from robustbf import covnet as cn
from robustbf.channels import TaskSampler

M_T, K = 4, 2


def net_config(head="salr", out_scale=0.01, M=M_T):
    mask = cn.random_mask(M, 0.25, np.random.default_rng(0)) if head == "salr" else None
    return cn.NetConfig(M_t=M, head=head, rank=2, delta=0.25, mask=mask,
                        hidden=(8, 8, 8), out_scale=out_scale)


def system(snr_db=10.0):
    return bf.SystemParams.from_snr_db(snr_db)


def sampler(N=2, gamma_db=(0.0,), M=M_T, K_=K, env_seed=0):
    return TaskSampler(M_t=M, K=K_, N=N, gamma_db=gamma_db, env_seed=env_seed, log_spread=1.0)
