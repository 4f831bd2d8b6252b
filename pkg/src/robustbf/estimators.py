"""
Estimator-style wrappers around the beamformers and the meta-learned bank.

``X`` is a list of :class:`~robustbf.channels.Task` objects or an array of
support estimates with shape ``(n_tasks, K, N, M_t)``. ``predict`` returns
beamformers ``(n_tasks, M_t, K)``; ``score`` is the mean sum rate on the
tasks' true channels (tasks only).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import beamformers as bf
from . import covnet as cn
from . import mbmaml as mm
from . import online
from .autodiff import value_of
from .channels import Task, derive_seed

__all__ = ["RobustWMMSEBeamformer", "MetaBankBeamformer"]

_BASELINES = ("wmmse", "swmmse", "robust_wmmse_sample")


def _as_tasks(X):
    if isinstance(X, Task):
        return [X]
    if isinstance(X, (list, tuple)) and X and all(isinstance(t, Task) for t in X):
        return list(X)
    S = np.asarray(X)
    if S.ndim == 3:
        S = S[None]
    if S.ndim != 4 or not np.iscomplexobj(S):
        raise ValueError("X must be Task objects or complex supports of shape (n_tasks, K, N, M_t)")
    if not np.all(np.isfinite(S)):
        raise ValueError("X contains NaN or inf")
    # placeholder query: only used by score(), which requires real tasks
    return [Task(s, np.full((s.shape[0], s.shape[2]), np.nan + 0j)) for s in S]


def _score(est, X):
    tasks = _as_tasks(X)
    if any(np.isnan(t.query).any() for t in tasks):
        raise ValueError("score needs Task objects with true channels")
    sys = est._system()
    V = est.predict(tasks)
    return float(np.mean([value_of(bf.wsr(t.query, v, sys)) for t, v in zip(tasks, V)]))


class _SystemMixin:
    def _system(self):
        return bf.SystemParams.from_snr_db(self.snr_db, self.P_max)


class RobustWMMSEBeamformer(_SystemMixin, BaseEstimator):
    """Model-free beamformers computed from each task's estimates.

    Parameters
    ----------
    method : {'wmmse', 'swmmse', 'robust_wmmse_sample'}
        Mean channel only, sample-average WMMSE, or robust WMMSE with the
        sample covariance.
    snr_db, P_max : float
    iters : int
        Solver sweeps.
    """

    def __init__(self, method="robust_wmmse_sample", snr_db=20.0, P_max=1.0, iters=50):
        self.method = method
        self.snr_db = snr_db
        self.P_max = P_max
        self.iters = iters

    def fit(self, X=None, y=None):
        if self.method not in _BASELINES:
            raise ValueError(f"method must be one of {_BASELINES}")
        self.is_fitted_ = True
        return self

    def predict(self, X):
        check_is_fitted(self, "is_fitted_")
        sys = self._system()
        out = []
        for t in _as_tasks(X):
            hbar, R_S = online.task_statistics(t)
            if self.method == "wmmse":
                sol = bf.wmmse_perfect(hbar, sys, iters=self.iters)
            elif self.method == "swmmse":
                sol = bf.swmmse(t.support, sys, iters=self.iters)
            else:
                sol = bf.robust_wmmse(bf.StatModel(hbar, R_S), sys, iters=self.iters)
            out.append(sol.V_value)
        return np.stack(out)

    def score(self, X, y=None):
        return _score(self, X)


class MetaBankBeamformer(_SystemMixin, BaseEstimator):
    """Meta-trained covariance networks with per-task fine-tuning.

    ``fit`` meta-trains a bank of ``n_bases`` networks on the given tasks,
    cycling through them in batches of ``batch_size``; ``predict`` picks a
    basis per task, fine-tunes it for ``n_steps`` steps and beamforms.

    Parameters
    ----------
    n_bases : int
    head : {'salr', 'full'}
    rank, delta : int, float
        Low-rank size and sparse-mask density of the ``salr`` head.
    hidden : tuple of int
    out_scale : float
        Fixed multiplier on the network output.
    epochs, batch_size : int
    meta_lr, inner_lr, lambda_reg : float
    n_steps : int
        Inner and online gradient steps.
    eta : float
        Weight of the sample covariance in the fused estimate.
    snr_db, P_max : float
    random_state : int
    """

    def __init__(self, n_bases=8, head="salr", rank=8, delta=0.09, hidden=(128, 256, 256),
                 out_scale=0.01, epochs=20, batch_size=20, meta_lr=1e-3, inner_lr=0.01,
                 lambda_reg=1e-3, n_steps=5, eta=0.1, snr_db=20.0, P_max=1.0, random_state=0):
        self.n_bases = n_bases
        self.head = head
        self.rank = rank
        self.delta = delta
        self.hidden = hidden
        self.out_scale = out_scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.meta_lr = meta_lr
        self.inner_lr = inner_lr
        self.lambda_reg = lambda_reg
        self.n_steps = n_steps
        self.eta = eta
        self.snr_db = snr_db
        self.P_max = P_max
        self.random_state = random_state

    def _adapt_config(self):
        return online.AdaptConfig(alpha=self.inner_lr, N_i=self.n_steps, eta=self.eta,
                                  optimizer="sgd", norm_mode="frozen")

    def fit(self, X, y=None):
        tasks = _as_tasks(X)
        if any(np.isnan(t.query).any() for t in tasks):
            raise ValueError("fit needs Task objects with true channels")
        M_t = tasks[0].M_t
        seed = int(self.random_state)
        mask = None
        if self.head == "salr":
            mask = cn.random_mask(M_t, self.delta, np.random.default_rng(derive_seed(seed, 1)))
        net = cn.NetConfig(M_t, self.head, self.rank, self.delta, mask, tuple(self.hidden), self.out_scale)
        B = min(int(self.batch_size), len(tasks))
        n_batches = max(1, len(tasks) // B)
        cfg = mm.MetaConfig(beta_meta=self.meta_lr, lambda_reg=self.lambda_reg, N_i=self.n_steps, B=B,
                            alpha=self.inner_lr, epochs=self.epochs, batches_per_epoch=n_batches,
                            eta=self.eta, norm_mode="frozen")
        perms = {}

        def batch(epoch, bi):
            if epoch not in perms:
                perms[epoch] = np.random.default_rng(derive_seed(seed, 3, epoch)).permutation(len(tasks))
            return [tasks[i] for i in perms[epoch][bi * B:(bi + 1) * B]]

        bank = mm.init_bank(net, self.n_bases, seed=derive_seed(seed, 4))
        res = mm.train_offline(batch, bank, cfg, self._system(), adapt_cfg=self._adapt_config())
        self.bank_ = res.bank
        self.training_log_ = res.log
        return self

    def predict(self, X):
        check_is_fitted(self, "bank_")
        sys = self._system()
        cfg = self._adapt_config()
        return np.stack([mm.hybrid_adapt(self.bank_, t, sys, cfg)[0].solution.V_value
                         for t in _as_tasks(X)])

    def score(self, X, y=None):
        return _score(self, X)
