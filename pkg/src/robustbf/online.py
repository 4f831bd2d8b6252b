"""
Online robust beamforming with per-task fine-tuning of the covariance network.

Every step predicts the error covariances from the channel means, fuses
them with the sample covariances, runs the robust WMMSE solver and scores
the beamformers on the support samples. The gradient of that score with
respect to the network parameters drives the update.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import beamformers as bf
from . import covnet as cn
from .autodiff import ParamVector, value_of
from .channels import Task, empirical_mean, sample_covariance

__all__ = [
    "AdaptConfig", "AdaptationError", "AdaptResult", "OptimizerState",
    "task_statistics", "beamform", "loss_and_grad", "adaptation_step",
    "adapt_and_beamform", "write_trace_csv",
]


class AdaptationError(RuntimeError):
    """Non-finite loss or gradient during adaptation."""

    def __init__(self, step, what="loss"):
        super().__init__(f"non-finite {what} at adaptation step {step}")
        self.step = step


@dataclass
class AdaptConfig:
    """Online adaptation settings.

    Parameters
    ----------
    alpha : float
        Learning rate.
    N_i : int
        Number of gradient steps.
    eta : float
        Weight of the sample covariance in the fused estimate.
    T_wmmse : int
        Robust WMMSE sweeps per step.
    optimizer : {'adam', 'sgd'}
    beta1, beta2, eps : float
        Moment decay rates and denominator guard for ``adam``.
    norm_mode : {'frozen', 'batch'}
        Normalization statistics used by the network.
    """

    alpha: float = 0.01
    N_i: int = 5
    eta: float = 0.1
    T_wmmse: int = 10
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    norm_mode: str = "frozen"

    def __post_init__(self):
        if not self.alpha > 0 or int(self.N_i) < 0:
            raise ValueError("need alpha > 0 and N_i >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if int(self.T_wmmse) < 1:
            raise ValueError("T_wmmse must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.norm_mode not in ("frozen", "batch"):
            raise ValueError("norm_mode must be 'frozen' or 'batch'")
        self.N_i = int(self.N_i)
        self.T_wmmse = int(self.T_wmmse)


@dataclass
class OptimizerState:
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class AdaptResult:
    solution: bf.BeamformingSolution
    params: ParamVector
    losses: list
    wsr_true: list = field(default_factory=list)


def task_statistics(task_or_support):
    """Channel means (K, M_t) and sample covariances (K, M_t, M_t)."""
    return empirical_mean(task_or_support), sample_covariance(task_or_support)


def beamform(weights, net_cfg: cn.NetConfig, hbar, R_S, sys: bf.SystemParams, eta=0.1,
             iters=10, v_init=None, mode="frozen"):
    """Predict, fuse and solve; returns ``(solution, batch_stats)``.

    ``weights`` may hold tape variables, in which case the returned
    beamformers are recorded on that tape.
    """
    R_net, stats = cn.forward(weights, net_cfg, cn.mean_features(hbar), mode)
    R = cn.fuse(R_S, R_net, eta)
    sol = bf.robust_wmmse(bf.StatModel(hbar, R), sys, iters=iters, v_init=v_init)
    return sol, stats


def loss_and_grad(params: ParamVector, net_cfg, support, hbar, R_S, sys, eta=0.1, iters=10,
                  v_init=None, mode="frozen", need_grad=True):
    """SAA loss on ``support`` (K, N, M_t) and its gradient in ``params``.

    Returns
    -------
    loss : float
    grad : ndarray or None
        Flat gradient (zero on non-trainable blocks).
    solution : BeamformingSolution
        With plain-array beamformers.
    stats : list
        Batch statistics of the forward pass (``batch`` mode).
    """
    if need_grad:
        tape = ad.Tape()
        leaves = params.leaves(tape)
    else:
        leaves = params.blocks()
    sol, stats = beamform(leaves, net_cfg, hbar, R_S, sys, eta, iters, v_init, mode)
    L = bf.saa_loss(support, sol.V, sys)
    loss = float(np.real(value_of(L)))
    grad = None
    if need_grad:
        if isinstance(L, ad.Var):
            grad = params.flatten_grads(leaves, ad.backward(tape, L))
        else:
            grad = np.zeros(params.size)
    sol.V = np.array(sol.V_value)
    return loss, grad, sol, stats


def adaptation_step(params: ParamVector, grad, cfg: AdaptConfig, state: OptimizerState | None = None):
    """One gradient step; returns ``(new_params, new_state)``.

    Only trainable blocks move. ``sgd`` is ``theta - alpha * grad``;
    ``adam`` uses bias-corrected first and second moments.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.data.shape:
        raise ValueError("gradient size does not match the parameter vector")
    state = OptimizerState() if state is None else state
    mask = params.trainable_mask()
    g = np.where(mask, grad, 0.0)
    if cfg.optimizer == "sgd":
        return params.copy(params.data - cfg.alpha * g), OptimizerState(state.t + 1)
    t = state.t + 1
    m = (np.zeros_like(g) if state.m is None else state.m) * cfg.beta1 + (1.0 - cfg.beta1) * g
    v = (np.zeros_like(g) if state.v is None else state.v) * cfg.beta2 + (1.0 - cfg.beta2) * g * g
    mhat = m / (1.0 - cfg.beta1 ** t)
    vhat = v / (1.0 - cfg.beta2 ** t)
    step = np.where(mask, cfg.alpha * mhat / (np.sqrt(vhat) + cfg.eps), 0.0)
    return params.copy(params.data - step), OptimizerState(t, m, v)


def adapt_and_beamform(task: Task, params: ParamVector, net_cfg: cn.NetConfig, cfg: AdaptConfig,
                       sys: bf.SystemParams, track_true_wsr=False) -> AdaptResult:
    """Fine-tune ``params`` on the task's estimates, then beamform.

    The loss trace holds ``N_i + 1`` values: the loss of the starting
    parameters and the loss after each update. Each solve is warm-started
    from the previous step's beamformers; gradients do not cross steps.

    Parameters
    ----------
    task : Task
        Support estimates (K, N, M_t); the query channels are only used
        when ``track_true_wsr`` is set.
    params : ParamVector
        Left untouched; an adapted copy is returned.
    """
    if task.N < 1:
        raise ValueError("task needs at least one estimate per user")
    hbar, R_S = task_statistics(task)
    theta = params.copy()
    state = OptimizerState()
    V = None
    losses, true_wsr = [], []
    for step in range(cfg.N_i + 1):
        last = step == cfg.N_i
        loss, grad, sol, _ = loss_and_grad(theta, net_cfg, task.support, hbar, R_S, sys, cfg.eta,
                                           cfg.T_wmmse, V, cfg.norm_mode, need_grad=not last)
        if not np.isfinite(loss):
            raise AdaptationError(step)
        losses.append(loss)
        if track_true_wsr:
            true_wsr.append(float(value_of(bf.wsr(task.query, sol.V, sys))))
        V = sol.V
        if not last:
            if not np.all(np.isfinite(grad)):
                raise AdaptationError(step, "gradient")
            theta, state = adaptation_step(theta, grad, cfg, state)
    return AdaptResult(sol, theta, losses, true_wsr)


def write_trace_csv(path, results, header_comment=None):
    """Write ``task_id, step, loss, wsr_true`` rows for a list of results."""
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "step", "loss", "wsr_true"])
        for tid, res in enumerate(results):
            for step, loss in enumerate(res.losses):
                wt = res.wsr_true[step] if step < len(res.wsr_true) else float("nan")
                w.writerow([tid, step, repr(loss), repr(wt)])
