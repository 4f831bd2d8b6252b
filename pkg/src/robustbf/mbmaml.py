"""
Multi-basis meta-learning of covariance-network initializations.

A bank holds ``M`` parameter vectors. For each training task the bases are
scored on the support estimates, softly mixed by ``softmax(-loss)``, and
the mixture is fine-tuned with a few gradient steps. The bases then move
along the query-loss gradients of the adapted parameters, weighted by
their mixing coefficients, plus a penalty on pairwise inner products.
Online, the best-scoring basis is picked and fine-tuned.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import beamformers as bf
from . import covnet as cn
from . import online
from .autodiff import ParamVector, value_of
from .channels import Task, derive_seed

__all__ = [
    "MetaConfig", "MetaBank", "MetaTrainingError", "TaskResult", "TrainResult",
    "init_bank", "support_loss", "query_loss", "soft_weights", "interpolate",
    "inner_adapt", "meta_update", "train_offline", "select_basis", "hybrid_adapt",
    "pairwise_cosine", "validation_wsr", "LOG_COLUMNS",
]

LOG_COLUMNS = ["epoch", "mean_val_wsr", "mean_support_loss", "mean_pairwise_cosine"]


class MetaTrainingError(RuntimeError):
    pass


@dataclass
class MetaConfig:
    """Offline meta-training settings.

    Parameters
    ----------
    beta_meta : float
        Meta learning rate.
    lambda_reg : float
        Weight of the pairwise inner-product penalty.
    gamma_steps : sequence of float, optional
        Weight of the query loss after each inner step; uniform if omitted.
    N_i : int
        Inner gradient steps.
    B : int
        Tasks per meta-update.
    alpha : float
        Inner learning rate.
    epochs : int
    batches_per_epoch : int
    first_order : bool
        Ignore the dependence of the adapted parameters on the start point.
    eta, T_wmmse
        Fusion weight and solver sweeps, as in online adaptation.
    bn_momentum : float
        Momentum of the running normalization statistics.
    hvp_eps : float
        Step of the finite-difference Hessian-vector products
        (``first_order=False`` only).
    grad_clip : float
        Largest norm of a single inner-step or query gradient; longer
        gradients are rescaled. ``inf`` disables clipping.
    norm_mode : {'batch', 'frozen'}
        Normalization statistics used during training.
    meta_optimizer : {'sgd', 'adam'}
        Plain outer steps, or bias-corrected moment estimates.
    """

    beta_meta: float = 0.001
    lambda_reg: float = 0.001
    gamma_steps: tuple | None = None
    N_i: int = 5
    B: int = 20
    alpha: float = 0.01
    epochs: int = 20
    batches_per_epoch: int = 5
    first_order: bool = True
    eta: float = 0.1
    T_wmmse: int = 10
    bn_momentum: float = 0.9
    hvp_eps: float = 1e-5
    grad_clip: float = 50.0
    norm_mode: str = "frozen"
    meta_optimizer: str = "sgd"

    def __post_init__(self):
        if self.meta_optimizer not in ("sgd", "adam"):
            raise ValueError("meta_optimizer must be 'sgd' or 'adam'")
        if self.norm_mode not in ("batch", "frozen"):
            raise ValueError("norm_mode must be 'batch' or 'frozen'")
        if self.B < 1 or self.N_i < 1 or self.epochs < 0 or self.batches_per_epoch < 1:
            raise ValueError("need B >= 1, N_i >= 1, epochs >= 0, batches_per_epoch >= 1")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.alpha < 0 or self.beta_meta < 0 or self.lambda_reg < 0:
            raise ValueError("learning rates and lambda_reg must be >= 0")
        if self.gamma_steps is not None:
            g = np.asarray(self.gamma_steps, dtype=float)
            if g.shape != (self.N_i,) or np.any(g < 0) or abs(g.sum() - 1.0) > 1e-10:
                raise ValueError("gamma_steps must be N_i nonnegative weights summing to 1")
            self.gamma_steps = tuple(float(x) for x in g)

    @property
    def gamma(self) -> np.ndarray:
        if self.gamma_steps is None:
            return np.full(self.N_i, 1.0 / self.N_i)
        return np.asarray(self.gamma_steps)

    def to_dict(self):
        d = asdict(self)
        d["gamma_steps"] = None if self.gamma_steps is None else list(self.gamma_steps)
        return d


@dataclass
class MetaBank:
    bases: list
    config: cn.NetConfig

    def __post_init__(self):
        if not self.bases:
            raise ValueError("a bank needs at least one basis")
        layout = cn.param_layout(self.config)
        ref = ParamVector(layout)
        for m, b in enumerate(self.bases):
            if b.layout != ref.layout:
                raise ValueError(f"basis {m} does not match the network config")

    @property
    def M(self):
        return len(self.bases)

    def copy(self):
        return MetaBank([b.copy() for b in self.bases], self.config)

    def save(self, path, extra=None):
        cn.save_bank(path, self.bases, self.config, extra)

    @classmethod
    def load(cls, path, expected_config=None):
        bases, config, extra = cn.load_bank(path, expected_config)
        bank = cls(bases, config)
        bank.extra = extra
        return bank


def init_bank(net_cfg: cn.NetConfig, M, seed=0) -> MetaBank:
    """``M`` independently seeded initializations."""
    if M < 1:
        raise ValueError("M must be >= 1")
    return MetaBank([cn.init_params(net_cfg, derive_seed(seed, m)) for m in range(int(M))], net_cfg)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _evaluate(params, net_cfg, task, sys, cfg, mode, v_init=None, support_grad=False,
              query_grad=False, stats=None):
    """One solve under ``params``; support and query losses with optional gradients."""
    hbar, R_S = stats if stats is not None else online.task_statistics(task)
    need = support_grad or query_grad
    if need:
        tape = ad.Tape()
        leaves = params.leaves(tape)
    else:
        leaves = params.blocks()
    sol, bstats = online.beamform(leaves, net_cfg, hbar, R_S, sys, cfg.eta, cfg.T_wmmse, v_init, mode)
    Ls = bf.saa_loss(task.support, sol.V, sys)
    Lq = ad.scale(bf.wsr(task.query, sol.V, sys), -1.0)
    out = {"support": float(value_of(Ls)), "query": float(value_of(Lq)),
           "V": np.array(sol.V_value), "stats": bstats}
    for key, L, flag in (("support_grad", Ls, support_grad), ("query_grad", Lq, query_grad)):
        if flag:
            out[key] = (params.flatten_grads(leaves, ad.backward(tape, L))
                        if isinstance(L, ad.Var) else np.zeros(params.size))
    return out


def support_loss(params: ParamVector, task: Task, sys: bf.SystemParams, cfg: MetaConfig,
                 net_cfg: cn.NetConfig, mode="batch"):
    """Negative SAA sum rate on the support estimates (cold-started solve)."""
    if task.N < 1:
        raise ValueError("empty support set")
    return _evaluate(params, net_cfg, task, sys, cfg, mode)["support"]


def query_loss(params: ParamVector, task: Task, sys: bf.SystemParams, cfg: MetaConfig,
               net_cfg: cn.NetConfig, mode="batch", v_init=None):
    """Negative true-channel sum rate of the beamformers designed under ``params``.

    The design only sees the support statistics; the true channels only
    enter the score.
    """
    return _evaluate(params, net_cfg, task, sys, cfg, mode, v_init)["query"]


def soft_weights(losses) -> np.ndarray:
    """``softmax(-losses)``, max-subtracted."""
    losses = np.asarray(losses, dtype=float)
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    return np.asarray(ad.softmax(-losses))


def interpolate(bank: MetaBank, weights) -> ParamVector:
    """Blockwise convex combination of the bases (running statistics included)."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (bank.M,):
        raise ValueError(f"need {bank.M} weights")
    if abs(w.sum() - 1.0) > 1e-10:
        raise ValueError("weights must sum to 1")
    nz = np.flatnonzero(w)
    if nz.size == 1 and w[nz[0]] == 1.0:
        return bank.bases[nz[0]].copy()
    data = np.zeros_like(bank.bases[0].data)
    for wm, b in zip(w, bank.bases):
        data = data + wm * b.data
    return bank.bases[0].copy(data)


def pairwise_cosine(bank: MetaBank) -> float:
    """Mean cosine similarity between distinct bases (trainable entries)."""
    if bank.M < 2:
        return float("nan")
    mask = bank.bases[0].trainable_mask()
    X = np.stack([b.data[mask] for b in bank.bases])
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    C = X @ X.T
    iu = np.triu_indices(bank.M, 1)
    return float(C[iu].mean())


def clip_norm(g, max_norm):
    """Rescale ``g`` to norm ``max_norm`` if it is longer."""
    n = float(np.linalg.norm(g))
    if np.isfinite(max_norm) and n > max_norm:
        return g * (max_norm / n)
    return g


# ---------------------------------------------------------------------------
# inner and outer loops
# ---------------------------------------------------------------------------

@dataclass
class TaskResult:
    """Everything the meta-update needs from one task."""

    weights: np.ndarray                 # soft weights, (M,)
    basis_losses: np.ndarray            # support loss of each basis, (M,)
    trajectory: list                    # theta^0 .. theta^{N_i}
    support_losses: list                # at theta^0 .. theta^{N_i - 1}
    query_losses: list                  # at theta^1 .. theta^{N_i}
    query_grads: list                   # at theta^1 .. theta^{N_i}
    meta_grad: np.ndarray | None = None  # d sum_i gamma_i L_Q / d theta^0
    batch_stats: list = field(default_factory=list)


def inner_adapt(theta_star: ParamVector, task: Task, sys, cfg: MetaConfig, net_cfg,
                N_i=None, alpha=None, mode="batch", with_query=True):
    """Plain gradient steps on the support loss, keeping every iterate.

    Returns
    -------
    TaskResult
        ``weights`` and ``basis_losses`` are left empty; ``trajectory`` has
        ``N_i + 1`` entries.
    """
    N_i = cfg.N_i if N_i is None else int(N_i)
    alpha = cfg.alpha if alpha is None else float(alpha)
    if N_i < 1:
        raise ValueError("N_i must be >= 1")
    stats = online.task_statistics(task)
    traj = [theta_star.copy()]
    s_losses, q_losses, q_grads = [], [], []
    V = None
    mask = theta_star.trainable_mask()
    for i in range(N_i + 1):
        theta = traj[-1]
        ev = _evaluate(theta, net_cfg, task, sys, cfg, mode, V, support_grad=i < N_i,
                       query_grad=with_query and i > 0, stats=stats)
        V = ev["V"]
        if i > 0:
            q_losses.append(ev["query"])
            if with_query:
                q_grads.append(clip_norm(ev["query_grad"], cfg.grad_clip))
        if i < N_i:
            g = ev["support_grad"]
            if not (np.isfinite(ev["support"]) and np.all(np.isfinite(g))):
                raise MetaTrainingError(f"non-finite support loss or gradient at inner step {i}")
            s_losses.append(ev["support"])
            g = clip_norm(np.where(mask, g, 0.0), cfg.grad_clip)
            traj.append(theta.copy(theta.data - alpha * g))
    return TaskResult(np.empty(0), np.empty(0), traj, s_losses, q_losses, q_grads)


def _support_grad_at(theta, data, net_cfg, task, sys, cfg, mode, V):
    return _evaluate(theta.copy(data), net_cfg, task, sys, cfg, mode, V, support_grad=True)["support_grad"]


def _second_order_meta_grad(res: TaskResult, net_cfg, task, sys, cfg, mode):
    """``sum_i gamma_i J_i^T grad L_Q(theta^i)`` with ``J_i = prod (I - alpha H_j)``.

    Hessian-vector products use central differences of the support
    gradient, with the warm start of each step held fixed.
    """
    gam = cfg.gamma
    N_i = len(res.query_grads)
    # warm starts seen by each inner step
    Vs, V = [], None
    for j in range(N_i):
        Vs.append(V)
        V = _evaluate(res.trajectory[j], net_cfg, task, sys, cfg, mode, V)["V"]
    mask = res.trajectory[0].trainable_mask()
    total = np.zeros_like(res.trajectory[0].data)
    for i in range(N_i):
        v = gam[i] * res.query_grads[i]
        for j in range(i, -1, -1):
            th = res.trajectory[j]
            nv = np.linalg.norm(v)
            if nv == 0.0:
                break
            h = cfg.hvp_eps / nv
            gp = _support_grad_at(th, th.data + h * v, net_cfg, task, sys, cfg, mode, Vs[j])
            gm = _support_grad_at(th, th.data - h * v, net_cfg, task, sys, cfg, mode, Vs[j])
            v = v - cfg.alpha * np.where(mask, (gp - gm) / (2.0 * h), 0.0)
        total += v
    return total


def process_task(bank: MetaBank, task: Task, sys, cfg: MetaConfig, mode="batch",
                 update_stats=True) -> TaskResult:
    """Score every basis, mix, adapt and collect query gradients for one task.

    With ``update_stats`` the running normalization statistics of each
    basis absorb the batch statistics of its scoring pass.
    """
    net_cfg = bank.config
    losses = np.empty(bank.M)
    stats = online.task_statistics(task)
    for m, b in enumerate(bank.bases):
        ev = _evaluate(b, net_cfg, task, sys, cfg, mode, stats=stats)
        losses[m] = ev["support"]
        if update_stats and mode == "batch":
            cn.update_running_stats(b, ev["stats"], cfg.bn_momentum)
    if not np.all(np.isfinite(losses)):
        raise MetaTrainingError("non-finite basis support loss")
    w = soft_weights(losses)
    res = inner_adapt(interpolate(bank, w), task, sys, cfg, net_cfg, mode=mode)
    res.weights, res.basis_losses = w, losses
    if not cfg.first_order:
        res.meta_grad = _second_order_meta_grad(res, net_cfg, task, sys, cfg, mode)
    return res


def meta_gradients(bank: MetaBank, results: Sequence[TaskResult], cfg: MetaConfig,
                   batch_id=None) -> list:
    """Outer-loop gradient of every basis (zero on non-trainable entries).

    ``g_m = sum_b sigma_bm * (sum_i gamma_i g_bi + lambda_reg * sum_{m' != m} theta_m')``
    where ``g_bi`` is the query gradient after inner step ``i`` (or its
    pull-back to the start point when second-order terms are kept).
    """
    gam = cfg.gamma
    mask = bank.bases[0].trainable_mask()
    total = np.sum([b.data for b in bank.bases], axis=0)
    grads = []
    for m, b in enumerate(bank.bases):
        g = np.zeros_like(b.data)
        wsum = 0.0
        for r in results:
            sig = float(r.weights[m])
            if r.meta_grad is not None:
                g += sig * r.meta_grad
            else:
                for i, qg in enumerate(r.query_grads):
                    g += sig * gam[i] * qg
            wsum += sig * float(np.sum(gam[: len(r.query_grads)]))
        if bank.M > 1 and cfg.lambda_reg:
            g += cfg.lambda_reg * wsum * (total - b.data)
        g = np.where(mask, g, 0.0)
        if not np.all(np.isfinite(g)):
            raise MetaTrainingError(f"non-finite meta-gradient in batch {batch_id}")
        grads.append(g)
    return grads


def meta_update(bank: MetaBank, results: Sequence[TaskResult], cfg: MetaConfig,
                batch_id=None) -> MetaBank:
    """One plain outer step ``theta_m -= beta_meta * g_m`` on every basis."""
    grads = meta_gradients(bank, results, cfg, batch_id)
    return MetaBank([b.copy(b.data - cfg.beta_meta * g) for b, g in zip(bank.bases, grads)],
                    bank.config)


@dataclass
class MetaOptState:
    """Moment estimates of the adaptive outer optimizer, one row per basis."""

    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def meta_update_adam(bank: MetaBank, results, cfg: MetaConfig, state: MetaOptState | None,
                     batch_id=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """Outer step with bias-corrected moment estimates; returns ``(bank, state)``."""
    G = np.stack(meta_gradients(bank, results, cfg, batch_id))
    state = MetaOptState() if state is None else state
    t = state.t + 1
    m = beta1 * (np.zeros_like(G) if state.m is None else state.m) + (1.0 - beta1) * G
    v = beta2 * (np.zeros_like(G) if state.v is None else state.v) + (1.0 - beta2) * G * G
    step = cfg.beta_meta * (m / (1.0 - beta1 ** t)) / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
    mask = bank.bases[0].trainable_mask()
    new = [b.copy(b.data - np.where(mask, step[k], 0.0)) for k, b in enumerate(bank.bases)]
    return MetaBank(new, bank.config), MetaOptState(t, m, v)


# ---------------------------------------------------------------------------
# online use of a bank
# ---------------------------------------------------------------------------

def select_basis(bank: MetaBank, task: Task, sys, cfg, mode="frozen"):
    """Index and copy of the basis with the lowest support loss (ties: lowest index).

    ``cfg`` may be a :class:`MetaConfig` or an :class:`online.AdaptConfig`
    (only ``eta`` and ``T_wmmse`` are used).

    Returns
    -------
    index : int
    params : ParamVector
    losses : ndarray, shape (M,)
    """
    stats = online.task_statistics(task)
    losses = np.array([_evaluate(b, bank.config, task, sys, cfg, mode, stats=stats)["support"]
                       for b in bank.bases])
    idx = int(np.argmin(losses))
    return idx, bank.bases[idx].copy(), losses


def hybrid_adapt(bank: MetaBank, task: Task, sys, adapt_cfg: online.AdaptConfig,
                 track_true_wsr=False):
    """Pick a basis on the task's estimates, fine-tune it and beamform.

    Returns ``(AdaptResult, basis_index)``.
    """
    if bank.M == 1:
        idx, theta = 0, bank.bases[0]
    else:
        idx, theta, _ = select_basis(bank, task, sys, adapt_cfg, adapt_cfg.norm_mode)
    res = online.adapt_and_beamform(task, theta, bank.config, adapt_cfg, sys, track_true_wsr)
    return res, idx


def validation_wsr(bank: MetaBank, tasks: Sequence[Task], sys, adapt_cfg: online.AdaptConfig):
    """Mean true-channel sum rate after hybrid adaptation."""
    vals = []
    for t in tasks:
        res, _ = hybrid_adapt(bank, t, sys, adapt_cfg)
        vals.append(float(value_of(bf.wsr(t.query, res.solution.V, sys))))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    bank: MetaBank
    log: list                       # dicts keyed by LOG_COLUMNS
    initial_val_wsr: float = float("nan")
    opt_state: "MetaOptState | None" = None


def _write_log(path, rows, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.DictWriter(fh, LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "epoch" else int(r[k])) for k in LOG_COLUMNS})


def read_log(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(lines)]


def train_offline(sample_batch: Callable[[int, int], Sequence[Task]], bank: MetaBank,
                  cfg: MetaConfig, sys: bf.SystemParams, val_tasks: Sequence[Task] = (),
                  adapt_cfg: online.AdaptConfig | None = None, start_epoch=0, log=None,
                  checkpoint_dir=None, log_path=None, progress=None, log_comment=None,
                  opt_state: MetaOptState | None = None) -> TrainResult:
    """Meta-train ``bank`` for epochs ``start_epoch + 1 .. cfg.epochs``.

    Parameters
    ----------
    sample_batch : callable
        ``sample_batch(epoch, batch_index)`` returns ``cfg.B`` tasks; it
        must be a pure function of its arguments for resumes to match.
    bank : MetaBank
        Starting point (not modified).
    val_tasks : sequence of Task
        Scored after every epoch with :func:`validation_wsr`.
    adapt_cfg : AdaptConfig, optional
        Online settings for validation; plain gradient with the inner
        learning rate by default.
    start_epoch, log
        Resume point and the log rows written so far.
    checkpoint_dir : str, optional
        ``bank_epoch{e}.txt`` is written after every epoch.
    """
    if adapt_cfg is None:
        adapt_cfg = online.AdaptConfig(alpha=max(cfg.alpha, 1e-12), N_i=cfg.N_i, eta=cfg.eta,
                                       T_wmmse=cfg.T_wmmse, optimizer="sgd")
    bank = bank.copy()
    log = list(log or [])
    opt_state = opt_state
    init_val = float("nan")
    if start_epoch == 0 and val_tasks:
        init_val = validation_wsr(bank, val_tasks, sys, adapt_cfg)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        s_losses = []
        for bi in range(cfg.batches_per_epoch):
            tasks = list(sample_batch(epoch, bi))
            if len(tasks) != cfg.B:
                raise MetaTrainingError(f"batch ({epoch}, {bi}) has {len(tasks)} tasks, expected {cfg.B}")
            results = [process_task(bank, t, sys, cfg, cfg.norm_mode) for t in tasks]
            s_losses += [r.support_losses[0] for r in results]
            if cfg.meta_optimizer == "adam":
                bank, opt_state = meta_update_adam(bank, results, cfg, opt_state, batch_id=(epoch, bi))
            else:
                bank = meta_update(bank, results, cfg, batch_id=(epoch, bi))
        row = {"epoch": epoch,
               "mean_val_wsr": validation_wsr(bank, val_tasks, sys, adapt_cfg) if val_tasks else float("nan"),
               "mean_support_loss": float(np.mean(s_losses)),
               "mean_pairwise_cosine": pairwise_cosine(bank)}
        log.append(row)
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            bank.save(os.path.join(checkpoint_dir, f"bank_epoch{epoch}.txt"),
                      extra={"epoch": epoch, "meta": cfg.to_dict()})
        if log_path is not None:
            _write_log(log_path, log, log_comment)
        if progress is not None:
            progress(row)
    if log_path is not None and not log:
        _write_log(log_path, log, log_comment)
    return TrainResult(bank, log, init_val, opt_state)
