"""
Seeded experiment runner: training, sweeps over methods and settings, and
aggregation of the resulting CSV tables.

Result tables have the columns ``sweep_value, method, trial, wsr_true,
runtime_ms``, preceded by one ``#`` comment line with the package version
and the config hash. Rows are sorted by (sweep index, method, trial).
"""

from __future__ import annotations

import csv
import dataclasses
import glob
import hashlib
import json
import logging
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from . import beamformers as bf
from . import covnet as cn
from . import mbmaml as mm
from . import online
from .autodiff import IllConditionedError, value_of
from .channels import TaskSampler, derive_seed
from .config import ExperimentConfig, config_hash, dump_config

__all__ = ["RESULT_COLUMNS", "SUMMARY_COLUMNS", "ResultRow", "ReportError", "MissingBankError",
           "trial_seed", "build_net_config", "train", "run", "report", "read_results",
           "write_results", "bank_dir", "eval_sampler", "train_sampler", "ood_sampler"]

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["sweep_value", "method", "trial", "wsr_true", "runtime_ms"]
SUMMARY_COLUMNS = ["sweep_value", "method", "n", "mean", "std"]

# fixed keys separating the seed streams of one master seed
_K_MASK, _K_BANK, _K_TRAIN, _K_VAL, _K_RANDOM_INIT, _K_OOD = 0x5A, 0xBA, 0x7A1, 0x7B2, 0x0A, 0x00D

_ABORTS = (online.AdaptationError, IllConditionedError, np.linalg.LinAlgError, FloatingPointError)


class ReportError(ValueError):
    pass


class MissingBankError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class ResultRow:
    sweep_index: int
    sweep_value: float
    method: str
    trial: int
    wsr_true: float
    runtime_ms: float


def trial_seed(master, sweep_index, trial_index):
    """Seed of one trial; independent of how many trials are run."""
    return derive_seed(master, sweep_index, trial_index)


# ---------------------------------------------------------------------------
# samplers and network config
# ---------------------------------------------------------------------------

def train_sampler(cfg: ExperimentConfig):
    c = cfg.channel
    return TaskSampler(cfg.system.M_t, cfg.system.K, cfg.sampling.N, tuple(c.train_gamma_db), c.rho,
                       env_seed=cfg.sampling.master_seed, log_spread=c.log_spread)


def eval_sampler(cfg: ExperimentConfig, gamma_db=None):
    """Tasks sharing the training eigenbasis (in-distribution)."""
    c = cfg.channel
    g = c.gamma_db if gamma_db is None else gamma_db
    return TaskSampler(cfg.system.M_t, cfg.system.K, cfg.sampling.N, (g,), c.rho,
                       env_seed=cfg.sampling.master_seed, log_spread=c.log_spread)


def ood_sampler(cfg: ExperimentConfig):
    """Fresh eigenbasis and shifted error level."""
    c = cfg.channel
    return TaskSampler(cfg.system.M_t, cfg.system.K, cfg.sampling.N,
                       (c.gamma_db + c.ood_gamma_shift_db,), c.rho,
                       env_seed=derive_seed(cfg.sampling.master_seed, _K_OOD), log_spread=c.log_spread)


def build_net_config(cfg: ExperimentConfig, **over) -> cn.NetConfig:
    """Network config with a seeded sparsity mask (``salr`` head)."""
    n = dataclasses.replace(cfg.net, **over)
    M_t = cfg.system.M_t
    mask = None
    if n.head == "salr":
        rng = np.random.default_rng(derive_seed(cfg.sampling.master_seed, _K_MASK))
        if n.mask_candidates <= 1:
            mask = cn.random_mask(M_t, n.delta, rng)
        else:
            def score(m):
                trial_cfg = dataclasses.replace(cfg, meta=dataclasses.replace(cfg.meta, epochs=n.mask_epochs))
                net = cn.NetConfig(M_t, "salr", n.rank, n.delta, m, tuple(n.hidden), n.out_scale)
                return _train_bank(trial_cfg, net, 1).log[-1]["mean_val_wsr"]
            mask, _ = cn.pick_sparsity_mask(n.mask_candidates, n.delta, score,
                                            seed=derive_seed(cfg.sampling.master_seed, _K_MASK), M_t=M_t)
    return cn.NetConfig(M_t, n.head, n.rank, n.delta, mask, tuple(n.hidden), n.out_scale)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _val_tasks(cfg):
    return train_sampler(cfg).batch(cfg.meta.val_tasks, cfg.sampling.master_seed, _K_VAL)


def _train_bank(cfg, net_cfg, M, out_dir=None, resume=True, progress=None):
    meta = cfg.meta.build(cfg.adapt)
    adapt = cfg.adapt.build()
    sys = cfg.system.params()
    sampler = train_sampler(cfg)
    master = cfg.sampling.master_seed
    bank = mm.init_bank(net_cfg, M, seed=derive_seed(master, _K_BANK))

    def batch(epoch, bi):
        return sampler.batch(meta.B, master, _K_TRAIN, epoch, bi)

    start, rows, opt_state = 0, [], None
    ckpt = log_path = None
    comment = f"robustbf {__version__} config_hash={config_hash(cfg)} M={M}"
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "checkpoints")
        log_path = os.path.join(out_dir, "train_log.csv")
        bank.save(os.path.join(out_dir, "bank_init.txt"), extra={"epoch": 0})
        if resume:
            start, bank, rows, opt_state = _resume_point(ckpt, log_path, bank, net_cfg, meta)
    res = mm.train_offline(batch, bank, meta, sys, _val_tasks(cfg), adapt, start_epoch=start,
                           log=rows, checkpoint_dir=ckpt, log_path=log_path, progress=progress,
                           log_comment=comment, opt_state=opt_state)
    if out_dir is not None:
        if res.opt_state is not None:
            _save_opt_state(os.path.join(ckpt, f"opt_epoch{meta.epochs}.npz"), res.opt_state)
        res.bank.save(os.path.join(out_dir, "bank.txt"),
                      extra={"epoch": meta.epochs, "meta": meta.to_dict(), "config_hash": config_hash(cfg)})
    return res


def _save_opt_state(path, st):
    np.savez(path, t=st.t, m=st.m, v=st.v)


def _resume_point(ckpt, log_path, bank, net_cfg, meta):
    files = glob.glob(os.path.join(ckpt, "bank_epoch*.txt")) if os.path.isdir(ckpt) else []
    epochs = sorted(int(re.search(r"bank_epoch(\d+)\.txt$", f).group(1)) for f in files)
    epochs = [e for e in epochs if e <= meta.epochs]
    if not epochs or not os.path.exists(log_path):
        return 0, bank, [], None
    rows = [r for r in mm.read_log(log_path) if r["epoch"] <= epochs[-1]]
    if len(rows) != epochs[-1]:
        return 0, bank, [], None
    e = epochs[-1]
    loaded = mm.MetaBank.load(os.path.join(ckpt, f"bank_epoch{e}.txt"), expected_config=net_cfg)
    opt_state = None
    if meta.meta_optimizer == "adam":
        p = os.path.join(ckpt, f"opt_epoch{e}.npz")
        if not os.path.exists(p):
            return 0, bank, [], None
        z = np.load(p)
        opt_state = mm.MetaOptState(int(z["t"]), z["m"], z["v"])
    log.info("resuming from epoch %d", e)
    return e, mm.MetaBank(loaded.bases, loaded.config), rows, opt_state


def train(cfg: ExperimentConfig, out_dir, resume=True, M=None, progress=None, **net_over):
    """Meta-train a bank; writes ``bank.txt``, ``train_log.csv`` and per-epoch checkpoints.

    Parameters
    ----------
    resume : bool
        Continue from the latest complete checkpoint in ``out_dir``.
    M : int, optional
        Bank size; ``cfg.meta.M`` by default.
    """
    os.makedirs(out_dir, exist_ok=True)
    dump_config(cfg, os.path.join(out_dir, "config.yaml"))
    net_cfg = build_net_config(cfg, **net_over)
    M = cfg.meta.M if M is None else int(M)
    if cfg.meta.meta_optimizer == "adam":
        # moment estimates are saved next to each bank checkpoint
        return _train_bank_adam_ckpt(cfg, net_cfg, M, out_dir, resume, progress)
    return _train_bank(cfg, net_cfg, M, out_dir, resume, progress)


def _train_bank_adam_ckpt(cfg, net_cfg, M, out_dir, resume, progress):
    # one epoch at a time so the optimizer state can be written per epoch
    res = None
    for e in range(1, cfg.meta.epochs + 1):
        sub = dataclasses.replace(cfg, meta=dataclasses.replace(cfg.meta, epochs=e))
        res = _train_bank(sub, net_cfg, M, out_dir, resume=True if e > 1 else resume,
                          progress=progress)
    if res is None:
        res = _train_bank(cfg, net_cfg, M, out_dir, resume, progress)
    return res


# ---------------------------------------------------------------------------
# single trials
# ---------------------------------------------------------------------------

def _timed(fn):
    t0 = time.perf_counter()
    V = fn()
    return V, 1e3 * (time.perf_counter() - t0)


def _method_V(method, task, sys, cfg, bank, random_init):
    e = cfg.experiment
    hbar, R_S = online.task_statistics(task)
    if method == "wmmse":
        return bf.wmmse_perfect(hbar, sys, iters=e.wmmse_iters).V
    if method == "swmmse":
        return bf.swmmse(task.support, sys, iters=e.swmmse_iters).V
    if method == "robust_wmmse_sample":
        return bf.robust_wmmse(bf.StatModel(hbar, R_S), sys, iters=e.wmmse_iters).V
    if method == "robust_wmmse_perfect":
        return bf.robust_wmmse(bf.StatModel(hbar, task.true_covariances), sys, iters=e.wmmse_iters).V
    if method == "hybrid":
        return mm.hybrid_adapt(bank, task, sys, cfg.adapt.build())[0].solution.V
    if method == "offline_only":
        return mm.hybrid_adapt(bank, task, sys, cfg.adapt.build(N_i=0))[0].solution.V
    if method == "online_only":
        return online.adapt_and_beamform(task, random_init, bank.config, cfg.adapt.build(), sys).solution.V
    raise ValueError(f"unknown method {method!r}")


def _run_trial(job):
    """All methods of one (sweep point, trial); returns ``(rows, aborts)``."""
    cfg, kind, si, value, trial, methods, bank, random_init, sampler_kind = job
    sys = cfg.system.params(value if kind == "snr_sweep" else None)
    if sampler_kind == "ood":
        sampler = ood_sampler(cfg)
    else:
        sampler = eval_sampler(cfg, value if kind == "gamma_sweep" else None)
    # sweeps over banks evaluate every bank on the same tasks
    task_si = si if sampler_kind is None else 0
    task = sampler.sample(trial_seed(cfg.sampling.master_seed, task_si, trial))
    rows, aborts = [], []
    if kind == "convergence":
        try:
            (res, _), ms = _timed(lambda: mm.hybrid_adapt(bank, task, sys, cfg.adapt.build(),
                                                          track_true_wsr=True))
        except _ABORTS as exc:
            return rows, [(si, "hybrid", trial, repr(exc))]
        for step, w in enumerate(res.wsr_true):
            rows.append(ResultRow(step, float(step), "hybrid", trial, float(w), ms))
        return rows, aborts
    for method in methods:
        try:
            V, ms = _timed(lambda: _method_V(method if sampler_kind is None else "hybrid", task, sys,
                                             cfg, bank, random_init))
            w = float(value_of(bf.wsr(task.query, V, sys)))
            if not math.isfinite(w):
                raise FloatingPointError("non-finite rate")
        except _ABORTS as exc:
            aborts.append((si, method, trial, repr(exc)))
            continue
        rows.append(ResultRow(si, float(value), method, trial, w, ms))
    return rows, aborts


def _execute(jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        out = [_run_trial(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_run_trial, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    rows = [r for rs, _ in out for r in rs]
    aborts = [a for _, ab in out for a in ab]
    return rows, aborts


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

_NEEDS_BANK = ("hybrid", "offline_only", "online_only")


def bank_dir(cfg, out_dir, M=None, **net_over):
    """Directory of the bank trained under ``cfg``; identical settings share one."""
    M = cfg.meta.M if M is None else int(M)
    d = cfg.to_dict()
    key = {k: d[k] for k in ("system", "channel", "meta")}
    key["sampling"] = {"N": cfg.sampling.N, "master_seed": cfg.sampling.master_seed}
    key["adapt"] = d["adapt"]
    key["net"] = build_net_config(cfg, **net_over).to_dict()
    key["M"] = M
    blob = json.dumps(key, sort_keys=True).encode()
    return os.path.join(out_dir, "banks", f"M{M}_{hashlib.sha256(blob).hexdigest()[:12]}")


def _load_or_train(cfg, out_dir, bank_path, M=None, **net_over):
    if bank_path is not None:
        if not os.path.exists(bank_path):
            raise MissingBankError(f"bank file not found: {bank_path}")
        return mm.MetaBank.load(bank_path)
    if not cfg.experiment.train_first:
        raise MissingBankError("this run needs a trained bank: pass --bank or enable train_first")
    return train(cfg, bank_dir(cfg, out_dir, M, **net_over), M=M, **net_over).bank


def _method_order(methods):
    return {m: i for i, m in enumerate(methods)}


def run(cfg: ExperimentConfig, out_dir=None, bank_path=None, workers=None, progress=None):
    """Execute the configured experiment and write ``results.csv``.

    Sweeps that vary the network or bank (``salr_delta``, ``salr_rank``,
    ``num_bases``, ``ood``) train one bank per sweep point under
    ``out_dir/banks`` and score every bank on the same evaluation tasks,
    so results pair up by trial. Comparison sweeps that include learned methods need
    ``bank_path`` or ``experiment.train_first``.

    Returns
    -------
    list of ResultRow
        Sorted by (sweep index, method, trial).
    """
    e = cfg.experiment
    out_dir = e.out_dir if out_dir is None else out_dir
    workers = e.workers if workers is None else int(workers)
    os.makedirs(out_dir, exist_ok=True)
    dump_config(cfg, os.path.join(out_dir, "config.yaml"))
    trials = range(cfg.sampling.trials)
    master = cfg.sampling.master_seed
    jobs = []
    methods = list(e.methods)

    def random_init_for(bank):
        return cn.init_params(bank.config, derive_seed(master, _K_RANDOM_INIT))

    if e.kind in ("snr_sweep", "gamma_sweep", "ablation_hybrid", "convergence"):
        if e.kind == "ablation_hybrid":
            methods = ["offline_only", "online_only", "hybrid"]
            values = [cfg.adapt.N_i]
        elif e.kind == "convergence":
            methods = ["hybrid"]
            values = [0]
        else:
            values = list(cfg.channel.snr_list if e.kind == "snr_sweep" else cfg.channel.gamma_list)
        bank = rinit = None
        if any(m in _NEEDS_BANK for m in methods) or e.kind == "convergence":
            bank = _load_or_train(cfg, out_dir, bank_path)
            rinit = random_init_for(bank)
        for si, v in enumerate(values):
            jobs += [(cfg, e.kind, si, v, t, methods, bank, rinit, None) for t in trials]
    elif e.kind in ("salr_delta", "salr_rank", "num_bases"):
        methods = ["hybrid"]
        if e.kind == "salr_delta":
            points = [(d, {"head": "salr", "delta": float(d)}, e.sweep_bases) for d in e.delta_list]
        elif e.kind == "salr_rank":
            points = [(r, {"head": "salr", "rank": int(r)}, e.sweep_bases) for r in e.rank_list]
        else:
            points = [(m, {}, int(m)) for m in e.M_list]
        for si, (v, over, M) in enumerate(points):
            sub = dataclasses.replace(cfg, experiment=dataclasses.replace(e, train_first=True))
            bank = _load_or_train(sub, out_dir, None, M=M, **over)
            jobs += [(cfg, e.kind, si, v, t, methods, bank, None, "id") for t in trials]
    elif e.kind == "ood":
        methods = ["id", "ood"]
        for si, M in enumerate(e.M_list):
            sub = dataclasses.replace(cfg, experiment=dataclasses.replace(e, train_first=True))
            bank = _load_or_train(sub, out_dir, None, M=int(M))
            for which in ("id", "ood"):
                jobs += [(cfg, e.kind, si, M, t, [which], bank, None, which) for t in trials]
    else:  # pragma: no cover - rejected by config validation
        raise ValueError(e.kind)

    rows, aborts = _execute(jobs, workers)
    for si, method, trial, why in aborts:
        log.warning("trial aborted (sweep %d, %s, trial %d): %s", si, method, trial, why)
    order = _method_order(methods)
    rows.sort(key=lambda r: (r.sweep_index, order.get(r.method, len(order)), r.method, r.trial))
    write_results(os.path.join(out_dir, "results.csv"), rows, cfg)
    if aborts:
        with open(os.path.join(out_dir, "aborted.log"), "w", newline="\n") as fh:
            for a in aborts:
                fh.write("sweep=%d method=%s trial=%d error=%s\n" % a)
    return rows


# ---------------------------------------------------------------------------
# CSV i/o and aggregation
# ---------------------------------------------------------------------------

def _header_comment(cfg):
    return f"# robustbf {__version__} config_hash={config_hash(cfg)}\n"


def write_results(path, rows, cfg):
    with open(path, "w", newline="") as fh:
        fh.write(_header_comment(cfg))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([repr(r.sweep_value), r.method, r.trial, repr(r.wsr_true), f"{r.runtime_ms:.3f}"])


def read_results(path):
    """Parse a result table; raises :class:`ReportError` naming the bad line."""
    rows = []
    header = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            fields = next(csv.reader([line]))
            if header is None:
                if fields != RESULT_COLUMNS:
                    raise ReportError(f"line {lineno}: expected header {','.join(RESULT_COLUMNS)}")
                header = fields
                continue
            if len(fields) != len(RESULT_COLUMNS):
                raise ReportError(f"line {lineno}: expected {len(RESULT_COLUMNS)} fields, got {len(fields)}")
            try:
                sv, method, trial, wsr_true, ms = (float(fields[0]), fields[1], int(fields[2]),
                                                   float(fields[3]), float(fields[4]))
            except ValueError as exc:
                raise ReportError(f"line {lineno}: {exc}") from None
            if not method or not (math.isfinite(sv) and math.isfinite(wsr_true)):
                raise ReportError(f"line {lineno}: empty method or non-finite value")
            rows.append((sv, method, trial, wsr_true, ms))
    if header is None:
        raise ReportError("line 1: missing header")
    return rows


def report(path, out_path=None):
    """Per (sweep value, method): trial count, mean and sample std (0 for one trial).

    Returns the summary rows as dicts keyed by :data:`SUMMARY_COLUMNS`;
    writes them as CSV when ``out_path`` is given.
    """
    rows = read_results(path)
    groups = {}
    first_seen = {}
    for sv, method, _, w, _ in rows:
        groups.setdefault((sv, method), []).append(w)
        first_seen.setdefault(method, len(first_seen))
    summary = []
    for (sv, method) in sorted(groups, key=lambda k: (k[0], first_seen[k[1]])):
        x = np.asarray(groups[(sv, method)])
        std = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
        summary.append({"sweep_value": sv, "method": method, "n": int(x.size),
                        "mean": float(np.mean(x)), "std": std})
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            for s in summary:
                w.writerow([repr(s["sweep_value"]), s["method"], s["n"], repr(s["mean"]), repr(s["std"])])
    return summary
