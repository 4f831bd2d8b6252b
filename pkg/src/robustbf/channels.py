"""
Synthetic channels, structured error covariances and task generation.

Channels follow an exponential-correlation Rayleigh model. Estimation
errors are zero-mean circular Gaussian with covariance ``Q diag(lam) Q^H``
where ``Q`` is a Haar unitary matrix and the eigenvalues are lognormal
(``exp(s g)``, ``g ~ N(0, 1)``, log-spread ``s``), globally rescaled so that ``tr(R_e) = ref_power * 10**(-gamma_db/10)``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ErrorModel", "ChannelRealization", "Task", "gen_error_covariance",
    "regenerate_eigenvalues", "gen_channels", "sample_estimates",
    "ls_estimate", "lmmse_estimate", "empirical_mean", "sample_covariance",
    "crandn", "derive_seed", "save_tasks", "load_tasks", "TaskSampler",
    "DEFAULT_LOG_SPREAD",
]

#: Standard deviation of the log-eigenvalues of the error covariance.
DEFAULT_LOG_SPREAD = 3.0


def crandn(rng, *shape):
    """Standard circular complex Gaussian samples, E|z|^2 = 1."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def derive_seed(*keys) -> int:
    """Mix integer keys into a 63-bit seed (order matters, prefix-stable)."""
    ss = np.random.SeedSequence([abs(int(k)) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def _haar_unitary(rng, n):
    z = crandn(rng, n, n)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    ph = np.where(np.abs(d) > 0, d / np.abs(d), 1.0)
    return q * ph[None, :]


def _error_power(ref_power, gamma_db):
    if np.isposinf(gamma_db):
        return 0.0
    return float(ref_power) * 10.0 ** (-float(gamma_db) / 10.0)


def _draw_eigenvalues(rng, n, total, log_spread=DEFAULT_LOG_SPREAD):
    lam = np.exp(log_spread * rng.standard_normal(n))
    return lam * (total / lam.sum())


@dataclass
class ErrorModel:
    """Error statistics of one user: ``R_e = Q diag(lam) Q^H``."""

    Q: np.ndarray
    lam: np.ndarray
    gamma_db: float
    ref_power: float
    log_spread: float = DEFAULT_LOG_SPREAD

    @property
    def M_t(self):
        return self.Q.shape[0]

    @property
    def R_e(self) -> np.ndarray:
        return (self.Q * self.lam[None, :]) @ self.Q.conj().T

    @property
    def sqrt_factor(self) -> np.ndarray:
        """``L`` with ``L L^H = R_e``."""
        return self.Q * np.sqrt(self.lam)[None, :]

    def draw(self, rng, n):
        """``n`` error vectors, shape (n, M_t)."""
        z = crandn(rng, n, self.M_t)
        return z @ self.sqrt_factor.T


def gen_error_covariance(M_t, gamma_db, ref_channel_power=None, seed=None,
                         log_spread=DEFAULT_LOG_SPREAD, Q=None) -> ErrorModel:
    """Random error covariance with a Haar eigenbasis and lognormal spectrum.

    Parameters
    ----------
    M_t : int
        Number of transmit antennas.
    gamma_db : float
        Error level in dB (channel-to-error power ratio); ``inf`` gives a
        zero covariance.
    ref_channel_power : float, optional
        ``E||h||^2`` of the channel; defaults to ``M_t``.
    seed : int or Generator
    log_spread : float
        Standard deviation of the log-eigenvalues before rescaling.
    Q : ndarray, optional
        Eigenbasis to use instead of a fresh Haar draw.
    """
    if int(M_t) < 1:
        raise ValueError("M_t must be >= 1")
    M_t = int(M_t)
    ref = float(M_t if ref_channel_power is None else ref_channel_power)
    rng = np.random.default_rng(seed)
    if log_spread < 0:
        raise ValueError("log_spread must be >= 0")
    if Q is None:
        Q = _haar_unitary(rng, M_t)
    elif np.shape(Q) != (M_t, M_t):
        raise ValueError("Q must be M_t x M_t")
    lam = _draw_eigenvalues(rng, M_t, _error_power(ref, gamma_db), log_spread)
    return ErrorModel(np.asarray(Q, dtype=complex), lam, float(gamma_db), ref, float(log_spread))


def regenerate_eigenvalues(model: ErrorModel, seed=None) -> ErrorModel:
    """Fresh eigenvalues at the same error power; ``Q`` is kept as is."""
    rng = np.random.default_rng(seed)
    lam = _draw_eigenvalues(rng, model.M_t, _error_power(model.ref_power, model.gamma_db),
                            model.log_spread)
    return ErrorModel(model.Q, lam, model.gamma_db, model.ref_power, model.log_spread)


@dataclass
class ChannelRealization:
    H: np.ndarray      # (K, M_t), row k is h_k
    R_h: np.ndarray    # (M_t, M_t)

    @property
    def K(self):
        return self.H.shape[0]

    @property
    def M_t(self):
        return self.H.shape[1]


def exp_correlation(M_t, rho):
    idx = np.arange(M_t)
    return float(rho) ** np.abs(idx[:, None] - idx[None, :])


def gen_channels(M_t, K, correlation_coeff=0.5, seed=None) -> ChannelRealization:
    """``h_k = R_h^{1/2} g_k`` with ``[R_h]_ij = rho^|i-j|``."""
    if not 0.0 <= correlation_coeff < 1.0:
        raise ValueError("correlation_coeff must be in [0, 1)")
    rng = np.random.default_rng(seed)
    R_h = exp_correlation(M_t, correlation_coeff)
    w, U = np.linalg.eigh(R_h)
    root = (U * np.sqrt(np.clip(w, 0.0, None))[None, :]) @ U.T
    G = crandn(rng, K, M_t)
    return ChannelRealization(G @ root.T, R_h)


@dataclass
class Task:
    """Support samples (noisy estimates) and query channels of one block."""

    support: np.ndarray                 # (K, N, M_t)
    query: np.ndarray                   # (K, M_t)
    error_models: list = field(default_factory=list)

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=complex)
        self.query = np.asarray(self.query, dtype=complex)
        if self.support.ndim != 3 or self.query.shape != (self.support.shape[0], self.support.shape[2]):
            raise ValueError(
                f"support must be (K, N, M_t) and query (K, M_t); got "
                f"{self.support.shape} and {self.query.shape}")

    @property
    def K(self):
        return self.support.shape[0]

    @property
    def N(self):
        return self.support.shape[1]

    @property
    def M_t(self):
        return self.support.shape[2]

    @property
    def true_covariances(self):
        return np.stack([m.R_e for m in self.error_models])


@dataclass
class TaskSampler:
    """Seeded source of tasks sharing one error eigenbasis.

    Every task draws a fresh channel realization and fresh eigenvalues per
    user; the eigenbasis ``Q`` is fixed by ``env_seed`` and shared by all
    users. The error level of each task is picked uniformly from
    ``gamma_db``.
    """

    M_t: int
    K: int
    N: int = 2
    gamma_db: tuple = (0.0,)
    rho: float = 0.5
    env_seed: int = 0
    log_spread: float = DEFAULT_LOG_SPREAD

    def __post_init__(self):
        self.gamma_db = tuple(float(g) for g in np.atleast_1d(self.gamma_db))
        if not self.gamma_db:
            raise ValueError("need at least one error level")
        self.Q = _haar_unitary(np.random.default_rng(derive_seed(self.env_seed, 0xE4)), self.M_t)

    def sample(self, seed) -> Task:
        rng = np.random.default_rng(seed)
        g = self.gamma_db[int(rng.integers(len(self.gamma_db)))]
        s = rng.integers(0, 2 ** 62, size=self.K + 2)
        real = gen_channels(self.M_t, self.K, self.rho, seed=int(s[0]))
        ems = [gen_error_covariance(self.M_t, g, seed=int(s[2 + k]), log_spread=self.log_spread,
                                    Q=self.Q) for k in range(self.K)]
        return sample_estimates(real, ems, self.N, seed=int(s[1]))

    def batch(self, n, *keys):
        return [self.sample(derive_seed(*keys, i)) for i in range(int(n))]


def sample_estimates(realization: ChannelRealization, error_models: Sequence[ErrorModel],
                     N=2, seed=None) -> Task:
    """``N`` noisy estimates per user, ``h_hat = h - e`` with ``e ~ CN(0, R_e)``."""
    if int(N) < 1:
        raise ValueError("N must be >= 1")
    if len(error_models) != realization.K:
        raise ValueError("need one error model per user")
    rng = np.random.default_rng(seed)
    K, M = realization.H.shape
    support = np.empty((K, int(N), M), dtype=complex)
    for k, em in enumerate(error_models):
        support[k] = realization.H[k][None, :] - em.draw(rng, int(N))
    return Task(support, realization.H.copy(), list(error_models))


def ls_estimate(received, pilots):
    """Least-squares de-spreading ``Y x_k`` for every user.

    Parameters
    ----------
    received : ndarray, shape (M_t, L)
        ``Y = sum_k h_k x_k^H + Z``.
    pilots : ndarray, shape (L, K)
        Pilot sequences as columns, ``X^H X = I``.

    Returns
    -------
    ndarray, shape (K, M_t)
    """
    pilots = np.asarray(pilots)
    gram = pilots.conj().T @ pilots
    if not np.allclose(gram, np.eye(gram.shape[0]), atol=1e-10):
        raise ValueError("pilot sequences must be orthonormal")
    return (np.asarray(received) @ pilots).T


def lmmse_estimate(ls, R_h, sigma_bs, pilot_length=1):
    """``R_h (R_h + L sigma^2 I)^{-1}`` applied to each LS estimate.

    ``pilot_length * sigma_bs**2`` is taken as the noise variance of each
    LS entry.
    """
    R_h = np.asarray(R_h)
    noise = float(pilot_length) * float(sigma_bs) ** 2
    A = R_h + noise * np.eye(R_h.shape[0])
    if noise == 0.0 and np.linalg.matrix_rank(R_h) < R_h.shape[0]:
        raise np.linalg.LinAlgError("R_h is singular and the noise variance is zero")
    W = np.linalg.solve(A.T, R_h.T).T          # R_h A^{-1}
    return np.asarray(ls) @ W.T


def empirical_mean(task_or_support):
    """Per-user sample mean of the support estimates, shape (K, M_t)."""
    s = task_or_support.support if isinstance(task_or_support, Task) else np.asarray(task_or_support)
    return s.mean(axis=1)


def sample_covariance(task_or_support):
    """Per-user sample covariance with divisor N, shape (K, M_t, M_t)."""
    s = task_or_support.support if isinstance(task_or_support, Task) else np.asarray(task_or_support)
    d = s - s.mean(axis=1, keepdims=True)
    return np.einsum("kni,knj->kij", d, d.conj()) / s.shape[1]


# ---------------------------------------------------------------------------
# task-set text format
# ---------------------------------------------------------------------------

_HEADER = "# robustbf task-set v1"


def _fmt_vec(z):
    return " ".join(f"{x:.17g}" for pair in zip(z.real, z.imag) for x in pair)


def _parse_vec(tokens, M):
    vals = np.array([float(t) for t in tokens])
    if vals.size != 2 * M:
        raise ValueError(f"expected {2 * M} values, got {vals.size}")
    return vals[0::2] + 1j * vals[1::2]


def save_tasks(path_or_buf, tasks: Sequence[Task], gamma_db=float("nan"), seed=0):
    """Write tasks as text: header, then one line per support/query vector."""
    if not tasks:
        raise ValueError("no tasks to save")
    K, N, M = tasks[0].support.shape
    lines = [_HEADER, f"M_t={M} K={K} N={N} gamma_db={float(gamma_db)!r} seed={int(seed)} tasks={len(tasks)}"]
    for t, task in enumerate(tasks):
        if task.support.shape != (K, N, M):
            raise ValueError("all tasks must share (K, N, M_t)")
        for k in range(K):
            for n in range(N):
                lines.append(f"S {t} {k} {n} {_fmt_vec(task.support[k, n])}")
            lines.append(f"Q {t} {k} {_fmt_vec(task.query[k])}")
    text = "\n".join(lines) + "\n"
    if isinstance(path_or_buf, io.TextIOBase):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w", newline="\n") as fh:
            fh.write(text)


def load_tasks(path_or_buf):
    """Inverse of :func:`save_tasks`; returns ``(tasks, header_dict)``."""
    if isinstance(path_or_buf, io.TextIOBase):
        text = path_or_buf.read()
    else:
        with open(path_or_buf) as fh:
            text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0] != _HEADER:
        raise ValueError("not a task-set file")
    header = dict(tok.split("=", 1) for tok in lines[1].split())
    M, K, N, T = (int(header[k]) for k in ("M_t", "K", "N", "tasks"))
    support = np.zeros((T, K, N, M), dtype=complex)
    query = np.zeros((T, K, M), dtype=complex)
    for lineno, line in enumerate(lines[2:], start=3):
        tok = line.split()
        try:
            if tok[0] == "S":
                t, k, n = int(tok[1]), int(tok[2]), int(tok[3])
                support[t, k, n] = _parse_vec(tok[4:], M)
            elif tok[0] == "Q":
                t, k = int(tok[1]), int(tok[2])
                query[t, k] = _parse_vec(tok[3:], M)
            else:
                raise ValueError(f"unknown record {tok[0]!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    meta = {"M_t": M, "K": K, "N": N, "tasks": T,
            "gamma_db": float(header["gamma_db"]), "seed": int(header["seed"])}
    return [Task(support[t], query[t]) for t in range(T)], meta
