"""
WMMSE-family beamformers for the multiuser MISO downlink.

Beamformers are stored column-wise: ``V`` has shape ``(M_t, K)`` and
column ``k`` is ``v_k``. Channels are stored row-wise: ``H`` has shape
``(K, M_t)`` and row ``k`` is ``h_k`` (so ``conj(H) @ V`` holds
``h_k^H v_i``).

:func:`wsr`, :func:`saa_loss`, :func:`power_normalize`,
:func:`second_order_stats` and :func:`robust_wmmse` are written with the
operations of :mod:`robustbf.autodiff` and therefore accept tape
variables as well as plain arrays.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import IllConditionedError, value_of

__all__ = [
    "SystemParams", "StatModel", "BeamformingSolution", "wsr", "saa_loss",
    "power_normalize", "mrt_init", "second_order_stats", "robust_wmmse",
    "wmmse_perfect", "swmmse", "wmmse_objective", "emit_hooks",
    "LOADING_FACTOR",
]

LOADING_FACTOR = 1e-9
#: Loading is multiplied by 100 up to this many times until the inverse is well conditioned.
LOADING_ESCALATIONS = 6

#: Callables ``hook(solution, P_max)`` run on every emitted solution.
emit_hooks: list[Callable] = []


@dataclass
class SystemParams:
    """Power budget, per-user noise variances and priority weights."""

    P_max: float = 1.0
    sigma2: float | np.ndarray = 0.01
    weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.P_max > 0:
            raise ValueError("P_max must be positive")
        if np.any(np.asarray(self.sigma2) <= 0):
            raise ValueError("sigma2 must be positive")

    @classmethod
    def from_snr_db(cls, snr_db, P_max=1.0, weights=None):
        return cls(P_max=P_max, sigma2=P_max * 10.0 ** (-snr_db / 10.0), weights=weights)

    def noise(self, K):
        return np.broadcast_to(np.asarray(self.sigma2, dtype=float), (K,)).copy()

    def omega(self, K):
        if self.weights is None:
            return np.ones(K)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (K,) or np.any(w <= 0):
            raise ValueError("weights must be K positive values")
        return w


@dataclass
class StatModel:
    """Channel mean (K, M_t) and error covariance (K, M_t, M_t) per user."""

    mean: np.ndarray
    cov: object     # ndarray or autodiff Var

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=complex)
        c = value_of(self.cov)
        K, M = self.mean.shape
        if c.shape != (K, M, M):
            raise ValueError(f"cov must have shape {(K, M, M)}, got {c.shape}")


@dataclass
class BeamformingSolution:
    V: object                   # (M_t, K) array or Var
    U: np.ndarray
    W: np.ndarray
    loaded: bool = False
    history: list = field(default_factory=list)

    @property
    def V_value(self) -> np.ndarray:
        return value_of(self.V)

    def power(self):
        return float(np.sum(np.abs(self.V_value) ** 2))


def _emit(sol, P_max):
    for hook in emit_hooks:
        hook(sol, P_max)
    return sol


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _rates(Hc_V, sigma2):
    # Hc_V[..., k, i] = h_k^H v_i
    P = ad.abs_squared(Hc_V)
    K = value_of(P).shape[-1]
    sig = ad.diag_part(P)
    interf = ad.sub(ad.sum(P, axis=-1), sig)
    return ad.log2_1p_ratio(sig, ad.add(interf, sigma2.reshape((1,) * (value_of(sig).ndim - 1) + (K,))))


def wsr(H, V, params: SystemParams):
    """Weighted sum rate ``sum_k w_k log2(1 + SINR_k)`` for channels ``H``."""
    H = np.asarray(H)
    K = H.shape[0]
    r = _rates(ad.matmul(np.conj(H), V), params.noise(K))
    return ad.sum(ad.mul(r, params.omega(K)))


def saa_loss(support, V, params: SystemParams):
    """Negative WSR summed over the ``N`` samples in ``support`` (K, N, M_t)."""
    S = np.asarray(support)
    K = S.shape[0]
    Hn = np.conj(np.transpose(S, (1, 0, 2)))          # (N, K, M_t)
    r = _rates(ad.matmul(Hn, V), params.noise(K))      # (N, K)
    return ad.scale(ad.sum(ad.mul(r, params.omega(K)[None, :])), -1.0)


def power_normalize(V, P_max):
    """Scale all beamformers by a common factor so the total power is ``P_max``."""
    p = float(np.sum(np.abs(value_of(V)) ** 2))
    if p == 0.0:
        raise ValueError("cannot normalize an all-zero beamformer")
    power = ad.sum(ad.abs_squared(V))
    alpha = ad.power(ad.scale(power, 1.0 / P_max), -0.5)
    return ad.mul(V, alpha)


def mrt_init(Hbar, P_max):
    """Matched-filter directions ``v_k ∝ h_k`` at full power."""
    V = np.array(np.asarray(Hbar).T, dtype=complex)
    if not np.any(V):
        V = np.ones_like(V)
    return power_normalize(V, P_max)


def second_order_stats(stat: StatModel, V):
    """``E{h_k h_k^H}`` (K, M, M) and ``E{|h_k^H v_i|^2}`` (K, K)."""
    Hbar = stat.mean
    Ehh = ad.add(ad.outer_product(Hbar, Hbar), stat.cov)
    A = ad.matmul(np.conj(Hbar), V)
    RV = ad.matmul(stat.cov, V)                                   # (K, M, K)
    quad = ad.real(ad.sum(ad.mul(ad.conj(V), RV), axis=1))        # v_i^H R_k v_i
    return Ehh, ad.add(ad.abs_squared(A), quad)


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def _loaded_inverse(Amat):
    try:
        return ad.complex_inverse(Amat), False
    except IllConditionedError:
        pass
    warnings.warn("ill-conditioned beamformer update; applying diagonal loading",
                  RuntimeWarning, stacklevel=3)
    A = value_of(Amat)
    n = A.shape[-1]
    # indefinite fused covariances can leave a small or negative trace
    scale = max(abs(float(np.real(np.trace(A)))) / n, float(np.linalg.norm(A, 2)) / n, 1e-300)
    eps = LOADING_FACTOR * scale
    for _ in range(LOADING_ESCALATIONS):
        try:
            return ad.complex_inverse(ad.add(Amat, eps * np.eye(n))), True
        except IllConditionedError:
            eps *= 100.0
    raise IllConditionedError(0.0)


def _robust_sweep(stat, V, sigma2, omega, P_max):
    Hbar = stat.mean
    K, M = Hbar.shape
    Ehh, Equad = second_order_stats(stat, V)
    a = ad.diag_part(ad.matmul(np.conj(Hbar), V))                 # hbar_k^H v_k
    T = ad.add(ad.sum(Equad, axis=1), sigma2)
    u = ad.div(a, T)
    w = ad.div(1.0, ad.sub(1.0, ad.real(ad.mul(ad.conj(u), a))))
    c = ad.mul(ad.mul(w, ad.abs_squared(u)), omega)               # omega_i * lambda_i
    S = ad.sum(ad.mul(Ehh, ad.reshape(c, (K, 1, 1))), axis=0)
    mu = ad.scale(ad.sum(ad.mul(c, sigma2)), 1.0 / P_max)
    Amat = ad.add(S, ad.mul(ad.reshape(mu, (1, 1)), np.eye(M)))
    Ainv, loaded = _loaded_inverse(Amat)
    coef = ad.mul(ad.mul(w, u), omega)
    B = ad.mul(Hbar.T, ad.reshape(coef, (1, K)))
    V_new = power_normalize(ad.matmul(Ainv, B), P_max)
    return V_new, u, w, loaded


def robust_wmmse(stat: StatModel, params: SystemParams, iters=10, v_init=None,
                 track_history=False) -> BeamformingSolution:
    """Robust WMMSE with closed-form expectations under ``(mean, cov)``.

    Each sweep updates ``u``, ``w`` and ``v`` from the second-order
    statistics and rescales ``V`` to full power. When ``stat.cov`` or
    ``v_init`` is a tape variable, every step is recorded on that tape.

    Parameters
    ----------
    stat : StatModel
    params : SystemParams
    iters : int
        Number of sweeps (fixed; no tolerance test).
    v_init : array or Var, optional
        Starting beamformers; matched filtering on ``stat.mean`` otherwise.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    K = stat.mean.shape[0]
    sigma2, omega = params.noise(K), params.omega(K)
    V = mrt_init(stat.mean, params.P_max) if v_init is None else v_init
    loaded_any = False
    history = []
    u = w = None
    for _ in range(int(iters)):
        V, u, w, loaded = _robust_sweep(stat, V, sigma2, omega, params.P_max)
        loaded_any |= loaded
        if track_history:
            history.append(np.array(value_of(V)))
    sol = BeamformingSolution(V, np.array(value_of(u)), np.array(value_of(w)), loaded_any, history)
    return _emit(sol, params.P_max)


def _np_inverse(A):
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] < ad.INVERSE_RCOND * s[0]:
        warnings.warn("ill-conditioned beamformer update; applying diagonal loading",
                      RuntimeWarning, stacklevel=3)
        A = A + LOADING_FACTOR * np.real(np.trace(A)) / A.shape[0] * np.eye(A.shape[0])
        return np.linalg.inv(A), True
    return np.linalg.inv(A), False


def wmmse_perfect(H, params: SystemParams, iters=50, v_init=None,
                  track_history=False) -> BeamformingSolution:
    """Classic WMMSE treating ``H`` as the exact channel."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    H = np.asarray(H, dtype=complex)
    K, M = H.shape
    sigma2, omega = params.noise(K), params.omega(K)
    V = np.array(value_of(mrt_init(H, params.P_max) if v_init is None else v_init), dtype=complex)
    loaded_any = False
    history = []
    u = np.zeros(K, dtype=complex)
    w = np.ones(K)
    for _ in range(int(iters)):
        for k in range(K):
            g = H[k].conj() @ V                        # h_k^H v_i, all i
            u[k] = g[k] / (np.sum(np.abs(g) ** 2) + sigma2[k])
            w[k] = 1.0 / (1.0 - np.real(np.conj(u[k]) * g[k]))
        lam = omega * w * np.abs(u) ** 2
        A = (H.T * lam) @ H.conj() + (np.sum(lam * sigma2) / params.P_max) * np.eye(M)
        Ainv, loaded = _np_inverse(A)
        loaded_any |= loaded
        V = Ainv @ (H.T * (omega * w * u))
        V = V * np.sqrt(params.P_max / np.sum(np.abs(V) ** 2))
        if track_history:
            history.append(V.copy())
    return _emit(BeamformingSolution(V, u.copy(), w.copy(), loaded_any, history), params.P_max)


def wmmse_objective(H, V, U, W, params: SystemParams):
    """Weighted-MSE objective ``sum_k w_k (W_k e_k - log W_k)`` with one channel."""
    H = np.asarray(H)
    K = H.shape[0]
    sigma2, omega = params.noise(K), params.omega(K)
    G = H.conj() @ V
    ptot = np.sum(np.abs(V) ** 2)
    total = 0.0
    for k in range(K):
        e = (abs(1.0 - np.conj(U[k]) * G[k, k]) ** 2
             + np.sum(np.abs(U[k]) ** 2 * np.abs(np.delete(G[k], k)) ** 2)
             + ptot / params.P_max * sigma2[k] * abs(U[k]) ** 2)
        total += omega[k] * (W[k] * e - np.log(W[k]))
    return float(total)


def swmmse(samples, params: SystemParams, iters=200, v_init=None,
           track_history=False) -> BeamformingSolution:
    """Stochastic WMMSE with sample-average accumulation of the v-update.

    Parameters
    ----------
    samples : ndarray, shape (K, N, M_t)
        Channel samples; iteration ``r`` uses sample ``(r - 1) mod N``.
    """
    S = np.asarray(samples, dtype=complex)
    K, N, M = S.shape
    if N < 1:
        raise ValueError("need at least one sample")
    sigma2, omega = params.noise(K), params.omega(K)
    V = np.array(value_of(mrt_init(S.mean(axis=1), params.P_max) if v_init is None else v_init),
                 dtype=complex)
    A_acc = np.zeros((M, M), dtype=complex)
    b_acc = np.zeros((M, K), dtype=complex)
    u = np.zeros(K, dtype=complex)
    w = np.ones(K)
    loaded_any = False
    history = []
    for r in range(int(iters)):
        Hr = S[:, r % N, :]
        G = Hr.conj() @ V
        g = np.diag(G)
        u = g / (np.sum(np.abs(G) ** 2, axis=1) + sigma2)
        w = 1.0 / (1.0 - np.real(np.conj(u) * g))
        lam = omega * w * np.abs(u) ** 2
        A_acc += (Hr.T * lam) @ Hr.conj() + (np.sum(lam * sigma2) / params.P_max) * np.eye(M)
        b_acc += Hr.T * (omega * w * u)
        Ainv, loaded = _np_inverse(A_acc)
        loaded_any |= loaded
        V = Ainv @ b_acc
        V = V * np.sqrt(params.P_max / np.sum(np.abs(V) ** 2))
        if track_history:
            history.append(V.copy())
    return _emit(BeamformingSolution(V, u, w, loaded_any, history), params.P_max)
