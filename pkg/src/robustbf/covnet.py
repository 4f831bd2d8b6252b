"""
Shared covariance-prediction network.

One MLP is applied to every user: input ``[Re(h_bar); Im(h_bar)]``
(length ``2 M_t``), three hidden layers of affine -> normalization -> ReLU,
and a linear output head that is turned into a real symmetric
``M_t x M_t`` matrix either by filling the upper triangle (``full``) or by
sparse-augmented low-rank assembly ``sum_i a_i a_i^T + S`` (``salr``).
"""

from __future__ import annotations

import hashlib
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, value_of

__all__ = [
    "NetConfig", "SparsityMask", "init_params", "param_layout", "forward",
    "assemble_salr", "pick_sparsity_mask", "random_mask", "fuse",
    "update_running_stats", "mean_features", "save_params", "load_params",
    "save_bank", "load_bank", "BankFormatError",
]

BN_EPS = 1e-5


@dataclass(frozen=True)
class SparsityMask:
    """Upper-triangle support ``(i, j), i <= j`` of the sparse residual."""

    pairs: tuple
    M_t: int
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(sorted((int(i), int(j)) for i, j in self.pairs)))
        for i, j in self.pairs:
            if not 0 <= i <= j < self.M_t:
                raise ValueError(f"mask entry {(i, j)} outside the upper triangle")
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("duplicate mask entries")

    def __len__(self):
        return len(self.pairs)

    @property
    def empty(self):
        return not self.pairs

    @property
    def symmetric_count(self):
        return sum(1 if i == j else 2 for i, j in self.pairs)

    def dense(self):
        m = np.zeros((self.M_t, self.M_t), dtype=bool)
        for i, j in self.pairs:
            m[i, j] = m[j, i] = True
        return m


def mask_size(M_t, delta):
    """Number of learnable sparse entries: ``round(delta * M_t^2)``, capped at the triangle."""
    return int(min(round(delta * M_t * M_t), M_t * (M_t + 1) // 2))


def random_mask(M_t, delta, rng) -> SparsityMask:
    """Uniformly random upper-triangle support of :func:`mask_size` entries."""
    iu = np.triu_indices(M_t)
    n = mask_size(M_t, delta)
    pick = np.sort(rng.choice(iu[0].size, size=n, replace=False)) if n else np.array([], dtype=int)
    return SparsityMask(tuple(zip(iu[0][pick], iu[1][pick])), M_t, float(delta))


@dataclass(frozen=True)
class NetConfig:
    M_t: int
    head: str = "salr"
    rank: int = 8
    delta: float = 0.09
    mask: SparsityMask | None = None
    hidden: tuple = (128, 256, 256)
    out_scale: float = 0.01

    def __post_init__(self):
        if self.head not in ("full", "salr"):
            raise ValueError("head must be 'full' or 'salr'")
        if not 0.0 <= self.delta <= 1.0 or self.rank < 0:
            raise ValueError("need 0 <= delta <= 1 and rank >= 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) != 3:
            raise ValueError("exactly three hidden layers")
        if self.head == "salr":
            if self.mask is None:
                raise ValueError("salr head needs a mask (see random_mask / pick_sparsity_mask)")
            if self.mask.M_t != self.M_t:
                raise ValueError("mask size does not match M_t")

    @property
    def input_dim(self):
        return 2 * self.M_t

    @property
    def output_dim(self):
        if self.head == "full":
            return self.M_t * (self.M_t + 1) // 2
        return self.rank * self.M_t + len(self.mask)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["mask"] = None if self.mask is None else {
            "pairs": [list(p) for p in self.mask.pairs], "delta": self.mask.delta}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        m = d.get("mask")
        d["mask"] = None if m is None else SparsityMask(tuple(map(tuple, m["pairs"])), d["M_t"], m["delta"])
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def param_layout(config: NetConfig):
    dims = (config.input_dim,) + config.hidden
    layout = []
    for layer in range(3):
        i, o = dims[layer], dims[layer + 1]
        n = layer + 1
        layout += [(f"W{n}", (i, o)), (f"b{n}", (o,)), (f"gamma{n}", (o,)), (f"beta{n}", (o,)),
                   (f"mean{n}", (o,), False), (f"var{n}", (o,), False)]
    layout += [("Wo", (dims[-1], config.output_dim)), ("bo", (config.output_dim,))]
    return layout


def init_params(config: NetConfig, seed=None) -> ParamVector:
    """Uniform(+-1/sqrt(fan_in)) weights and biases, identity normalization."""
    rng = np.random.default_rng(seed)
    pv = ParamVector(param_layout(config))
    for name, (shape, _, _) in pv.registry.items():
        if name.startswith("W"):
            bound = 1.0 / np.sqrt(shape[0])
            pv[name] = rng.uniform(-bound, bound, shape)
        elif name.startswith("b") and not name.startswith("beta"):
            fan_in = pv.registry["W" + name[1:]][0][0]
            pv[name] = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), shape)
        elif name.startswith("gamma") or name.startswith("var"):
            pv[name] = np.ones(shape)
    return pv


def mean_features(hbar):
    """``[Re(h_bar) ; Im(h_bar)]`` per user, shape (K, 2 M_t)."""
    hbar = np.asarray(hbar)
    return np.concatenate([hbar.real, hbar.imag], axis=-1)


def _full_index(M):
    idx = np.empty((M, M), dtype=int)
    iu = np.triu_indices(M)
    idx[iu] = np.arange(iu[0].size)
    idx[(iu[1], iu[0])] = np.arange(iu[0].size)
    return idx


def _sparse_index(mask: SparsityMask, offset):
    idx = -np.ones((mask.M_t, mask.M_t), dtype=int)
    for p, (i, j) in enumerate(mask.pairs):
        idx[i, j] = idx[j, i] = offset + p
    return idx


def assemble_salr(vectors, sparse_values, mask: SparsityMask):
    """``sum_i a_i a_i^T + S`` from ``vectors`` (..., r, M) and mask values (..., |mask|)."""
    A = vectors
    M = mask.M_t
    lead = value_of(A).shape[:-2]
    r = value_of(A).shape[-2]
    if r:
        L = ad.matmul(ad.transpose(A), A)
        L = ad.scale(ad.add(L, ad.transpose(L)), 0.5)
    else:
        L = np.zeros(lead + (M, M))
    if len(mask):
        S = ad.gather_mask(sparse_values, _sparse_index(mask, 0))
        return ad.add(L, S)
    return ad.add(L, np.zeros(lead + (M, M)))


def forward(weights: Mapping, config: NetConfig, features, mode="frozen"):
    """Predict one real symmetric covariance per row of ``features``.

    Parameters
    ----------
    weights : mapping
        Block name to array or tape variable (``ParamVector.blocks()`` or
        ``ParamVector.leaves(tape)``).
    config : NetConfig
    features : ndarray, shape (K, 2 M_t)
    mode : {'frozen', 'batch'}
        ``batch`` normalizes with statistics of the K-user batch;
        ``frozen`` uses the stored running statistics as constants.

    Returns
    -------
    R : array or Var, shape (K, M_t, M_t)
    stats : list of (mean, var)
        Batch statistics per hidden layer (``batch`` mode only).
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[1] != config.input_dim:
        raise ValueError(f"features must be (K, {config.input_dim})")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or inf")
    if mode not in ("frozen", "batch"):
        raise ValueError("mode must be 'frozen' or 'batch'")
    h = X
    stats = []
    for n in (1, 2, 3):
        z = ad.add(ad.matmul(h, weights[f"W{n}"]), weights[f"b{n}"])
        if mode == "batch":
            zv = value_of(z)
            stats.append((zv.mean(axis=0), zv.var(axis=0)))
            z = ad.batch_normalize(z, weights[f"gamma{n}"], weights[f"beta{n}"], BN_EPS)
        else:
            rm = value_of(weights[f"mean{n}"])
            inv_std = 1.0 / np.sqrt(value_of(weights[f"var{n}"]) + BN_EPS)
            z = ad.add(ad.mul(ad.scale(ad.sub(z, rm), inv_std), weights[f"gamma{n}"]),
                       weights[f"beta{n}"])
        h = ad.relu(z)
    y = ad.identity(ad.add(ad.matmul(h, weights["Wo"]), weights["bo"]))
    M = config.M_t
    if config.head == "full":
        R = ad.gather_mask(y, _full_index(M))
    else:
        K = X.shape[0]
        r = config.rank
        vecs = ad.gather_mask(y, np.arange(r * M).reshape(r, M)) if r else np.zeros((K, 0, M))
        sp = ad.gather_mask(y, r * M + np.arange(len(config.mask)))
        R = assemble_salr(vecs, sp, config.mask)
    if config.out_scale != 1.0:
        R = ad.scale(R, config.out_scale)
    return R, stats


def update_running_stats(params: ParamVector, stats, momentum=0.9):
    """Exponential moving average of the batch statistics, in place."""
    for n, (m, v) in enumerate(stats, start=1):
        params[f"mean{n}"] = momentum * params[f"mean{n}"] + (1.0 - momentum) * m
        params[f"var{n}"] = momentum * params[f"var{n}"] + (1.0 - momentum) * v


def fuse(R_S, R_Net, eta):
    """Convex combination ``eta R_S + (1 - eta) R_Net``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if eta == 1.0:
        return np.array(R_S, dtype=complex)
    if eta == 0.0:
        return ad.add(R_Net, np.zeros(np.shape(R_S), dtype=complex))
    return ad.add(ad.scale(R_S, eta), ad.scale(R_Net, 1.0 - eta))


def pick_sparsity_mask(candidate_count, delta, eval_fn: Callable[[SparsityMask], float],
                       seed=None, M_t=None):
    """Draw random candidate masks and keep the one with the highest score.

    Parameters
    ----------
    candidate_count : int
    delta : float
        Sparsity level; the mask holds ``round(delta * M_t**2)`` entries.
    eval_fn : callable
        Score of a mask (e.g. validation WSR after short training).
    M_t : int

    Returns
    -------
    mask : SparsityMask
    scores : list of float
        Score of every candidate, in draw order.
    """
    if candidate_count < 1:
        raise ValueError("candidate_count must be >= 1")
    if M_t is None:
        raise ValueError("M_t is required")
    if mask_size(M_t, delta) == 0 and delta > 0:
        warnings.warn(f"delta={delta} leaves no sparse entries at M_t={M_t}; using a pure low-rank head",
                      stacklevel=2)
    rng = np.random.default_rng(seed)
    cands = [random_mask(M_t, delta, rng) for _ in range(int(candidate_count))]
    scores = [float(eval_fn(m)) for m in cands]
    return cands[int(np.argmax(scores))], scores


# ---------------------------------------------------------------------------
# parameter-bank text format
# ---------------------------------------------------------------------------

class BankFormatError(ValueError):
    pass


_PARAM_HEADER = "# robustbf parameter bank v1"


def _write_params(lines, pv: ParamVector):
    for name, (shape, _, trainable) in pv.registry.items():
        lines.append(f"block {name} {','.join(map(str, shape))} {int(trainable)}")
    lines.append("values")
    lines.extend(f"{x:.17g}" for x in pv.data)
    lines.append("end")


def _read_params(lines, pos, layout, where):
    blocks = []
    while lines[pos].startswith("block "):
        _, name, shape, trainable = lines[pos].split()
        blocks.append((name, tuple(int(s) for s in shape.split(",") if s), bool(int(trainable))))
        pos += 1
    if lines[pos] != "values":
        raise BankFormatError(f"{where}: expected 'values' at line {pos + 1}")
    pos += 1
    expected = {name: tuple(shape) for name, shape, *_ in layout}
    for name, shape, _ in blocks:
        if name not in expected:
            raise BankFormatError(f"{where}: unexpected block {name!r}")
        if expected[name] != shape:
            raise BankFormatError(
                f"{where}: block {name!r} has shape {shape}, config expects {expected[name]}")
    missing = set(expected) - {b[0] for b in blocks}
    if missing:
        raise BankFormatError(f"{where}: missing block(s) {sorted(missing)}")
    pv = ParamVector(blocks)
    end = pos + pv.size
    if end >= len(lines) or lines[end] != "end":
        raise BankFormatError(f"{where}: expected {pv.size} values")
    pv.data = np.array([float(x) for x in lines[pos:end]])
    return ParamVector.pack(layout, pv.blocks()), end + 1


def save_bank(path, bases: Sequence[ParamVector], config: NetConfig, extra=None):
    """Write ``M`` parameter vectors sharing ``config`` to a text file."""
    lines = [_PARAM_HEADER,
             "config " + json.dumps(config.to_dict(), sort_keys=True),
             f"bank M={len(bases)} config_hash={config.digest()}"]
    if extra:
        lines.append("extra " + json.dumps(extra, sort_keys=True))
    for m, pv in enumerate(bases):
        lines.append(f"basis {m}")
        _write_params(lines, pv)
    text = "\n".join(lines) + "\n"
    if isinstance(path, io.TextIOBase):
        path.write(text)
    else:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)


def load_bank(path, expected_config: NetConfig | None = None):
    """Read a bank written by :func:`save_bank`.

    Returns ``(bases, config, extra)``. Shape mismatches against the stored
    (or ``expected_config``) layout raise :class:`BankFormatError` naming
    the offending block.
    """
    if isinstance(path, io.TextIOBase):
        text = path.read()
    else:
        with open(path) as fh:
            text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0] != _PARAM_HEADER:
        raise BankFormatError("not a parameter-bank file")
    if not lines[1].startswith("config "):
        raise BankFormatError("missing config line")
    config = NetConfig.from_dict(json.loads(lines[1][len("config "):]))
    if expected_config is not None:
        config = expected_config
    head = dict(tok.split("=", 1) for tok in lines[2].split()[1:])
    M = int(head["M"])
    pos = 3
    extra = None
    if lines[pos].startswith("extra "):
        extra = json.loads(lines[pos][len("extra "):])
        pos += 1
    layout = param_layout(config)
    bases = []
    for m in range(M):
        if lines[pos] != f"basis {m}":
            raise BankFormatError(f"expected 'basis {m}' at line {pos + 1}")
        pv, pos = _read_params(lines, pos + 1, layout, f"basis {m}")
        bases.append(pv)
    return bases, config, extra


def save_params(path, params: ParamVector, config: NetConfig):
    save_bank(path, [params], config)


def load_params(path, expected_config: NetConfig | None = None):
    bases, config, _ = load_bank(path, expected_config)
    if len(bases) != 1:
        raise BankFormatError(f"expected a single parameter vector, found {len(bases)}")
    return bases[0], config
