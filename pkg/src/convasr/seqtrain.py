"""Lattice-free MMI: forward-backward on the denominator graph.

Each alpha/beta step is a sparse matrix times dense vector product. Values
are kept in the log domain; before every product the dense vector and the
per-frame arc weights are shifted by their maxima so the linear-domain
product cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .errors import InvalidConfig, LabelMismatch, NumericalOverflow, ShapeError


@dataclass(frozen=True)
class LogLikeMatrix:
    utt_id: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ShapeError(f"expected a T x S matrix with T >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericalOverflow(f"{self.utt_id}: non-finite log-likelihoods")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class NumeratorSupervision:
    frames: np.ndarray  # column index per frame

    def __post_init__(self):
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=np.int64))

    @classmethod
    def from_labels(cls, labels, senones):
        index = {s: i for i, s in enumerate(senones)}
        try:
            return cls(np.array([index[s] for s in labels]))
        except KeyError as e:
            raise LabelMismatch(f"senone {e.args[0]!r} not in inventory") from None

    def __len__(self):
        return len(self.frames)


@dataclass
class MmiResult:
    objective: float
    gradient: np.ndarray
    num_logprob: float
    den_logprob: float
    ce: float = 0.0


def _values(loglikes):
    return loglikes.values if isinstance(loglikes, LogLikeMatrix) else np.asarray(loglikes, float)


def _shifted_exp(v):
    """exp(v - c) and c, with c the largest finite entry (0 if none)."""
    finite = v[np.isfinite(v)]
    c = finite.max() if finite.size else 0.0
    return np.exp(v - c), c


def _log(v):
    with np.errstate(divide="ignore"):
        return np.log(v)


def _recursions(graph, ll):
    T = ll.shape[0]
    N = graph.num_states
    arc_ll = ll[:, graph.label]  # T x E
    alpha = np.full((T + 1, N), -np.inf)
    alpha[0, graph.start] = 0.0
    mats = []
    shifts = np.empty(T)
    for t in range(T):
        w, m = _shifted_exp(graph.logp + arc_ll[t])
        W = graph.transition_matrix(w)
        mats.append(W)
        shifts[t] = m
        x, c = _shifted_exp(alpha[t])
        alpha[t + 1] = _log(W.T @ x) + c + m
    beta = np.full((T + 1, N), -np.inf)
    beta[T] = graph.final
    for t in range(T - 1, -1, -1):
        x, c = _shifted_exp(beta[t + 1])
        beta[t] = _log(mats[t] @ x) + c + shifts[t]
    return arc_ll, alpha, beta


def _posteriors(graph, arc_ll, alpha, beta, logz):
    T = arc_ll.shape[0]
    occ = alpha[:-1, graph.src] + graph.logp + arc_ll + beta[1:, graph.dst] - logz
    occ = np.exp(occ)
    post = np.zeros((T, graph.num_senones))
    for t in range(T):
        post[t] = np.bincount(graph.label, weights=occ[t], minlength=graph.num_senones)
    return post


def _check(graph, ll):
    if ll.ndim != 2 or ll.shape[0] < 1:
        raise ShapeError(f"expected a T x S matrix with T >= 1, got {ll.shape}")
    if ll.shape[1] != graph.num_senones:
        raise LabelMismatch(
            f"graph has {graph.num_senones} senone labels, log-likelihoods have {ll.shape[1]} columns")


def forward_backward(graph, loglikes):
    """Denominator log-probability and per-frame senone posteriors.

    Returns ``(den_logprob, posteriors)`` where ``posteriors`` is T x S and
    each row sums to one.
    """
    ll = _values(loglikes)
    _check(graph, ll)
    arc_ll, alpha, beta = _recursions(graph, ll)
    logz = logsumexp(alpha[-1] + graph.final)
    if not np.isfinite(logz):
        raise NumericalOverflow("no path through the denominator graph has finite score")
    return float(logz), _posteriors(graph, arc_ll, alpha, beta, logz)


def numerator_logprob(graph, loglikes, num):
    """Total score of the graph paths whose labels follow the alignment."""
    ll = _values(loglikes)
    _check(graph, ll)
    if len(num) != ll.shape[0]:
        raise ShapeError(f"alignment has {len(num)} frames, log-likelihoods {ll.shape[0]}")
    masked = np.full_like(ll, -np.inf)
    rows = np.arange(ll.shape[0])
    masked[rows, num.frames] = ll[rows, num.frames]
    _, alpha, _ = _recursions(graph, masked)
    logz = logsumexp(alpha[-1] + graph.final)
    if not np.isfinite(logz):
        raise LabelMismatch("numerator alignment is not accepted by the denominator graph")
    return float(logz)


def mmi_gradient(num, posteriors):
    """d objective / d loglikes: numerator indicator minus denominator posterior."""
    post = np.asarray(posteriors, dtype=np.float64)
    frames = num.frames if isinstance(num, NumeratorSupervision) else np.asarray(num)
    if post.ndim != 2 or len(frames) != post.shape[0]:
        raise ShapeError(f"alignment length {len(frames)} vs posteriors {post.shape}")
    if frames.size and (frames.min() < 0 or frames.max() >= post.shape[1]):
        raise ShapeError("alignment index outside posterior columns")
    grad = -post.copy()
    grad[np.arange(len(frames)), frames] += 1.0
    return grad


def frame_ce(loglikes, num):
    """Frame cross-entropy term (sum of log-softmax of the aligned senone) and its gradient."""
    ll = _values(loglikes)
    rows = np.arange(ll.shape[0])
    value = float(log_softmax(ll, axis=1)[rows, num.frames].sum())
    grad = -softmax(ll, axis=1)
    grad[rows, num.frames] += 1.0
    return value, grad


def mmi_objective(graph, loglikes, num):
    ll = _values(loglikes)
    den, post = forward_backward(graph, ll)
    numer = numerator_logprob(graph, ll, num)
    return MmiResult(numer - den, mmi_gradient(num, post), numer, den)


def mmi_objective_with_ce(graph, loglikes, num, ce_weight=0.0):
    """MMI plus ``ce_weight`` times the frame cross-entropy; both are maximized."""
    if not ce_weight >= 0:
        raise InvalidConfig(f"ce_weight must be >= 0, got {ce_weight}")
    res = mmi_objective(graph, loglikes, num)
    if ce_weight == 0:
        return res
    ce, ce_grad = frame_ce(loglikes, num)
    return MmiResult(res.objective + ce_weight * ce, res.gradient + ce_weight * ce_grad,
                     res.num_logprob, res.den_logprob, ce)


def write_matrix(path, values, binary=False):
    """``T S`` header then rows; 17 significant digits. ``.npy`` when binary."""
    values = np.asarray(values, dtype=np.float64)
    if binary:
        np.save(path, values)
        return
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{values.shape[0]} {values.shape[1]}\n")
        for row in values:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_matrix(path):
    path = str(path)
    if path.endswith(".npy"):
        return np.load(path)
    with open(path, encoding="utf-8") as f:
        T, S = (int(x) for x in f.readline().split())
        data = np.loadtxt(f, dtype=np.float64, ndmin=2)
    if T == 0:
        return np.zeros((0, S))
    if data.shape != (T, S):
        raise ShapeError(f"{path}: header says {T}x{S}, found {data.shape}")
    return data
