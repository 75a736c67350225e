"""Simulated data-parallel SGD with 1-bit gradients and error feedback.

Workers hold identical model replicas and disjoint data shards. Each round
every worker computes a summed sub-gradient on its slice of the global
minibatch, adds its carried-over residual, sends the sign bits plus two
reconstruction values per column, and keeps the quantization error for
the next round. The aggregator sums the dequantized sub-gradients in a
fixed worker order, takes one SGD step and broadcasts the result.

Quantized gradients live on a fixed-point lattice of spacing ``2**-32``
so that every residual update and every running sum is exact in double
precision; the conservation identity holds bit for bit.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, InvalidConfig, NumericalOverflow, SyncError

LATTICE = 2.0 ** -32
_LIMIT = 2.0 ** 20   # beyond this, lattice sums stop being exact


def snap(x):
    """Round to the fixed-point lattice."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericalOverflow("non-finite gradient")
    if x.size and np.max(np.abs(x)) >= _LIMIT:
        raise NumericalOverflow("gradient too large for exact fixed-point accumulation")
    return np.round(x / LATTICE) * LATTICE


def _columns(x):
    """View as (rows, columns): matrices keep their columns, anything else is one column."""
    return x.reshape(x.shape[0], -1) if x.ndim >= 2 else x.reshape(-1, 1)


@dataclass
class QuantizedGradient:
    bits: np.ndarray        # packed sign bits, 1 = non-negative
    pos_scale: np.ndarray   # one per column
    neg_scale: np.ndarray
    shape: tuple
    per_column: bool = True

    @property
    def size(self):
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def signs(self):
        return np.unpackbits(self.bits, count=self.size).astype(bool).reshape(self.shape)

    def dequantize(self):
        pos = self.signs
        cols = _columns(pos)
        if self.per_column:
            out = np.where(cols, self.pos_scale[None, :], self.neg_scale[None, :])
        else:
            out = np.where(cols, self.pos_scale[0], self.neg_scale[0])
        return out.reshape(self.shape)

    @property
    def nbytes(self):
        return int(self.bits.nbytes + self.pos_scale.nbytes + self.neg_scale.nbytes)


def quantize_1bit(x, per_column=True):
    """Sign bits with the mean of the positive and of the negative entries per column.

    Zero entries count as non-negative. Input is snapped to the lattice
    first, so ``dequantize() + residual == input`` holds exactly.
    Returns ``(QuantizedGradient, residual)``.
    """
    x = snap(x)
    shape = x.shape
    cols = _columns(x)
    pos = cols >= 0
    if per_column:
        npos = pos.sum(axis=0)
        nneg = cols.shape[0] - npos
        psum = np.where(pos, cols, 0.0).sum(axis=0)
        nsum = np.where(pos, 0.0, cols).sum(axis=0)
        ps = snap(np.divide(psum, npos, out=np.zeros_like(psum), where=npos > 0))
        ns = snap(np.divide(nsum, nneg, out=np.zeros_like(nsum), where=nneg > 0))
    else:
        ps = snap([x[x >= 0].mean() if np.any(x >= 0) else 0.0])
        ns = snap([x[x < 0].mean() if np.any(x < 0) else 0.0])
    q = QuantizedGradient(np.packbits(pos.reshape(-1)), ps, ns, shape, per_column)
    return q, x - q.dequantize()


def compression_ratio(shape, per_column=True, raw_bits=64):
    """Raw size over quantized size (sign bits plus two scales per column)."""
    q, _ = quantize_1bit(np.zeros(shape), per_column)
    return (int(np.prod(shape)) * raw_bits / 8) / q.nbytes


# ---- problems --------------------------------------------------------------

class SoftmaxRegression:
    """Multiclass logistic regression; gradients are sums over the batch."""

    def __init__(self, dim, n_classes):
        self.dim, self.n_classes = dim, n_classes

    def init_params(self, rng):
        return {"W": rng.normal(0, 0.01, (self.dim, self.n_classes)),
                "b": np.zeros(self.n_classes)}

    def _probs(self, p, X):
        z = X @ p["W"] + p["b"]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def loss(self, p, X, y):
        P = self._probs(p, X)
        return float(-np.mean(np.log(P[np.arange(len(y)), y] + 1e-300)))

    def grad(self, p, X, y):
        P = self._probs(p, X)
        P[np.arange(len(y)), y] -= 1.0
        return {"W": X.T @ P, "b": P.sum(axis=0)}


class QuadraticBowl:
    """Per-sample loss ``0.5 * h * ||w - x_i||^2``."""

    def __init__(self, dim, curvature=1.0):
        self.dim, self.h = dim, curvature

    def init_params(self, rng):
        return {"w": rng.normal(0, 1.0, self.dim)}

    def loss(self, p, X, y=None):
        return float(0.5 * self.h * np.mean(np.sum((p["w"][None, :] - X) ** 2, axis=1)))

    def grad(self, p, X, y=None):
        return {"w": self.h * (p["w"][None, :] - X).sum(axis=0)}


def toy_classification(n=2000, dim=20, n_classes=4, seed=0, noise=1.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 1.0, (n_classes, dim))
    y = rng.integers(n_classes, size=n)
    X = centers[y] + rng.normal(0, noise, (n, dim))
    return X, y


# ---- workers and aggregation ---------------------------------------------

@dataclass
class SGD:
    """Plain SGD; ``lr`` multiplies the summed (not averaged) gradient."""

    lr: float

    def step(self, params, grad):
        return {k: params[k] - self.lr * grad[k] for k in params}


@dataclass
class WorkerState:
    worker_id: int
    params: dict
    residual: dict
    shard: tuple                 # (X, y)
    cursor: int = 0
    pending: dict = None         # name -> QuantizedGradient or raw array
    sent_bytes: int = 0

    def next_batch(self, size):
        X, y = self.shard
        n = len(X)
        idx = (self.cursor + np.arange(size)) % n
        self.cursor = (self.cursor + size) % n
        return X[idx], (None if y is None else y[idx])


def compute_subgradient(worker, problem, batch, quantize=True, per_column=True):
    """Worker-side half of a round: gradient, error feedback, quantization."""
    g = problem.grad(worker.params, *batch)
    out, nbytes = {}, 0
    for k in sorted(g):
        if quantize:
            q, worker.residual[k] = quantize_1bit(snap(g[k]) + worker.residual[k], per_column)
            out[k] = q
            nbytes += q.nbytes
        else:
            out[k] = np.asarray(g[k], dtype=float)
            nbytes += out[k].nbytes
    worker.pending = out
    worker.sent_bytes += nbytes
    return g


def _payload(v):
    return v.dequantize() if isinstance(v, QuantizedGradient) else v


def aggregate_and_step(workers, optimizer):
    """Sum dequantized sub-gradients in worker order, step, broadcast.

    Raises SyncError when replicas disagree or a worker has not sent.
    """
    if not workers:
        raise EmptyInput("no workers")
    ref = workers[0].params
    for w in workers:
        if w.pending is None:
            raise SyncError(f"worker {w.worker_id} has no sub-gradient this round")
        if set(w.params) != set(ref) or any(not np.array_equal(w.params[k], ref[k]) for k in ref):
            raise SyncError(f"replica of worker {w.worker_id} diverged")
    total = {}
    for w in workers:
        for k, v in w.pending.items():
            d = _payload(v)
            total[k] = d.copy() if k not in total else total[k] + d
        w.pending = None
    new = optimizer.step(ref, total)
    for w in workers:
        w.params = {k: v.copy() for k, v in new.items()}
    return new, total


@dataclass
class ParallelConfig:
    n_workers: int = 4
    minibatch: int = 64          # global, split evenly across workers
    lr: float = 0.01
    quantize: bool = True
    per_column: bool = True
    seed: int = 0
    jobs: int = 1
    scale_every: int = 0         # rounds between minibatch scaling attempts (0 = never)
    candidate_sizes: tuple = ()
    probe_size: int = 256
    probe_steps: int = 5
    tol: float = 0.02

    def __post_init__(self):
        if self.n_workers < 1 or self.minibatch < self.n_workers:
            raise InvalidConfig("minibatch must give every worker at least one sample")
        if self.lr <= 0:
            raise InvalidConfig("learning rate must be positive")


@dataclass
class RunReport:
    losses: list = field(default_factory=list)
    bytes_sent: list = field(default_factory=list)
    raw_bytes: list = field(default_factory=list)
    minibatch_sizes: list = field(default_factory=list)
    residual_ratio: list = field(default_factory=list)

    @property
    def compression_ratio(self):
        sent = sum(self.bytes_sent)
        return sum(self.raw_bytes) / sent if sent else 1.0

    def to_json(self):
        return json.dumps({"per_round_loss": self.losses, "bytes_transmitted": self.bytes_sent,
                           "compression_ratio": self.compression_ratio,
                           "minibatch_sizes": self.minibatch_sizes,
                           "residual_ratio": self.residual_ratio}, indent=2, sort_keys=True)


class ParallelTrainer:
    def __init__(self, problem, X, y, config=ParallelConfig()):
        if len(X) == 0:
            raise EmptyInput("no training data")
        self.problem, self.X, self.y, self.config = problem, X, y, config
        rng = np.random.default_rng(config.seed)
        params = problem.init_params(rng)
        order = rng.permutation(len(X))
        self.workers = []
        for k in range(config.n_workers):
            idx = order[k::config.n_workers]
            shard = (X[idx], None if y is None else y[idx])
            self.workers.append(WorkerState(k, {n: v.copy() for n, v in params.items()},
                                            {n: np.zeros_like(v) for n, v in params.items()},
                                            shard))
        self.minibatch = config.minibatch
        self.optimizer = SGD(config.lr)
        self.report = RunReport()
        self.rounds = 0
        self.transmitted = None   # running sum of dequantized payloads
        self.true_sum = None      # running sum of lattice-snapped sub-gradients

    @property
    def params(self):
        return self.workers[0].params

    def loss(self, X=None, y=None):
        X = self.X if X is None else X
        y = self.y if X is self.X else y
        return self.problem.loss(self.params, X, y)

    def snapshot(self):
        return [(w.params, {k: v.copy() for k, v in w.residual.items()}, w.cursor)
                for w in self.workers], self.minibatch

    def restore(self, snap_):
        states, mb = snap_
        for w, (p, r, c) in zip(self.workers, states):
            w.params = {k: v.copy() for k, v in p.items()}
            w.residual = {k: v.copy() for k, v in r.items()}
            w.cursor = c
            w.pending = None
        self.minibatch = mb

    def _shares(self, size):
        K = len(self.workers)
        base, extra = divmod(size, K)
        return [base + (k < extra) for k in range(K)]

    def step(self, size=None, batches=None, track=True):
        """One synchronous round; returns the per-worker batches used."""
        cfg = self.config
        size = self.minibatch if size is None else size
        if batches is None:
            batches = [w.next_batch(s) for w, s in zip(self.workers, self._shares(size))]
        sent_before = [w.sent_bytes for w in self.workers]

        def work(k):
            return compute_subgradient(self.workers[k], self.problem, batches[k],
                                       cfg.quantize, cfg.per_column)

        if cfg.jobs > 1:
            with ThreadPoolExecutor(cfg.jobs) as ex:
                grads = list(ex.map(work, range(len(self.workers))))
        else:
            grads = [work(k) for k in range(len(self.workers))]
        payload = [{k: _payload(v) for k, v in w.pending.items()} for w in self.workers]
        _, total = aggregate_and_step(self.workers, self.optimizer)
        if track:
            raw = sum(g[k].size * 8 for g in grads for k in g)
            self.report.raw_bytes.append(int(raw))
            self.report.bytes_sent.append(int(sum(w.sent_bytes - b for w, b in
                                                  zip(self.workers, sent_before))))
            if cfg.quantize:
                self._conserve(grads, payload)
                gmax = max(float(np.max(np.abs(g[k]))) for g in grads for k in g)
                rmax = max(float(np.max(np.abs(w.residual[k]))) for w in self.workers
                           for k in w.residual)
                self.report.residual_ratio.append(rmax / gmax if gmax > 0 else 0.0)
        return batches

    def _conserve(self, grads, payload):
        if self.true_sum is None:
            self.true_sum = {k: np.zeros_like(v) for k, v in grads[0].items()}
            self.transmitted = {k: np.zeros_like(v) for k, v in grads[0].items()}
        for g, p in zip(grads, payload):
            for k in g:
                self.true_sum[k] += snap(g[k])
                self.transmitted[k] += p[k]

    def conservation_gap(self):
        """Max |sum transmitted + residuals - sum of true sub-gradients| (0 when exact)."""
        if self.true_sum is None:
            return 0.0
        gap = 0.0
        for k in self.true_sum:
            res = sum((w.residual[k] for w in self.workers), np.zeros_like(self.true_sum[k]))
            gap = max(gap, float(np.max(np.abs(self.transmitted[k] + res - self.true_sum[k]))))
        return gap

    def probe(self, size, X, y, steps):
        """Loss on the probe subset after ``steps`` rounds at ``size``."""
        K = len(self.workers)
        n = len(X)
        for t in range(steps):
            idx = (t * size + np.arange(size)) % n
            shares = self._shares(size)
            starts = np.cumsum([0] + shares[:-1])
            batches = [(X[idx[s:s + m]], None if y is None else y[idx[s:s + m]])
                       for s, m in zip(starts, shares)]
            assert len(batches) == K
            self.step(size, batches, track=False)
        return self.problem.loss(self.params, X, y)

    def run(self, rounds):
        cfg = self.config
        for _ in range(rounds):
            if cfg.scale_every and self.rounds and self.rounds % cfg.scale_every == 0 \
                    and cfg.candidate_sizes:
                rng = np.random.default_rng([cfg.seed, self.rounds])
                idx = rng.choice(len(self.X), size=min(cfg.probe_size, len(self.X)),
                                 replace=False)
                probe = (self.X[idx], None if self.y is None else self.y[idx])
                self.minibatch = auto_minibatch_scale(self, cfg.candidate_sizes, probe,
                                                      cfg.tol, cfg.probe_steps)
            self.step()
            self.rounds += 1
            self.report.losses.append(self.loss())
            self.report.minibatch_sizes.append(self.minibatch)
        return self.report


def auto_minibatch_scale(trainer, candidate_sizes, probe_subset, tol=0.02, steps=5):
    """Largest candidate whose short probe keeps the loss within ``tol`` of the current size.

    Every probe starts from the same snapshot, and the snapshot is restored
    afterwards, so the real run continues exactly where it left off.
    """
    sizes = [int(s) for s in candidate_sizes]
    if not sizes:
        raise InvalidConfig("no candidate minibatch sizes")
    if sizes != sorted(sizes):
        raise InvalidConfig("candidate sizes must be ascending")
    X, y = probe_subset
    if len(X) == 0:
        raise EmptyInput("empty probe subset")
    current = trainer.minibatch
    snap_ = trainer.snapshot()

    def probe(size):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = trainer.probe(size, X, y, steps)
        except (NumericalOverflow, FloatingPointError):
            loss = np.inf
        trainer.restore(snap_)
        return loss if np.isfinite(loss) else np.inf

    try:
        base = probe(current)
        ok = [s for s in sizes if probe(s) <= base * (1.0 + tol)]
    finally:
        trainer.restore(snap_)
    return max(ok) if ok else current
