"""Toy acoustic model with spatial smoothing and speaker conditioning.

A small feed-forward (optionally simple-recurrent) network maps feature
frames to per-senone log posteriors, which serve as the log-likelihood
matrix for both cross-entropy and lattice-free MMI training. All gradients
are written out by hand in numpy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from . import seqtrain
from .errors import EmptyInput, InvalidConfig, ShapeError, TrainingDiverged

KERNEL = np.array([[-1 / 8, -1 / 8, -1 / 8],
                   [-1 / 8, 1.0, -1 / 8],
                   [-1 / 8, -1 / 8, -1 / 8]])

CHECKPOINT_FORMAT = "convasr-am"
CHECKPOINT_VERSION = 1


def image_shape(width):
    """Most square ``rows x cols`` factorization with ``cols >= rows``."""
    rows = int(math.isqrt(width))
    while width % rows:
        rows -= 1
    return rows, width // rows


@dataclass(frozen=True)
class SpatialFilter:
    rows: int
    cols: int
    weight: float = 0.1
    kernel: np.ndarray = field(default_factory=lambda: KERNEL.copy())

    @classmethod
    def for_width(cls, width, weight=0.1):
        return cls(*image_shape(width), weight)


def _high_pass(img, kernel):
    """Circular 3x3 convolution over the last two axes."""
    if np.array_equal(kernel, KERNEL):
        # pairwise neighbour sum: exact on constant images, so DC maps to 0.0
        r = [np.roll(img, (di, dj), axis=(-2, -1))
             for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]
        nsum = ((r[0] + r[1]) + (r[2] + r[3])) + ((r[4] + r[5]) + (r[6] + r[7]))
        return img - nsum / 8.0
    out = np.zeros_like(img)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            out += kernel[di + 1, dj + 1] * np.roll(img, (di, dj), axis=(-2, -1))
    return out


def spatial_penalty(activations, filt):
    """Energy of the high-pass filtered activation image and its gradient.

    ``activations`` may be a single vector or a ``(frames, width)`` matrix;
    for a matrix the value is summed over frames.
    """
    a = np.asarray(activations, dtype=np.float64)
    if a.shape[-1] != filt.rows * filt.cols:
        raise ShapeError(f"{a.shape[-1]} activations cannot form a {filt.rows}x{filt.cols} image")
    img = a.reshape(a.shape[:-1] + (filt.rows, filt.cols))
    hp = _high_pass(img, filt.kernel)
    value = filt.weight * float(np.sum(hp * hp))
    # adjoint of circular convolution is correlation with the flipped kernel
    grad = 2.0 * filt.weight * _high_pass(hp, filt.kernel[::-1, ::-1])
    return value, grad.reshape(a.shape)


def neighbor_correlation(acts, shape=None):
    """Mean absolute Pearson correlation of horizontally and vertically
    adjacent neurons (circular), measured across frames."""
    acts = np.asarray(acts, dtype=np.float64)
    rows, cols = shape or image_shape(acts.shape[1])
    z = acts - acts.mean(axis=0)
    sd = np.sqrt((z * z).mean(axis=0))
    live = sd > 1e-12
    img_z = z.reshape(-1, rows, cols)
    img_sd = sd.reshape(rows, cols)
    img_live = live.reshape(rows, cols)
    vals = []
    for axis in (1, 2):
        nz = np.roll(img_z, -1, axis=axis)
        nsd = np.roll(img_sd, -1, axis=axis - 1)
        nlive = np.roll(img_live, -1, axis=axis - 1)
        ok = img_live & nlive
        cov = (img_z * nz).mean(axis=0)
        c = cov[ok] / (img_sd[ok] * nsd[ok])
        vals.append(np.abs(c))
    vals = np.concatenate(vals)
    return float(vals.mean()) if vals.size else 0.0


@dataclass(frozen=True)
class SpeakerVector:
    v: np.ndarray
    side_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64))


def _act(name, z):
    if name == "sigmoid":
        return expit(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise InvalidConfig(f"unknown nonlinearity {name!r}")


def _act_grad(name, z, a):
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return 1.0 - a * a


@dataclass
class ToyAcousticModel:
    """Parameters live in ``params``: ``W{l}``, ``b{l}`` per layer (the last
    layer is the senone output), ``U{l}`` for recurrent hidden layers and
    ``V{l}`` for the per-layer speaker matrices."""

    input_dim: int
    hidden: tuple
    num_senones: int
    nonlinearity: str = "sigmoid"
    recurrent: bool = False
    speaker_mode: str | None = None  # None | "append" | "layer-bias"
    speaker_dim: int = 100
    params: dict = field(default_factory=dict)

    @property
    def num_hidden(self):
        return len(self.hidden)

    def copy(self):
        return ToyAcousticModel(self.input_dim, tuple(self.hidden), self.num_senones,
                                self.nonlinearity, self.recurrent, self.speaker_mode,
                                self.speaker_dim, {k: v.copy() for k, v in self.params.items()})

    def to_json(self):
        cfg = {
            "input_dim": self.input_dim, "hidden": list(self.hidden),
            "num_senones": self.num_senones, "nonlinearity": self.nonlinearity,
            "recurrent": self.recurrent, "speaker_mode": self.speaker_mode,
            "speaker_dim": self.speaker_dim,
        }
        params = {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                  for k, v in sorted(self.params.items())}
        return json.dumps({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                           "config": cfg, "params": params}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
            raise InvalidConfig("not a version-1 acoustic model checkpoint")
        cfg = obj["config"]
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in obj["params"].items()}
        return cls(cfg["input_dim"], tuple(cfg["hidden"]), cfg["num_senones"],
                   cfg["nonlinearity"], cfg["recurrent"], cfg["speaker_mode"],
                   cfg["speaker_dim"], params)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())


def init_toy_am(input_dim, num_senones, hidden=(64, 64), nonlinearity="sigmoid",
                recurrent=False, speaker_mode=None, speaker_dim=100, seed=0):
    if speaker_mode not in (None, "append", "layer-bias"):
        raise InvalidConfig(f"unknown speaker mode {speaker_mode!r}")
    rng = np.random.default_rng(seed)
    params = {}
    d_in = input_dim + (speaker_dim if speaker_mode == "append" else 0)
    dims = [d_in] + list(hidden) + [num_senones]
    for l in range(len(dims) - 1):
        scale = 1.0 / math.sqrt(dims[l])
        params[f"W{l}"] = rng.normal(0, scale, size=(dims[l], dims[l + 1]))
        params[f"b{l}"] = np.zeros(dims[l + 1])
        if l < len(hidden):
            if recurrent:
                params[f"U{l}"] = rng.normal(0, 0.5 / math.sqrt(dims[l + 1]),
                                             size=(dims[l + 1], dims[l + 1]))
            if speaker_mode == "layer-bias":
                params[f"V{l}"] = rng.normal(0, 0.1 / math.sqrt(speaker_dim),
                                             size=(speaker_dim, dims[l + 1]))
    return ToyAcousticModel(input_dim, tuple(hidden), num_senones, nonlinearity,
                            recurrent, speaker_mode, speaker_dim, params)


def _speaker(model, speaker):
    if model.speaker_mode is None:
        return None
    if speaker is None:
        return np.zeros(model.speaker_dim)
    v = speaker.v if isinstance(speaker, SpeakerVector) else np.asarray(speaker, float)
    if v.shape != (model.speaker_dim,):
        raise ShapeError(f"speaker vector has shape {v.shape}, model expects ({model.speaker_dim},)")
    return v


def forward(model, frames, speaker=None):
    """Log posteriors (T x S) and the cache needed by :func:`backward`."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"frames have shape {x.shape}, model expects (T, {model.input_dim})")
    v = _speaker(model, speaker)
    if model.speaker_mode == "append":
        x = np.hstack([x, np.tile(v, (x.shape[0], 1))])
    p = model.params
    acts, pres = [x], []
    a = x
    for l in range(model.num_hidden):
        z = a @ p[f"W{l}"] + p[f"b{l}"]
        if model.speaker_mode == "layer-bias":
            z = z + v @ p[f"V{l}"]
        if model.recurrent:
            h = np.zeros(z.shape[1])
            zs = np.empty_like(z)
            hs = np.empty_like(z)
            U = p[f"U{l}"]
            for t in range(z.shape[0]):
                zs[t] = z[t] + h @ U
                h = _act(model.nonlinearity, zs[t])
                hs[t] = h
            z, a = zs, hs
        else:
            a = _act(model.nonlinearity, z)
        pres.append(z)
        acts.append(a)
    L = model.num_hidden
    logits = a @ p[f"W{L}"] + p[f"b{L}"]
    return log_softmax(logits, axis=1), {"acts": acts, "pres": pres, "logits": logits, "v": v}


def loglikes(model, frames, speaker=None, utt_id=""):
    return seqtrain.LogLikeMatrix(utt_id, forward(model, frames, speaker)[0])


def backward(model, cache, d_logits, d_hidden=None):
    """Parameter gradients given d loss / d logits.

    ``d_hidden`` optionally adds extra loss gradients on each hidden
    activation matrix (used by the spatial penalty).
    """
    p = model.params
    acts, pres = cache["acts"], cache["pres"]
    L = model.num_hidden
    grads = {}
    grads[f"W{L}"] = acts[L].T @ d_logits
    grads[f"b{L}"] = d_logits.sum(axis=0)
    da = d_logits @ p[f"W{L}"].T
    for l in range(L - 1, -1, -1):
        if d_hidden is not None and d_hidden[l] is not None:
            da = da + d_hidden[l]
        a, z = acts[l + 1], pres[l]
        if model.recurrent:
            U = p[f"U{l}"]
            dz = np.zeros_like(z)
            carry = np.zeros(z.shape[1])
            for t in range(z.shape[0] - 1, -1, -1):
                dz[t] = (da[t] + carry) * _act_grad(model.nonlinearity, z[t], a[t])
                carry = dz[t] @ U.T
            grads[f"U{l}"] = a[:-1].T @ dz[1:] if z.shape[0] > 1 else np.zeros_like(U)
        else:
            dz = da * _act_grad(model.nonlinearity, z, a)
        grads[f"W{l}"] = acts[l].T @ dz
        grads[f"b{l}"] = dz.sum(axis=0)
        if model.speaker_mode == "layer-bias":
            grads[f"V{l}"] = np.outer(cache["v"], dz.sum(axis=0))
        da = dz @ p[f"W{l}"].T
    return grads


def _penalty_layers(model, layers):
    if layers is None:
        return list(range(model.num_hidden))
    return list(layers)


def utterance_loss(model, utt, objective="ce", smoothing=None, graph=None, ce_weight=0.1,
                   penalty_layers=None):
    """Per-frame loss to minimize for one utterance, and its gradients.

    ``utt`` is any object with ``features``, ``senones`` (column indices)
    and optionally ``speaker``. Returns ``(loss, base_loss, grads)``.
    """
    logp, cache = forward(model, utt.features, getattr(utt, "speaker", None))
    T = logp.shape[0]
    frames = np.asarray(utt.senones)
    if objective == "ce":
        base = -float(logp[np.arange(T), frames].sum()) / T
        d_logits = softmax(cache["logits"], axis=1)
        d_logits[np.arange(T), frames] -= 1.0
        d_logits /= T
    elif objective == "lfmmi":
        if graph is None:
            raise InvalidConfig("LFMMI training needs a denominator graph")
        num = seqtrain.NumeratorSupervision(frames)
        res = seqtrain.mmi_objective_with_ce(graph, logp, num, ce_weight)
        base = -res.objective / T
        g = -res.gradient / T
        # back through log-softmax
        d_logits = g - softmax(cache["logits"], axis=1) * g.sum(axis=1, keepdims=True)
    else:
        raise InvalidConfig(f"unknown objective {objective!r}")
    loss = base
    d_hidden = None
    if smoothing is not None:
        d_hidden = [None] * model.num_hidden
        for l in _penalty_layers(model, penalty_layers):
            a = cache["acts"][l + 1]
            filt = smoothing if smoothing.rows * smoothing.cols == a.shape[1] \
                else SpatialFilter.for_width(a.shape[1], smoothing.weight)
            val, g = spatial_penalty(a, filt)
            loss += val / T
            d_hidden[l] = g / T
    return loss, base, backward(model, cache, d_logits, d_hidden)


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 10
    batch_utterances: int = 8
    momentum: float = 0.9
    ce_weight: float = 0.1
    penalty_layers: tuple | None = None
    seed: int = 0


def train_toy_am(model, data, objective="ce", smoothing=None, config=None, graph=None):
    """Minibatch SGD with momentum. Returns ``(trained_model, loss_trace)``.

    ``loss_trace[0]`` is the mean total loss before training and each later
    entry the mean total loss after an epoch (base loss plus smoothing
    penalty, per frame).
    """
    cfg = config or TrainConfig()
    data = list(data)
    if not data:
        raise EmptyInput("no training utterances")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}

    def mean_loss():
        tot = 0.0
        for u in data:
            tot += utterance_loss(model, u, objective, smoothing, graph, cfg.ce_weight,
                                  cfg.penalty_layers)[0]
        return tot / len(data)

    trace = [mean_loss()]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for i in range(0, len(order), cfg.batch_utterances):
            batch = [data[j] for j in order[i:i + cfg.batch_utterances]]
            acc = {k: np.zeros_like(v) for k, v in model.params.items()}
            for u in batch:
                loss, _, grads = utterance_loss(model, u, objective, smoothing, graph,
                                                cfg.ce_weight, cfg.penalty_layers)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss {loss}")
                for k, g in grads.items():
                    acc[k] += g
            for k in model.params:
                vel[k] = cfg.momentum * vel[k] - cfg.learning_rate * acc[k] / len(batch)
                model.params[k] += vel[k]
        trace.append(mean_loss())
        if not np.isfinite(trace[-1]):
            raise TrainingDiverged(f"non-finite loss after epoch {len(trace) - 1}")
    return model, trace


def hidden_activations(model, data, layer=None):
    """Stacked post-nonlinearity activations of one hidden layer."""
    layer = model.num_hidden - 1 if layer is None else layer
    out = [forward(model, u.features, getattr(u, "speaker", None))[1]["acts"][layer + 1]
           for u in data]
    return np.vstack(out)


def mean_lfmmi_objective(model, data, graph):
    tot = 0.0
    for u in data:
        ll, _ = forward(model, u.features, getattr(u, "speaker", None))
        tot += seqtrain.mmi_objective(graph, ll, seqtrain.NumeratorSupervision(u.senones)).objective
    return tot / len(data)
