"""Toy recurrent language model trained with full-softmax BPTT.

Each hidden layer output is multiplied by a learned self-stabilizer scale;
the recurrence itself runs on the unscaled state. Inputs are one-hot word
codes or letter-trigram count vectors, both mapped through a shared
embedding matrix, which the output layer can reuse (tied embeddings).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit, log_softmax

from ..errors import EmptyInput, InvalidConfig, TrainingDiverged
from .base import BOS, EOS, UNK, LanguageModelScorer, stabilizer_grad, stabilizer_scale
from .encoder import LetterTrigramEncoder

# beta giving a stabilizer scale of exactly one
BETA_UNIT = math.log(math.expm1(4.0)) / 4.0


@dataclass(frozen=True)
class RnnLMConfig:
    direction: str = "forward"
    encoding: str = "one-hot"          # or "letter-trigram"
    embed_dim: int = 24
    hidden: tuple = (24,)
    cell: str = "tanh"                 # or "gated"
    second_layer: int | None = None    # width of an extra non-recurrent ReLU layer
    tied: bool = False
    stabilize: bool = True
    min_count: int = 2
    phase1_passes: int = 4
    max_epochs: int = 12
    learning_rate: float = 1.0
    lr_decay: float = 0.5
    min_improvement: float = 0.003
    max_decays: int = 3
    batch_size: int = 16
    clip: float = 5.0
    init_scale: float = 0.1
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.direction not in ("forward", "backward"):
            raise InvalidConfig(f"direction must be forward or backward, got {self.direction!r}")
        if self.encoding not in ("one-hot", "letter-trigram"):
            raise InvalidConfig(f"unknown encoding {self.encoding!r}")
        if self.cell not in ("tanh", "gated"):
            raise InvalidConfig(f"unknown cell {self.cell!r}")
        if not self.hidden:
            raise InvalidConfig("need at least one recurrent layer")
        top = self.second_layer or self.hidden[-1]
        if self.tied and top != self.embed_dim:
            raise InvalidConfig("tied embeddings need the top hidden width to equal embed_dim")


def build_vocab(sentences, min_count=2):
    """Words seen at least ``min_count`` times, sorted, then ``</s>`` and ``<unk>``."""
    c = Counter(w for s in sentences for w in s)
    words = sorted(w for w, n in c.items() if n >= min_count and w not in (BOS, EOS, UNK))
    return tuple(words) + (EOS, UNK)


class ToyRecurrentLM(LanguageModelScorer):
    """Recurrent LM over ``vocab``; input tokens are ``<s>`` followed by ``vocab``."""

    def __init__(self, config, vocab, params, encoder=None):
        self.config = config
        self.direction = config.direction
        self.vocab = tuple(vocab)
        self.params = params
        self.encoder = encoder
        self.inputs = (BOS,) + self.vocab
        self.codes = _input_codes(self.inputs, config.encoding, encoder)
        self._in_index = {w: i for i, w in enumerate(self.inputs)}
        self._state_cache = {}

    # ---- scoring ---------------------------------------------------------
    def input_ids(self, tokens):
        unk = self._in_index[UNK]
        return np.array([self._in_index.get(t, unk) for t in tokens], dtype=np.int64)

    def _prefix(self, history):
        """(hidden states, output log-probs) after reading ``history``."""
        history = tuple(history)
        hit = self._state_cache.get(history)
        if hit is not None:
            return hit
        if len(history) > 1:
            states, _ = self._prefix(history[:-1])
        else:
            states = None
        logp, _, new_states = forward(self.params, self.config, self.codes,
                                      self.input_ids(history[-1:])[None, :], states)
        out = (new_states, logp[0, -1])
        if len(self._state_cache) > 200_000:
            self._state_cache.clear()
        self._state_cache[history] = out
        return out

    def distribution(self, history):
        history = tuple(history) or (BOS,)
        return np.exp(self._prefix(history)[1])

    def logprob(self, history, word):
        history = tuple(history) or (BOS,)
        return float(self._prefix(history)[1][self.index(word)])

    def batch_logprobs(self, sentences):
        """Per-sentence total log-probability (``</s>`` included) in one batched pass."""
        inp, tgt, mask = self.encode_batch(sentences)
        if inp.size == 0:
            return np.zeros(0)
        logp, _, _ = forward(self.params, self.config, self.codes, inp)
        picked = np.take_along_axis(logp, tgt[..., None], axis=2)[..., 0]
        return (picked * mask).sum(axis=1)

    def batch_token_logprobs(self, sentences, batch_size=256):
        """Per-token log-probabilities (``</s>`` last) for each sentence."""
        out = []
        for i in range(0, len(sentences), batch_size):
            chunk = sentences[i:i + batch_size]
            inp, tgt, mask = self.encode_batch(chunk)
            logp, _, _ = forward(self.params, self.config, self.codes, inp)
            picked = np.take_along_axis(logp, tgt[..., None], axis=2)[..., 0]
            out.extend(picked[b, :int(mask[b].sum())] for b in range(len(chunk)))
        return out

    def encode_batch(self, sentences):
        """Padded (inputs, targets, mask) for sentences given in reading order."""
        seqs = [self.map_unk(self.ordered(s)) for s in sentences]
        if not seqs:
            return np.zeros((0, 0), np.int64), np.zeros((0, 0), np.int64), np.zeros((0, 0))
        L = max(len(s) for s in seqs) + 1
        B = len(seqs)
        inp = np.zeros((B, L), np.int64)
        tgt = np.zeros((B, L), np.int64)
        mask = np.zeros((B, L))
        for b, s in enumerate(seqs):
            toks_in = [BOS] + s
            toks_out = s + [EOS]
            inp[b, :len(toks_in)] = self.input_ids(toks_in)
            tgt[b, :len(toks_out)] = [self.index(w) for w in toks_out]
            mask[b, :len(toks_out)] = 1.0
        return inp, tgt, mask

    def corpus_perplexity(self, sentences, batch_size=64):
        total, n = 0.0, 0
        for i in range(0, len(sentences), batch_size):
            chunk = sentences[i:i + batch_size]
            total += float(self.batch_logprobs(chunk).sum())
            n += sum(len(s) + 1 for s in chunk)
        if n == 0:
            raise EmptyInput("no text to evaluate")
        return math.exp(-total / n)

    # ---- persistence -----------------------------------------------------
    def to_json(self):
        return json.dumps({
            "format": "convasr-rnnlm", "version": 1,
            "config": asdict(self.config),
            "vocab": list(self.vocab),
            "encoder": None if self.encoder is None else self.encoder.to_dict(),
            "params": {k: np.asarray(v).tolist() for k, v in self.params.items()},
            "shapes": {k: list(np.shape(v)) for k, v in self.params.items()},
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("format") != "convasr-rnnlm":
            raise InvalidConfig("not a recurrent LM checkpoint")
        cfg = d["config"]
        cfg["hidden"] = tuple(cfg["hidden"])
        config = RnnLMConfig(**cfg)
        params = {k: np.array(v, dtype=np.float64).reshape(d["shapes"][k])
                  for k, v in d["params"].items()}
        enc = None if d["encoder"] is None else LetterTrigramEncoder.from_dict(d["encoder"])
        return cls(config, d["vocab"], params, enc)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())

    def copy(self):
        return ToyRecurrentLM(self.config, self.vocab,
                              {k: np.array(v, copy=True) for k, v in self.params.items()},
                              self.encoder)


def _input_codes(inputs, encoding, encoder):
    if encoding == "one-hot":
        return np.eye(len(inputs))
    if encoder is None:
        raise InvalidConfig("letter-trigram input needs an encoder")
    return encoder.matrix(inputs)


def init_recurrent_lm(config, vocab, seed=None):
    vocab = tuple(vocab)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    encoder = None
    if config.encoding == "letter-trigram":
        encoder = LetterTrigramEncoder.fit(vocab, specials=(BOS, EOS, UNK))
    inputs = (BOS,) + vocab
    d_in = _input_codes(inputs, config.encoding, encoder).shape[1]
    s = config.init_scale
    p = {"E": rng.uniform(-s, s, (d_in, config.embed_dim))}
    width = config.embed_dim
    for l, h in enumerate(config.hidden):
        p[f"W{l}"] = rng.uniform(-s, s, (width, h))
        p[f"U{l}"] = rng.uniform(-s, s, (h, h))
        p[f"b{l}"] = np.zeros(h)
        if config.cell == "gated":
            p[f"Wz{l}"] = rng.uniform(-s, s, (width, h))
            p[f"Uz{l}"] = rng.uniform(-s, s, (h, h))
            p[f"bz{l}"] = np.zeros(h)
        if config.stabilize:
            p[f"beta{l}"] = np.array(BETA_UNIT)
        width = h
    if config.second_layer:
        p["Wr"] = rng.uniform(-s, s, (width, config.second_layer))
        p["br"] = np.zeros(config.second_layer)
        if config.stabilize:
            p["betar"] = np.array(BETA_UNIT)
        width = config.second_layer
    if not config.tied:
        p["Wout"] = rng.uniform(-s, s, (width, len(vocab)))
    p["bout"] = np.zeros(len(vocab))
    return ToyRecurrentLM(config, vocab, p, encoder)


def _scale(p, key):
    return stabilizer_scale(p[key]) if key in p else 1.0


def _out_matrix(p, config, codes):
    if config.tied:
        return (codes[1:] @ p["E"]).T
    return p["Wout"]


def forward(p, config, codes, inp, states=None):
    """Log-probabilities (B x L x V), a cache for :func:`backward`, final states."""
    B, L = inp.shape
    X = codes[inp] @ p["E"]
    cache = {"inp": inp, "X": X, "layers": []}
    x = X
    finals = []
    for l, H in enumerate(config.hidden):
        h_prev = np.zeros((B, H)) if states is None else states[l]
        hs = np.empty((B, L, H))
        zs = np.empty((B, L, H)) if config.cell == "gated" else None
        cs = np.empty((B, L, H)) if config.cell == "gated" else None
        pre = x @ p[f"W{l}"] + p[f"b{l}"]
        prez = x @ p[f"Wz{l}"] + p[f"bz{l}"] if config.cell == "gated" else None
        h0 = h_prev
        for t in range(L):
            a = pre[:, t] + h_prev @ p[f"U{l}"]
            if config.cell == "tanh":
                h_prev = np.tanh(a)
            else:
                z = expit(prez[:, t] + h_prev @ p[f"Uz{l}"])
                c = np.tanh(a)
                h_prev = z * h_prev + (1.0 - z) * c
                zs[:, t], cs[:, t] = z, c
            hs[:, t] = h_prev
        finals.append(h_prev)
        sc = _scale(p, f"beta{l}")
        cache["layers"].append({"x": x, "h": hs, "h0": h0, "z": zs, "c": cs, "scale": sc})
        x = sc * hs
    if config.second_layer:
        a = x @ p["Wr"] + p["br"]
        r = np.maximum(a, 0.0)
        sc = _scale(p, "betar")
        cache["relu"] = {"x": x, "a": a, "r": r, "scale": sc}
        x = sc * r
    cache["top"] = x
    Wout = _out_matrix(p, config, codes)
    logits = x @ Wout + p["bout"]
    return log_softmax(logits, axis=2), cache, finals


def loss_and_grads(p, config, codes, inp, tgt, mask):
    """Mean negative log-likelihood per unmasked token and its gradients."""
    logp, cache, _ = forward(p, config, codes, inp)
    n = mask.sum()
    picked = np.take_along_axis(logp, tgt[..., None], axis=2)[..., 0]
    loss = -float((picked * mask).sum() / n)
    d = np.exp(logp)
    np.put_along_axis(d, tgt[..., None], np.take_along_axis(d, tgt[..., None], axis=2) - 1.0, axis=2)
    d *= (mask / n)[..., None]
    return loss, backward(p, config, codes, cache, d)


def backward(p, config, codes, cache, dlogits):
    g = {k: np.zeros_like(v) for k, v in p.items()}
    top = cache["top"]
    V = dlogits.shape[2]
    flat_top = top.reshape(-1, top.shape[2])
    flat_d = dlogits.reshape(-1, V)
    g["bout"] = flat_d.sum(axis=0)
    dWout = flat_top.T @ flat_d
    Wout = _out_matrix(p, config, codes)
    dx = dlogits @ Wout.T
    if config.tied:
        g["E"] += codes[1:].T @ dWout.T
    else:
        g["Wout"] = dWout
    if config.second_layer:
        c = cache["relu"]
        if "betar" in p:
            g["betar"] = np.array(stabilizer_grad(p["betar"]) * np.sum(dx * c["r"]))
        da = dx * c["scale"] * (c["a"] > 0)
        g["Wr"] = c["x"].reshape(-1, c["x"].shape[2]).T @ da.reshape(-1, da.shape[2])
        g["br"] = da.sum(axis=(0, 1))
        dx = da @ p["Wr"].T
    for l in range(len(config.hidden) - 1, -1, -1):
        c = cache["layers"][l]
        hs, x = c["h"], c["x"]
        if f"beta{l}" in p:
            g[f"beta{l}"] = np.array(stabilizer_grad(p[f"beta{l}"]) * np.sum(dx * hs))
        dH = dx * c["scale"]
        B, L, H = hs.shape
        dpre = np.empty_like(hs)
        dprez = np.empty_like(hs) if config.cell == "gated" else None
        dh_next = np.zeros((B, H))
        U = p[f"U{l}"]
        for t in range(L - 1, -1, -1):
            dh = dH[:, t] + dh_next
            hp = hs[:, t - 1] if t > 0 else c["h0"]
            if config.cell == "tanh":
                da = dh * (1.0 - hs[:, t] ** 2)
                dh_next = da @ U.T
                g[f"U{l}"] += hp.T @ da
            else:
                z, cc = c["z"][:, t], c["c"][:, t]
                da = dh * (1.0 - z) * (1.0 - cc ** 2)
                daz = dh * (hp - cc) * z * (1.0 - z)
                dh_next = dh * z + da @ U.T + daz @ p[f"Uz{l}"].T
                g[f"U{l}"] += hp.T @ da
                g[f"Uz{l}"] += hp.T @ daz
                dprez[:, t] = daz
            dpre[:, t] = da
        fx = x.reshape(-1, x.shape[2])
        g[f"W{l}"] = fx.T @ dpre.reshape(-1, H)
        g[f"b{l}"] = dpre.sum(axis=(0, 1))
        dx = dpre @ p[f"W{l}"].T
        if config.cell == "gated":
            g[f"Wz{l}"] = fx.T @ dprez.reshape(-1, H)
            g[f"bz{l}"] = dprez.sum(axis=(0, 1))
            dx = dx + dprez @ p[f"Wz{l}"].T
    inp_codes = codes[cache["inp"]]
    g["E"] += inp_codes.reshape(-1, inp_codes.shape[2]).T @ dx.reshape(-1, dx.shape[2])
    return g


@dataclass
class RnnTrainTrace:
    phase1_losses: list = field(default_factory=list)
    phase1_valid_ppl: float = math.nan
    phase2_valid_ppl: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid_ppl: float = math.nan

    def to_dict(self):
        return asdict(self)


def _sgd_epoch(model, sentences, lr, config, rng):
    order = rng.permutation(len(sentences))
    losses = []
    for i in range(0, len(order), config.batch_size):
        batch = [sentences[j] for j in order[i:i + config.batch_size]]
        inp, tgt, mask = model.encode_batch(batch)
        loss, g = loss_and_grads(model.params, model.config, model.codes, inp, tgt, mask)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite training loss at lr={lr}")
        norm = math.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
        k = min(1.0, config.clip / norm) if norm > 0 else 1.0
        for key, v in g.items():
            model.params[key] = model.params[key] - lr * k * v
        losses.append(loss)
    model._state_cache.clear()
    return float(np.mean(losses)) if losses else math.nan


def _split(sentences):
    return [s.split() if isinstance(s, str) else list(s) for s in sentences]


def train_recurrent_lm(in_domain, out_domain=(), config=RnnLMConfig(), validation=None,
                       vocab=None):
    """Two-phase training: union of in- and out-of-domain text, then in-domain only.

    Phase 1 runs ``phase1_passes`` epochs at the initial learning rate.
    Phase 2 trains on in-domain text, halving the rate whenever validation
    perplexity fails to improve by ``min_improvement`` (relative) and
    stopping after ``max_decays`` such halvings; the best-validation
    parameters are returned. When ``validation`` is omitted the last
    ``validation_fraction`` of the in-domain sentences is held out.

    Returns ``(model, trace)``.
    """
    train = _split(in_domain)
    ood = _split(out_domain)
    if validation is None:
        k = max(1, int(round(len(train) * config.validation_fraction)))
        train, valid = train[:-k], train[-k:]
    else:
        valid = _split(validation)
    if not train or not valid:
        raise EmptyInput("need in-domain training and validation sentences")
    if vocab is None:
        vocab = build_vocab(train, config.min_count)
    model = init_recurrent_lm(config, vocab)
    rng = np.random.default_rng(config.seed + 1)
    trace = RnnTrainTrace()
    lr = config.learning_rate

    union = train + ood
    for _ in range(config.phase1_passes):
        trace.phase1_losses.append(_sgd_epoch(model, union, lr, config, rng))
    best = model.copy()
    best_ppl = model.corpus_perplexity(valid)
    trace.phase1_valid_ppl = best_ppl
    prev = best_ppl
    decays = 0
    for epoch in range(1, config.max_epochs + 1):
        _sgd_epoch(model, train, lr, config, rng)
        ppl = model.corpus_perplexity(valid)
        if not math.isfinite(ppl):
            raise TrainingDiverged("validation perplexity is not finite")
        trace.phase2_valid_ppl.append(ppl)
        trace.learning_rates.append(lr)
        if ppl < best_ppl:
            best, best_ppl, trace.best_epoch = model.copy(), ppl, epoch
        if ppl > prev * (1.0 - config.min_improvement):
            decays += 1
            if decays > config.max_decays:
                break
            lr *= config.lr_decay
            model = best.copy()
        prev = min(prev, ppl)
    trace.best_valid_ppl = best_ppl
    return best, trace


def layer_sweep(in_domain, out_domain, validation, layers=(1, 2, 3), config=None):
    """Validation perplexity as a function of the number of recurrent layers."""
    config = config or RnnLMConfig(encoding="letter-trigram")
    rows = []
    for n in layers:
        cfg = replace(config, hidden=(config.hidden[0],) * n)
        model, trace = train_recurrent_lm(in_domain, out_domain, cfg, validation)
        rows.append({"layers": n, "ppl": trace.best_valid_ppl})
    return rows


_ORDINAL = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five", 6: "six"}


def format_layer_sweep(rows, encoding="letter trigram"):
    lines = [f"{'Language model':<48} {'PPL':>8}"]
    for i, r in enumerate(rows):
        n = _ORDINAL.get(r["layers"], str(r["layers"]))
        name = f"{encoding} input with one layer (baseline)" if i == 0 and r["layers"] == 1 \
            else f"  + {n} hidden layers"
        lines.append(f"{name:<48} {r['ppl']:>8.2f}")
    return "\n".join(lines) + "\n"
