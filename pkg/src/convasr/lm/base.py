"""Scorer protocol shared by every language model, perplexity and
word-level interpolation."""

from __future__ import annotations

import decimal
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ..errors import EmptyInput, InvalidConfig

BOS, EOS, UNK = "<s>", "</s>", "<unk>"


class LanguageModelScorer:
    """Conditional distribution over ``vocab`` given a token history.

    Subclasses define ``vocab`` (predicted tokens, including ``</s>`` and
    ``<unk>``), ``direction`` and :meth:`distribution`. Histories are tuples
    of tokens in prediction order, starting with ``<s>``; a backward model
    predicts right to left, so its histories come from the reversed sentence.
    """

    direction = "forward"
    vocab: tuple = ()

    def index(self, word):
        idx = self._index.get(word)
        return self._index[UNK] if idx is None else idx

    @property
    def _index(self):
        cache = self.__dict__.get("_index_cache")
        if cache is None:
            cache = {w: i for i, w in enumerate(self.vocab)}
            self.__dict__["_index_cache"] = cache
        return cache

    def map_unk(self, words):
        return [w if w in self._index else UNK for w in words]

    def distribution(self, history):
        raise NotImplementedError

    def logprob(self, history, word):
        return float(np.log(self.distribution(tuple(history))[self.index(word)]))

    def ordered(self, words):
        """Tokens in prediction order (reversed for backward models)."""
        words = list(words)
        return words[::-1] if self.direction == "backward" else words

    def token_logprobs(self, words):
        """Log-probabilities of every token of one sentence plus ``</s>``."""
        toks = self.map_unk(self.ordered(words)) + [EOS]
        hist = [BOS]
        out = []
        for w in toks:
            out.append(self.logprob(tuple(hist), w))
            hist.append(w)
        return out

    def sentence_logprob(self, words):
        return float(sum(self.token_logprobs(words)))


class UniformLM(LanguageModelScorer):
    def __init__(self, words, direction="forward"):
        vocab = sorted(set(words) - {BOS, EOS, UNK})
        self.vocab = tuple(vocab) + (EOS, UNK)
        self.direction = direction

    def distribution(self, history):
        return np.full(len(self.vocab), 1.0 / len(self.vocab))

    def logprob(self, history, word):
        return -math.log(len(self.vocab))

    def exact_prob(self, history, word):
        return Fraction(1, len(self.vocab))


def _token_stream(lm, sentences):
    for words in sentences:
        toks = lm.map_unk(lm.ordered(words)) + [EOS]
        hist = [BOS]
        for w in toks:
            yield tuple(hist), w
            hist.append(w)


def perplexity(lm, sentences):
    """exp of the mean negative log-probability per token, ``</s>`` included.

    Scorers whose probabilities are exact ratios of counts (``exact_prob``)
    are evaluated in 40-digit decimal arithmetic and correctly rounded, so
    for instance a uniform model over V tokens gives exactly V. Tokens with
    zero probability make the result infinite; they are listed in a
    warning.
    """
    sentences = [list(s.split()) if isinstance(s, str) else list(s) for s in sentences]
    if not sentences:
        raise EmptyInput("no text to evaluate")
    exact = hasattr(lm, "exact_prob")
    n = 0
    zero = []
    if exact:
        probs = Counter()
        for h, w in _token_stream(lm, sentences):
            p = lm.exact_prob(h, w)
            n += 1
            if p == 0:
                zero.append(w)
            else:
                probs[p] += 1
    else:
        logs = []
        for h, w in _token_stream(lm, sentences):
            lp = lm.logprob(h, w)
            n += 1
            if lp == -math.inf:
                zero.append(w)
            else:
                logs.append(lp)
    if zero:
        warnings.warn(f"zero-probability tokens: {sorted(set(zero))}", RuntimeWarning,
                      stacklevel=2)
        return math.inf
    if exact:
        with decimal.localcontext() as ctx:
            ctx.prec = 40
            total = sum((decimal.Decimal(c) * (decimal.Decimal(p.numerator)
                                               / decimal.Decimal(p.denominator)).ln()
                         for p, c in sorted(probs.items())), decimal.Decimal(0))
            return float((-total / n).exp())
    return math.exp(-math.fsum(logs) / n)


@dataclass(frozen=True)
class InterpolationSpec:
    weights: tuple = (0.375, 0.375, 0.25)

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-12:
            raise InvalidConfig(f"interpolation weights must be >= 0 and sum to 1, got {w}")
        object.__setattr__(self, "weights", w)


def interpolate_word_probs(p_components, spec=InterpolationSpec()):
    """Log of the weighted arithmetic mean of component probabilities.

    ``p_components`` may be a sequence of scalars or of equal-length arrays
    (whole distributions).
    """
    if len(p_components) != len(spec.weights):
        raise InvalidConfig(f"{len(p_components)} components for {len(spec.weights)} weights")
    mix = sum(w * np.asarray(p, dtype=np.float64) for w, p in zip(spec.weights, p_components))
    with np.errstate(divide="ignore"):
        out = np.log(mix)
    return float(out) if np.ndim(out) == 0 else out


class InterpolatedLM(LanguageModelScorer):
    """Word-level linear interpolation of scorers sharing one vocabulary."""

    def __init__(self, components, spec=InterpolationSpec()):
        if len(components) != len(spec.weights):
            raise InvalidConfig("component/weight count mismatch")
        dirs = {c.direction for c in components}
        if len(dirs) != 1:
            raise InvalidConfig("components must share a direction")
        self.components = list(components)
        self.spec = spec
        self.vocab = tuple(components[0].vocab)
        self.direction = dirs.pop()
        for c in components[1:]:
            if set(c.vocab) != set(self.vocab):
                raise InvalidConfig("components must share a vocabulary")
        self._perm = [np.array([c.index(w) for w in self.vocab]) for c in components]

    def distribution(self, history):
        dists = [c.distribution(history)[perm] for c, perm in zip(self.components, self._perm)]
        return np.exp(interpolate_word_probs(dists, self.spec))


def stabilizer_scale(beta):
    """Self-stabilizer multiplier 0.25 * ln(1 + exp(4 * beta)), overflow-safe."""
    beta = np.asarray(beta, dtype=np.float64)
    x = 4.0 * beta
    out = 0.25 * (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))
    return float(out) if out.ndim == 0 else out


def stabilizer_grad(beta):
    """d stabilizer_scale / d beta = sigmoid(4 beta)."""
    beta = np.asarray(beta, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(2.0 * beta))
