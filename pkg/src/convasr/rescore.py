"""N-best rescoring: log-linear feature scores, weight search, oracle WER."""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, InvalidConfig, MissingFeature, ShapeError
from .lm.base import InterpolationSpec, interpolate_word_probs
from .score import error_count, normalize, wer

AM, NGRAM, NEURAL_FWD, NEURAL_BWD = "am_score", "ngram_lm", "neural_fwd", "neural_bwd"
WORD_COUNT, OOV_COUNT, PRON = "word_count", "oov_count", "pron_score"

# {0} and +-2^k for k = -4..4; the current value is always added
DEFAULT_GRID = (0.0,) + tuple(s * 2.0 ** k for k in range(-4, 5) for s in (1.0, -1.0))


@dataclass
class Hypothesis:
    words: tuple
    features: dict = field(default_factory=dict)

    def __post_init__(self):
        self.words = tuple(self.words)
        feats = {str(k): float(v) for k, v in self.features.items()}
        for k, v in feats.items():
            if not math.isfinite(v):
                raise InvalidConfig(f"feature {k} is not finite: {v}")
        if WORD_COUNT in feats and feats[WORD_COUNT] != len(self.words):
            raise ShapeError(f"word_count {feats[WORD_COUNT]} != {len(self.words)} words")
        feats[WORD_COUNT] = float(len(self.words))
        self.features = feats


@dataclass
class NBestList:
    utt_id: str
    hypotheses: list
    source_system: str = ""

    def __post_init__(self):
        self.hypotheses = [h if isinstance(h, Hypothesis) else Hypothesis(*h)
                           for h in self.hypotheses]
        if not self.hypotheses:
            raise EmptyInput(f"{self.utt_id}: empty N-best list")

    def __len__(self):
        return len(self.hypotheses)

    @property
    def duplicates(self):
        """Indices of hypotheses whose word sequence already appeared earlier."""
        seen, out = set(), []
        for i, h in enumerate(self.hypotheses):
            if h.words in seen:
                out.append(i)
            seen.add(h.words)
        return out

    def feature_matrix(self, names):
        try:
            return np.array([[h.features[n] for n in names] for h in self.hypotheses])
        except KeyError as e:
            raise MissingFeature(e.args[0]) from None


class ScoreWeights(Mapping):
    def __init__(self, weights):
        w = {str(k): float(v) for k, v in dict(weights).items()}
        if not w or not any(v != 0 for v in w.values()):
            raise InvalidConfig("score weights need at least one nonzero entry")
        if not all(math.isfinite(v) for v in w.values()):
            raise InvalidConfig("score weights must be finite")
        self._w = w

    def __getitem__(self, k):
        return self._w[k]

    def __iter__(self):
        return iter(self._w)

    def __len__(self):
        return len(self._w)

    def __repr__(self):
        return f"ScoreWeights({self._w})"

    def __eq__(self, other):
        return isinstance(other, Mapping) and dict(self) == dict(other)

    def active(self):
        return [k for k, v in self._w.items() if v != 0]

    def scaled(self, alpha):
        return ScoreWeights({k: alpha * v for k, v in self._w.items()})

    def to_json(self):
        return json.dumps(self._w, indent=2, sort_keys=True)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))


def score_hypothesis(h, w):
    """Dot product of weights and features; zero-weight features may be absent."""
    total = 0.0
    for name, wt in w.items():
        if wt == 0:
            continue
        if name not in h.features:
            raise MissingFeature(name)
        total += wt * h.features[name]
    return total


def rerank(nbest, w):
    """Hypotheses by descending combined score; ties keep list order."""
    scores = [score_hypothesis(h, w) for h in nbest.hypotheses]
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    return [nbest.hypotheses[i] for i in order]


def one_best(nbest, w):
    return rerank(nbest, w)[0]


def oracle_wer(nbest, reference):
    """Lowest WER (percent) over the hypotheses of one list."""
    return min(wer(reference, h.words) for h in nbest.hypotheses)


@dataclass
class _DevUtt:
    feats: np.ndarray  # H x K
    errors: np.ndarray  # H
    n_ref: int


def _prepare(dev, names):
    prepared = []
    for nbest, ref in dev:
        F = nbest.feature_matrix(names)
        errs = np.array([error_count(ref, h.words) for h in nbest.hypotheses], dtype=np.int64)
        prepared.append(_DevUtt(F, errs, len(normalize(ref))))
    return prepared


def _total_errors(prepared, wvec):
    err = 0
    for u in prepared:
        err += int(u.errors[int(np.argmax(u.feats @ wvec))])
    return err


def dev_wer(dev, w):
    """Corpus WER (percent) of the 1-best under ``w`` on ``(nbest, reference)`` pairs."""
    names = list(w)
    prepared = _prepare(dev, names)
    n_ref = sum(u.n_ref for u in prepared)
    return 100.0 * _total_errors(prepared, np.array([w[n] for n in names])) / max(n_ref, 1)


def optimize_weights(dev, init=None, grid=DEFAULT_GRID, sweeps=3, features=None):
    """Coordinate search over a fixed grid minimizing dev 1-best errors.

    Each coordinate tries every grid value plus its current value with the
    others held fixed. Ties keep the current value, then prefer the value
    closest to the initial weight, then the smaller value. Because the
    current value is always a candidate the dev WER never increases, so
    the result is never worse than ``init``.
    """
    dev = list(dev)
    if not dev:
        raise EmptyInput("optimize_weights needs at least one dev utterance")
    if init is None:
        init = {AM: 1.0, NGRAM: 1.0}
    init = ScoreWeights(init)
    names = list(features) if features is not None else list(init)
    for n in names:
        if n not in init:
            init = ScoreWeights({**init, n: 0.0})
    w0 = np.array([init[n] for n in names])
    prepared = _prepare(dev, names)
    w = w0.copy()
    for _ in range(sweeps):
        changed = False
        for k in range(len(names)):
            cur = w[k]
            candidates = sorted(set(grid) | {cur})
            best_val, best_key = cur, None
            for v in candidates:
                trial = w.copy()
                trial[k] = v
                if not np.any(trial != 0):
                    continue
                e = _total_errors(prepared, trial)
                key = (e, v != cur, abs(v - w0[k]), v)
                if best_key is None or key < best_key:
                    best_key, best_val = key, v
            if best_val != cur:
                w[k] = best_val
                changed = True
        if not changed:
            break
    return ScoreWeights({n: float(v) for n, v in zip(names, w)})


# ---- LM features -------------------------------------------------------

def _token_logprob_lists(lm, sentences):
    if hasattr(lm, "batch_token_logprobs"):
        return lm.batch_token_logprobs(sentences)
    return [np.array(lm.token_logprobs(s)) for s in sentences]


@dataclass
class LmBundle:
    """Models behind the LM features.

    ``ngram`` gives ``ngram_lm``; ``forward`` and ``backward`` are component
    tuples (neural, neural, N-gram) interpolated word by word into
    ``neural_fwd`` and ``neural_bwd``. ``vocab`` decides ``oov_count``.
    """

    ngram: object
    forward: tuple = ()
    backward: tuple = ()
    spec: InterpolationSpec = InterpolationSpec()
    vocab: frozenset = None


def interpolated_logprobs(components, sentences, spec):
    per_comp = [_token_logprob_lists(c, sentences) for c in components]
    out = []
    for i in range(len(sentences)):
        probs = [np.exp(pc[i]) for pc in per_comp]
        out.append(float(np.sum(interpolate_word_probs(probs, spec))))
    return out


def lm_features(sentences, bundle):
    """Feature dicts (one per sentence) for the models in ``bundle``."""
    sentences = [tuple(s) for s in sentences]
    uniq = sorted(set(sentences))
    feats = {s: {} for s in uniq}
    ng = [float(np.sum(x)) for x in _token_logprob_lists(bundle.ngram, uniq)]
    for s, v in zip(uniq, ng):
        feats[s][NGRAM] = v
    if bundle.forward:
        for s, v in zip(uniq, interpolated_logprobs(bundle.forward, uniq, bundle.spec)):
            feats[s][NEURAL_FWD] = v
    if bundle.backward:
        for s, v in zip(uniq, interpolated_logprobs(bundle.backward, uniq, bundle.spec)):
            feats[s][NEURAL_BWD] = v
    vocab = bundle.vocab if bundle.vocab is not None else frozenset(bundle.ngram.vocab)
    for s in uniq:
        feats[s][OOV_COUNT] = float(sum(1 for w in s if w not in vocab))
    return [dict(feats[s]) for s in sentences]


def add_lm_features(nbests, bundle):
    """New N-best lists with LM features added to every hypothesis."""
    allsent = [h.words for nb in nbests for h in nb.hypotheses]
    feats = iter(lm_features(allsent, bundle))
    out = []
    for nb in nbests:
        hyps = [Hypothesis(h.words, {**h.features, **next(feats)}) for h in nb.hypotheses]
        out.append(NBestList(nb.utt_id, hyps, nb.source_system))
    return out


# ---- files -------------------------------------------------------------

def nbest_to_json(nb):
    return json.dumps({
        "utt_id": nb.utt_id,
        "system": nb.source_system,
        "hyps": [{"words": list(h.words),
                  "features": {k: h.features[k] for k in sorted(h.features)}}
                 for h in nb.hypotheses],
    }, sort_keys=False)


def nbest_from_json(line):
    d = json.loads(line)
    hyps = [Hypothesis(tuple(h["words"]), h.get("features", {})) for h in d["hyps"]]
    return NBestList(d["utt_id"], hyps, d.get("system", ""))


def write_nbest(path, nbests):
    with open(path, "w", encoding="utf-8") as f:
        for nb in nbests:
            f.write(nbest_to_json(nb) + "\n")


def read_nbest(path):
    with open(path, encoding="utf-8") as f:
        return [nbest_from_json(line) for line in f if line.strip()]
