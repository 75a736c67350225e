"""Count-based backoff N-gram models (Witten-Bell or unsmoothed)."""

from __future__ import annotations

import math
from collections import defaultdict
from fractions import Fraction

import numpy as np

from ..errors import EmptyInput, InvalidConfig
from .base import BOS, EOS, UNK, LanguageModelScorer

LOG10 = math.log(10.0)


class BackoffNgram(LanguageModelScorer):
    """Backoff model in natural log.

    ``probs[k]`` maps ``(history, word)`` with ``len(history) == k - 1`` to a
    log-probability; ``bows`` maps histories to log back-off weights. A
    missing back-off weight means the history was never seen and backs off
    with weight one.
    """

    def __init__(self, order, vocab, probs, bows, direction="forward", counts=None,
                 discount="witten-bell"):
        self.order = order
        self.vocab = tuple(vocab)
        self.probs = probs
        self.bows = bows
        self.direction = direction
        self.counts = counts
        self.discount = discount
        self._dist_cache = {}

    def _trim(self, history):
        history = tuple(history)
        return history[max(0, len(history) - self.order + 1):] if self.order > 1 else ()

    def logprob(self, history, word):
        if word not in self._index:
            word = UNK
        h = self._trim(history)
        acc = 0.0
        while True:
            lp = self.probs[len(h) + 1].get((h, word))
            if lp is not None:
                return acc + lp
            if not h:
                return -math.inf
            bow = self.bows.get(h)
            if bow is not None:
                acc += bow
                if acc == -math.inf:
                    return acc
            h = h[1:]

    def distribution(self, history):
        h = self._trim(history)
        cached = self._dist_cache.get(h)
        if cached is not None:
            return cached
        if not h:
            dist = np.zeros(len(self.vocab))
            for (_, w), lp in self.probs[1].items():
                dist[self._index[w]] = math.exp(lp)
        else:
            dist = self.distribution(h[1:]) * math.exp(self.bows.get(h, 0.0))
            for w, lp in self._seen(h):
                dist[self._index[w]] = math.exp(lp)
        dist.flags.writeable = False
        self._dist_cache[h] = dist
        return dist

    def _seen(self, h):
        return self._by_history.get(h, ())

    @property
    def _by_history(self):
        cache = self.__dict__.get("_byh")
        if cache is None:
            cache = defaultdict(list)
            for k in range(2, self.order + 1):
                for (h, w), lp in self.probs[k].items():
                    cache[h].append((w, lp))
            self.__dict__["_byh"] = cache
        return cache

    def exact_prob(self, history, word):
        """Probability as an exact fraction of counts."""
        if self.counts is None:
            raise InvalidConfig("model has no counts (loaded from ARPA?)")
        if word not in self._index:
            word = UNK
        return _exact(self, self._trim(history), word)

    def to_arpa(self):
        """ARPA text (log10 values); ``<s>`` appears with probability -99."""
        lines = ["", "\\data\\"]
        sections = []
        for k in range(1, self.order + 1):
            entries = []
            for (h, w), lp in self.probs[k].items():
                entries.append((h + (w,), lp))
            if k == 1:
                entries.append(((BOS,), None))
            entries.sort(key=lambda e: e[0])
            sections.append(entries)
            lines.append(f"ngram {k}={len(entries)}")
        for k, entries in enumerate(sections, start=1):
            lines.append("")
            lines.append(f"\\{k}-grams:")
            for gram, lp in entries:
                p10 = -99.0 if lp is None or lp == -math.inf else lp / LOG10
                row = f"{p10:.17g}\t{' '.join(gram)}"
                bow = self.bows.get(gram)
                if k < self.order and bow is not None:
                    b10 = -99.0 if bow == -math.inf else bow / LOG10
                    row += f"\t{b10:.17g}"
                lines.append(row)
        lines += ["", "\\end\\", ""]
        return "\n".join(lines)

    def write_arpa(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_arpa())

    @classmethod
    def from_arpa(cls, text, direction="forward"):
        order = 0
        probs = defaultdict(dict)
        bows = {}
        vocab = set()
        k = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line in ("\\data\\", "\\end\\"):
                continue
            if line.startswith("ngram "):
                order = max(order, int(line.split()[1].split("=")[0]))
                continue
            if line.startswith("\\") and line.endswith("-grams:"):
                k = int(line[1:line.index("-")])
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if "\t" in line:
                p10, gram = float(parts[0]), parts[1].split()
                b10 = float(parts[2]) if len(parts) > 2 else None
            else:
                p10, gram = float(parts[0]), parts[1:1 + k]
                b10 = float(parts[1 + k]) if len(parts) > 1 + k else None
            gram = tuple(gram)
            if b10 is not None:
                bows[gram] = -math.inf if b10 <= -99 else b10 * LOG10
            if gram == (BOS,):
                continue
            probs[k][(gram[:-1], gram[-1])] = -math.inf if p10 <= -99 else p10 * LOG10
            if k == 1:
                vocab.add(gram[-1])
        specials = [EOS, UNK]
        vocab = sorted(vocab - set(specials)) + specials
        for i in range(1, order + 1):
            probs.setdefault(i, {})
        return cls(order, vocab, dict(probs), bows, direction, None, "arpa")

    @classmethod
    def read_arpa(cls, path, direction="forward"):
        with open(path, encoding="utf-8") as f:
            return cls.from_arpa(f.read(), direction)


def _count(sentences, order, vocab_set):
    counts = [None] + [defaultdict(int) for _ in range(order)]
    for words in sentences:
        toks = [BOS] + [w if w in vocab_set else UNK for w in words] + [EOS]
        for i in range(1, len(toks)):
            for k in range(1, order + 1):
                if i - k + 1 < 0:
                    break
                h = tuple(toks[i - k + 1:i])
                counts[k][(h, toks[i])] += 1
    return counts


def _history_stats(counts_k):
    tot = defaultdict(int)
    types = defaultdict(int)
    for (h, _), c in counts_k.items():
        tot[h] += c
        types[h] += 1
    return tot, types


def train_ngram(corpus, order=3, vocab=None, discount="witten-bell", direction="forward"):
    """Estimate a backoff N-gram from tokenized sentences.

    ``discount`` is ``"witten-bell"`` (interpolated Witten-Bell, stored in
    backoff form, base distribution uniform over the vocabulary) or
    ``"ml"`` (unsmoothed maximum likelihood; histories with data never back
    off, unseen ones back off with weight one).
    """
    if discount not in ("witten-bell", "ml"):
        raise InvalidConfig(f"unknown discount {discount!r}")
    if order < 1:
        raise InvalidConfig("order must be >= 1")
    sentences = [s.split() if isinstance(s, str) else list(s) for s in corpus]
    sentences = [s[::-1] if direction == "backward" else s for s in sentences]
    if not any(sentences):
        raise EmptyInput("empty corpus")
    if vocab is None:
        words = sorted({w for s in sentences for w in s} - {BOS, EOS, UNK})
    else:
        words = sorted(set(vocab) - {BOS, EOS, UNK})
    full_vocab = tuple(words) + (EOS, UNK)
    counts = _count(sentences, order, set(words))
    V = len(full_vocab)
    probs = {k: {} for k in range(1, order + 1)}
    bows = {}

    # unigram
    n = sum(counts[1].values())
    seen = {w: c for ((_, w), c) in counts[1].items()}
    t = len(seen)
    for w in full_vocab:
        c = seen.get(w, 0)
        if discount == "ml":
            p = c / n
        else:
            p = (c + t / V) / (n + t)
        probs[1][((), w)] = math.log(p) if p > 0 else -math.inf

    for k in range(2, order + 1):
        tot, types = _history_stats(counts[k])
        lower = BackoffNgram(k - 1, full_vocab, probs, bows, "forward")
        for (h, w), c in counts[k].items():
            if discount == "ml":
                p = c / tot[h]
            else:
                p_low = math.exp(lower.logprob(h[1:], w))
                p = (c + types[h] * p_low) / (tot[h] + types[h])
            probs[k][(h, w)] = math.log(p)
        for h in tot:
            if discount == "ml":
                # a seen history keeps all of its mass on seen words
                bows[h] = -math.inf
            else:
                bows[h] = math.log(types[h] / (tot[h] + types[h]))

    return BackoffNgram(order, full_vocab, probs, bows, direction,
                        counts, discount)


def _exact(lm, h, w):
    """Exact rational probability mirroring :func:`train_ngram`."""
    counts = lm.counts
    V = len(lm.vocab)
    k = len(h) + 1
    if k == 1:
        c1 = lm.__dict__.get("_uni")
        if c1 is None:
            c1 = {ww: c for ((_, ww), c) in counts[1].items()}
            lm.__dict__["_uni"] = c1
        n = sum(c1.values())
        c = c1.get(w, 0)
        if lm.discount == "ml":
            return Fraction(c, n)
        t = len(c1)
        return (c + Fraction(t, V)) / (n + t)
    stats = lm.__dict__.setdefault("_stats", {})
    if k not in stats:
        stats[k] = _history_stats(counts[k])
    tot, types = stats[k]
    if h not in tot:
        return _exact(lm, h[1:], w)
    c = counts[k].get((h, w), 0)
    if lm.discount == "ml":
        return Fraction(c, tot[h])
    return (c + types[h] * _exact(lm, h[1:], w)) / (tot[h] + types[h])
