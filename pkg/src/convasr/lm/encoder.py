"""Letter-trigram word encoding."""

from __future__ import annotations

from collections import Counter

import numpy as np
import scipy.sparse as sp

from ..errors import EmptyInput

BOUNDARY = "#"
OOV_BUCKET = "<oov-trigram>"


def letter_trigrams(word, boundary=BOUNDARY):
    """Character trigrams of ``#word#`` with multiplicity, in order."""
    if not word:
        raise EmptyInput("cannot encode an empty word")
    s = boundary + word + boundary
    return [s[i:i + 3] for i in range(len(s) - 2)]


class LetterTrigramEncoder:
    """Maps words to sparse trigram-count vectors.

    The inventory holds every trigram of the training words, then a
    reserved bucket collecting out-of-inventory trigrams, then one
    indicator dimension per special token (``</s>``, ``<unk>`` ...), which
    have no spelling.
    """

    def __init__(self, trigrams, specials=()):
        self.trigrams = tuple(trigrams)
        self.specials = tuple(specials)
        self._index = {t: i for i, t in enumerate(self.trigrams)}
        self.oov_index = len(self.trigrams)
        self._special_index = {t: self.oov_index + 1 + i for i, t in enumerate(self.specials)}

    @classmethod
    def fit(cls, words, specials=()):
        inv = set()
        for w in words:
            if w in specials:
                continue
            inv.update(letter_trigrams(w))
        return cls(sorted(inv), specials)

    @property
    def dim(self):
        return len(self.trigrams) + 1 + len(self.specials)

    def encode_counts(self, word):
        """``{feature: count}``; unknown trigrams are pooled under the OOV bucket."""
        if word in self._special_index:
            return {word: 1}
        out = Counter()
        for t in letter_trigrams(word):
            out[t if t in self._index else OOV_BUCKET] += 1
        return dict(out)

    def encode(self, word):
        """Dense count vector of length :attr:`dim`."""
        v = np.zeros(self.dim)
        for key, c in self.encode_counts(word).items():
            v[self._feature_index(key)] += c
        return v

    def _feature_index(self, key):
        if key == OOV_BUCKET:
            return self.oov_index
        if key in self._special_index:
            return self._special_index[key]
        return self._index[key]

    def encode_sparse(self, word):
        counts = self.encode_counts(word)
        cols = [self._feature_index(k) for k in counts]
        return sp.csr_matrix((list(counts.values()), ([0] * len(cols), cols)),
                             shape=(1, self.dim))

    def matrix(self, vocab):
        """``len(vocab) x dim`` code matrix, one row per word."""
        return np.vstack([self.encode(w) for w in vocab]) if len(vocab) else np.zeros((0, self.dim))

    def to_dict(self):
        return {"trigrams": list(self.trigrams), "specials": list(self.specials)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["trigrams"], d.get("specials", ()))


def letter_trigram_encode(word, encoder=None):
    """Trigram counts of one word; with an encoder, unknown trigrams fall in its OOV bucket."""
    if encoder is None:
        return dict(Counter(letter_trigrams(word)))
    return encoder.encode_counts(word)
