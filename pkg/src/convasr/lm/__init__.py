"""Language models used for N-best rescoring."""

from .base import (BOS, EOS, UNK, InterpolatedLM, InterpolationSpec, LanguageModelScorer,
                   UniformLM, interpolate_word_probs, perplexity, stabilizer_grad,
                   stabilizer_scale)
from .encoder import LetterTrigramEncoder, letter_trigram_encode, letter_trigrams
from .ngram import BackoffNgram, train_ngram
from .rnn import (RnnLMConfig, ToyRecurrentLM, build_vocab, format_layer_sweep,
                  init_recurrent_lm, layer_sweep, train_recurrent_lm)


def read_corpus(path):
    """One whitespace-tokenized sentence per line; blank lines skipped."""
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f if line.strip()]


def write_corpus(path, sentences):
    with open(path, "w", encoding="utf-8") as f:
        for s in sentences:
            f.write(" ".join(s) + "\n")
