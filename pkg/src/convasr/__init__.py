"""Desk-scale conversational speech recognition back end.

Sequence training on sparse senone graphs, language-model rescoring of
N-best lists, confusion-network system combination, NIST-style scoring and
a 1-bit data-parallel SGD simulator.
"""

__version__ = "0.1.0"
