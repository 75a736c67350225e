"""NIST-style word scoring: alignment, WER breakdown and error tables."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyReference

DEFAULT_OPTIONAL = frozenset({"%hesitation", "uh", "um"})
# never optional, even though they are short non-lexical tokens
BACKCHANNELS = frozenset({"uh-huh", "mhm", "%bcack"})

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


@dataclass(frozen=True)
class Costs:
    """Edit costs in tenths; sclite uses sub=4, ins=del=3."""

    sub: int = 4
    ins: int = 3
    dele: int = 3


SCLITE_COSTS = Costs()


@dataclass(frozen=True)
class WordAlignment:
    ops: tuple  # of (tag, ref_word | None, hyp_word | None)

    def ref_words(self):
        return [r for _, r, _ in self.ops if r is not None]

    def hyp_words(self):
        return [h for _, _, h in self.ops if h is not None]

    def count(self, tag):
        return sum(1 for t, _, _ in self.ops if t == tag)


@dataclass
class ErrorReport:
    n_ref: int = 0
    n_match: int = 0
    n_sub: int = 0
    n_del: int = 0
    n_ins: int = 0
    subs: Counter = field(default_factory=Counter)
    dels: Counter = field(default_factory=Counter)
    inss: Counter = field(default_factory=Counter)

    def _rate(self, n):
        return 100.0 * n / self.n_ref if self.n_ref else 0.0

    @property
    def sub_rate(self):
        return self._rate(self.n_sub)

    @property
    def del_rate(self):
        return self._rate(self.n_del)

    @property
    def ins_rate(self):
        return self._rate(self.n_ins)

    @property
    def n_errors(self):
        return self.n_sub + self.n_del + self.n_ins

    @property
    def wer(self):
        return self._rate(self.n_errors)

    def __add__(self, other):
        return ErrorReport(
            self.n_ref + other.n_ref,
            self.n_match + other.n_match,
            self.n_sub + other.n_sub,
            self.n_del + other.n_del,
            self.n_ins + other.n_ins,
            self.subs + other.subs,
            self.dels + other.dels,
            self.inss + other.inss,
        )

    def to_dict(self):
        return {
            "ref_words": self.n_ref,
            "counts": {"sub": self.n_sub, "del": self.n_del, "ins": self.n_ins,
                       "match": self.n_match},
            "rates": {"sub": round(self.sub_rate, 6), "del": round(self.del_rate, 6),
                      "ins": round(self.ins_rate, 6), "all": round(self.wer, 6)},
        }


def normalize(words):
    """Lowercase and trim; drops tokens that become empty."""
    if isinstance(words, str):
        words = words.split()
    out = []
    for w in words:
        w = w.strip().lower()
        if w:
            out.append(w)
    return out


def strip_optional(hyp, optional_set=DEFAULT_OPTIONAL):
    """Delete optional (hesitation) tokens from a hypothesis.

    Only the hypothesis is touched. A hesitation in the reference that the
    recognizer rendered as a backchannel therefore still counts as a
    substitution, while the reverse confusion becomes a deletion.
    """
    optional_set = {w.lower() for w in optional_set}
    return [w for w in hyp if w.lower() not in optional_set]


def edit_cost_matrix(ref, hyp, costs=SCLITE_COSTS):
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1) * costs.dele
    d[0, :] = np.arange(m + 1) * costs.ins
    for i in range(1, n + 1):
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = d[i - 1, j - 1] + (0 if r == hyp[j - 1] else costs.sub)
            d[i, j] = min(diag, d[i - 1, j] + costs.dele, d[i, j - 1] + costs.ins)
    return d


def align(ref, hyp, costs=SCLITE_COSTS):
    """Minimum-cost alignment of two token lists.

    Backtrace preference on equal-cost paths: match, then deletion, then
    insertion, then substitution.
    """
    d = edit_cost_matrix(ref, hyp, costs)
    i, j = len(ref), len(hyp)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i, j] == d[i - 1, j - 1]:
            ops.append((MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + costs.dele:
            ops.append((DEL, ref[i - 1], None))
            i -= 1
        elif j > 0 and d[i, j] == d[i, j - 1] + costs.ins:
            ops.append((INS, None, hyp[j - 1]))
            j -= 1
        else:
            ops.append((SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
    ops.reverse()
    return WordAlignment(tuple(ops)), int(d[-1, -1])


def report_from_alignment(alignment):
    rep = ErrorReport()
    for tag, r, h in alignment.ops:
        if r is not None:
            rep.n_ref += 1
        if tag == MATCH:
            rep.n_match += 1
        elif tag == SUB:
            rep.n_sub += 1
            rep.subs[(r, h)] += 1
        elif tag == DEL:
            rep.n_del += 1
            rep.dels[r] += 1
        else:
            rep.n_ins += 1
            rep.inss[h] += 1
    return rep


def align_and_score(ref, hyp, costs=SCLITE_COSTS):
    """Align ``hyp`` against ``ref`` and return ``(WordAlignment, ErrorReport)``."""
    ref = normalize(ref)
    hyp = normalize(hyp)
    if not ref:
        raise EmptyReference("reference has no words")
    alignment, _ = align(ref, hyp, costs)
    return alignment, report_from_alignment(alignment)


def wer(ref, hyp, costs=SCLITE_COSTS):
    return align_and_score(ref, hyp, costs)[1].wer


def error_count(ref, hyp, costs=SCLITE_COSTS):
    """Number of sub+del+ins errors of ``hyp``; empty references allowed."""
    ref, hyp = normalize(ref), normalize(hyp)
    if not ref:
        return len(hyp)
    return report_from_alignment(align(ref, hyp, costs)[0]).n_errors


def score_corpus(refs, hyps, optional_set=DEFAULT_OPTIONAL, costs=SCLITE_COSTS):
    """Score ``hyps`` (utt_id -> words) against ``refs``.

    Returns the merged ErrorReport and the per-utterance alignments in
    sorted utterance order.
    """
    total = ErrorReport()
    alignments = {}
    for utt in sorted(refs):
        hyp = hyps.get(utt, [])
        if optional_set:
            hyp = strip_optional(normalize(hyp), optional_set)
        ali, rep = align_and_score(refs[utt], hyp, costs)
        alignments[utt] = ali
        total = total + rep
    return total, alignments


@dataclass
class ErrorTables:
    subs: list
    dels: list
    inss: list


def _top(counter, k, fmt):
    items = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return [fmt(key, n) for key, n in items]


def error_tables(alignments, k=10):
    """Top-k substitution, deletion and insertion lists.

    Entries are sorted by descending count, ties lexicographically.
    Substitutions are rendered ``count: ref / hyp``.
    """
    rep = ErrorReport()
    if isinstance(alignments, dict):
        alignments = list(alignments.values())
    for ali in alignments:
        rep = rep + report_from_alignment(ali)
    return ErrorTables(
        subs=_top(rep.subs, k, lambda key, n: f"{n}: {key[0]} / {key[1]}"),
        dels=_top(rep.dels, k, lambda key, n: f"{n}: {key}"),
        inss=_top(rep.inss, k, lambda key, n: f"{n}: {key}"),
    )


def format_columns(columns, title=None):
    """Render named columns of strings side by side as a text table."""
    names = list(columns)
    depth = max((len(v) for v in columns.values()), default=0)
    widths = [max([len(n)] + [len(s) for s in columns[n]]) for n in names]
    lines = []
    if title:
        lines.append(title)
    lines.append(" | ".join(n.ljust(w) for n, w in zip(names, widths)))
    lines.append("-+-".join("-" * w for w in widths))
    for i in range(depth):
        row = []
        for n, w in zip(names, widths):
            col = columns[n]
            row.append((col[i] if i < len(col) else "").ljust(w))
        lines.append(" | ".join(row))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def comparison_tables(alignment_sets, k=10):
    """Side-by-side error tables, one column per named alignment set.

    With two systems scored on two subsets (four named sets) this gives
    the four-column layout of a system-versus-human comparison.
    """
    tabs = {name: error_tables(al, k) for name, al in alignment_sets.items()}
    return {
        "substitutions": format_columns({n: t.subs for n, t in tabs.items()},
                                        "Most common substitutions"),
        "deletions": format_columns({n: t.dels for n, t in tabs.items()},
                                    "Most common deletions"),
        "insertions": format_columns({n: t.inss for n, t in tabs.items()},
                                     "Most common insertions"),
    }


def rate_table(reports):
    """Text table with rows sub/del/ins/all and one column per subset."""
    names = list(reports)
    rows = [("sub", "sub_rate"), ("del", "del_rate"), ("ins", "ins_rate"), ("all", "wer")]
    width = max([8] + [len(n) for n in names])
    lines = ["".ljust(5) + "".join(n.rjust(width + 2) for n in names)]
    for label, attr in rows:
        vals = "".join(f"{getattr(reports[n], attr):.2f}".rjust(width + 2) for n in names)
        lines.append(label.ljust(5) + vals)
    return "\n".join(lines) + "\n"


def rate_table_json(reports):
    return json.dumps({n: r.to_dict() for n, r in reports.items()}, indent=2, sort_keys=True)


def read_references(path):
    """Reference file: ``utt_id word word ...`` per line."""
    refs = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                refs[parts[0]] = parts[1:]
    return refs


def write_references(path, refs):
    with open(path, "w", encoding="utf-8") as f:
        for utt in sorted(refs):
            f.write(" ".join([utt] + list(refs[utt])) + "\n")
