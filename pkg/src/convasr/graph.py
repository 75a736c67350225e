"""Mixed-history senone language model and the sparse denominator graph.

The denominator acceptor has one state per senone history. A history is the
previous phone together with the senones seen so far inside the current
phone (at most ``states_per_phone`` of them). Arcs carry the senone they
emit and a natural-log weight; self-loops come from HMM transition counts.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Hashable, Mapping, NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .errors import EmptyInput, IncompleteTransitionModel, UnknownSenone


@dataclass(frozen=True)
class SenoneAlignment:
    utt_id: str
    frames: tuple
    phone_of: Mapping

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise EmptyInput(f"{self.utt_id}: empty alignment")
        for s in self.frames:
            if s not in self.phone_of:
                raise UnknownSenone(s)

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class CompressedSequence:
    utt_id: str
    runs: tuple


class MixedHistory(NamedTuple):
    prev_phone: Hashable
    senones: tuple


START = MixedHistory(None, ())


def compress_senones(alignment):
    """Collapse consecutive repeats of a senone into a single occurrence."""
    frames = alignment.frames if isinstance(alignment, SenoneAlignment) else tuple(alignment)
    if not frames:
        raise EmptyInput("empty alignment")
    runs = [frames[0]]
    for s in frames[1:]:
        if s != runs[-1]:
            runs.append(s)
    utt_id = alignment.utt_id if isinstance(alignment, SenoneAlignment) else ""
    return CompressedSequence(utt_id, tuple(runs))


def current_phone(history, phone_of):
    if history.senones:
        return phone_of[history.senones[-1]]
    return history.prev_phone


def next_history(history, senone, phone_of, states_per_phone=3):
    """History after emitting ``senone`` from ``history``.

    Senones of the same phone extend the within-phone history up to
    ``states_per_phone``; anything else starts a new phone whose
    predecessor is the phone just left.
    """
    ph = phone_of[senone]
    if history.senones and phone_of[history.senones[-1]] == ph \
            and len(history.senones) < states_per_phone:
        return MixedHistory(history.prev_phone, history.senones + (senone,))
    return MixedHistory(current_phone(history, phone_of), (senone,))


@dataclass
class MixedHistoryLM:
    counts: dict
    phone_of: Mapping
    states_per_phone: int = 3
    table: dict = field(init=False)

    def __post_init__(self):
        self.table = {}
        for h, succ in self.counts.items():
            tot = sum(succ.values())
            self.table[h] = {s: c / tot for s, c in succ.items()}

    @property
    def senones(self):
        out = set()
        for h, succ in self.counts.items():
            out.update(h.senones)
            out.update(succ)
        return out

    def histories_of(self, sequence):
        """Yield ``(history, next_senone)`` pairs for one compressed sequence."""
        h = START
        for s in sequence:
            yield h, s
            h = next_history(h, s, self.phone_of, self.states_per_phone)


def estimate_mixed_history_lm(sequences, phone_of, states_per_phone=3):
    """Unsmoothed variable-length N-gram over compressed senone sequences."""
    counts = defaultdict(lambda: defaultdict(int))
    n = 0
    for seq in sequences:
        runs = seq.runs if isinstance(seq, CompressedSequence) else tuple(seq)
        h = START
        for s in runs:
            if s not in phone_of:
                raise UnknownSenone(s)
            counts[h][s] += 1
            h = next_history(h, s, phone_of, states_per_phone)
            n += 1
    if n == 0:
        raise EmptyInput("no senone sequences")
    counts = {h: dict(v) for h, v in counts.items()}
    return MixedHistoryLM(counts, dict(phone_of), states_per_phone)


@dataclass(frozen=True)
class TransitionModel:
    self_loop: Mapping
    exit: Mapping

    def __contains__(self, senone):
        return senone in self.self_loop


def estimate_transition_model(alignments):
    """HMM self-loop/exit probabilities from frame-level transition counts.

    Each run of ``L`` frames of one senone contributes ``L - 1`` self-loop
    transitions and one exit, so every seen senone has an exit count >= 1.
    """
    loops = defaultdict(int)
    exits = defaultdict(int)
    for ali in alignments:
        frames = ali.frames if isinstance(ali, SenoneAlignment) else tuple(ali)
        prev = None
        for s in frames:
            if s == prev:
                loops[s] += 1
            else:
                exits[s] += 1
            prev = s
    if not exits:
        raise EmptyInput("no alignments")
    self_loop, exit_ = {}, {}
    for s in exits:
        tot = loops[s] + exits[s]
        self_loop[s] = loops[s] / tot
        exit_[s] = exits[s] / tot
    return TransitionModel(self_loop, exit_)


def _sort_key(label):
    return (0, int(label), "") if isinstance(label, (int, np.integer)) or str(label).isdigit() \
        else (1, 0, str(label))


@dataclass(frozen=True, eq=False)
class DenominatorGraph:
    """Sparse weighted acceptor over senone labels.

    Arcs are stored as parallel arrays sorted by source state; ``label``
    indexes into ``senones``, the column order of the log-likelihood
    matrices the graph is evaluated against. Self-loops are ordinary arcs
    with ``src == dst``.
    """

    num_states: int
    start: int
    src: np.ndarray
    dst: np.ndarray
    label: np.ndarray
    logp: np.ndarray
    senones: tuple
    final: np.ndarray = None
    histories: tuple = None

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64)
        order = np.lexsort((np.asarray(self.dst), src))
        for name in ("src", "dst", "label"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)[order]
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        logp = np.asarray(self.logp, dtype=np.float64)[order]
        logp.flags.writeable = False
        object.__setattr__(self, "logp", logp)
        final = np.zeros(self.num_states) if self.final is None \
            else np.asarray(self.final, dtype=np.float64)
        object.__setattr__(self, "final", final)
        object.__setattr__(self, "senones", tuple(self.senones))

    @classmethod
    def from_arcs(cls, num_states, start, arcs, senones, final=None):
        """``arcs`` is an iterable of ``(src, dst, senone_label, logp)``."""
        senones = tuple(senones)
        index = {s: i for i, s in enumerate(senones)}
        arcs = list(arcs)
        src = [a[0] for a in arcs]
        dst = [a[1] for a in arcs]
        try:
            lab = [index[a[2]] for a in arcs]
        except KeyError as e:
            raise UnknownSenone(e.args[0]) from None
        logp = [a[3] for a in arcs]
        return cls(num_states, start, src, dst, lab, logp, senones, final)

    @property
    def num_arcs(self):
        return len(self.src)

    @property
    def num_senones(self):
        return len(self.senones)

    @property
    def self_loops(self):
        """state -> (senone, logp) for every state carrying a self-loop."""
        out = {}
        for i in np.flatnonzero(self.src == self.dst):
            out[int(self.src[i])] = (self.senones[self.label[i]], float(self.logp[i]))
        return out

    @cached_property
    def indptr(self):
        return np.concatenate([[0], np.cumsum(np.bincount(self.src, minlength=self.num_states))])

    def transition_matrix(self, data):
        """CSR matrix (src x dst) with per-arc values ``data`` in arc order.

        Parallel arcs are kept as duplicate entries, which sparse products
        sum exactly as the path algebra requires.
        """
        return sp.csr_matrix((data, self.dst, self.indptr),
                             shape=(self.num_states, self.num_states))

    def outgoing_logsumexp(self):
        out = np.full(self.num_states, -np.inf)
        for s in range(self.num_states):
            lo, hi = self.indptr[s], self.indptr[s + 1]
            if hi > lo:
                out[s] = logsumexp(self.logp[lo:hi])
        return out

    def accessible(self):
        seen = np.zeros(self.num_states, bool)
        stack = [self.start]
        seen[self.start] = True
        while stack:
            s = stack.pop()
            for d in self.dst[self.indptr[s]:self.indptr[s + 1]]:
                if not seen[d]:
                    seen[d] = True
                    stack.append(int(d))
        return seen

    def coaccessible(self):
        rev = defaultdict(list)
        for s, d in zip(self.src, self.dst):
            rev[int(d)].append(int(s))
        seen = np.isfinite(self.final)
        stack = list(np.flatnonzero(seen))
        while stack:
            d = stack.pop()
            for s in rev[d]:
                if not seen[s]:
                    seen[s] = True
                    stack.append(s)
        return seen

    def trim(self):
        """Drop states that are not both accessible and co-accessible."""
        keep = self.accessible() & self.coaccessible()
        if keep.all():
            return self
        new_id = -np.ones(self.num_states, np.int64)
        new_id[keep] = np.arange(keep.sum())
        m = keep[self.src] & keep[self.dst]
        hist = None if self.histories is None else \
            tuple(h for h, k in zip(self.histories, keep) if k)
        return DenominatorGraph(int(keep.sum()), int(new_id[self.start]), new_id[self.src[m]],
                                new_id[self.dst[m]], self.label[m], self.logp[m],
                                self.senones, self.final[keep], hist)

    def to_text(self):
        lines = [f"{self.num_states} {self.start}"]
        for s, d, l, w in zip(self.src, self.dst, self.label, self.logp):
            lines.append(f"{s} {d} {self.senones[l]} {w:.17g}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def from_text(cls, text, senones=None):
        lines = [ln.split() for ln in text.splitlines() if ln.strip()]
        num_states, start = int(lines[0][0]), int(lines[0][1])
        arcs = [(int(a), int(b), lab, float(w)) for a, b, lab, w in lines[1:]]
        if senones is None:
            senones = sorted({a[2] for a in arcs}, key=_sort_key)
        else:
            senones = tuple(str(s) for s in senones)
        return cls.from_arcs(num_states, start, arcs, senones)

    @classmethod
    def read(cls, path, senones=None):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read(), senones)


def _backoff_tables(lm):
    """Pooled successor distributions used for histories with no data.

    The phone-level table pools the successors of every observed history
    whose current phone is the same; the global table pools all non-initial
    histories.
    """
    by_phone = defaultdict(lambda: defaultdict(int))
    pooled = defaultdict(int)
    for h, succ in lm.counts.items():
        if h == START:
            continue
        ph = current_phone(h, lm.phone_of)
        for s, c in succ.items():
            by_phone[ph][s] += c
            pooled[s] += c

    def norm(d):
        tot = sum(d.values())
        return {s: c / tot for s, c in d.items()}

    return {ph: norm(d) for ph, d in by_phone.items()}, (norm(pooled) if pooled else None)


def build_denominator_graph(lm, tm, senones=None):
    """Expand the mixed-history LM and HMM transitions into an acceptor.

    The start state is the empty history; its arcs carry the LM's initial
    senone distribution. Every other state emits its last senone on a
    self-loop (HMM self-loop probability) and leaves with the HMM exit
    probability times the LM successor probability. A history never seen
    with a successor backs off to the pooled distribution of its current
    phone, then to the global pool. All states are final with weight 0.
    """
    if not lm.counts:
        raise EmptyInput("empty language model")
    inventory = lm.senones
    missing = [s for s in inventory if s not in tm]
    if missing:
        raise IncompleteTransitionModel(f"no transition probabilities for {sorted(map(str, missing))}")
    if senones is None:
        senones = sorted(inventory, key=_sort_key)
    index = {s: i for i, s in enumerate(senones)}
    for s in inventory:
        if s not in index:
            raise UnknownSenone(s)

    by_phone, pooled = _backoff_tables(lm)

    def without(dist, cur):
        # repeats of the current senone are the self-loop's job
        if dist is None or cur not in dist:
            return dist
        rest = {s: p for s, p in dist.items() if s != cur}
        tot = sum(rest.values())
        return {s: p / tot for s, p in rest.items()} if rest else None

    def successors(h):
        if h in lm.table:
            return lm.table[h]
        cur = h.senones[-1]
        for dist in (by_phone.get(current_phone(h, lm.phone_of)), pooled, lm.table[START]):
            dist = without(dist, cur)
            if dist:
                return dist
        return {}

    state_of = {START: 0}
    order = [START]
    arcs = []
    i = 0
    while i < len(order):
        h = order[i]
        if h.senones:
            cur = h.senones[-1]
            if tm.self_loop[cur] > 0:
                arcs.append((i, i, index[cur], math.log(tm.self_loop[cur])))
            exit_lp = math.log(tm.exit[cur])
        else:
            exit_lp = 0.0
        for s, p in sorted(successors(h).items(), key=lambda kv: _sort_key(kv[0])):
            nh = next_history(h, s, lm.phone_of, lm.states_per_phone)
            if nh not in state_of:
                state_of[nh] = len(order)
                order.append(nh)
            arcs.append((i, state_of[nh], index[s], math.log(p) + exit_lp))
        i += 1

    src, dst, lab, logp = (np.array(c) for c in zip(*arcs))
    g = DenominatorGraph(len(order), 0, src, dst, lab, logp, tuple(senones),
                         None, tuple(order))
    return g.trim()


def read_alignments(path, phone_of):
    """Alignment file: ``utt_id senone senone ...`` per line."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                out.append(SenoneAlignment(parts[0], tuple(parts[1:]), phone_of))
    return out


def write_alignments(path, alignments):
    with open(path, "w", encoding="utf-8") as f:
        for ali in alignments:
            f.write(" ".join([ali.utt_id] + [str(s) for s in ali.frames]) + "\n")


def read_senone_table(path):
    """Senone table file: ``senone_id phone_id`` pairs."""
    table = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                table[parts[0]] = parts[1]
    return table


def write_senone_table(path, phone_of):
    with open(path, "w", encoding="utf-8") as f:
        for s in sorted(phone_of, key=_sort_key):
            f.write(f"{s} {phone_of[s]}\n")
