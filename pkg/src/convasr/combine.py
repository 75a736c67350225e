"""Confusion networks, ROVER-style combination, greedy system selection and EM weights."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, EmptyInput, InvalidConfig, UtteranceMismatch
from .rescore import AM, ScoreWeights, score_hypothesis
from .score import score_corpus

EPS = "<eps>"
LADDER = (1.0, 0.5, 0.2, 0.1)


@dataclass
class ConfusionNetwork:
    utt_id: str
    slots: list  # of dict token -> posterior

    def __post_init__(self):
        self.slots = [dict(s) for s in self.slots]
        for i, s in enumerate(self.slots):
            tot = math.fsum(s.values())
            if abs(tot - 1.0) > 1e-8 or any(p < 0 for p in s.values()):
                raise InvalidConfig(f"{self.utt_id}: slot {i} posteriors sum to {tot}")

    def __len__(self):
        return len(self.slots)

    def to_json(self):
        return json.dumps({"utt_id": self.utt_id,
                           "slots": [{"tokens": {k: s[k] for k in sorted(s)}} for s in self.slots]})

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(d["utt_id"], [s["tokens"] for s in d["slots"]])


def _normalize(slot, total=None):
    total = math.fsum(slot.values()) if total is None else total
    return {k: v / total for k, v in slot.items() if v > 0}


# ---- N-best -> CN ------------------------------------------------------

@dataclass(frozen=True)
class CnCosts:
    mismatch: float = 1.0
    eps_with_mass: float = 0.5
    eps_without_mass: float = 1.0
    insert: float = 1.0


def hypothesis_posteriors(nbest, weights=None, posterior_scale=0.05):
    """Softmax of ``posterior_scale`` times the combined hypothesis scores.

    Scores are first expressed in acoustic units: when the acoustic weight
    is positive the whole weight vector is divided by it, so the scale
    means the same thing whatever overall magnitude the weight search
    happened to settle on.
    """
    weights = weights if weights is not None else ScoreWeights({AM: 1.0})
    am = weights.get(AM, 0.0)
    if am > 0:
        weights = weights.scaled(1.0 / am)
    s = np.array([score_hypothesis(h, weights) for h in nbest.hypotheses]) * posterior_scale
    s = np.exp(s - s.max())
    return s / s.sum()


def _align_hyp(slots, words, costs):
    """Min-cost alignment of ``words`` to the slot sequence.

    Returns a list of ops: ("match", slot, word), ("skip", slot, None),
    ("insert", None, word), in order.
    """
    n, m = len(slots), len(words)
    D = np.zeros((n + 1, m + 1))
    for i in range(1, n + 1):
        D[i, 0] = D[i - 1, 0] + _skip_cost(slots[i - 1], costs)
    for j in range(1, m + 1):
        D[0, j] = D[0, j - 1] + costs.insert
    for i in range(1, n + 1):
        sk = _skip_cost(slots[i - 1], costs)
        for j in range(1, m + 1):
            sub = 0.0 if slots[i - 1].get(words[j - 1], 0.0) > 0 else costs.mismatch
            D[i, j] = min(D[i - 1, j - 1] + sub, D[i - 1, j] + sk, D[i, j - 1] + costs.insert)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            sub = 0.0 if slots[i - 1].get(words[j - 1], 0.0) > 0 else costs.mismatch
            if D[i, j] == D[i - 1, j - 1] + sub:
                ops.append(("match", i - 1, words[j - 1]))
                i, j = i - 1, j - 1
                continue
        if i > 0 and D[i, j] == D[i - 1, j] + _skip_cost(slots[i - 1], costs):
            ops.append(("skip", i - 1, None))
            i -= 1
            continue
        ops.append(("insert", None, words[j - 1]))
        j -= 1
    return ops[::-1]


def _skip_cost(slot, costs):
    return costs.eps_with_mass if slot.get(EPS, 0.0) > 0 else costs.eps_without_mass


def build_confusion_network(nbest, posterior_scale=0.05, weights=None, posteriors=None,
                            costs=CnCosts()):
    """Align hypotheses best-first into slots of summed posteriors.

    Each hypothesis is aligned by edit distance against the network built
    so far: a word matching a token already in the slot costs 0, any other
    word 1; leaving a slot empty costs 0.5 when the slot already carries
    empty-token mass and 1 otherwise; a word needing a new slot costs 1.
    """
    post = np.asarray(posteriors if posteriors is not None
                      else hypothesis_posteriors(nbest, weights, posterior_scale), dtype=float)
    if post.shape != (len(nbest.hypotheses),) or np.any(post < 0) or post.sum() <= 0:
        raise InvalidConfig("hypothesis posteriors must be non-negative with positive sum")
    post = post / post.sum()
    order = sorted(range(len(post)), key=lambda i: -post[i])
    slots = []
    mass = 0.0
    for i in order:
        p = float(post[i])
        if p == 0:
            continue
        words = nbest.hypotheses[i].words
        new = []
        for op, si, w in _align_hyp(slots, words, costs):
            if op == "match":
                slot = slots[si]
                slot[w] = slot.get(w, 0.0) + p
                new.append(slot)
            elif op == "skip":
                slot = slots[si]
                slot[EPS] = slot.get(EPS, 0.0) + p
                new.append(slot)
            else:
                slot = {w: p}
                if mass > 0:
                    slot[EPS] = mass
                new.append(slot)
        slots = new
        mass += p
    out = [_normalize(s, mass) for s in slots]
    # a slot that is empty-token only carries no information
    out = [s for s in out if set(s) != {EPS}]
    return ConfusionNetwork(nbest.utt_id, out)


def cn_decode(cn):
    """Per-slot argmax; the empty token emits nothing; ties go to the smallest token."""
    words = []
    for slot in cn.slots:
        best = min(slot, key=lambda t: (-slot[t], t))
        if best != EPS:
            words.append(best)
    return words


# ---- multi-system alignment -------------------------------------------

@dataclass(frozen=True)
class CombinationWeights:
    weights: tuple

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if not w or any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise InvalidConfig(f"combination weights must be >= 0 and sum to 1, got {w}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, raw):
        raw = [float(x) for x in raw]
        tot = math.fsum(raw)
        if tot <= 0:
            raise InvalidConfig("combination weights need positive mass")
        w = [x / tot for x in raw]
        # push the rounding residue into the largest entry
        k = int(np.argmax(w))
        w[k] += 1.0 - math.fsum(w)
        return cls(tuple(w))

    def __len__(self):
        return len(self.weights)

    def __iter__(self):
        return iter(self.weights)

    def __getitem__(self, i):
        return self.weights[i]


def _tv(p, q):
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


@dataclass
class AlignedSlots:
    """Slots shared by several networks; ``parts[i][k]`` is system k's distribution."""

    utt_id: str
    parts: list
    weights: tuple

    def blended(self, i):
        out = {}
        for w, d in zip(self.weights, self.parts[i]):
            if w == 0 or d is None:
                continue
            for t, p in d.items():
                out[t] = out.get(t, 0.0) + w * p
        return out


def align_networks(cns, weights):
    """Slot-wise alignment of several networks by total-variation edit distance.

    Networks are folded in order; zero-weight networks are still aligned
    (so per-system distributions exist for every slot) but never move the
    blend used for alignment once a positive-weight network is present.
    """
    if not cns:
        raise EmptyInput("no confusion networks to combine")
    utt = cns[0].utt_id
    for cn in cns[1:]:
        if cn.utt_id != utt:
            raise UtteranceMismatch(f"{cn.utt_id} != {utt}")
    w = CombinationWeights(weights) if not isinstance(weights, CombinationWeights) else weights
    if len(w) != len(cns):
        raise InvalidConfig(f"{len(w)} weights for {len(cns)} networks")
    K = len(cns)
    order = sorted(range(K), key=lambda k: (w[k] == 0, k))
    parts = []       # list of [dist or None] * K
    blend = []       # running blended mass
    wsum = 0.0
    for k in order:
        slots_k = cns[k].slots
        if not parts:
            parts = [[None] * K for _ in slots_k]
            for i, s in enumerate(slots_k):
                parts[i][k] = dict(s)
            blend = [{t: w[k] * p for t, p in s.items()} for s in slots_k]
            wsum = w[k]
            continue
        cur = [_normalize(b, wsum) for b in blend]
        ops = _align_slots(cur, slots_k)
        new_parts, new_blend = [], []
        for op, i, j in ops:
            if op == "match":
                row, b = parts[i], blend[i]
                row[k] = dict(slots_k[j])
                for t, p in slots_k[j].items():
                    b[t] = b.get(t, 0.0) + w[k] * p
            elif op == "skip":
                row, b = parts[i], blend[i]
                row[k] = {EPS: 1.0}
                b[EPS] = b.get(EPS, 0.0) + w[k]
            else:
                row = [None] * K
                for kk in range(K):
                    if kk != k and any(p[kk] is not None for p in parts):
                        row[kk] = {EPS: 1.0}
                row[k] = dict(slots_k[j])
                b = {t: w[k] * p for t, p in slots_k[j].items()}
                if wsum > 0:
                    b[EPS] = b.get(EPS, 0.0) + wsum
            new_parts.append(row)
            new_blend.append(b)
        parts, blend = new_parts, new_blend
        wsum += w[k]
    for row in parts:
        for kk in range(K):
            if row[kk] is None:
                row[kk] = {EPS: 1.0}
    return AlignedSlots(utt, parts, w.weights)


def _align_slots(a, b):
    n, m = len(a), len(b)
    skip = [1.0 - s.get(EPS, 0.0) for s in a]
    ins = [1.0 - s.get(EPS, 0.0) for s in b]
    D = np.zeros((n + 1, m + 1))
    for i in range(1, n + 1):
        D[i, 0] = D[i - 1, 0] + skip[i - 1]
    for j in range(1, m + 1):
        D[0, j] = D[0, j - 1] + ins[j - 1]
    sub = np.array([[_tv(a[i], b[j]) for j in range(m)] for i in range(n)]).reshape(n, m)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = min(D[i - 1, j - 1] + sub[i - 1, j - 1], D[i - 1, j] + skip[i - 1],
                          D[i, j - 1] + ins[j - 1])
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + sub[i - 1, j - 1]:
            ops.append(("match", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and D[i, j] == D[i - 1, j] + skip[i - 1]:
            ops.append(("skip", i - 1, None))
            i -= 1
        else:
            ops.append(("insert", None, j - 1))
            j -= 1
    return ops[::-1]


def rover_combine(cns, weights):
    """Weight-blended network over slot-aligned inputs, normalized per slot."""
    aligned = align_networks(cns, weights)
    # inputs are normalized, so the blend sums to the weight total
    tot = math.fsum(aligned.weights)
    slots = []
    for i in range(len(aligned.parts)):
        s = _normalize(aligned.blended(i), tot)
        if not s:
            continue
        if set(s) != {EPS}:
            slots.append(s)
    return ConfusionNetwork(aligned.utt_id, slots)


# ---- system sets, selection, EM ---------------------------------------

@dataclass
class SystemSet:
    systems: dict          # system id -> {utt_id: ConfusionNetwork}
    refs: dict = None      # utt_id -> reference words

    def __post_init__(self):
        if not self.systems:
            raise EmptyInput("empty system set")
        ids = None
        for name, cns in self.systems.items():
            if ids is None:
                ids = set(cns)
            elif set(cns) != ids:
                raise UtteranceMismatch(f"system {name} covers different utterances")
        if self.refs is not None and set(self.refs) != ids:
            raise UtteranceMismatch("references cover different utterances than the systems")

    @property
    def names(self):
        return list(self.systems)

    @property
    def utt_ids(self):
        return sorted(next(iter(self.systems.values())))


def combine_systems(pool, names, weights):
    """Per-utterance ROVER of the named systems."""
    w = CombinationWeights.normalized(weights) if not isinstance(weights, CombinationWeights) \
        else weights
    return {u: rover_combine([pool.systems[n][u] for n in names], w) for u in pool.utt_ids}


def corpus_wer(cns, refs):
    hyps = {u: cn_decode(cn) for u, cn in cns.items()}
    return score_corpus(refs, hyps)[0].wer


def system_wer(pool, names, weights):
    if pool.refs is None:
        raise EmptyInput("system set has no references")
    return corpus_wer(combine_systems(pool, names, weights), pool.refs)


@dataclass
class GreedyResult:
    selected: list
    weights: CombinationWeights
    trace: list               # dev WER after each accepted step, strictly decreasing
    rounds: list = field(default_factory=list)


def greedy_select(pool, ladder=LADDER, estimate_weights=False, smooth=0.5):
    """Forward selection of systems on the dev references of ``pool``.

    Starts from the best single system. Each round tries every unused
    system at relative weight ``ladder[0]``, then ``ladder[1]`` and so on
    (relative to the unnormalized weight 1 of the starting system) and
    accepts the best candidate of the first level that strictly lowers
    dev WER; the search halts when no level improves. With
    ``estimate_weights`` the candidate weights are re-estimated by EM and
    smoothed toward the ladder-initialized vector.
    """
    if pool.refs is None:
        raise EmptyInput("greedy selection needs dev references")
    names = pool.names
    singles = [(system_wer(pool, [n], [1.0]), i, n) for i, n in enumerate(names)]
    best_wer, _, first = min(singles)
    selected = [first]
    raw = [1.0]
    weights = CombinationWeights((1.0,))
    trace = [best_wer]
    rounds = [{"round": 0, "system": first, "relative_weight": 1.0,
               "weights": list(weights.weights), "dev_wer": best_wer}]
    while True:
        accepted = None
        for rel in ladder:
            cands = []
            for i, n in enumerate(names):
                if n in selected:
                    continue
                trial_raw = raw + [rel]
                w = CombinationWeights.normalized(trial_raw)
                if estimate_weights:
                    cns = [[pool.systems[s][u] for s in selected + [n]] for u in pool.utt_ids]
                    refs = [pool.refs[u] for u in pool.utt_ids]
                    try:
                        w = em_weights(cns, refs, w, smooth=smooth).weights
                    except DegenerateInput:
                        pass
                cands.append((system_wer(pool, selected + [n], w), i, n, w, trial_raw))
            if not cands:
                break
            cw, _, n, w, trial_raw = min(cands, key=lambda c: (c[0], c[1]))
            if cw < trace[-1]:
                accepted = (cw, n, w, trial_raw, rel)
                break
        if accepted is None:
            break
        cw, n, w, trial_raw, rel = accepted
        selected.append(n)
        raw = trial_raw if not estimate_weights else list(w.weights)
        weights = w
        trace.append(cw)
        rounds.append({"round": len(rounds), "system": n, "relative_weight": rel,
                       "weights": list(w.weights), "dev_wer": cw})
    return GreedyResult(selected, weights, trace, rounds)


@dataclass
class EmResult:
    weights: CombinationWeights
    objectives: list
    iterations: int
    n_slots: int


def _align_reference(slots, ref):
    """Correct token (word or empty) of each slot after aligning the reference.

    Costs: matching a slot with a reference word costs ``1 - P(word)``,
    leaving a slot unmatched costs ``1 - P(eps)``, an unaligned reference
    word costs 1. Returns one token per slot.
    """
    n, m = len(slots), len(ref)
    skip = [1.0 - s.get(EPS, 0.0) for s in slots]
    D = np.zeros((n + 1, m + 1))
    for i in range(1, n + 1):
        D[i, 0] = D[i - 1, 0] + skip[i - 1]
    D[0, 1:] = np.arange(1, m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = min(D[i - 1, j - 1] + 1.0 - slots[i - 1].get(ref[j - 1], 0.0),
                          D[i - 1, j] + skip[i - 1], D[i, j - 1] + 1.0)
    tokens = [EPS] * n
    i, j = n, m
    while i > 0 and j > 0:
        if D[i, j] == D[i - 1, j - 1] + 1.0 - slots[i - 1].get(ref[j - 1], 0.0):
            tokens[i - 1] = ref[j - 1]
            i, j = i - 1, j - 1
        elif D[i, j] == D[i - 1, j] + skip[i - 1]:
            i -= 1
        else:
            j -= 1
    return tokens


def em_weights(cns_per_utt, refs, init, smooth=0.5, max_iter=50, tol=1e-6, hierarchical=True):
    """Mixture weights maximizing the weighted probability of the correct tokens.

    ``cns_per_utt[u]`` lists one network per system for utterance ``u``.
    The networks are slot-aligned with the ``init`` weights, the reference
    is aligned to the blended slots, and EM runs on the per-slot
    probabilities each system gives the correct token. The final weights
    are ``smooth * EM + (1 - smooth) * init`` when ``hierarchical``.
    """
    init = init if isinstance(init, CombinationWeights) else CombinationWeights(init)
    K = len(init)
    if K == 1:
        return EmResult(init, [], 0, 0)
    rows = []
    for cns, ref in zip(cns_per_utt, refs):
        aligned = align_networks(list(cns), init)
        blended = [_normalize(aligned.blended(i)) if aligned.blended(i) else {EPS: 1.0}
                   for i in range(len(aligned.parts))]
        tokens = _align_reference(blended, list(ref))
        for i, tok in enumerate(tokens):
            rows.append([aligned.parts[i][k].get(tok, 0.0) for k in range(K)])
    Q = np.array(rows).reshape(-1, K)
    Q = Q[Q.max(axis=1) > 0]
    if Q.shape[0] == 0:
        raise DegenerateInput("no reference-aligned slots with positive probability")
    w = np.array(init.weights)
    if np.all(Q @ w == 0):
        w = np.full(K, 1.0 / K)
    objectives = []
    it = 0
    for it in range(1, max_iter + 1):
        mix = Q @ w
        obj = float(np.sum(np.log(mix, where=mix > 0, out=np.full_like(mix, -np.inf))))
        objectives.append(obj)
        if len(objectives) > 1 and objectives[-1] - objectives[-2] < tol:
            break
        valid = mix > 0
        resp = (Q[valid] * w) / mix[valid, None]
        w = resp.sum(axis=0) / valid.sum()
    em = CombinationWeights.normalized(w)
    if hierarchical:
        final = CombinationWeights.normalized(smooth * np.array(em.weights)
                                              + (1.0 - smooth) * np.array(init.weights))
    else:
        final = em
    return EmResult(final, objectives, it, int(Q.shape[0]))


@dataclass
class TwoStageResult:
    groups: dict          # group name -> member system ids
    group_pool: SystemSet
    selection: GreedyResult


def group_name(members):
    return "+".join(members)


def two_stage_combine(groups, ladder=LADDER, estimate_weights=False):
    """Equal-weight ROVER inside each group, then greedy selection over groups.

    ``groups`` is a list of SystemSets sharing utterances and references.
    """
    if not groups:
        raise EmptyInput("no system groups")
    systems = {}
    members = {}
    refs = groups[0].refs
    for g in groups:
        names = g.names
        name = group_name(names)
        members[name] = names
        systems[name] = combine_systems(g, names, [1.0] * len(names))
        if refs is None:
            refs = g.refs
    pool = SystemSet(systems, refs)
    sel = greedy_select(pool, ladder, estimate_weights)
    return TwoStageResult(members, pool, sel)


def apply_two_stage(result, groups):
    """Run the selected two-stage combination on another split (e.g. eval)."""
    systems = {}
    for g in groups:
        systems[group_name(g.names)] = combine_systems(g, g.names, [1.0] * len(g.names))
    pool = SystemSet(systems)
    return combine_systems(pool, result.selection.selected, result.selection.weights)


def combination_report(sel):
    lines = [f"{'round':>5}  {'system':<24} {'rel.w':>6}  {'dev WER':>8}  weights"]
    for r in sel.rounds:
        ws = " ".join(f"{x:.4f}" for x in r["weights"])
        lines.append(f"{r['round']:>5}  {r['system']:<24} {r['relative_weight']:>6.2f}  "
                     f"{r['dev_wer']:>8.3f}  {ws}")
    return "\n".join(lines) + "\n"


def write_cns(path, cns):
    with open(path, "w", encoding="utf-8") as f:
        for cn in cns:
            f.write(cn.to_json() + "\n")


def read_cns(path):
    with open(path, encoding="utf-8") as f:
        return [ConfusionNetwork.from_json(line) for line in f if line.strip()]
