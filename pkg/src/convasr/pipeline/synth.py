"""Seeded synthetic world: lexicon, grammar, features and per-system N-best lists.

Every random draw comes from a named sub-stream of the world seed, so
changing one part of the generator (say the number of systems) leaves the
other parts untouched.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InvalidConfig, IoError
from ..graph import SenoneAlignment, write_alignments, write_senone_table
from ..rescore import Hypothesis, NBestList, read_nbest, write_nbest
from ..score import read_references, write_references

CONSONANTS = ("b", "d", "g", "k", "m", "n", "p", "s", "t", "v", "z", "l")
VOWELS = ("a", "e", "i", "o", "u", "y")


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 17
    n_words: int = 40
    n_phones: int = 12
    states_per_phone: int = 3
    n_train: int = 200
    n_dev: int = 50
    n_eval: int = 50
    n_systems: int = 3
    error_correlation: float = 0.0
    nbest: int = 500
    pool_size: int = 40
    p_reference_in_pool: float = 0.85
    pool_anchors: int = 3
    feat_dim: int = 16
    n_sides: int = 20
    speaker_dim: int = 100
    mean_scale: float = 0.4
    pair_spread: float = 0.5
    frame_noise: float = 1.0
    speaker_scale: float = 0.05
    system_noise: float = 3.0
    noise_block: int = 8
    mean_duration: float = 3.0
    in_domain_words: int = 10_000
    out_domain_words: int = 10_000
    validation_words: int = 2_000
    grammar_successors: int = 10

    def __post_init__(self):
        if self.n_phones < 2 or self.n_phones % 2:
            raise InvalidConfig("n_phones must be an even number >= 2")
        if not 0.0 <= self.error_correlation <= 1.0:
            raise InvalidConfig("error_correlation must lie in [0, 1]")
        if self.n_systems < 1 or self.n_words < 2:
            raise InvalidConfig("need at least one system and two words")
        if self.n_phones > len(CONSONANTS) + len(VOWELS):
            raise InvalidConfig(f"at most {len(CONSONANTS) + len(VOWELS)} phones")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown world keys: {sorted(unknown)}")
        return cls(**d)


def stream(seed, name):
    """Independent generator for one named purpose."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class Utterance:
    utt_id: str
    words: tuple
    senones: tuple      # frame-level senone labels
    features: np.ndarray
    side: int
    speaker: np.ndarray = None

    @property
    def alignment(self):
        return self.senones


@dataclass
class SyntheticWorld:
    spec: WorldSpec
    phones: tuple
    senones: tuple
    phone_of: dict
    lexicon: dict
    grammar: np.ndarray      # (W + 1) x (W + 1): row 0 = start, column 0 = end
    means: np.ndarray        # S x F
    projection: np.ndarray   # F x speaker_dim
    speakers: np.ndarray     # n_sides x speaker_dim
    splits: dict = field(default_factory=dict)
    texts: dict = field(default_factory=dict)
    nbest: dict = field(default_factory=dict)  # (system, split) -> [NBestList]

    @property
    def words(self):
        return tuple(self.lexicon)

    @property
    def systems(self):
        return tuple(f"sys{k + 1}" for k in range(self.spec.n_systems))

    def references(self, split):
        return {u.utt_id: list(u.words) for u in self.splits[split]}

    def senone_sequence(self, words):
        out = []
        for w in words:
            for ph in self.lexicon[w]:
                out.extend(f"{ph}_s{j + 1}" for j in range(self.spec.states_per_phone))
        return out

    def alignments(self, split):
        return [SenoneAlignment(u.utt_id, u.senones, self.phone_of) for u in self.splits[split]]


# ---- lexicon and grammar ----------------------------------------------

def _phones(n):
    nv = n // 3
    return CONSONANTS[:n - nv] + VOWELS[:nv]


def _lexicon(rng, phones, n_words):
    cons = [p for p in phones if p in CONSONANTS]
    vows = [p for p in phones if p in VOWELS]
    patterns = ("CV", "CVC", "VC", "CVCV", "CVV", "VCV")
    words = {}
    tries = 0
    while len(words) < n_words:
        tries += 1
        if tries > 100_000:
            raise InvalidConfig("cannot build a lexicon of distinct words")
        pat = patterns[rng.integers(len(patterns))]
        pron = tuple(rng.choice(cons) if c == "C" else rng.choice(vows) for c in pat)
        pron = tuple(str(p) for p in pron)
        spelling = "".join(pron)
        if spelling not in words:
            words[spelling] = pron
    return dict(sorted(words.items()))


def _grammar(rng, n_words, k):
    """Sparse bigram grammar; index 0 is the sentence boundary."""
    V = n_words + 1
    G = np.zeros((V, V))
    zipf = 1.0 / np.arange(1, n_words + 1) ** 0.7
    zipf = zipf[rng.permutation(n_words)]
    for i in range(V):
        succ = rng.choice(n_words, size=min(k, n_words), replace=False, p=zipf / zipf.sum()) + 1
        G[i, succ] = rng.dirichlet(np.full(len(succ), 0.6))
        if i > 0:
            G[i] *= 0.82
            G[i, 0] = 0.18
    return G


def _sample_sentence(rng, G, words, max_len=14):
    out = []
    state = 0
    while True:
        row = G[state].copy()
        if len(out) >= max_len:
            break
        if not out:
            row[0] = 0.0
        row /= row.sum()
        nxt = int(rng.choice(len(row), p=row))
        if nxt == 0:
            break
        out.append(words[nxt - 1])
        state = nxt
    return tuple(out)


def _sample_text(rng, G, words, n_words_target):
    sents, n = [], 0
    while n < n_words_target:
        s = _sample_sentence(rng, G, words)
        sents.append(s)
        n += len(s)
    return sents


# ---- acoustics -----------------------------------------------------------

def _senone_means(rng, phones, spec):
    """Phones come in confusable pairs: shared base mean plus a small offset."""
    S = []
    means = []
    bases = {}
    for i, ph in enumerate(phones):
        pair = i // 2
        for j in range(spec.states_per_phone):
            key = (pair, j)
            if key not in bases:
                bases[key] = rng.normal(0.0, spec.mean_scale, spec.feat_dim)
            means.append(bases[key] + rng.normal(0.0, spec.mean_scale * spec.pair_spread,
                                                 spec.feat_dim))
            S.append(f"{ph}_s{j + 1}")
    return tuple(S), np.array(means)


def _durations(rng, n, mean):
    p = 1.0 / mean
    return rng.geometric(p, size=n)


def _make_utterance(world, rng, utt_id, words):
    spec = world.spec
    seq = world.senone_sequence(words)
    dur = _durations(rng, len(seq), spec.mean_duration)
    frames = tuple(s for s, d in zip(seq, dur) for _ in range(int(d)))
    side = int(rng.integers(spec.n_sides))
    idx = {s: i for i, s in enumerate(world.senones)}
    mu = world.means[[idx[s] for s in frames]]
    shift = world.projection @ world.speakers[side]
    feats = mu + shift + rng.normal(0.0, spec.frame_noise, mu.shape)
    return Utterance(utt_id, tuple(words), frames, feats, side, world.speakers[side])


def emission_loglikes(world, utt):
    """Speaker-adapted Gaussian log-likelihoods (T x S), constant dropped."""
    shift = world.projection @ world.speakers[utt.side]
    diff = utt.features[:, None, :] - (world.means + shift)[None, :, :]
    return -0.5 * np.sum(diff ** 2, axis=2) / world.spec.frame_noise ** 2


def viterbi_scores(loglikes, senone_ids):
    """Best left-to-right alignment score of each senone sequence (batched).

    ``senone_ids`` is a list of integer arrays; each senone must occupy at
    least one frame. Sequences longer than the utterance get ``-inf``.
    """
    T = loglikes.shape[0]
    C = len(senone_ids)
    N = max(len(s) for s in senone_ids)
    B = np.full((C, N, T), -np.inf)
    for c, s in enumerate(senone_ids):
        B[c, :len(s)] = loglikes[:, s].T
    V = np.full((C, N), -np.inf)
    V[:, 0] = B[:, 0, 0]
    for t in range(1, T):
        prev = V.copy()
        stay = prev
        move = np.concatenate([np.full((C, 1), -np.inf), prev[:, :-1]], axis=1)
        V = np.maximum(stay, move) + B[:, :, t]
    lengths = np.array([len(s) for s in senone_ids])
    return V[np.arange(C), lengths - 1]


def _phone_distance(a, b):
    n, m = len(a), len(b)
    D = np.zeros((n + 1, m + 1), dtype=int)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = min(D[i - 1, j] + 1, D[i, j - 1] + 1,
                          D[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return D[n, m]


def _confusions(lexicon, phones):
    """Substitution probabilities favouring words that sound alike."""
    pair = {ph: i // 2 for i, ph in enumerate(phones)}
    words = list(lexicon)
    out = {}
    for w in words:
        pw = tuple(pair[p] for p in lexicon[w])
        d = np.array([_phone_distance(pw, tuple(pair[p] for p in lexicon[v])) +
                      0.5 * _phone_distance(lexicon[w], lexicon[v]) for v in words], float)
        p = np.exp(-1.5 * d)
        p[words.index(w)] = 0.0
        out[w] = p / p.sum()
    return words, out


def _edit(rng, hyp, words, conf, mean_edits):
    hyp = list(hyp)
    for _ in range(int(rng.poisson(mean_edits))):
        r = rng.random()
        if r < 0.7 and hyp:
            i = int(rng.integers(len(hyp)))
            hyp[i] = words[int(rng.choice(len(words), p=conf[hyp[i]]))]
        elif r < 0.85 and len(hyp) > 1:
            del hyp[int(rng.integers(len(hyp)))]
        else:
            hyp.insert(int(rng.integers(len(hyp) + 1)), words[int(rng.integers(len(words)))])
    return tuple(hyp)


def _candidate_pool(rng, ref, words, conf, spec):
    """Competing hypotheses clustered around a few erroneous anchors.

    Real N-best lists are mostly small variations of the top paths rather
    than independent perturbations of the truth, so a flat vote over the
    pool does not simply recover the reference.
    """
    ref = tuple(ref)
    anchors = []
    while len(anchors) < spec.pool_anchors:
        a = _edit(rng, ref, words, conf, 1.5)
        if a and a != ref:
            anchors.append(a)
    pool, seen = [], set()
    if rng.random() < spec.p_reference_in_pool:
        pool.append(ref)
        seen.add(ref)
    attempts = 0
    while len(pool) < spec.pool_size and attempts < 20 * spec.pool_size:
        attempts += 1
        base = ref if rng.random() < 0.25 else anchors[int(rng.integers(len(anchors)))]
        hyp = _edit(rng, base, words, conf, 0.8)
        if hyp and hyp not in seen:
            seen.add(hyp)
            pool.append(hyp)
    return pool


def _block_noise(rng, shape, block):
    """Standard normal noise held constant over runs of ``block`` frames."""
    T, S = shape
    z = rng.normal(size=(-(-T // block), S))
    return np.repeat(z, block, axis=0)[:T]


def _system_nbest(world, split, words, conf):
    """N-best lists of every system for one split.

    Each system sees the true log-likelihoods plus noise mixed from a
    shared and a private component with weights sqrt(rho) and sqrt(1 - rho).
    """
    spec = world.spec
    rho = spec.error_correlation
    idx = {s: i for i, s in enumerate(world.senones)}
    out = {name: [] for name in world.systems}
    pool_rng = stream(spec.seed, f"pool/{split}")
    shared_rng = stream(spec.seed, f"noise/shared/{split}")
    sys_rngs = {name: stream(spec.seed, f"noise/{name}/{split}") for name in world.systems}
    for utt in world.splits[split]:
        pool = _candidate_pool(pool_rng, utt.words, words, conf, spec)
        ll = emission_loglikes(world, utt)
        ids = [np.array([idx[s] for s in world.senone_sequence(h)]) for h in pool]
        T = ll.shape[0]
        keep = [i for i, s in enumerate(ids) if len(s) <= T]
        pool = [pool[i] for i in keep]
        ids = [ids[i] for i in keep]
        shared = _block_noise(shared_rng, ll.shape, spec.noise_block)
        for name in world.systems:
            own = _block_noise(sys_rngs[name], ll.shape, spec.noise_block)
            if rho >= 1.0:
                noise = shared
            elif rho <= 0.0:
                noise = own
            else:
                noise = math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own
            scores = viterbi_scores(ll + spec.system_noise * noise, ids)
            order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i]))[:spec.nbest]
            hyps = [Hypothesis(pool[i], {"am_score": float(scores[i])}) for i in order]
            out[name].append(NBestList(utt.utt_id, hyps, name))
    return out


def build_world(spec=WorldSpec()):
    """Generate the whole world in memory."""
    seed = spec.seed
    phones = _phones(spec.n_phones)
    lexicon = _lexicon(stream(seed, "lexicon"), phones, spec.n_words)
    words = list(lexicon)
    G = _grammar(stream(seed, "grammar"), len(words), spec.grammar_successors)
    G_ood = 0.5 * G + 0.5 * _grammar(stream(seed, "grammar/ood"), len(words),
                                     spec.grammar_successors)
    senones, means = _senone_means(stream(seed, "means"), phones, spec)
    phone_of = {s: s.split("_")[0] for s in senones}
    rng = stream(seed, "speakers")
    speakers = rng.normal(size=(spec.n_sides, spec.speaker_dim))
    projection = rng.normal(0.0, spec.speaker_scale, (spec.feat_dim, spec.speaker_dim))
    world = SyntheticWorld(spec, phones, senones, phone_of, lexicon, G, means, projection,
                           speakers)
    world.texts = {
        "in_domain": _sample_text(stream(seed, "text/in"), G, words, spec.in_domain_words),
        "out_domain": _sample_text(stream(seed, "text/out"), G_ood, words,
                                   spec.out_domain_words),
        "validation": _sample_text(stream(seed, "text/valid"), G, words,
                                   spec.validation_words),
    }
    for split, n in (("train", spec.n_train), ("dev", spec.n_dev), ("eval", spec.n_eval)):
        rng = stream(seed, f"utts/{split}")
        utts = []
        for i in range(n):
            ws = _sample_sentence(rng, G, words)
            utts.append(_make_utterance(world, rng, f"{split}_{i:04d}", ws))
        world.splits[split] = utts
    wlist, conf = _confusions(lexicon, phones)
    for split in ("dev", "eval"):
        for name, lists in _system_nbest(world, split, wlist, conf).items():
            world.nbest[(name, split)] = lists
    return world


# ---- disk layout ----------------------------------------------------------

def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def gen_synthetic(spec, out_dir):
    """Write the world to ``out_dir`` and return it.

    Layout: ``world.json``, ``senones.txt``, ``lexicon.txt``, ``text/*.txt``,
    ``speakers.npy``, per split ``<split>/references.txt``,
    ``alignments.txt``, ``features.npy`` (all frames stacked) and
    ``index.txt`` (``utt_id start end side``), and
    ``nbest/<system>.<split>.jsonl``.
    """
    world = build_world(spec)
    try:
        os.makedirs(out_dir, exist_ok=True)
        for sub in ("text", "nbest", "train", "dev", "eval"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        with open(os.path.join(out_dir, "world.json"), "w", encoding="utf-8") as f:
            json.dump({"spec": asdict(spec), "phones": list(world.phones),
                       "systems": list(world.systems)}, f, indent=2, sort_keys=True)
            f.write("\n")
        write_senone_table(os.path.join(out_dir, "senones.txt"), world.phone_of)
        _write_lines(os.path.join(out_dir, "lexicon.txt"),
                     [" ".join((w,) + p) for w, p in world.lexicon.items()])
        for name, sents in world.texts.items():
            _write_lines(os.path.join(out_dir, "text", f"{name}.txt"),
                         [" ".join(s) for s in sents])
        np.save(os.path.join(out_dir, "speakers.npy"), world.speakers)
        for split, utts in world.splits.items():
            d = os.path.join(out_dir, split)
            write_references(os.path.join(d, "references.txt"), world.references(split))
            write_alignments(os.path.join(d, "alignments.txt"), world.alignments(split))
            feats = np.concatenate([u.features for u in utts])
            np.save(os.path.join(d, "features.npy"), feats)
            lines, start = [], 0
            for u in utts:
                lines.append(f"{u.utt_id} {start} {start + len(u.features)} {u.side}")
                start += len(u.features)
            _write_lines(os.path.join(d, "index.txt"), lines)
        for (name, split), lists in sorted(world.nbest.items()):
            write_nbest(os.path.join(out_dir, "nbest", f"{name}.{split}.jsonl"), lists)
    except OSError as e:
        raise IoError(f"cannot write synthetic world to {out_dir}: {e}") from e
    return world


def load_world(out_dir):
    """Rebuild a world from disk (metadata regenerated from the stored spec)."""
    try:
        with open(os.path.join(out_dir, "world.json"), encoding="utf-8") as f:
            meta = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read {out_dir}/world.json: {e}") from e
    spec = WorldSpec.from_dict(meta["spec"])
    world = build_world(spec)
    # on-disk artifacts win over regenerated ones
    for split in world.splits:
        d = os.path.join(out_dir, split)
        refs = read_references(os.path.join(d, "references.txt"))
        feats = np.load(os.path.join(d, "features.npy"))
        with open(os.path.join(d, "index.txt"), encoding="utf-8") as f:
            index = [line.split() for line in f if line.strip()]
        by_id = {u.utt_id: u for u in world.splits[split]}
        for utt_id, a, b, side in index:
            u = by_id[utt_id]
            u.features = feats[int(a):int(b)]
            u.words = tuple(refs[utt_id])
            u.side = int(side)
    for name in world.systems:
        for split in ("dev", "eval"):
            path = os.path.join(out_dir, "nbest", f"{name}.{split}.jsonl")
            if os.path.exists(path):
                world.nbest[(name, split)] = read_nbest(path)
    return world


# ---- error correlation -----------------------------------------------------

def error_events(refs, hyps):
    """Word-level error events ``(utt, ref position, kind, hyp word)`` of a corpus."""
    from ..score import INS, MATCH, align

    events = set()
    for utt in sorted(refs):
        ali, _ = align(list(refs[utt]), list(hyps.get(utt, [])))
        i = 0
        for tag, r, h in ali.ops:
            if tag != MATCH:
                events.add((utt, i, tag, h))
            if tag != INS:
                i += 1
    return events


def error_overlap(world, split="dev"):
    """Jaccard overlap of the acoustic 1-best error events for every system pair."""
    refs = world.references(split)
    ev = {}
    for name in world.systems:
        hyps = {nb.utt_id: list(nb.hypotheses[0].words) for nb in world.nbest[(name, split)]}
        ev[name] = error_events(refs, hyps)
    out = {}
    names = list(world.systems)
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            A, B = ev[names[a]], ev[names[b]]
            out[(names[a], names[b])] = len(A & B) / len(A | B) if A | B else 0.0
    return out
