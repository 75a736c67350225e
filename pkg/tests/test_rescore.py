import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convasr.errors import EmptyInput, InvalidConfig, MissingFeature, ShapeError
from convasr.lm import EOS, UNK, RnnLMConfig, init_recurrent_lm, train_ngram
from convasr.rescore import (DEFAULT_GRID, Hypothesis, LmBundle, NBestList, ScoreWeights,
                             add_lm_features, dev_wer, lm_features, one_best, optimize_weights,
                             oracle_wer, read_nbest, rerank, score_hypothesis, write_nbest)
from convasr.score import wer


def nb(*hyps, utt="u1"):
    return NBestList(utt, [Hypothesis(tuple(w.split()), f) for w, f in hyps], "sysA")


class TestScoreHypothesis:
    def test_identity(self):
        h = Hypothesis(("a",), {"am_score": -100.0})
        assert score_hypothesis(h, ScoreWeights({"am_score": 1.0})) == -100.0

    def test_arithmetic(self):
        h = Hypothesis(("a",), {"am": -10.0, "lm": -5.0})
        assert score_hypothesis(h, ScoreWeights({"am": 1.0, "lm": 2.0})) == -20.0

    def test_missing_feature(self):
        h = Hypothesis(("a",), {"am": -10.0})
        with pytest.raises(MissingFeature) as e:
            score_hypothesis(h, ScoreWeights({"am": 1.0, "lm": 0.5}))
        assert e.value.args[0] == "lm"
        # zero-weighted features need not be present
        assert score_hypothesis(h, ScoreWeights({"am": 1.0, "lm": 0.0})) == -10.0

    def test_word_count_invariant(self):
        assert Hypothesis(("a", "b"), {}).features["word_count"] == 2
        with pytest.raises(ShapeError):
            Hypothesis(("a", "b"), {"word_count": 3})

    def test_non_finite_feature(self):
        with pytest.raises(InvalidConfig):
            Hypothesis(("a",), {"am": float("nan")})

    def test_weights_need_nonzero(self):
        with pytest.raises(InvalidConfig):
            ScoreWeights({"am": 0.0})
        with pytest.raises(InvalidConfig):
            ScoreWeights({"am": math.inf})

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=3),
           st.lists(st.floats(-4, 4).filter(lambda v: v == 0 or abs(v) > 1e-3),
                    min_size=3, max_size=3).filter(lambda w: any(w)),
           st.floats(-8, 8).filter(lambda a: abs(a) > 1e-3))
    def test_linear_in_weights(self, f, w, alpha):
        h = Hypothesis(("x",), dict(zip("abc", f)))
        W = ScoreWeights(dict(zip("abc", w)))
        assert score_hypothesis(h, W.scaled(alpha)) == \
            pytest.approx(alpha * score_hypothesis(h, W), rel=1e-9, abs=1e-9)


class TestRerank:
    def fixture(self):
        # AM prefers the first hypothesis, the LM strongly prefers the third
        return nb(("the cat", {"am": -10.0, "lm": -9.0}),
                  ("a cat", {"am": -11.0, "lm": -8.0}),
                  ("the hat", {"am": -12.0, "lm": -3.0}))

    def test_am_and_lm_disagree(self):
        lst = self.fixture()
        assert one_best(lst, ScoreWeights({"am": 1.0})).words == ("the", "cat")
        assert one_best(lst, ScoreWeights({"lm": 1.0})).words == ("the", "hat")
        assert one_best(lst, ScoreWeights({"am": 1.0, "lm": 1.0})).words == ("the", "hat")

    def test_ties_keep_order(self):
        lst = nb(("a", {"am": 0.0}), ("b", {"am": 0.0}))
        assert [h.words for h in rerank(lst, ScoreWeights({"am": 1.0}))] == [("a",), ("b",)]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-100, 100))
    def test_constant_shift_keeps_argmax(self, seed, c):
        rng = np.random.default_rng(seed)
        hyps = [(f"w{i}", {"am": float(rng.normal(0, 10)), "lm": float(rng.normal(0, 10))})
                for i in range(6)]
        shifted = [(w, {"am": f["am"] + c, "lm": f["lm"]}) for w, f in hyps]
        W = ScoreWeights({"am": float(rng.uniform(0.1, 2)), "lm": 1.0})
        a = one_best(nb(*hyps), W)
        b = one_best(nb(*shifted), W)
        assert a.words == b.words


class TestOracle:
    def test_reference_in_list(self):
        assert oracle_wer(nb(("x y", {}), ("a b c", {})), "a b c".split()) == 0.0

    def test_hand_alignment(self):
        lst = nb(("a b", {}), ("a c", {}))
        assert oracle_wer(lst, ["a", "b"]) == 0.0
        assert oracle_wer(lst, ["a", "d"]) == 50.0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcd"), max_size=5), min_size=1, max_size=6),
           st.lists(st.sampled_from("abcd"), min_size=1, max_size=5))
    def test_min_property(self, hyps, ref):
        lst = NBestList("u", [Hypothesis(tuple(h), {}) for h in hyps])
        o = oracle_wer(lst, ref)
        assert all(o <= wer(ref, h) for h in hyps)
        assert o == min(wer(ref, h) for h in hyps)


def ratio_fixture():
    """Correct hypotheses win only when 1.5 < w_lm / w_am < 3."""
    a = NBestList("a", [Hypothesis(("r", "s"), {"am": 0.0, "lm": 0.0}),
                        Hypothesis(("r", "x"), {"am": 1.5, "lm": -1.0})])
    b = NBestList("b", [Hypothesis(("t", "u"), {"am": 0.0, "lm": 0.0}),
                        Hypothesis(("t", "y"), {"am": -3.0, "lm": 1.0})])
    return [(a, ["r", "s"]), (b, ["t", "u"])]


class TestOptimize:
    def test_already_optimal(self):
        dev = [(nb(("a b", {"am": -1.0, "lm": -5.0}), ("a c", {"am": -2.0, "lm": -1.0})),
                ["a", "b"])]
        w = optimize_weights(dev, init={"am": 1.0, "lm": 0.0})
        assert dev_wer(dev, w) == 0.0
        assert dict(w) == {"am": 1.0, "lm": 0.0}

    def test_finds_unique_ratio(self):
        dev = ratio_fixture()
        # brute force over the grid: every error-free pair has ratio exactly 2
        zero = []
        for a, b in itertools.product(DEFAULT_GRID, repeat=2):
            if a == 0 and b == 0:
                continue
            if dev_wer(dev, {"am": a, "lm": b}) == 0:
                zero.append((a, b))
        assert zero and all(b == 2 * a for a, b in zero)
        w = optimize_weights(dev, init={"am": 1.0, "lm": 1.0})
        assert w["lm"] == 2 * w["am"]
        assert dev_wer(dev, w) == 0.0

    def test_deterministic(self):
        dev = ratio_fixture()
        runs = [optimize_weights(dev, init={"am": 1.0, "lm": 1.0, "word_count": 0.0}) for _ in range(3)]
        assert runs[0] == runs[1] == runs[2]

    def test_empty_dev(self):
        with pytest.raises(EmptyInput):
            optimize_weights([])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 100_000))
    def test_never_worse_than_init(self, seed):
        rng = np.random.default_rng(seed)
        dev = []
        words = list("abcde")
        for u in range(4):
            ref = list(rng.choice(words, size=3))
            hyps = [Hypothesis(tuple(rng.choice(words, size=int(rng.integers(1, 5)))),
                               {"am": float(rng.normal()), "lm": float(rng.normal()),
                                "x": float(rng.normal())}) for _ in range(4)]
            dev.append((NBestList(f"u{u}", hyps), ref))
        init = {"am": float(rng.uniform(0.1, 3)), "lm": float(rng.normal()), "x": 0.0}
        w = optimize_weights(dev, init=init)
        assert dev_wer(dev, w) <= dev_wer(dev, init)

    def test_extra_features_start_at_zero(self):
        dev = ratio_fixture()
        w = optimize_weights(dev, init={"am": 1.0}, features=["am", "lm"])
        assert set(w) == {"am", "lm"}
        assert dev_wer(dev, w) == 0.0


class TestFiles:
    def test_nbest_round_trip(self, tmp_path):
        lists = [nb(("a b", {"am_score": -3.25}), ("a", {"am_score": -4.0})),
                 nb(("c", {"am_score": 1e-17}), utt="u2")]
        path = tmp_path / "n.jsonl"
        write_nbest(path, lists)
        first = json.loads(path.read_text().splitlines()[0])
        assert list(first) == ["utt_id", "system", "hyps"]
        assert list(first["hyps"][0]) == ["words", "features"]
        back = read_nbest(path)
        assert [b.utt_id for b in back] == ["u1", "u2"]
        assert back[0].hypotheses[0].features == lists[0].hypotheses[0].features
        assert back[1].source_system == "sysA"

    def test_weights_file(self, tmp_path):
        w = ScoreWeights({"am_score": 1.0, "ngram_lm": 0.5, "oov_count": -2.0})
        w.write(tmp_path / "w.json")
        assert json.loads((tmp_path / "w.json").read_text()) == dict(w)
        assert ScoreWeights.read(tmp_path / "w.json") == w

    def test_empty_list_and_duplicates(self):
        with pytest.raises(EmptyInput):
            NBestList("u", [])
        assert nb(("a", {}), ("b", {}), ("a", {})).duplicates == [2]


@pytest.fixture(scope="module")
def bundle():
    corpus = [s.split() for s in ["ab ba", "ba ab ab", "ca ab", "ba ca ab ba"]]
    vocab = ("ab", "ba", "ca", EOS, UNK)
    ng_f = train_ngram(corpus, 3, vocab=vocab[:-2])
    ng_b = train_ngram(corpus, 3, vocab=vocab[:-2], direction="backward")
    cfg = RnnLMConfig(embed_dim=4, hidden=(4,), init_scale=0.8)
    rf = [init_recurrent_lm(cfg, vocab, seed=s) for s in (1, 2)]
    cfgb = RnnLMConfig(embed_dim=4, hidden=(4,), init_scale=0.8, direction="backward")
    rb = [init_recurrent_lm(cfgb, vocab, seed=s) for s in (3, 4)]
    return LmBundle(ng_f, (rf[0], rf[1], ng_f), (rb[0], rb[1], ng_b))


class TestLmFeatures:
    def test_interpolated_features(self, bundle):
        s = ("ab", "zz", "ba")
        f = lm_features([s], bundle)[0]
        assert f["ngram_lm"] == pytest.approx(bundle.ngram.sentence_logprob(s), abs=1e-12)
        for key, comps in (("neural_fwd", bundle.forward), ("neural_bwd", bundle.backward)):
            toks = list(s[::-1] if key == "neural_bwd" else s)
            toks = [t if t in ("ab", "ba", "ca") else UNK for t in toks] + [EOS]
            total, hist = 0.0, ["<s>"]
            for t in toks:
                p = sum(w * math.exp(c.logprob(tuple(hist), t))
                        for w, c in zip((0.375, 0.375, 0.25), comps))
                total += math.log(p)
                hist.append(t)
            assert f[key] == pytest.approx(total, abs=1e-10)
        assert f["oov_count"] == 1

    def test_add_to_lists(self, bundle):
        lists = [nb(("ab ba", {"am_score": -1.0}), ("ca", {"am_score": -2.0}))]
        out = add_lm_features(lists, bundle)
        h = out[0].hypotheses[0]
        assert {"am_score", "ngram_lm", "neural_fwd", "neural_bwd", "oov_count",
                "word_count"} <= set(h.features)
        assert h.features["am_score"] == -1.0
