import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convasr.errors import EmptyInput, InvalidConfig
from convasr.lm import (EOS, UNK, BackoffNgram, InterpolatedLM, InterpolationSpec,
                        LetterTrigramEncoder, RnnLMConfig, UniformLM, build_vocab,
                        format_layer_sweep, init_recurrent_lm, interpolate_word_probs,
                        layer_sweep, letter_trigram_encode, perplexity, stabilizer_grad,
                        stabilizer_scale, train_ngram, train_recurrent_lm)
from convasr.lm.rnn import ToyRecurrentLM, loss_and_grads
from convasr.pipeline.synth import WorldSpec, build_world

from oracles import central_difference, rel_err


@pytest.fixture(scope="module")
def texts():
    w = build_world(WorldSpec())
    return w.texts


def wb_oracle(corpus, order, vocab):
    """Interpolated Witten-Bell straight from its recursive definition."""
    V = len(vocab)
    counts = Counter()
    for s in corpus:
        toks = ["<s>"] + [w if w in vocab else UNK for w in s] + [EOS]
        for i in range(1, len(toks)):
            for k in range(order):
                if i - k < 0:
                    break
                counts[(tuple(toks[i - k:i]), toks[i])] += 1

    def p(h, w):
        if not h:
            n = sum(c for (hh, _), c in counts.items() if hh == ())
            t = sum(1 for (hh, _) in counts if hh == ())
            return (counts[((), w)] + t / V) / (n + t)
        tot = sum(c for (hh, _), c in counts.items() if hh == h)
        if tot == 0:
            return p(h[1:], w)
        t = sum(1 for (hh, _) in counts if hh == h)
        return (counts[(h, w)] + t * p(h[1:], w)) / (tot + t)
    return p


class TestStabilizer:
    def test_closed_forms(self):
        assert abs(stabilizer_scale(0.0) - math.log(2) / 4) < 1e-9
        assert abs(stabilizer_scale(10.0) - 10.0) < 1e-7
        v = stabilizer_scale(-10.0)
        assert v > 0
        # series of ln(1 + x) / 4 at x = e^-40; the stated 1.0612e-18 has swapped digits
        oracle = math.exp(-40.0) / 4 - math.exp(-80.0) / 8
        np.testing.assert_allclose(v, oracle, rtol=1e-14)
        np.testing.assert_allclose(v, 1.0621e-18, rtol=1e-4)

    def test_no_overflow(self):
        assert stabilizer_scale(1e4) == pytest.approx(1e4)
        assert 0 < stabilizer_scale(-100.0) < 1e-170

    def test_grid_shape(self):
        b = np.linspace(-8, 8, 401)
        s = stabilizer_scale(b)
        assert np.all(s > 0)
        assert np.all(np.diff(s) > 0)
        assert np.all(np.diff(s, 2) >= -1e-12)

    def test_grad(self):
        for b in (-2.0, -0.3, 0.0, 0.7, 3.0):
            fd = central_difference(lambda x: stabilizer_scale(x[0]), np.array([b]), 1e-6)[0]
            assert abs(stabilizer_grad(b) - fd) < 1e-8


class TestInterpolation:
    def test_fixed_point(self):
        for w in ((0.375, 0.375, 0.25), (1.0, 0.0, 0.0), (0.2, 0.3, 0.5)):
            assert math.exp(interpolate_word_probs([0.5, 0.5, 0.5], InterpolationSpec(w))) \
                == pytest.approx(0.5, abs=1e-15)

    def test_default_weights(self):
        v = math.exp(interpolate_word_probs([0.8, 0.6, 0.2], InterpolationSpec()))
        assert v == pytest.approx(0.575, abs=1e-15)

    def test_count_mismatch(self):
        with pytest.raises(InvalidConfig):
            interpolate_word_probs([0.5, 0.5], InterpolationSpec())

    @pytest.mark.parametrize("w", [(0.5, 0.6, -0.1), (0.3, 0.3, 0.3)])
    def test_invalid_weights(self, w):
        with pytest.raises(InvalidConfig):
            InterpolationSpec(w)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 10_000))
    def test_distribution_sums_to_one(self, V, seed):
        rng = np.random.default_rng(seed)
        comps = [rng.dirichlet(np.ones(V)) for _ in range(3)]
        w = rng.dirichlet(np.ones(3))
        w[-1] = 1.0 - w[0] - w[1]
        mix = np.exp(interpolate_word_probs(comps, InterpolationSpec(tuple(w))))
        assert abs(mix.sum() - 1.0) < 1e-9

    def test_interpolated_lm(self):
        corpus = ["a b c", "b c a", "c a b b"]
        comps = [train_ngram(corpus, 1), train_ngram(corpus, 2), train_ngram(corpus, 3)]
        lm = InterpolatedLM(comps)
        for h in [("<s>",), ("<s>", "a"), ("a", "b"), ("c", "c")]:
            assert abs(lm.distribution(h).sum() - 1.0) < 1e-9
            direct = sum(w * math.exp(c.logprob(h, "b"))
                         for w, c in zip((0.375, 0.375, 0.25), comps))
            assert lm.logprob(h, "b") == pytest.approx(math.log(direct), abs=1e-12)


class TestPerplexity:
    @pytest.mark.parametrize("n_words", [1, 5, 7, 11, 48, 97])
    def test_uniform_is_vocab_size(self, n_words):
        words = [f"w{i}" for i in range(n_words)]
        lm = UniformLM(words)
        V = len(lm.vocab)
        text = [words[:3], words[-2:] + ["oov"], []]
        assert perplexity(lm, text) == V

    def test_zero_probability(self):
        lm = train_ngram(["a b", "a b"], 2, discount="ml")
        with pytest.warns(RuntimeWarning, match="'a'"):
            assert perplexity(lm, ["b a"]) == math.inf

    def test_empty_text(self):
        with pytest.raises(EmptyInput):
            perplexity(UniformLM(["a"]), [])

    def test_matches_token_logprobs(self):
        corpus = ["a b c", "b c a", "c a b b", "a a"]
        lm = train_ngram(corpus, 3)
        text = ["a b", "c c b a"]
        lp = sum(lm.sentence_logprob(s.split()) for s in text)
        n = sum(len(s.split()) + 1 for s in text)
        assert perplexity(lm, text) == pytest.approx(math.exp(-lp / n), rel=1e-12)


class TestNgram:
    def test_deterministic_bigram(self):
        lm = train_ngram(["a b .", "a b ."], 2, discount="ml")
        assert lm.exact_prob(("a",), "b") == 1
        assert lm.logprob(("<s>", "a"), "b") == 0.0

    def test_deterministic_perplexity(self):
        corpus = ["a b .", "a b ."]
        lm = train_ngram(corpus, 2, discount="ml")
        assert abs(perplexity(lm, corpus) - 1.0) < 1e-9

    def test_witten_bell_matches_definition(self):
        corpus = [s.split() for s in ["a b c a", "b c d", "a a b", "d c b a c"]]
        lm = train_ngram(corpus, 3)
        p = wb_oracle(corpus, 3, set(lm.vocab))
        for h in [("<s>",), ("<s>", "a"), ("a", "b"), ("b", "c"), ("d", "d"), ("x", "a")]:
            for w in lm.vocab:
                hh = tuple(t if t in lm.vocab or t == "<s>" else UNK for t in h)
                np.testing.assert_allclose(math.exp(lm.logprob(hh, w)), p(hh, w), rtol=1e-12)
                assert float(lm.exact_prob(hh, w)) == pytest.approx(p(hh, w), rel=1e-12)

    def test_normalized_on_sampled_histories(self, texts):
        lm = train_ngram(texts["in_domain"], 3)
        rng = np.random.default_rng(0)
        toks = ["<s>"] + list(lm.vocab)
        for _ in range(100):
            h = tuple(toks[i] for i in rng.integers(len(toks), size=2))
            assert abs(lm.distribution(h).sum() - 1.0) < 1e-9

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcde"), min_size=1, max_size=6),
                    min_size=1, max_size=8),
           st.integers(1, 4))
    def test_normalized_random_corpora(self, corpus, order):
        for disc in ("witten-bell", "ml"):
            lm = train_ngram(corpus, order, discount=disc)
            for h in [(), ("<s>",), tuple(corpus[0][:3]), ("<s>",) + tuple(corpus[0][:2])]:
                s = sum(lm.exact_prob(h, w) for w in lm.vocab)
                if disc == "witten-bell":
                    assert s == 1
                else:
                    assert s in (0, 1)
                assert abs(lm.distribution(h).sum() - float(s)) < 1e-9

    def test_trigram_beats_unigram(self, texts):
        train, held = texts["in_domain"], texts["validation"]
        assert sum(len(s) for s in train) >= 10_000
        vocab = sorted({w for s in train for w in s})
        uni = train_ngram(train, 1, vocab=vocab)
        tri = train_ngram(train, 3, vocab=vocab)
        assert perplexity(tri, held) <= perplexity(uni, held)

    def test_exact_matches_float(self, texts):
        lm = train_ngram(texts["in_domain"][:200], 3)
        for s in texts["validation"][:20]:
            toks = lm.map_unk(s) + [EOS]
            hist = ["<s>"]
            for w in toks:
                assert math.log(lm.exact_prob(tuple(hist), w)) == \
                    pytest.approx(lm.logprob(tuple(hist), w), abs=1e-12)
                hist.append(w)

    def test_arpa_round_trip(self, tmp_path):
        lm = train_ngram(["a b c a", "b c d", "a a b"], 3)
        path = tmp_path / "lm.arpa"
        lm.write_arpa(path)
        text = path.read_text()
        assert text.startswith("\n\\data\\\nngram 1=")
        back = BackoffNgram.read_arpa(path)
        assert back.order == 3 and set(back.vocab) == set(lm.vocab)
        for s in (["a", "b"], ["d", "d", "a"], ["zz"]):
            assert back.sentence_logprob(s) == pytest.approx(lm.sentence_logprob(s), abs=1e-12)

    def test_ml_arpa_round_trip(self, tmp_path):
        lm = train_ngram(["a b", "a c", "b"], 2, discount="ml")
        back = BackoffNgram.from_arpa(lm.to_arpa())
        for h in [("<s>",), ("a",), ("b",)]:
            np.testing.assert_allclose(back.distribution(h), lm.distribution(h), atol=1e-15)

    def test_backward_is_reversed_forward(self):
        corpus = ["a b c", "c b", "a c c b a"]
        fwd_rev = train_ngram([s.split()[::-1] for s in corpus], 3)
        bwd = train_ngram(corpus, 3, direction="backward")
        for s in (["a", "b", "c"], ["c", "a", "b"], ["b", "b", "a"]):
            assert bwd.sentence_logprob(s) == fwd_rev.sentence_logprob(s[::-1])
            manual = 0.0
            hist = ["<s>"]
            for w in [s[2], s[1], s[0], EOS]:
                manual += bwd.logprob(tuple(hist), w)
                hist.append(w)
            assert bwd.sentence_logprob(s) == pytest.approx(manual, abs=1e-14)

    def test_empty_corpus(self):
        with pytest.raises(EmptyInput):
            train_ngram([], 2)
        with pytest.raises(EmptyInput):
            train_ngram([[], []], 2)

    def test_unknown_discount(self):
        with pytest.raises(InvalidConfig):
            train_ngram(["a"], 2, discount="kneser-ney")


class TestLetterTrigrams:
    def test_cat(self):
        assert letter_trigram_encode("cat") == {"#ca": 1, "cat": 1, "at#": 1}

    def test_repeated_letters(self):
        assert letter_trigram_encode("aaa") == {"#aa": 1, "aaa": 1, "aa#": 1}

    def test_counts_repeats(self):
        assert letter_trigram_encode("aaaa") == {"#aa": 1, "aaa": 2, "aa#": 1}

    def test_determinism_and_discrimination(self):
        enc = LetterTrigramEncoder.fit(["cat", "act", "tac"])
        a, b = enc.encode("cat"), enc.encode("cat")
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(enc.encode("cat"), enc.encode("act"))
        assert np.all(a >= 0)

    def test_oov_bucket(self):
        enc = LetterTrigramEncoder.fit(["cat"], specials=(EOS,))
        v = enc.encode("cab")
        assert v[enc.oov_index] == 2  # cab, ab#
        assert v.sum() == 3
        assert enc.encode(EOS)[enc.dim - 1] == 1
        assert enc.encode_sparse("cab").toarray()[0].tolist() == v.tolist()

    def test_empty_word(self):
        with pytest.raises(EmptyInput):
            letter_trigram_encode("")


SMALL_VOCAB = ("ab", "ba", "bab", "ca", EOS, UNK)

CONFIGS = [
    dict(),
    dict(cell="gated"),
    dict(encoding="letter-trigram", hidden=(4, 3)),
    dict(second_layer=6, tied=True, hidden=(5,)),
    dict(stabilize=False, hidden=(3, 3)),
]


class TestRecurrentLM:
    @pytest.mark.parametrize("kw", CONFIGS)
    def test_gradient_check_three_steps(self, kw):
        kw = dict(kw)
        cfg = RnnLMConfig(embed_dim=6, hidden=kw.pop("hidden", (5,)), init_scale=0.5, **kw)
        m = init_recurrent_lm(cfg, SMALL_VOCAB)
        inp, tgt, mask = m.encode_batch([["ab", "ca"]])
        assert inp.shape[1] == 3
        _, g = loss_and_grads(m.params, cfg, m.codes, inp, tgt, mask)
        for k, v in m.params.items():
            def f(x, k=k):
                p = dict(m.params)
                p[k] = x.reshape(v.shape)
                return loss_and_grads(p, cfg, m.codes, inp, tgt, mask)[0]
            fd = central_difference(f, v.ravel().copy(), 1e-5).reshape(v.shape)
            assert rel_err(g[k], fd) <= 1e-4, k

    @pytest.mark.parametrize("kw", CONFIGS)
    def test_steps_normalized(self, kw):
        kw = dict(kw)
        cfg = RnnLMConfig(embed_dim=6, hidden=kw.pop("hidden", (5,)), init_scale=0.8, **kw)
        m = init_recurrent_lm(cfg, SMALL_VOCAB)
        for h in [("<s>",), ("<s>", "ab"), ("<s>", "ab", "zzz", "ca")]:
            d = m.distribution(h)
            assert d.shape == (len(SMALL_VOCAB),)
            assert abs(d.sum() - 1.0) < 1e-9

    def test_batched_and_incremental_agree(self):
        m = init_recurrent_lm(RnnLMConfig(embed_dim=6, hidden=(5, 4), init_scale=0.8),
                              SMALL_VOCAB)
        sents = [["ab"], ["ca", "bab", "ab"], ["oov", "ba"]]
        batch = m.batch_logprobs(sents)
        for s, b in zip(sents, batch):
            assert m.sentence_logprob(s) == pytest.approx(b, abs=1e-12)

    def test_backward_direction(self):
        cfg = RnnLMConfig(embed_dim=6, hidden=(5,), init_scale=0.8, direction="backward")
        m = init_recurrent_lm(cfg, SMALL_VOCAB)
        fwd = ToyRecurrentLM(RnnLMConfig(embed_dim=6, hidden=(5,), init_scale=0.8),
                             m.vocab, m.params)
        s = ["ab", "ba", "ca"]
        manual, hist = 0.0, ["<s>"]
        for w in ["ca", "ba", "ab", EOS]:
            manual += m.logprob(tuple(hist), w)
            hist.append(w)
        assert m.sentence_logprob(s) == pytest.approx(manual, abs=1e-12)
        assert m.sentence_logprob(s) == pytest.approx(fwd.sentence_logprob(s[::-1]), abs=1e-12)

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = RnnLMConfig(embed_dim=6, hidden=(5,), encoding="letter-trigram", init_scale=0.8)
        m = init_recurrent_lm(cfg, SMALL_VOCAB)
        m.save(tmp_path / "rnn.json")
        back = ToyRecurrentLM.load(tmp_path / "rnn.json")
        assert back.config == cfg
        assert back.encoder.trigrams == m.encoder.trigrams
        s = ["ab", "bab"]
        assert back.sentence_logprob(s) == m.sentence_logprob(s)

    def test_tied_needs_matching_width(self):
        with pytest.raises(InvalidConfig):
            RnnLMConfig(embed_dim=6, hidden=(5,), tied=True)

    def test_vocab_min_count(self):
        v = build_vocab([["a", "b", "a"], ["c", "b"]])
        assert v == ("a", "b", EOS, UNK)


@pytest.fixture(scope="module")
def trained(texts):
    out = {}
    for name, kw in {"onehot": {}, "onehot_seed1": {"seed": 1},
                     "trigram": {"encoding": "letter-trigram"}}.items():
        out[name] = train_recurrent_lm(texts["in_domain"], texts["out_domain"],
                                       RnnLMConfig(**kw), validation=texts["validation"])
    return out


class TestTraining:
    def test_best_checkpoint_not_worse_than_phase_one(self, trained):
        for model, trace in trained.values():
            assert trace.best_valid_ppl <= trace.phase1_valid_ppl
            assert len(trace.phase1_losses) == 4

    def test_seeds_differ_and_beat_unigram(self, trained, texts):
        a, _ = trained["onehot"]
        b, _ = trained["onehot_seed1"]
        assert not np.array_equal(a.params["E"], b.params["E"])
        uni = train_ngram(texts["in_domain"], 1, vocab=a.vocab[:-2])
        base = perplexity(uni, texts["validation"])
        for m in (a, b):
            assert perplexity(m, texts["validation"]) < base

    def test_letter_trigram_close_to_one_hot(self, trained):
        assert trained["trigram"][1].best_valid_ppl <= 1.05 * trained["onehot"][1].best_valid_ppl

    def test_training_is_deterministic(self, texts):
        cfg = RnnLMConfig(max_epochs=2, phase1_passes=1)
        a, _ = train_recurrent_lm(texts["in_domain"][:300], texts["out_domain"][:100], cfg)
        b, _ = train_recurrent_lm(texts["in_domain"][:300], texts["out_domain"][:100], cfg)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_backward_trains_on_reversed(self, texts):
        cfg = RnnLMConfig(max_epochs=1, phase1_passes=1, direction="backward")
        m, _ = train_recurrent_lm(texts["in_domain"][:300], (), cfg)
        assert m.direction == "backward"
        s = texts["validation"][0]
        assert np.isfinite(m.sentence_logprob(s))

    def test_layer_sweep_report(self, texts):
        cfg = RnnLMConfig(encoding="letter-trigram", max_epochs=1, phase1_passes=1,
                          hidden=(8,), embed_dim=8)
        rows = layer_sweep(texts["in_domain"][:300], (), texts["validation"][:100],
                           layers=(1, 2), config=cfg)
        txt = format_layer_sweep(rows)
        lines = txt.splitlines()
        assert lines[0].split() == ["Language", "model", "PPL"]
        assert "with one layer (baseline)" in lines[1]
        assert "+ two hidden layers" in lines[2]
        assert all(np.isfinite(r["ppl"]) for r in rows)
