# %% [markdown]
# N-gram and recurrent language models
#
# Train the Witten-Bell trigram and two small recurrent models on the
# synthetic in-domain text, compare perplexities, then interpolate.

# %%
import math

import numpy as np

from convasr.lm import (InterpolatedLM, InterpolationSpec, RnnLMConfig, UniformLM, build_vocab,
                        perplexity, stabilizer_scale, train_ngram, train_recurrent_lm)
from convasr.pipeline.synth import WorldSpec, build_world

texts = build_world(WorldSpec(n_train=10, n_dev=10, n_eval=10)).texts
vocab = build_vocab(texts["in_domain"] + texts["out_domain"])
valid = texts["validation"]

# %% count-based models
uni = train_ngram(texts["in_domain"], 1, vocab=vocab)
tri = train_ngram(texts["in_domain"], 3, vocab=vocab)
print(f"uniform {perplexity(UniformLM(vocab), valid):.2f}  "
      f"unigram {perplexity(uni, valid):.2f}  trigram {perplexity(tri, valid):.2f}")
print(tri.to_arpa().splitlines()[:6])

# %% recurrent models: one-hot vs letter-trigram input, two-phase training
rnns = {}
for enc in ("one-hot", "letter-trigram"):
    cfg = RnnLMConfig(encoding=enc, embed_dim=16, hidden=(16,), max_epochs=4, phase1_passes=1)
    model, trace = train_recurrent_lm(texts["in_domain"], texts["out_domain"], cfg,
                                      validation=valid, vocab=vocab)
    rnns[enc] = model
    print(f"{enc}: validation ppl {model.corpus_perplexity(valid):.2f}")

# %% word-level interpolation stays normalized
mix = InterpolatedLM([tri, rnns["one-hot"], rnns["letter-trigram"]],
                     InterpolationSpec((0.375, 0.375, 0.25)))
print("interpolated ppl", round(perplexity(mix, valid), 2))
print("sum of P(.|first word):", np.sum(mix.distribution(valid[0][:1])))

# %% the self-stabilizer scale is 1 at beta = ln(e^4 - 1)/4
print(stabilizer_scale(0.0), math.log(2) / 4, stabilizer_scale(math.log(math.e ** 4 - 1) / 4))
