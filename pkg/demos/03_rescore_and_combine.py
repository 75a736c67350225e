# %% [markdown]
# N-best rescoring, confusion networks and system combination
#
# Take the three synthetic systems' N-best lists, tune log-linear weights
# on dev, turn the lists into confusion networks and combine them.

# %%
from convasr.combine import (CombinationWeights, SystemSet, build_confusion_network, cn_decode,
                             combination_report, corpus_wer, greedy_select, rover_combine)
from convasr.rescore import AM, NGRAM, add_lm_features, dev_wer, optimize_weights
from convasr.rescore import LmBundle
from convasr.lm import InterpolationSpec, UniformLM, build_vocab, train_ngram
from convasr.pipeline.synth import WorldSpec, build_world, error_overlap

world = build_world(WorldSpec(n_train=10, nbest=50))
print("error overlap between systems:", {k: round(v, 3) for k, v in error_overlap(world).items()})

# %% attach trigram features (uniform stand-ins for the neural slots)
texts = world.texts
vocab = build_vocab(texts["in_domain"] + texts["out_domain"])
fwd = train_ngram(texts["in_domain"], 3, vocab=vocab)
bwd = train_ngram(texts["in_domain"], 3, vocab=vocab, direction="backward")
u = UniformLM(vocab)
bundle = LmBundle(fwd, (u, u, fwd), (u, u, bwd), InterpolationSpec(), frozenset(vocab))
lists = {k: add_lm_features(v, bundle) for k, v in world.nbest.items()}

# %% per-system weights tuned on dev
refs = world.references("dev")
weights = {}
for s in world.systems:
    dev = [(nb, refs[nb.utt_id]) for nb in lists[(s, "dev")]]
    weights[s] = optimize_weights(dev, init={AM: 1.0, NGRAM: 1.0})
    print(f"{s}: dev WER am-only {dev_wer(dev, {AM: 1.0}):.2f} -> tuned "
          f"{dev_wer(dev, weights[s]):.2f}")

# %% confusion networks and greedy selection
def cns(split):
    return {s: {nb.utt_id: build_confusion_network(nb, 0.05, weights[s])
                for nb in lists[(s, split)]} for s in world.systems}

dev_pool = SystemSet(cns("dev"), refs)
sel = greedy_select(dev_pool)
print(combination_report(sel))

# %% apply the chosen weights on eval
ev = cns("eval")
eval_refs = world.references("eval")
w = CombinationWeights(sel.weights.weights)
combined = {u: rover_combine([ev[s][u] for s in sel.selected], w) for u in eval_refs}
for s in world.systems:
    print(f"{s}: eval WER {corpus_wer(ev[s], eval_refs):.2f}")
print(f"combined: eval WER {corpus_wer(combined, eval_refs):.2f}")
print("example:", " ".join(cn_decode(combined[sorted(eval_refs)[0]])))
