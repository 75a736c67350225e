# %% [markdown]
# Lattice-free MMI on a synthetic world
#
# Build the senone-level denominator graph from training alignments, check
# the forward-backward total against the numerator, then train the toy
# acoustic model with and without spatial smoothing.

# %%
import numpy as np

from convasr import seqtrain as S
from convasr.am import SpatialFilter, spatial_penalty
from convasr.pipeline.amtrain import am_data, denominator_graph, train_world_am
from convasr.pipeline.config import AmBlock
from convasr.pipeline.synth import WorldSpec, build_world

world = build_world(WorldSpec(n_train=60, n_dev=20, n_eval=10))
graph = denominator_graph(world)
print(f"{len(world.senones)} senones, graph with {graph.num_states} states")

# %% one utterance: random log-likelihoods, MMI objective and gradient
utt = am_data(world, "train")[0]
rng = np.random.default_rng(0)
ll = rng.normal(size=(len(utt.senones), len(world.senones)))
num = S.NumeratorSupervision(list(utt.senones))
res = S.mmi_objective_with_ce(graph, ll, num, ce_weight=0.1)
print(f"objective {res.objective:.3f}; gradient rows sum to "
      f"{np.abs(res.gradient.sum(axis=1)).max():.1e} at most")

# %% spatial smoothing ignores constant activations
filt = SpatialFilter.for_width(64, 0.1)
print("penalty of a constant layer:", spatial_penalty(np.full(64, 0.7), filt)[0])
print("penalty of noise:", round(spatial_penalty(rng.normal(size=64), filt)[0], 3))

# %% smoothed vs plain training, same seed
block = AmBlock(hidden=(64, 64), epochs=4)
for weight in (0.0, 0.1):
    _, trace, summary = train_world_am(world, block, smoothing=weight)
    corr = ", ".join(f"{c:.3f}" for c in summary["neighbor_correlation"])
    print(f"smoothing {weight}: final loss {trace[-1]:.3f}, "
          f"dev frame acc {summary['dev_frame_accuracy']:.3f}, neighbor corr [{corr}]")
