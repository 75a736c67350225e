"""Acoustic-model training on a synthetic world's train split."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from .. import graph as G
from ..am import (SpatialFilter, SpeakerVector, TrainConfig, hidden_activations, init_toy_am,
                  neighbor_correlation, train_toy_am)
from .synth import stream


def am_data(world, split="train", with_speaker=False):
    """Utterances as ``features`` / ``senones`` (column indices) / ``speaker``."""
    idx = {s: i for i, s in enumerate(world.senones)}
    out = []
    for u in world.splits[split]:
        spk = SpeakerVector(np.asarray(u.speaker)) if with_speaker else None
        out.append(SimpleNamespace(utt_id=u.utt_id, features=u.features,
                                   senones=np.array([idx[s] for s in u.senones]), speaker=spk))
    return out


def denominator_graph(world, split="train"):
    idx = {s: i for i, s in enumerate(world.senones)}
    aligns = [[idx[s] for s in u.senones] for u in world.splits[split]]
    phone_of = {idx[s]: p for s, p in world.phone_of.items()}
    lm = G.estimate_mixed_history_lm([G.compress_senones(a) for a in aligns], phone_of,
                                     world.spec.states_per_phone)
    tm = G.estimate_transition_model(aligns)
    return G.build_denominator_graph(lm, tm, senones=list(range(len(world.senones))))


def train_world_am(world, block, seed=None, smoothing=None):
    """Train the toy AM described by ``block`` (an AmBlock).

    ``smoothing`` overrides ``block.smoothing``; 0 disables the spatial
    penalty. Returns ``(model, trace, summary)`` where the summary holds the
    mean neighbor correlation of every hidden layer on the dev split.
    """
    seed = int(stream(world.spec.seed, "am/init").integers(2 ** 31)) if seed is None else seed
    weight = block.smoothing if smoothing is None else smoothing
    data = am_data(world, "train")
    model = init_toy_am(world.spec.feat_dim, len(world.senones), block.hidden, seed=seed)
    filt = SpatialFilter.for_width(block.hidden[-1], weight) if weight > 0 else None
    graph = denominator_graph(world) if block.objective == "lfmmi" else None
    cfg = TrainConfig(learning_rate=block.learning_rate, epochs=block.epochs, seed=seed)
    model, trace = train_toy_am(model, data, block.objective, filt, cfg, graph)
    dev = am_data(world, "dev")
    corr = [float(neighbor_correlation(hidden_activations(model, dev, layer)))
            for layer in range(model.num_hidden)]
    acc = _frame_accuracy(model, dev)
    return model, trace, {"smoothing": weight, "loss_trace": trace,
                          "neighbor_correlation": corr, "dev_frame_accuracy": acc}


def _frame_accuracy(model, data):
    from ..am import forward
    right = total = 0
    for u in data:
        logp, _ = forward(model, u.features, u.speaker)
        right += int(np.sum(np.argmax(logp, axis=1) == u.senones))
        total += len(u.senones)
    return right / max(total, 1)
