# %% [markdown]
# The whole recipe on a small world
#
# data -> lm -> rescore -> cn -> combine -> score -> tables, with a
# hash-chained manifest per stage. The default configuration is the same
# run at full desk scale (about 20 seconds).

# %%
import tempfile

from convasr.pipeline.config import PipelineConfig
from convasr.pipeline.run import format_report, run_pipeline, verify_manifest

out = tempfile.mkdtemp(prefix="convasr_")
cfg = PipelineConfig.from_dict({
    "out_dir": out,
    "world": {"n_train": 10, "in_domain_words": 3000, "out_domain_words": 1000},
    "lm": {"rnn": {"embed_dim": 12, "hidden": [12], "phase1_passes": 1, "max_epochs": 3}},
})
report = run_pipeline(cfg)
print(format_report(report))

# %%
print("verified stages:", " -> ".join(verify_manifest(out)))
with open(f"{out}/tables/errors.txt") as f:
    print(f.read()[:800])
