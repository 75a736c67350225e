# %% [markdown]
# Data-parallel SGD with 1-bit gradients
#
# Four simulated workers train a softmax regression. Quantized runs carry
# the sign-quantization error forward in a residual, so the final loss
# tracks the float run.

# %%
import numpy as np

from convasr.parallel import (ParallelConfig, ParallelTrainer, SoftmaxRegression,
                              auto_minibatch_scale, compression_ratio, quantize_1bit,
                              toy_classification)

X, y = toy_classification(n=1200, dim=10, n_classes=3, seed=3)

# %% one column by hand
g = np.array([[0.5], [-0.25], [1.5], [-1.0]])
q, residual = quantize_1bit(g)
print(q.dequantize().ravel(), residual.ravel())

# %% float vs 1-bit
runs = {}
for quantize in (False, True):
    tr = ParallelTrainer(SoftmaxRegression(10, 3), X, y,
                         ParallelConfig(n_workers=4, minibatch=64, lr=0.002, quantize=quantize))
    tr.run(300)
    runs[quantize] = tr
    print(f"quantize={quantize}: loss {tr.loss():.4f}, "
          f"compression {tr.report.compression_ratio:.2f}x")
print("conservation gap:", runs[True].conservation_gap())
print("512x512 layer compression:", round(compression_ratio((512, 512)), 1))

# %% minibatch scaling probe
tr = runs[True]
pick = auto_minibatch_scale(tr, [64, 128, 256], (X[:256], y[:256]))
print("minibatch after probing:", pick)
