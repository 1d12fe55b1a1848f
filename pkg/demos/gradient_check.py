"""Compare the tape's analytic gradients with central differences on a tiny model.

The finite-difference error depends on the step relative to the parameter
scale. With tiny weights a 1e-3 step is large enough to show truncation
error, while with O(1) weights a 1e-5 step runs into round-off on
coordinates whose gradient is close to zero.
"""

import numpy as np

from crbpr import CRBPR, Hyperparams, SynthConfig, build_index, generate_synthetic, split_triplets
from crbpr import gradcore as gc

syn = generate_synthetic(SynthConfig(n_users=5, n_givens=8, n_matchers=8, n_triplets=30, latent_dim=3,
                                     visual_dim=6, textual_dim=5, persona_clusters=2, pool_size=8))
index = build_index(split_triplets(syn.triplets, (0.6, 0.2, 0.2)), syn.features)
batch = (np.array([0, 3, 4]), np.array([1, 5, 7]), np.array([2, 0, 6]), np.array([3, 4, 1]))

for scale in (0.01, 1.0):
    hp = Hyperparams(d_e=4, d_v=4, d_w=4, K=1, batch_size=3, lam=0.01, init_scale=scale)
    model = CRBPR(syn.catalog, syn.features, index, hp)
    model.loss_and_grad(*batch)
    for step in (1e-3, 1e-5):
        err = gc.finite_diff_check(model.enabled_params(), lambda: model.loss(*batch), step=step)
        print(f"init scale {scale:<5}  step {step:.0e}  max relative error {err:.2e}")
