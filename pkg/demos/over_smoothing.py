"""Gradient coherence at the midpoint between two modes.

VFDS draws fresh noise every step, so near-identical renders receive
gradients pointing at different modes.  UCM reuses the coupled noise and
keeps a single direction.  The exact mixture field has a stationary point at
the midpoint by symmetry, so this uses a trained prior (a few seconds).
"""

import numpy as np

from flowlab.assets import LatentAsset, ViewRanges
from flowlab.distill import DistillConfig, distill_run, gradient_coherence
from flowlab.config import preset
from flowlab.experiments import train_prior_from_config
from flowlab.rng import Stream

field, _ = train_prior_from_config(preset("gauss2"))
centers = np.array([[-2.0, 0.0], [2.0, 0.0]])

for loss in ("vfds", "ucm"):
    coh = np.mean([
        gradient_coherence(field, np.zeros(2), DistillConfig(guidance_scale=0.0, inversion_scale=0.0, seed=s), 16, loss)
        for s in range(8)
    ])
    dists = []
    for seed in range(8):
        cfg = DistillConfig(loss=loss, guidance_scale=0.0, inversion_scale=0.0, total_steps=800, seed=seed)
        asset, _ = distill_run(LatentAsset(0.01 * Stream(seed, 9).normal(2)), field, ViewRanges(0.0, 0.0), cfg)
        dists.append(np.min(np.linalg.norm(centers - asset.theta, axis=1)))
    print(f"{loss:5s} coherence {coh:.3f}  median mode distance {np.median(dists):.3f}")
