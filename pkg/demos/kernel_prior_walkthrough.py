"""From source networks to a kernel prior, step by step.

Trains two small U-Nets on the ms-like synthetic domain, harvests their
3x3x3 kernels into seven resolution groups, fits one VAE per group and
draws a few kernels from the resulting prior.

Run: python3 demos/kernel_prior_walkthrough.py  (a few minutes on one core)
"""

import numpy as np
import torch

from dwpseg import data
from dwpseg.architectures import NetworkSpec, resolution_groups
from dwpseg.dwp import VAEHyperparams, reconstruct
from dwpseg.experiments import TrainHyperparams, build_prior_bundle, train_source_networks

torch.set_num_threads(1)

# 1. a source domain: many small bright lesions in a smooth background
source = [data.preprocess(v) for v in data.generate("ms-like", 24, seed=0)]
print(f"source volumes: {len(source)} of shape {source[0].shape}, "
      f"mean lesion fraction {np.mean([v.mask.mean() for v in source]):.3f}")

# 2. two networks from different seeds, each restarted once after converging
spec = NetworkSpec.toy()
snaps = train_source_networks(source, n_nets=2, n_cycles=1, hp=TrainHyperparams(max_epochs=15), spec=spec, seed=0)
for s in snaps:
    print(f"{s.checkpoint_id}: {s.epochs} epochs, validation DSC {s.val_dsc:.3f}")

# 3. kernels per resolution group; every snapshot contributes
groups = resolution_groups(spec)
print("layer -> group:", {k: v for k, v in list(groups.items())[:6]}, "...")
bundle, bank = build_prior_bundle([(s.checkpoint_id, s.net) for s in snaps], VAEHyperparams(max_epochs=20), seed=0)
print("kernels per group:", bank.counts())
print("normalisation (shift, scale) per group:", {g: tuple(round(c, 4) for c in v) for g, v in bank.norm_constants.items()})

# 4. how well does each VAE reconstruct its own bank?
for g, vae in bundle.vaes.items():
    x = torch.as_tensor(bank.groups[g][:500])
    mse = float(((reconstruct(vae, x) - x) ** 2).mean())
    print(f"group {g}: reconstruction MSE {mse:.4f}, kernel variance {float(x.var()):.4f}")

# 5. samples from the prior, mapped back to weight units
vae = bundle.vaes[3]
z = vae.sample(4, torch.Generator().manual_seed(1)).numpy()
kernels = bank.denormalize(3, z)
print("four group-3 prior kernels, centre slices:")
print(np.round(kernels[:, 0, 1], 3))
