"""Four ways to train on four target volumes.

Source networks come from the ms-like domain; the target is the tumor-like
domain. With only four labelled target volumes, the script compares random
initialisation, fine-tuning, fine-tuning with frozen middle blocks and
variational training under the kernel prior.

Run: python3 demos/transfer_protocol.py  (tens of minutes on one core;
lower EPOCHS for a quicker, noisier picture)
"""

import logging

import torch

from dwpseg import data
from dwpseg.architectures import NetworkSpec
from dwpseg.dwp import VAEHyperparams
from dwpseg.experiments import ExperimentConfig, RunResult, TrainHyperparams, build_prior_bundle, run_protocol, train_source_networks

EPOCHS = 60
torch.set_num_threads(1)
logging.basicConfig(level=logging.INFO, format="%(message)s")
logging.getLogger("dwpseg.experiments").setLevel(logging.WARNING)
logging.getLogger("dwpseg.dwp").setLevel(logging.WARNING)

source = [data.preprocess(v) for v in data.generate("ms-like", 40, seed=0)]
target = [data.preprocess(v) for v in data.generate("tumor-like", 30, seed=1)]

snaps = train_source_networks(source, 2, 1, TrainHyperparams(max_epochs=30), NetworkSpec.toy(), seed=0)
bundle, _ = build_prior_bundle([(s.checkpoint_id, s.net) for s in snaps], VAEHyperparams(max_epochs=40), seed=0)
print("source validation DSC:", [round(s.val_dsc, 3) for s in snaps])

results = []
for method in ("ri", "pr", "prf", "dwp"):
    cfg = ExperimentConfig(
        method, train_sizes=[4], test_size=20, n_splits=2, seed=0,
        hp=TrainHyperparams(max_epochs=EPOCHS), network=NetworkSpec.toy(),
        source_checkpoint=snaps[-1].net, prior=bundle,
        # the data term is a per-image mean over 32^3 voxels; scale the KL to match
        kl_weight=1.0 / 32**3,
    )
    res = run_protocol(cfg, target)
    r = res.records[0]
    print(f"{method}: trainable {r.trainable_params} of {r.total_params} parameters")
    results.append(res)

print()
print(RunResult.merged(results).table("dsc"))
