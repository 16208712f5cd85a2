"""Show the supervision pipeline: encode a helper image, pool candidates,
build a step query, and pick the top-K features by cosine similarity."""

import numpy as np

from latentweave import tasks
from latentweave.model import ModelConfig, TransformerModel
from latentweave.sequences import build_supervision_sequence
from latentweave.teacher import build_targets

cfg = ModelConfig(vocab_size=tasks.VOCAB_SIZE, hidden_dim=32, n_layers=2,
                  n_heads=4, max_seq_len=160, latent_k=4,
                  patch_feature_dim=tasks.PATCH_FEATURE_DIM, seed=3)
teacher = TransformerModel(cfg)

spec = tasks.DatasetSpec(family="count", size=1, width=3, height=3, seed=5)
traj = next(t for s in range(50)
            if (t := tasks.gen_count_one(spec, s)).steps)

seq = build_supervision_sequence(traj, k=4)
sets = build_targets(traj, seq, teacher, group_limit=8)
for m, sup in enumerate(sets, start=1):
    print(f"segment {m}: picked candidates {list(sup.indices)} "
          f"scores {np.round(sup.scores, 3)}")
