"""Train a miniature model end to end, then export relevance heatmaps
showing which helper-image cells each latent segment resembles."""

from latentweave import tasks
from latentweave.heatmap import relevance_maps
from latentweave.model import ModelConfig
from latentweave.training import TrainConfig, evaluate, run_training

spec = tasks.DatasetSpec(family="count", size=30, width=3, height=3,
                         latent_k=2, seed=42)
train, test = tasks.generate(spec)

mcfg = ModelConfig(vocab_size=tasks.VOCAB_SIZE, hidden_dim=32, n_layers=1,
                   n_heads=2, max_seq_len=256, latent_k=2,
                   patch_feature_dim=tasks.PATCH_FEATURE_DIM, seed=42)
tcfg = TrainConfig(structure="interleaved", mechanism="adaptive",
                   stage1_epochs=3, stage2_epochs=1, lr=1e-3, seed=42,
                   eval_every=100)
model, metrics = run_training(mcfg, tcfg, train, test)
print("final:", [m for m in metrics if m["kind"] == "final"][-1])

traj = next(t for t in test if t.steps)
for m, grid in enumerate(relevance_maps(model, traj), start=1):
    print(f"map {m} (sums to {grid.sum():.6f}):")
    for row in grid:
        print("  " + " ".join(f"{v:.3f}" for v in row))
