"""Generate a small navigation dataset and verify every answer by replay.

Each trajectory carries a question, per-move reasoning text, a helper
image after every move, and a final answer that an independent oracle can
walk through the stored world.
"""

from latentweave import tasks

spec = tasks.DatasetSpec(family="gridnav", size=20, width=4, height=4,
                         max_steps=4, max_hazards=2, seed=7)
train, test = tasks.generate(spec)
print(f"{len(train)} train / {len(test)} test trajectories")

traj = train[0]
print("question:", " ".join(tasks.words(traj.question_ids)))
for m, (text, img) in enumerate(traj.steps, start=1):
    print(f"  step {m}:", " ".join(tasks.words(text)), "| image", img.shape)
print("answer:", " ".join(tasks.words(traj.answer_ids)))

ok = sum(tasks.replay_gridnav(t) for t in train + test)
print(f"replay oracle: {ok}/{len(train) + len(test)} answers verified")
