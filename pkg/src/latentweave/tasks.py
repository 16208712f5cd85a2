"""Deterministic synthetic task generators with interleaved helper images.

Helper "images" are categorical patch grids: one patch per cell, each a
one-hot content vector (empty / agent / goal / hazard / object / counted)
plus two normalized coordinate channels.  Every trajectory's answer is
verifiable by replaying it against the stored world description.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

WORDS = [
    "<eos>", "answer", "navigate", "from", "start", "to", "goal", "avoid",
    "hazard", "count", "the", "objects", "grid", "move", "up", "down",
    "left", "right", "found", "object", "at", "then", "done",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
]
TOKEN_TO_ID = {w: i for i, w in enumerate(WORDS)}
VOCAB_SIZE = len(WORDS) + 3           # plus latent_start / latent_pad / latent_end
EOS_ID = TOKEN_TO_ID["<eos>"]
ANSWER_ID = TOKEN_TO_ID["answer"]

# feature channels per cell
CH_EMPTY, CH_AGENT, CH_GOAL, CH_HAZARD, CH_OBJECT, CH_COUNTED = range(6)
PATCH_FEATURE_DIM = 8                 # 6 content channels + (row, col) coords

DIRECTIONS = {"up": (0, -1), "down": (0, 1), "left": (-1, 0), "right": (1, 0)}
DIR_ORDER = ["up", "down", "left", "right"]


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


def tokens(words) -> list:
    return [TOKEN_TO_ID[w] for w in words]


def words(ids) -> list:
    return [WORDS[i] if 0 <= i < len(WORDS) else f"<{i}>" for i in ids]


def render_grid(width: int, height: int, agent=None, goal=None, hazards=(),
                objects=(), counted=()) -> np.ndarray:
    """Render one [width*height, 8] patch grid in raster (row-major) order."""
    cells = np.zeros((width * height, PATCH_FEATURE_DIM))
    hazards, objects, counted = set(map(tuple, hazards)), set(map(tuple, objects)), set(map(tuple, counted))
    for y in range(height):
        for x in range(width):
            i = y * width + x
            pos = (x, y)
            if agent is not None and pos == tuple(agent):
                cells[i, CH_AGENT] = 1.0
            elif goal is not None and pos == tuple(goal):
                cells[i, CH_GOAL] = 1.0
            elif pos in hazards:
                cells[i, CH_HAZARD] = 1.0
            elif pos in counted:
                cells[i, CH_COUNTED] = 1.0
            elif pos in objects:
                cells[i, CH_OBJECT] = 1.0
            else:
                cells[i, CH_EMPTY] = 1.0
            cells[i, 6] = y / (height - 1) if height > 1 else 0.0
            cells[i, 7] = x / (width - 1) if width > 1 else 0.0
    return cells


@dataclass
class Trajectory:
    family: str
    seed: int
    grid: tuple                      # (width, height)
    world: dict                      # enough to replay the answer independently
    question_ids: list
    input_image: np.ndarray
    steps: list                      # [(text_ids, helper_image [P, 8]), ...]
    answer_ids: list

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "seed": self.seed,
            "grid": list(self.grid),
            "world": self.world,
            "question": list(map(int, self.question_ids)),
            "input_image": self.input_image.tolist(),
            "steps": [{"text": list(map(int, t)), "image": img.tolist()}
                      for t, img in self.steps],
            "answer": list(map(int, self.answer_ids)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            family=d["family"], seed=d["seed"], grid=tuple(d["grid"]),
            world=d["world"], question_ids=list(d["question"]),
            input_image=np.asarray(d["input_image"], dtype=np.float64),
            steps=[(list(s["text"]), np.asarray(s["image"], dtype=np.float64))
                   for s in d["steps"]],
            answer_ids=list(d["answer"]),
        )

    def __eq__(self, other):
        return isinstance(other, Trajectory) and self.to_dict() == other.to_dict()


@dataclass
class DatasetSpec:
    family: str = "gridnav"          # gridnav | count
    size: int = 100
    width: int = 4
    height: int = 4
    max_steps: int = 6
    max_hazards: int = 3
    latent_k: int = 8
    train_ratio: float = 0.8
    seed: int = 42

    def __post_init__(self):
        if self.family not in ("gridnav", "count"):
            raise DatasetFormatError(f"unknown task family {self.family!r}")
        if self.width < 3 or self.height < 3:
            raise DatasetFormatError("grid must be at least 3x3")
        if not 0.0 < self.train_ratio < 1.0:
            raise DatasetFormatError("train_ratio must lie strictly between 0 and 1")


def _bfs_path(width, height, start, goal, hazards):
    """Shortest path as a move list; deterministic tie-breaking by DIR_ORDER."""
    from collections import deque
    blocked = set(map(tuple, hazards))
    prev = {tuple(start): None}
    queue = deque([tuple(start)])
    while queue:
        cur = queue.popleft()
        if cur == tuple(goal):
            moves = []
            while prev[cur] is not None:
                p, mv = prev[cur]
                moves.append(mv)
                cur = p
            return list(reversed(moves))
        for mv in DIR_ORDER:
            dx, dy = DIRECTIONS[mv]
            nxt = (cur[0] + dx, cur[1] + dy)
            if not (0 <= nxt[0] < width and 0 <= nxt[1] < height):
                continue
            if nxt in blocked or nxt in prev:
                continue
            prev[nxt] = (cur, mv)
            queue.append(nxt)
    return None


def gen_gridnav_one(spec: DatasetSpec, seed: int) -> Trajectory:
    rng = np.random.default_rng(seed)
    w, h = spec.width, spec.height
    cells = [(x, y) for y in range(h) for x in range(w)]
    for _attempt in range(64):
        picks = rng.permutation(len(cells))
        start = cells[picks[0]]
        goal = cells[picks[1]]
        n_haz = int(rng.integers(0, spec.max_hazards + 1))
        hazards = [cells[picks[2 + i]] for i in range(min(n_haz, len(cells) - 2))]
        path = _bfs_path(w, h, start, goal, hazards)
        if path is None or not 1 <= len(path) <= spec.max_steps:
            continue
        world = {"start": list(start), "goal": list(goal),
                 "hazards": [list(c) for c in hazards]}
        input_image = render_grid(w, h, agent=start, goal=goal, hazards=hazards)
        steps = []
        pos = start
        for mv in path:
            dx, dy = DIRECTIONS[mv]
            pos = (pos[0] + dx, pos[1] + dy)
            img = render_grid(w, h, agent=pos, goal=None if pos == goal else goal,
                              hazards=hazards)
            steps.append((tokens(["move", mv]), img))
        answer = [ANSWER_ID] + tokens(path) + [EOS_ID]
        question = tokens(["navigate", "from", "start", "to", "goal", "avoid", "hazard"])
        return Trajectory(family="gridnav", seed=seed, grid=(w, h), world=world,
                          question_ids=question, input_image=input_image,
                          steps=steps, answer_ids=answer)
    raise GenerationError(f"no valid gridnav world after bounded retries (seed {seed})")


def replay_gridnav(traj: Trajectory) -> bool:
    """Independent oracle: walk the answer moves through the stored world."""
    w, h = traj.grid
    pos = tuple(traj.world["start"])
    goal = tuple(traj.world["goal"])
    hazards = set(map(tuple, traj.world["hazards"]))
    toks = words(traj.answer_ids)
    if not toks or toks[0] != "answer" or toks[-1] != "<eos>":
        return False
    for mv in toks[1:-1]:
        if mv not in DIRECTIONS:
            return False
        dx, dy = DIRECTIONS[mv]
        pos = (pos[0] + dx, pos[1] + dy)
        if not (0 <= pos[0] < w and 0 <= pos[1] < h) or pos in hazards:
            return False
    return pos == goal


def gen_count_one(spec: DatasetSpec, seed: int) -> Trajectory:
    rng = np.random.default_rng(seed)
    w, h = spec.width, spec.height
    cells = [(x, y) for y in range(h) for x in range(w)]
    n = int(rng.integers(0, min(9, len(cells)) + 1))
    picks = rng.permutation(len(cells))[:n]
    objects = sorted(cells[i] for i in picks)   # raster counting order
    world = {"objects": [list(c) for c in objects]}
    input_image = render_grid(w, h, objects=objects)
    steps = []
    for m in range(1, n + 1):
        img = render_grid(w, h, objects=objects[m:], counted=objects[:m])
        steps.append((tokens(["found", "object"]), img))
    answer = [ANSWER_ID, TOKEN_TO_ID[str(n)], EOS_ID]
    question = tokens(["count", "the", "objects"])
    return Trajectory(family="count", seed=seed, grid=(w, h), world=world,
                      question_ids=question, input_image=input_image,
                      steps=steps, answer_ids=answer)


def recount(traj: Trajectory) -> bool:
    """Independent oracle: count object cells in the raw input grid."""
    n_objects = int(traj.input_image[:, CH_OBJECT].sum())
    toks = words(traj.answer_ids)
    return toks == ["answer", str(n_objects), "<eos>"]


def generate(spec: DatasetSpec):
    """Deterministic (train, test) split; disjoint per-trajectory seeds."""
    gen_one = gen_gridnav_one if spec.family == "gridnav" else gen_count_one
    trajs = [gen_one(spec, spec.seed * 1_000_003 + i) for i in range(spec.size)]
    n_train = int(round(spec.size * spec.train_ratio))
    return trajs[:n_train], trajs[n_train:]


def save(trajectories, path) -> None:
    """Line-delimited JSON, one trajectory per line, key-sorted for stable bytes."""
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_dict(), sort_keys=True))
            fh.write("\n")


def load(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Trajectory.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}: malformed record at line {lineno}: {exc}") from exc
    return out
