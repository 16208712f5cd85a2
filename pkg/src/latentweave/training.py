"""Two-stage training: teacher-injected joint supervision, then text-only
latent relaxation with self-feedback, plus AdamW/cosine optimization and
greedy-decode evaluation.

Stage 1 injects the teacher's selected features at latent pad positions
and adds a next-step alignment penalty 1 - cos(h_{t-1}, z_t) averaged over
all latent slots; stage 2 feeds the model's own hidden states back as
latent inputs and optimizes text cross-entropy end-to-end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tensor, ContractError, concat_rows, cosine_sim, cross_entropy, embedding, finite_diff_check
from .model import ModelConfig, TransformerModel
from .sequences import (
    InterleavedSequence,
    TextSegment,
    ImageSegment,
    build_supervision_sequence,
    decode,
    embed_sequence,
    TruncationError,
)
from . import tasks
from .teacher import build_targets, ema_update


@dataclass
class TrainConfig:
    structure: str = "interleaved"     # interleaved | direct
    mechanism: str = "adaptive"        # adaptive | pooling
    stage1_epochs: int = 10
    stage2_epochs: int = 5
    lr: float = 1e-5
    weight_decay: float = 0.01
    lambda_sim: float = 1.0
    tau: float = 0.999
    group_limit: int = 16              # candidate-pool cap L (784 at paper scale)
    ema_every: int = 1
    detach_feedback: bool = False
    seed: int = 42
    shuffle: bool = True
    eval_every: int = 1
    eval_limit: int = 0                # 0 = evaluate the whole test split
    max_gen_tokens: int = 160

    def __post_init__(self):
        if self.structure not in ("interleaved", "direct"):
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.mechanism not in ("adaptive", "pooling"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")


@dataclass
class LossBreakdown:
    ce: Tensor
    align: Tensor | None
    total: Tensor
    per_segment_cos: list = field(default_factory=list)

    @property
    def ce_value(self) -> float:
        return self.ce.item()

    @property
    def align_value(self) -> float:
        return 0.0 if self.align is None else self.align.item()

    @property
    def total_value(self) -> float:
        return self.total.item()


def _ce_targets(layout, k_prompt: int):
    """Next-token targets/mask: supervise text and marker tokens after the prompt."""
    kinds = layout["kinds"]
    ids = layout["token_ids"]
    t = len(kinds)
    targets = np.zeros(t, dtype=np.intp)
    mask = np.zeros(t)
    for pos in range(t - 1):
        nxt = pos + 1
        if nxt < k_prompt:
            continue
        if kinds[nxt] in ("text", "marker"):
            targets[pos] = ids[nxt]
            mask[pos] = 1.0
    return targets, mask


def _prompt_len(seq: InterleavedSequence) -> int:
    n = 0
    for seg in seq.segments[:2]:
        if seg.kind == "text":
            n += len(seg.token_ids)
        elif seg.kind == "image":
            n += seg.patches.shape[0]
    return n


def _pad_positions(layout):
    """Latent slot positions grouped per segment, in stream order."""
    groups = []
    cur = None
    for pos, kind in enumerate(layout["kinds"]):
        if kind == "pad":
            if cur is None:
                cur = []
            cur.append(pos)
        elif cur is not None:
            groups.append(cur)
            cur = None
    if cur is not None:
        groups.append(cur)
    return groups


def stage1_loss(model: TransformerModel, seq: InterleavedSequence,
                lambda_sim: float) -> LossBreakdown:
    """Joint text cross-entropy + next-step latent alignment.

    Latent inputs must already carry the teacher's selections (seg.inputs);
    each slot's alignment target is the same selection (seg.targets).
    """
    for seg in seq.latent_segments():
        if seg.targets is None or seg.inputs is None:
            raise ContractError("stage-1 batch requires teacher targets at every latent segment")

    emb, layout = embed_sequence(model, seq, latent_inputs="injected")
    out = model.forward(emb)
    targets, mask = _ce_targets(layout, _prompt_len(seq))
    ce = cross_entropy(out.logits, targets, mask)

    groups = _pad_positions(layout)
    latents = seq.latent_segments()
    total_slots = sum(len(g) for g in groups)
    per_segment_cos = []
    align_terms = []
    for seg, positions in zip(latents, groups):
        seg_cos = []
        for slot, pos in enumerate(positions):
            z = Tensor(np.asarray(seg.targets[slot], dtype=np.float64))
            c = cosine_sim(out.final_states.row(pos - 1), z)
            seg_cos.append(c.item())
            align_terms.append(1.0 - c)
        per_segment_cos.append(float(np.mean(seg_cos)) if seg_cos else 0.0)

    if align_terms:
        align = align_terms[0]
        for term in align_terms[1:]:
            align = align + term
        align = align / total_slots
    else:
        align = Tensor(0.0)
    total = ce + lambda_sim * align
    return LossBreakdown(ce=ce, align=align, total=total, per_segment_cos=per_segment_cos)


def stage2_loss(model: TransformerModel, seq: InterleavedSequence,
                detach_feedback: bool = False) -> LossBreakdown:
    """Text-only cross-entropy with the model's own latent feedback.

    Latent slot inputs are produced sequentially: the input of slot t+1 is
    the model's final-layer hidden state at position t.  Gradients flow
    through the feedback by default.
    """
    cfg = model.config
    if not seq.segments or seq.segments[-1].kind != "text" or not seq.segments[-1].token_ids:
        raise ContractError("stage-2 sequence must terminate in nonempty answer text")

    pieces = []
    kinds = []
    ids = []
    n_positions = 0
    for seg in seq.segments:
        if seg.kind == "text":
            pieces.append(embedding(model.params["tok_emb"], seg.token_ids))
            kinds.extend(["text"] * len(seg.token_ids))
            ids.extend(int(t) for t in seg.token_ids)
            n_positions += len(seg.token_ids)
        elif seg.kind == "image":
            pieces.append(model.encode_image(seg.patches))
            kinds.extend(["image"] * seg.patches.shape[0])
            ids.extend([None] * seg.patches.shape[0])
            n_positions += seg.patches.shape[0]
        else:
            pieces.append(embedding(model.params["tok_emb"], [cfg.latent_start_id]))
            kinds.append("marker")
            ids.append(cfg.latent_start_id)
            n_positions += 1
            for _slot in range(seg.k):
                out = model.forward(concat_rows(pieces))
                h = out.final_states.row(n_positions - 1)
                if detach_feedback:
                    h = h.detach()
                pieces.append(h)
                kinds.append("pad")
                ids.append(cfg.latent_pad_id)
                n_positions += 1
            pieces.append(embedding(model.params["tok_emb"], [cfg.latent_end_id]))
            kinds.append("marker")
            ids.append(cfg.latent_end_id)
            n_positions += 1

    out = model.forward(concat_rows(pieces))
    layout = {"kinds": kinds, "token_ids": ids}
    targets, mask = _ce_targets(layout, _prompt_len(seq))
    ce = cross_entropy(out.logits, targets, mask)
    return LossBreakdown(ce=ce, align=None, total=ce)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total)); no warmup, floor 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int
    base_lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, base_lr: float, weight_decay: float) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   step=0, base_lr=base_lr, weight_decay=weight_decay)


def adamw_step(state: OptimizerState, params, lr: float) -> None:
    """Decoupled-weight-decay Adam update; missing grads act as zeros."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        mhat = state.m[name] / (1 - state.beta1 ** t)
        vhat = state.v[name] / (1 - state.beta2 ** t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p.data)


def extract_answer(gen_seq: InterleavedSequence) -> list:
    """Answer tokens: text after the final latent segment (whole output when
    none), then from the last 'answer' marker to keep the rule uniform
    across interleaved and direct structures."""
    tail = []
    for seg in gen_seq.segments:
        if seg.kind == "latent":
            tail = []
        elif seg.kind == "text":
            tail.extend(seg.token_ids)
    if tasks.ANSWER_ID in tail:
        tail = tail[len(tail) - 1 - tail[::-1].index(tasks.ANSWER_ID):]
    return tail


def prompt_sequence(traj, k: int) -> InterleavedSequence:
    return InterleavedSequence(
        [TextSegment(list(traj.question_ids)),
         ImageSegment(np.asarray(traj.input_image, dtype=np.float64))], k)


def evaluate(model: TransformerModel, trajectories, max_gen_tokens: int = 160) -> dict:
    """Greedy-decode accuracy; malformed generations count as wrong."""
    k = model.config.latent_k
    per_family = {}
    correct = 0
    for traj in trajectories:
        try:
            gen = decode(model, prompt_sequence(traj, k), k,
                         max_tokens=max_gen_tokens, eos_id=tasks.EOS_ID)
            # the prompt question is part of decode's output sequence; drop it
            gen_only = InterleavedSequence(
                [s for s in gen.segments if s.kind != "image"][1:], k)
            ok = extract_answer(gen_only) == list(traj.answer_ids)
        except TruncationError:
            ok = False
        fam = per_family.setdefault(traj.family, [0, 0])
        fam[1] += 1
        fam[0] += int(ok)
        correct += int(ok)
    n = max(1, len(trajectories))
    return {
        "accuracy": correct / n,
        "n": len(trajectories),
        "per_family": {f: c / t for f, (c, t) in per_family.items()},
    }


def run_training(model_cfg: ModelConfig, train_cfg: TrainConfig,
                 train_trajs, test_trajs):
    """Full two-stage run.  Returns (model, metrics) where metrics is a list
    of per-step and per-epoch records, deterministic given the seed."""
    model = TransformerModel(model_cfg, trainable=True)
    teacher = model.clone(trainable=False)
    opt = OptimizerState.init(model.trainable_params(), train_cfg.lr,
                              train_cfg.weight_decay)

    sequences = [build_supervision_sequence(t, model_cfg.latent_k,
                                            structure=train_cfg.structure)
                 for t in train_trajs]
    n = len(sequences)
    total_steps = (train_cfg.stage1_epochs + train_cfg.stage2_epochs) * n
    metrics = []
    step = 0

    def eval_record(epoch, stage):
        subset = test_trajs
        if train_cfg.eval_limit and len(test_trajs) > train_cfg.eval_limit:
            subset = test_trajs[:train_cfg.eval_limit]
        rep = evaluate(model, subset, train_cfg.max_gen_tokens)
        return {"kind": "epoch", "epoch": epoch, "stage": stage,
                "eval_accuracy": rep["accuracy"], "eval_n": rep["n"]}

    for epoch in range(train_cfg.stage1_epochs):
        # teacher drifts with EMA: rebuild targets once per epoch, cache within
        for traj, seq in zip(train_trajs, sequences):
            sets = build_targets(traj, seq, teacher, train_cfg.group_limit,
                                 mechanism=train_cfg.mechanism)
            for seg, sup in zip(seq.latent_segments(), sets):
                seg.targets = sup.vectors
                seg.inputs = sup.vectors
        order = np.arange(n)
        if train_cfg.shuffle:
            np.random.default_rng(train_cfg.seed * 7919 + epoch).shuffle(order)
        for i in order:
            loss = stage1_loss(model, sequences[i], train_cfg.lambda_sim)
            model.zero_grads()
            loss.total.backward()
            lr = cosine_lr(step, total_steps, train_cfg.lr)
            adamw_step(opt, model.trainable_params(), lr)
            if train_cfg.ema_every and step % train_cfg.ema_every == 0:
                ema_update(teacher, model, train_cfg.tau)
            metrics.append({"kind": "step", "step": step, "stage": 1, "lr": lr,
                            "ce": loss.ce_value, "align": loss.align_value,
                            "total": loss.total_value})
            step += 1
        if train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
            metrics.append(eval_record(epoch, 1))

    for epoch2 in range(train_cfg.stage2_epochs):
        epoch = train_cfg.stage1_epochs + epoch2
        order = np.arange(n)
        if train_cfg.shuffle:
            np.random.default_rng(train_cfg.seed * 7919 + epoch).shuffle(order)
        for i in order:
            loss = stage2_loss(model, sequences[i], train_cfg.detach_feedback)
            model.zero_grads()
            loss.total.backward()
            lr = cosine_lr(step, total_steps, train_cfg.lr)
            adamw_step(opt, model.trainable_params(), lr)
            metrics.append({"kind": "step", "step": step, "stage": 2, "lr": lr,
                            "ce": loss.ce_value, "align": 0.0,
                            "total": loss.total_value})
            step += 1
        if train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
            metrics.append(eval_record(epoch, 2))

    final = eval_record(train_cfg.stage1_epochs + train_cfg.stage2_epochs - 1, 0)
    final["kind"] = "final"
    metrics.append(final)
    return model, metrics


def gradcheck_report(seed: int = 0, hidden_dim: int = 64, n_layers: int = 2,
                     latent_k: int = 3, samples_per_param: int = 3,
                     eps: float = 1e-5) -> dict:
    """Finite-difference audit of both training losses on a seeded micro-model."""
    import time
    start = time.time()
    spec = tasks.DatasetSpec(family="gridnav", size=1, width=3, height=3,
                             max_steps=3, latent_k=latent_k, seed=seed + 1)
    traj = tasks.gen_gridnav_one(spec, seed + 100)
    cfg = ModelConfig(vocab_size=tasks.VOCAB_SIZE, hidden_dim=hidden_dim,
                      n_layers=n_layers, latent_k=latent_k,
                      patch_feature_dim=tasks.PATCH_FEATURE_DIM, seed=seed)
    model = TransformerModel(cfg, trainable=True)
    teacher = model.clone(trainable=False)
    seq = build_supervision_sequence(traj, latent_k)
    sets = build_targets(traj, seq, teacher, group_limit=4)
    for seg, sup in zip(seq.latent_segments(), sets):
        seg.targets = sup.vectors
        seg.inputs = sup.vectors

    params = model.trainable_params()
    rng = np.random.default_rng(seed)
    err1, worst1 = finite_diff_check(
        lambda: stage1_loss(model, seq, 1.0).total, params,
        eps=eps, samples_per_param=samples_per_param, rng=rng)
    err2, worst2 = finite_diff_check(
        lambda: stage2_loss(model, seq).total, params,
        eps=eps, samples_per_param=samples_per_param, rng=rng)
    worst_err, worst_name, worst_stage = max(
        (err1, worst1, 1), (err2, worst2, 2))
    return {
        "stage1_max_rel_error": err1,
        "stage2_max_rel_error": err2,
        "max_rel_error": max(err1, err2),
        "worst_parameter": worst_name,
        "worst_stage": worst_stage,
        "passed": max(err1, err2) < 1e-3,
        "elapsed_seconds": time.time() - start,
    }
