"""Momentum teacher: EMA parameter tracking and supervision-target selection.

The teacher is a non-trainable parameter copy of the online model, updated
as theta_m <- tau * theta_m + (1 - tau) * theta.  For every latent segment
it distills the corresponding helper image into K feature vectors: encode
patches, pool the candidate set to at most L contiguous group means, score
candidates by cosine similarity against a step-specific query fusing
global intent, local text history, and the previous step's selection, and
keep the top K.

Everything here runs gradient-free; the online tape records nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import no_grad, ShapeError, ContractError
from .model import TransformerModel
from .sequences import InterleavedSequence


def ema_update(teacher, online, tau: float) -> None:
    """In-place EMA update of every teacher array toward the online copy.

    Accepts either two models or two name->Tensor parameter dicts.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    t_params = teacher.params if hasattr(teacher, "params") else teacher
    o_params = online.params if hasattr(online, "params") else online
    for name, t_param in t_params.items():
        o_param = o_params.get(name)
        if o_param is None or t_param.data.shape != o_param.data.shape:
            raise ShapeError(f"parameter {name}: teacher/online shape mismatch")
        t_param.data *= tau
        t_param.data += (1.0 - tau) * o_param.data


@dataclass
class CandidatePool:
    candidates: np.ndarray           # [P', H]
    source_ranges: list              # per candidate: (lo, hi) raw patch index range

    @property
    def size(self) -> int:
        return self.candidates.shape[0]


@dataclass
class StepQuery:
    q: np.ndarray
    u: np.ndarray
    q_text: np.ndarray | None
    z_prev_mean: np.ndarray | None
    empty_text_history: bool = False


@dataclass
class SupervisionSet:
    vectors: np.ndarray              # [K, H], in original spatial order
    indices: list                    # selected candidate indices, spatial order
    scores: list                     # cosine scores, non-increasing (rank order)
    padded: bool = False             # K exceeded the pool; repeats were needed


def group_mean(features: np.ndarray, limit: int) -> CandidatePool:
    """Contiguous mean-pooling of [P, H] features into at most ``limit`` units.

    P < limit is an identity passthrough.  Otherwise the row range splits
    into ``limit`` contiguous chunks with sizes as equal as possible,
    larger chunks first.
    """
    features = np.asarray(features, dtype=np.float64)
    p = features.shape[0]
    if p < 1 or limit < 1:
        raise ContractError("group_mean requires P >= 1 and L >= 1")
    if p < limit:
        return CandidatePool(features.copy(), [(i, i + 1) for i in range(p)])
    base, rem = divmod(p, limit)
    means = np.empty((limit, features.shape[1]))
    ranges = []
    lo = 0
    for i in range(limit):
        size = base + (1 if i < rem else 0)
        hi = lo + size
        means[i] = features[lo:hi].mean(axis=0)
        ranges.append((lo, hi))
        lo = hi
    return CandidatePool(means, ranges)


def intent_summaries(final_states: np.ndarray, scores: np.ndarray,
                     text_positions, image_positions):
    """Attention-weighted image summary, mean text summary, and their midpoint.

    scores: unnormalized text-to-image matrix over the same position sets.
    Weights are the softmax over image positions of the text-averaged scores.
    """
    text_positions = np.asarray(text_positions, dtype=np.intp)
    image_positions = np.asarray(image_positions, dtype=np.intp)
    col = scores.mean(axis=0)
    col = col - col.max()
    w = np.exp(col)
    w /= w.sum()
    r_img = w @ final_states[image_positions]
    r_txt = final_states[text_positions].mean(axis=0)
    u = 0.5 * (r_img + r_txt)
    return r_img, r_txt, u


def build_step_query(u: np.ndarray, text_history_states: np.ndarray | None,
                     z_prev: np.ndarray | None) -> StepQuery:
    """Fuse global intent, local text history, and the previous selection.

    The mean is 2-way at the first step (no previous latent) and 3-way
    afterwards.  An empty text history degrades to u alone, flagged.
    """
    components = [u]
    q_text = None
    empty = text_history_states is None or len(text_history_states) == 0
    if not empty:
        q_text = np.asarray(text_history_states).mean(axis=0)
        components.append(q_text)
    z_mean = None
    if z_prev is not None:
        z_mean = np.asarray(z_prev).mean(axis=0)
        components.append(z_mean)
    q = np.mean(components, axis=0)
    return StepQuery(q=q, u=u, q_text=q_text, z_prev_mean=z_mean,
                     empty_text_history=empty)


def _cosine_rows(q: np.ndarray, mat: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    nq = np.linalg.norm(q)
    nr = np.linalg.norm(mat, axis=1)
    sims = np.zeros(mat.shape[0])
    if nq < eps:
        return sims
    ok = nr >= eps
    sims[ok] = (mat[ok] @ q) / (nr[ok] * nq)
    return sims


def select_topk(query: np.ndarray, pool: CandidatePool, k: int) -> SupervisionSet:
    """Top-K candidates by cosine similarity to the query.

    Ties break toward the lower candidate index; the returned vectors keep
    original spatial order.  If K exceeds the pool, the lowest-index winner
    is repeated (flagged degenerate case).
    """
    sims = _cosine_rows(query, pool.candidates)
    order = sorted(range(pool.size), key=lambda i: (-sims[i], i))
    chosen = order[:min(k, pool.size)]
    scores = [float(sims[i]) for i in chosen]
    padded = False
    spatial = sorted(chosen)
    if k > pool.size:
        padded = True
        filler = spatial[0]
        while len(spatial) < k:
            spatial.append(filler)
            scores.append(float(sims[filler]))
    vectors = pool.candidates[spatial]
    return SupervisionSet(vectors=vectors, indices=spatial, scores=scores, padded=padded)


def pool_into_k(pool: CandidatePool, k: int) -> SupervisionSet:
    """Query-free baseline: contiguous mean-pooling of the pool into K vectors."""
    sub = group_mean(pool.candidates, k)
    vectors = sub.candidates
    indices = [lo for lo, _hi in sub.source_ranges]
    padded = pool.size < k
    if padded:
        reps = k - vectors.shape[0]
        vectors = np.concatenate([vectors, np.repeat(vectors[:1], reps, axis=0)])
        indices = indices + [indices[0]] * reps
    return SupervisionSet(vectors=vectors, indices=indices,
                          scores=[0.0] * k, padded=padded)


def _segment_spans(seq: InterleavedSequence, config):
    """Per segment: (kind, start, length) positions in the embedded stream."""
    spans = []
    pos = 0
    for seg in seq.segments:
        if seg.kind == "text":
            n = len(seg.token_ids)
        elif seg.kind == "image":
            n = seg.patches.shape[0]
        else:
            n = seg.k + 2
        spans.append((seg, pos, n))
        pos += n
    return spans


def build_targets(trajectory, seq: InterleavedSequence, teacher: TransformerModel,
                  group_limit: int, mechanism: str = "adaptive") -> list:
    """One SupervisionSet per latent segment of ``seq``.

    The prompt-level attention summary (image-weighted + text-mean intent)
    is computed once per trajectory from the question and input image under
    the teacher's parameters; per-step queries then add the local text
    history and the previous step's selection.  No gradients are recorded.
    """
    from .sequences import embed_sequence  # local import avoids a cycle at import time

    cfg = teacher.config
    k = seq.k
    with no_grad():
        # prompt pass: question text + input image
        spans = _segment_spans(seq, cfg)
        first_text = spans[0]
        image_span = next((s for s in spans if s[0].kind == "image"), None)
        if image_span is None:
            raise ContractError("build_targets requires an input image in the prompt")

        latent_spans = [s for s in spans if s[0].kind == "latent"]
        if not latent_spans:
            return []

        # candidate pools per latent segment
        pools = []
        for seg, _start, _n in latent_spans:
            if seg.source_image == -1:
                feats = np.concatenate(
                    [teacher.encode_image(img).data for _t, img in trajectory.steps])
            else:
                feats = teacher.encode_image(trajectory.steps[seg.source_image][1]).data
            pools.append(group_mean(feats, group_limit))

        if mechanism == "pooling":
            return [pool_into_k(pool, k) for pool in pools]
        if mechanism != "adaptive":
            raise ContractError(f"unknown mechanism {mechanism!r}")

        prompt_seq = InterleavedSequence(seq.segments[:2], k)
        emb, _layout = embed_sequence(teacher, prompt_seq)
        out = teacher.forward(emb)
        text_pos = np.arange(first_text[1], first_text[1] + first_text[2])
        img_pos = np.arange(image_span[1], image_span[1] + image_span[2])
        scores = teacher.qk_scores(out, text_pos, img_pos).data
        _r_img, _r_txt, u = intent_summaries(out.final_states.data, scores,
                                             text_pos, img_pos)

        # sequential per-step selection: run the teacher over the growing
        # prefix, injecting its own previous selections at earlier pads
        results = []
        prev = None
        for idx, (seg, start, _n) in enumerate(latent_spans):
            li = 0
            safe_prefix = []
            for s in seq.segments:
                if s is seg:
                    break
                if s.kind == "latent":
                    # earlier pads carry the teacher's own prior selections
                    clone = type(s)(k=s.k, source_image=s.source_image)
                    clone.inputs = results[li].vectors
                    li += 1
                    safe_prefix.append(clone)
                else:
                    safe_prefix.append(s)
            prefix = InterleavedSequence(safe_prefix, k)
            emb_p, _ = embed_sequence(teacher, prefix)
            out_p = teacher.forward(emb_p)

            # local text history: text tokens between the previous latent
            # segment (or sequence start) and this one
            hist_lo = 0
            if idx > 0:
                prev_seg_start = latent_spans[idx - 1][1]
                hist_lo = prev_seg_start + latent_spans[idx - 1][2]
            hist_positions = []
            pos = 0
            for s, s_start, n in spans:
                if s is seg:
                    break
                if s.kind == "text":
                    for j in range(s_start, s_start + n):
                        if j >= hist_lo:
                            hist_positions.append(j)
            hist_states = out_p.final_states.data[hist_positions] if hist_positions else None

            qstep = build_step_query(u, hist_states,
                                     prev.vectors if prev is not None else None)
            sel = select_topk(qstep.q, pools[idx], k)
            results.append(sel)
            prev = sel
        return results
