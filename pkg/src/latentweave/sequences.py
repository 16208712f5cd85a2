"""Interleaved latent-text sequences: structure, validation, and decoding.

A sequence is an ordered list of segments.  Text segments carry discrete
token ids; latent segments occupy exactly K slots and serialize to
latent_start, K x latent_pad, latent_end; an image segment may appear
once, in the prompt, carrying the encoded input image patches as injected
embeddings (it is never produced by generation).

During decoding, emitting latent_start switches the model into latent
mode for exactly K steps in which the input embedding of step t+1 is the
hidden state of step t, bypassing the vocabulary; latent_end is then
force-emitted and text generation resumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, ContractError, concat_rows, embedding
from .model import TransformerModel


class DataError(ValueError):
    pass


class TruncationError(RuntimeError):
    def __init__(self, msg, partial):
        super().__init__(msg)
        self.partial = partial


@dataclass
class TextSegment:
    token_ids: list

    kind = "text"


@dataclass
class ImageSegment:
    """Prompt-only: raw patch grid injected through the frozen vision encoder."""
    patches: np.ndarray
    source_image: int = -1

    kind = "image"


@dataclass
class LatentSegment:
    k: int
    source_image: int | None = None       # index of the helper image it replaces
    targets: np.ndarray | None = None     # teacher supervision vectors [K, H]
    inputs: np.ndarray | None = None      # injected/generated input vectors [K, H]

    kind = "latent"


@dataclass
class InterleavedSequence:
    segments: list
    k: int

    def text_token_ids(self) -> list:
        out = []
        for seg in self.segments:
            if seg.kind == "text":
                out.extend(seg.token_ids)
        return out

    def latent_segments(self) -> list:
        return [s for s in self.segments if s.kind == "latent"]

    def token_stream(self, config) -> list:
        """Serialized ids; image patch positions are None (injected, no token)."""
        out = []
        for seg in self.segments:
            if seg.kind == "text":
                out.extend(int(t) for t in seg.token_ids)
            elif seg.kind == "latent":
                out.append(config.latent_start_id)
                out.extend([config.latent_pad_id] * seg.k)
                out.append(config.latent_end_id)
            else:
                out.extend([None] * seg.patches.shape[0])
        return out

    def dump_records(self) -> list:
        """One debugging record per segment."""
        recs = []
        for seg in self.segments:
            if seg.kind == "text":
                recs.append({"kind": "text", "token_ids": list(map(int, seg.token_ids))})
            elif seg.kind == "latent":
                recs.append({"kind": "latent", "slots": seg.k,
                             "source_image": seg.source_image,
                             "vector_dim": None if seg.inputs is None else int(seg.inputs.shape[1])})
            else:
                recs.append({"kind": "image", "patches": list(seg.patches.shape),
                             "source_image": seg.source_image})
        return recs


def build_supervision_sequence(trajectory, k: int, structure: str = "interleaved",
                               include_input_image: bool = True) -> InterleavedSequence:
    """Convert a trajectory into the training sequence, replacing each helper
    image with a K-slot latent segment.

    structure "interleaved": question, [input image], (step text, latent)*, answer.
    structure "direct": question, [input image], one latent segment standing in
    for all helper images, then all step text and the answer.
    """
    if not trajectory.question_ids:
        raise DataError("trajectory must start with question text")
    segments = [TextSegment(list(trajectory.question_ids))]
    if include_input_image:
        segments.append(ImageSegment(np.asarray(trajectory.input_image, dtype=np.float64)))

    steps = trajectory.steps
    for m, (text_ids, image) in enumerate(steps):
        if image is None:
            raise DataError(f"missing helper image for reasoning step {m + 1}")

    if structure == "interleaved":
        for m, (text_ids, _image) in enumerate(steps):
            segments.append(TextSegment(list(text_ids)))
            segments.append(LatentSegment(k=k, source_image=m))
        segments.append(TextSegment(list(trajectory.answer_ids)))
    elif structure == "direct":
        if steps:
            # single latent segment straight after the prompt, sourced from the
            # pooled helper images (source_image -1 = all)
            segments.append(LatentSegment(k=k, source_image=-1))
            tail = []
            for text_ids, _image in steps:
                tail.extend(text_ids)
            tail.extend(trajectory.answer_ids)
            segments.append(TextSegment(tail))
        else:
            segments.append(TextSegment(list(trajectory.answer_ids)))
    else:
        raise DataError(f"unknown structure {structure!r}")

    return InterleavedSequence(segments=_merge_adjacent_text(segments), k=k)


def _merge_adjacent_text(segments):
    merged = []
    for seg in segments:
        if seg.kind == "text" and merged and merged[-1].kind == "text":
            merged[-1].token_ids.extend(seg.token_ids)
        else:
            merged.append(seg)
    return merged


def strip_latents(seq: InterleavedSequence) -> list:
    """Text token stream with every latent segment removed (round-trip check)."""
    return seq.text_token_ids()


def validate(seq: InterleavedSequence, config=None) -> list:
    """Return a list of violation strings; empty list means well-formed."""
    violations = []
    segs = seq.segments
    if not segs or segs[0].kind != "text":
        violations.append("sequence must start with text")
    if segs and segs[-1].kind != "text":
        violations.append("sequence must end with text")
    seen_non_prompt = False
    for i, seg in enumerate(segs):
        if seg.kind == "latent":
            seen_non_prompt = True
            if seg.k != seq.k:
                violations.append(f"segment length: latent segment {i} has {seg.k} slots, expected {seq.k}")
            if seg.inputs is not None and seg.inputs.shape[0] != seg.k:
                violations.append(f"segment {i}: injected inputs count != K")
        elif seg.kind == "image":
            if seen_non_prompt or i > 1:
                violations.append(f"image segment {i} outside the prompt")
        else:
            if config is not None:
                for t in seg.token_ids:
                    if t in (config.latent_start_id, config.latent_end_id, config.latent_pad_id):
                        violations.append("unbalanced markers: special token inside text segment")
                        break
            seen_non_prompt = seen_non_prompt or i > 0
    for a, b in zip(segs, segs[1:]):
        if a.kind == "latent" and b.kind == "latent":
            violations.append("adjacent latent segments without text between them")
    return violations


def check_grammar(token_ids, config, k: int) -> bool:
    """True iff ids match text+ (latent_start pad^K latent_end text+)* exactly."""
    i, n = 0, len(token_ids)
    specials = {config.latent_start_id, config.latent_end_id, config.latent_pad_id}

    def eat_text():
        nonlocal i
        start = i
        while i < n and token_ids[i] not in specials:
            i += 1
        return i > start

    if not eat_text():
        return False
    while i < n:
        if token_ids[i] != config.latent_start_id:
            return False
        i += 1
        for _ in range(k):
            if i >= n or token_ids[i] != config.latent_pad_id:
                return False
            i += 1
        if i >= n or token_ids[i] != config.latent_end_id:
            return False
        i += 1
        if not eat_text():
            return False
    return True


def embed_sequence(model: TransformerModel, seq: InterleavedSequence,
                   latent_inputs: str = "injected"):
    """Assemble input embeddings for a full sequence.

    latent_inputs "injected": latent slots use seg.inputs (teacher targets or
    recorded vectors).  This is the stage-1 / teacher path; the stage-2
    self-feedback path is assembled incrementally in the training module.

    Returns (embeddings Tensor [T, H], layout) where layout maps positions to
    kinds and token ids.
    """
    cfg = model.config
    pieces = []
    kinds = []
    ids = []
    for seg in seq.segments:
        if seg.kind == "text":
            pieces.append(embedding(model.params["tok_emb"], seg.token_ids))
            kinds.extend(["text"] * len(seg.token_ids))
            ids.extend(int(t) for t in seg.token_ids)
        elif seg.kind == "image":
            pieces.append(model.encode_image(seg.patches))
            kinds.extend(["image"] * seg.patches.shape[0])
            ids.extend([None] * seg.patches.shape[0])
        else:
            if latent_inputs != "injected":
                raise ContractError("embed_sequence only assembles injected latent inputs")
            if seg.inputs is None:
                raise ContractError("latent segment has no injected input vectors")
            pieces.append(embedding(model.params["tok_emb"], [cfg.latent_start_id]))
            pieces.append(Tensor(np.asarray(seg.inputs, dtype=np.float64)))
            pieces.append(embedding(model.params["tok_emb"], [cfg.latent_end_id]))
            kinds.extend(["marker"] + ["pad"] * seg.k + ["marker"])
            ids.extend([cfg.latent_start_id] + [cfg.latent_pad_id] * seg.k + [cfg.latent_end_id])
    layout = {"kinds": kinds, "token_ids": ids}
    return concat_rows(pieces), layout


def prompt_pieces(model: TransformerModel, seq: InterleavedSequence):
    """Embedding rows for the prompt (question text + optional input image)."""
    pieces = []
    n_prompt = 0
    for seg in seq.segments:
        if seg.kind == "text" and n_prompt == 0:
            pieces.append(embedding(model.params["tok_emb"], seg.token_ids))
            n_prompt += len(seg.token_ids)
        elif seg.kind == "image":
            pieces.append(model.encode_image(seg.patches))
            n_prompt += seg.patches.shape[0]
        else:
            break
    return pieces, n_prompt


def decode(model: TransformerModel, prompt: InterleavedSequence, k: int,
           max_tokens: int = 128, eos_id: int | None = None,
           rng=None) -> InterleavedSequence:
    """Greedy (or sampled, if rng given) interleaved decoding.

    Returns a sequence whose first segments are the prompt's, followed by the
    generated text/latent segments.  Also records, on each generated latent
    segment, the fed-back input vectors so the feedback identity can be
    audited bit-exactly.
    """
    cfg = model.config
    if k < 1:
        raise ContractError("k must be >= 1")
    pieces, n_prompt = prompt_pieces(model, prompt)
    if n_prompt == 0:
        raise ContractError("decode requires a nonempty prompt")

    out_segments = [s for s in prompt.segments[:2] if s.kind in ("text", "image")]
    gen_segments = []
    cur_text = []
    emitted = 0
    # the emitted stream must match text+ (start pad^K end text+)*, so a
    # latent segment may only open after at least one text token; the prompt
    # question supplies the leading text
    can_start_latent = any(s.kind == "text" and s.token_ids
                           for s in prompt.segments)

    def flush_text():
        nonlocal cur_text
        if cur_text:
            gen_segments.append(TextSegment(cur_text))
            cur_text = []

    while emitted < max_tokens:
        out = model.forward(concat_rows(pieces))
        h_last = out.final_states.data[-1]
        logits = out.logits.data[-1].copy()
        logits[cfg.latent_pad_id] = -np.inf   # pads are placeholders, never sampled
        logits[cfg.latent_end_id] = -np.inf   # only ever force-emitted
        if not can_start_latent:
            logits[cfg.latent_start_id] = -np.inf
        if rng is None:
            tok = int(np.argmax(logits))
        else:
            z = logits - logits.max()
            p = np.exp(z)
            p /= p.sum()
            tok = int(rng.choice(len(p), p=p))
        emitted += 1
        if tok == cfg.latent_start_id:
            # need room for K pads, the forced end marker, and one text token
            if emitted + k + 1 >= max_tokens:
                flush_text()
                raise TruncationError(
                    "max_tokens exhausted mid-latent-segment",
                    InterleavedSequence(out_segments + gen_segments, k))
            flush_text()
            pieces.append(embedding(model.params["tok_emb"], [tok]))
            fed = []
            states = []
            for _ in range(k):
                out = model.forward(concat_rows(pieces))
                h = out.final_states.data[-1]
                states.append(h)
                fed.append(h)          # e_{t+1} := h_t, same array, bit-exact
                pieces.append(Tensor(h[None, :]))
                emitted += 1
            seg = LatentSegment(k=k, inputs=np.stack(fed))
            seg.fed_back = states      # audit hook: identical objects as inputs
            gen_segments.append(seg)
            # latent_end force-emitted after exactly K steps
            pieces.append(embedding(model.params["tok_emb"], [cfg.latent_end_id]))
            emitted += 1
            can_start_latent = False
        else:
            cur_text.append(tok)
            pieces.append(embedding(model.params["tok_emb"], [tok]))
            can_start_latent = True
            if eos_id is not None and tok == eos_id:
                break

    flush_text()
    return InterleavedSequence(out_segments + gen_segments, k)
