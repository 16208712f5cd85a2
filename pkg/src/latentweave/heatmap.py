"""Per-step relevance heatmaps: where each generated latent segment looks.

For every latent segment of a trajectory, the model's self-generated
latent vectors are scored by cosine similarity against the encoded cells
of that step's helper image, aggregated over the K latents, Gaussian
smoothed (sigma = 1 cell), and normalized to a probability map over the
grid.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .autograd import no_grad, concat_rows, embedding, Tensor
from .model import TransformerModel
from .sequences import build_supervision_sequence


def latent_vectors_per_segment(model: TransformerModel, traj, k: int) -> list:
    """Self-feedback vectors the model produces at each latent segment when
    teacher-forced with the trajectory's text."""
    cfg = model.config
    seq = build_supervision_sequence(traj, k)
    out = []
    with no_grad():
        pieces = []
        pos = 0
        for seg in seq.segments:
            if seg.kind == "text":
                pieces.append(embedding(model.params["tok_emb"], seg.token_ids))
                pos += len(seg.token_ids)
            elif seg.kind == "image":
                pieces.append(model.encode_image(seg.patches))
                pos += seg.patches.shape[0]
            else:
                pieces.append(embedding(model.params["tok_emb"], [cfg.latent_start_id]))
                pos += 1
                vecs = []
                for _ in range(seg.k):
                    states = model.forward(concat_rows(pieces)).final_states.data
                    h = states[pos - 1]
                    vecs.append(h)
                    pieces.append(Tensor(h[None, :]))
                    pos += 1
                out.append(np.stack(vecs))
                pieces.append(embedding(model.params["tok_emb"], [cfg.latent_end_id]))
                pos += 1
    return out


def _cosine_matrix(latents: np.ndarray, cells: np.ndarray, eps=1e-12) -> np.ndarray:
    ln = np.linalg.norm(latents, axis=1)
    cn = np.linalg.norm(cells, axis=1)
    denom = np.outer(np.maximum(ln, eps), np.maximum(cn, eps))
    sims = (latents @ cells.T) / denom
    sims[ln < eps, :] = 0.0
    sims[:, cn < eps] = 0.0
    return sims


def relevance_maps(model: TransformerModel, traj, k: int | None = None,
                   sigma: float = 1.0) -> list:
    """One normalized [height, width] map per latent segment.

    Maps are non-negative and sum to 1; a degenerate all-flat similarity
    profile yields the uniform map.
    """
    k = k or model.config.latent_k
    width, height = traj.grid
    latents = latent_vectors_per_segment(model, traj, k)
    maps = []
    for m, vecs in enumerate(latents):
        helper = traj.steps[m][1] if m < len(traj.steps) else traj.steps[-1][1]
        cells = model.encode_image(helper).data
        sims = _cosine_matrix(vecs, cells)
        rel = np.maximum(sims, 0.0).mean(axis=0).reshape(height, width)
        rel = gaussian_filter(rel, sigma=sigma, mode="constant")
        total = rel.sum()
        if total < 1e-12:
            rel = np.full((height, width), 1.0 / (height * width))
        else:
            rel = rel / total
        maps.append(rel)
    return maps


def write_maps(maps, out_dir, prefix: str = "heatmap") -> list:
    """One grid-shaped text file per segment: rows of whitespace-separated floats."""
    import os
    paths = []
    for m, grid in enumerate(maps):
        path = os.path.join(out_dir, f"{prefix}_seg{m + 1}.txt")
        with open(path, "w") as fh:
            for row in grid:
                fh.write(" ".join(repr(float(v)) for v in row))
                fh.write("\n")
        paths.append(path)
    return paths
