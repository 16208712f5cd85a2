"""Tiny decoder-only causal transformer with a frozen patch-grid vision encoder.

One instance serves as the trainable online model; a parameter copy with
gradients disabled serves as the momentum teacher.  Per-layer attention
projections are exposed so relevance scores between text and image
positions can be computed from a designated layer's residual stream.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, asdict, field

import numpy as np

from .autograd import (
    Tensor,
    ShapeError,
    ContractError,
    layer_norm,
    multi_head_attention,
)

CHECKPOINT_VERSION = 1

# the three reserved ids live at the top of the vocabulary
N_SPECIAL_TOKENS = 3


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 256
    latent_k: int = 8
    patch_feature_dim: int = 8
    seed: int = 0
    # which layer's residual-stream input and W_Q/W_K feed the text-to-image
    # relevance scores; -1 = last layer
    query_layer: int = -1

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.latent_k < 1:
            raise ValueError("latent_k must be >= 1")
        if self.vocab_size <= N_SPECIAL_TOKENS:
            raise ValueError("vocab_size must leave room for the 3 special tokens")

    @property
    def latent_start_id(self) -> int:
        return self.vocab_size - 3

    @property
    def latent_pad_id(self) -> int:
        return self.vocab_size - 2

    @property
    def latent_end_id(self) -> int:
        return self.vocab_size - 1


@dataclass
class ForwardOutput:
    layer_inputs: list          # residual-stream input of each layer, [T,H] tensors
    final_states: Tensor        # post-final-norm hidden states [T,H]
    logits: Tensor              # [T, vocab]


class TransformerModel:
    """Online model / momentum teacher (same class, gradients toggled)."""

    def __init__(self, config: ModelConfig, trainable: bool = True, _init: bool = True):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.trainable = trainable
        if _init:
            self._init_params()

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden_dim

        def p(name, shape, std=0.06):
            self.params[name] = Tensor(rng.normal(0.0, std, size=shape),
                                       requires_grad=self.trainable, name=name)

        p("tok_emb", (cfg.vocab_size, h))
        p("pos_emb", (cfg.max_seq_len, h))
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            for w in ("w_q", "w_k", "w_v", "w_o"):
                p(pre + w, (h, h))
            p(pre + "ffn_w1", (h, 4 * h))
            p(pre + "ffn_w2", (4 * h, h))
            self.params[pre + "ffn_b1"] = Tensor(np.zeros(4 * h), requires_grad=self.trainable, name=pre + "ffn_b1")
            self.params[pre + "ffn_b2"] = Tensor(np.zeros(h), requires_grad=self.trainable, name=pre + "ffn_b2")
            for ln in ("ln1", "ln2"):
                self.params[pre + ln + ".gain"] = Tensor(np.ones(h), requires_grad=self.trainable)
                self.params[pre + ln + ".bias"] = Tensor(np.zeros(h), requires_grad=self.trainable)
        self.params["ln_f.gain"] = Tensor(np.ones(h), requires_grad=self.trainable)
        self.params["ln_f.bias"] = Tensor(np.zeros(h), requires_grad=self.trainable)
        p("out_proj", (h, cfg.vocab_size))
        # frozen vision projection: bias-free, never trained, shared between
        # online model and teacher
        self.params["f_vis"] = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(cfg.patch_feature_dim),
                       size=(cfg.patch_feature_dim, h)),
            requires_grad=False, name="f_vis")

    # -- parameter plumbing ---------------------------------------------------

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clone(self, trainable: bool = False) -> "TransformerModel":
        """Deep parameter copy; teacher copies are created non-trainable."""
        other = TransformerModel(self.config, trainable=trainable, _init=False)
        for k, v in self.params.items():
            rg = trainable and v.requires_grad
            other.params[k] = Tensor(v.data.copy(), requires_grad=rg, name=v.name)
        return other

    def vision_checksum(self) -> str:
        return hashlib.sha256(self.params["f_vis"].data.tobytes()).hexdigest()

    # -- forward passes ---------------------------------------------------

    def encode_image(self, patches: np.ndarray) -> Tensor:
        """Project a [P, patch_feature_dim] patch grid into H-dim features."""
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim != 2 or patches.shape[1] != self.config.patch_feature_dim:
            raise ShapeError(
                f"patch grid must be [P, {self.config.patch_feature_dim}], got {patches.shape}"
            )
        if patches.shape[0] < 1:
            raise ContractError("patch grid must contain at least one patch")
        return Tensor(patches) @ self.params["f_vis"]

    def _causal_mask(self, t: int) -> np.ndarray:
        mask = np.zeros((t, t))
        mask[np.triu_indices(t, k=1)] = -1e30
        return mask

    def forward(self, embeddings: Tensor) -> ForwardOutput:
        """Run the decoder stack over already-assembled input embeddings [T, H]."""
        cfg = self.config
        t = embeddings.data.shape[0]
        if t > cfg.max_seq_len:
            raise ContractError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        mask = self._causal_mask(t)

        x = embeddings + self.params["pos_emb"].rows(np.arange(t))
        layer_inputs = []
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            layer_inputs.append(x)
            xn = layer_norm(x, self.params[pre + "ln1.gain"], self.params[pre + "ln1.bias"])
            q = xn @ self.params[pre + "w_q"]
            k = xn @ self.params[pre + "w_k"]
            v = xn @ self.params[pre + "w_v"]
            attn_out = multi_head_attention(q, k, v, cfg.n_heads, mask)
            x = x + attn_out @ self.params[pre + "w_o"]
            xn2 = layer_norm(x, self.params[pre + "ln2.gain"], self.params[pre + "ln2.bias"])
            ff = (xn2 @ self.params[pre + "ffn_w1"]).add_bias(self.params[pre + "ffn_b1"]).tanh()
            x = x + (ff @ self.params[pre + "ffn_w2"]).add_bias(self.params[pre + "ffn_b2"])

        final = layer_norm(x, self.params["ln_f.gain"], self.params["ln_f.bias"])
        logits = final @ self.params["out_proj"]
        return ForwardOutput(layer_inputs=layer_inputs, final_states=final, logits=logits)

    def qk_scores(self, out: ForwardOutput, text_positions, image_positions,
                  layer: int | None = None) -> Tensor:
        """Unnormalized text-to-image relevance scores, [|text| x |image|].

        Uses the designated layer's residual-stream input states with that
        layer's full W_Q / W_K (head-summed dot products) scaled by 1/sqrt(H).
        """
        cfg = self.config
        layer = cfg.query_layer if layer is None else layer
        layer = layer % cfg.n_layers
        text_positions = np.asarray(text_positions, dtype=np.intp)
        image_positions = np.asarray(image_positions, dtype=np.intp)
        if text_positions.size == 0 or image_positions.size == 0:
            raise ContractError("qk_scores requires nonempty text and image position sets")
        if np.intersect1d(text_positions, image_positions).size:
            raise ContractError("text and image position sets must be disjoint")
        states = out.layer_inputs[layer]
        pre = f"layer{layer}."
        q = states @ self.params[pre + "w_q"]
        k = states @ self.params[pre + "w_k"]
        return (q.rows(text_positions) @ k.rows(image_positions).T) * (1.0 / np.sqrt(cfg.hidden_dim))

    # -- checkpointing ---------------------------------------------------

    def save(self, path) -> None:
        header = {"version": CHECKPOINT_VERSION, "config": asdict(self.config)}
        arrays = {k.replace(".", "__"): v.data for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.frombuffer(
                json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path, expected_config: ModelConfig | None = None,
             trainable: bool = True) -> "TransformerModel":
        try:
            with np.load(path) as z:
                header = json.loads(bytes(z["__header__"]).decode())
                if header.get("version") != CHECKPOINT_VERSION:
                    raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
                cfg = ModelConfig(**header["config"])
                if expected_config is not None and asdict(expected_config) != asdict(cfg):
                    raise CheckpointError(
                        f"checkpoint config mismatch: stored {asdict(cfg)}, expected {asdict(expected_config)}")
                model = cls(cfg, trainable=trainable)
                for name in list(model.params):
                    key = name.replace(".", "__")
                    if key not in z:
                        raise CheckpointError(f"checkpoint missing parameter {name}")
                    arr = z[key]
                    if arr.shape != model.params[name].data.shape:
                        raise CheckpointError(
                            f"parameter {name} shape {arr.shape} != expected {model.params[name].data.shape}")
                    model.params[name].data = arr.astype(np.float64)
                return model
        except (OSError, ValueError, KeyError) as exc:
            raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
