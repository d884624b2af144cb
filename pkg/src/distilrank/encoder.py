"""Mini-BERT encoder exposing the internals that distillation needs.

The forward pass records, per layer, the pre-softmax scaled attention
scores and the post-layer hidden states, along with the embedding output
and the classification logits. Relevance score of an input is
softmax(logits)[relevant class].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ContractError,
    Tensor,
    dropout,
    embedding,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    softmax,
)

RELEVANT_CLASS = 1


class InputLengthError(ValueError):
    """Input sequence exceeds the model's maximum position count."""


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    intermediate_size: int | None = None
    vocab_size: int = 1000
    max_position: int = 256
    type_vocab_size: int = 2
    num_labels: int = 2
    dropout_prob: float = 0.0

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.intermediate_size is None:
            object.__setattr__(self, "intermediate_size", 4 * self.hidden_size)

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "intermediate_size": self.intermediate_size,
            "vocab_size": self.vocab_size,
            "max_position": self.max_position,
            "type_vocab_size": self.type_vocab_size,
            "num_labels": self.num_labels,
            "dropout_prob": self.dropout_prob,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(**d)


@dataclass
class EncoderTrace:
    embedding_output: Tensor          # [B, S, H]
    attention_scores: list            # L x [B, A, S, S], pre-softmax scaled
    hidden_states: list               # L x [B, S, H]
    logits: Tensor                    # [B, num_labels]
    attention_mask: np.ndarray        # [B, S], 1 = real token

    @property
    def scores(self) -> np.ndarray:
        """Relevance probability per batch item."""
        return softmax(self.logits.detach(), axis=-1).data[:, RELEVANT_CLASS]

    @property
    def log_probs(self) -> Tensor:
        return log_softmax(self.logits, axis=-1)


def init_params(config: EncoderConfig, seed: int = 0) -> dict:
    """Fresh BERT-style parameter set: N(0, 0.02) weights, unit layer norms."""
    rng = np.random.default_rng(seed)
    std = 0.02
    H = config.hidden_size
    I = config.intermediate_size

    def w(*shape):
        return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params = {
        "embeddings.word": w(config.vocab_size, H),
        "embeddings.position": w(config.max_position, H),
        "embeddings.segment": w(config.type_vocab_size, H),
        "embeddings.ln.gain": ones(H),
        "embeddings.ln.bias": zeros(H),
    }
    for i in range(config.num_layers):
        p = f"layer{i}"
        params[f"{p}.attn.wq"] = w(H, H)
        params[f"{p}.attn.bq"] = zeros(H)
        params[f"{p}.attn.wk"] = w(H, H)
        params[f"{p}.attn.bk"] = zeros(H)
        params[f"{p}.attn.wv"] = w(H, H)
        params[f"{p}.attn.bv"] = zeros(H)
        params[f"{p}.attn.wo"] = w(H, H)
        params[f"{p}.attn.bo"] = zeros(H)
        params[f"{p}.attn.ln.gain"] = ones(H)
        params[f"{p}.attn.ln.bias"] = zeros(H)
        params[f"{p}.ffn.w1"] = w(H, I)
        params[f"{p}.ffn.b1"] = zeros(I)
        params[f"{p}.ffn.w2"] = w(I, H)
        params[f"{p}.ffn.b2"] = zeros(H)
        params[f"{p}.ffn.ln.gain"] = ones(H)
        params[f"{p}.ffn.ln.bias"] = zeros(H)
    params["pooler.w"] = w(H, H)
    params["pooler.b"] = zeros(H)
    params["classifier.w"] = w(H, config.num_labels)
    params["classifier.b"] = zeros(config.num_labels)
    return params


class Encoder:
    """Config + named parameters, callable on token batches."""

    def __init__(self, config: EncoderConfig, params: dict | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def parameters(self) -> list:
        return list(self.params.values())

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def forward(
        self,
        token_ids,
        segment_ids=None,
        attention_mask=None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> EncoderTrace:
        """Run the encoder; accepts [S] or [B, S] integer inputs."""
        cfg = self.config
        token_ids = np.asarray(token_ids, dtype=np.int64)
        squeeze = token_ids.ndim == 1
        if squeeze:
            token_ids = token_ids[None, :]
        B, S = token_ids.shape
        if S > cfg.max_position:
            raise InputLengthError(
                f"sequence length {S} exceeds max_position {cfg.max_position}"
            )
        if np.any(token_ids < 0) or np.any(token_ids >= cfg.vocab_size):
            raise ContractError("token id out of vocabulary range")
        if segment_ids is None:
            segment_ids = np.zeros_like(token_ids)
        else:
            segment_ids = np.asarray(segment_ids, dtype=np.int64)
            if squeeze and segment_ids.ndim == 1:
                segment_ids = segment_ids[None, :]
        if attention_mask is None:
            attention_mask = np.ones((B, S), dtype=np.float64)
        else:
            attention_mask = np.asarray(attention_mask, dtype=np.float64)
            if squeeze and attention_mask.ndim == 1:
                attention_mask = attention_mask[None, :]
        if training and cfg.dropout_prob > 0.0 and rng is None:
            raise ContractError("training with dropout requires an rng")

        P = self.params
        pos_ids = np.broadcast_to(np.arange(S), (B, S))
        x = (
            embedding(P["embeddings.word"], token_ids)
            + embedding(P["embeddings.position"], pos_ids)
            + embedding(P["embeddings.segment"], segment_ids)
        )
        x = layer_norm(x, P["embeddings.ln.gain"], P["embeddings.ln.bias"])
        x = dropout(x, cfg.dropout_prob, rng, training)
        embedding_output = x

        # additive key mask: 0 for real tokens, -1e9 for PAD columns
        key_mask = Tensor((1.0 - attention_mask)[:, None, None, :] * -1e9)

        attention_scores = []
        hidden_states = []
        A, dh = cfg.num_heads, cfg.head_dim
        scale = 1.0 / np.sqrt(dh)
        for i in range(cfg.num_layers):
            p = f"layer{i}"
            q = matmul(x, P[f"{p}.attn.wq"]) + P[f"{p}.attn.bq"]
            k = matmul(x, P[f"{p}.attn.wk"]) + P[f"{p}.attn.bk"]
            v = matmul(x, P[f"{p}.attn.wv"]) + P[f"{p}.attn.bv"]
            # [B, S, H] -> [B, A, S, dh]
            q = q.reshape(B, S, A, dh).transpose(0, 2, 1, 3)
            k = k.reshape(B, S, A, dh).transpose(0, 2, 1, 3)
            v = v.reshape(B, S, A, dh).transpose(0, 2, 1, 3)
            scores = matmul(q, k.transpose(0, 1, 3, 2)) * scale  # [B, A, S, S]
            attention_scores.append(scores)
            probs = softmax(scores + key_mask, axis=-1)
            probs = dropout(probs, cfg.dropout_prob, rng, training)
            ctx = matmul(probs, v)  # [B, A, S, dh]
            ctx = ctx.transpose(0, 2, 1, 3).reshape(B, S, A * dh)
            attn_out = matmul(ctx, P[f"{p}.attn.wo"]) + P[f"{p}.attn.bo"]
            attn_out = dropout(attn_out, cfg.dropout_prob, rng, training)
            x = layer_norm(x + attn_out, P[f"{p}.attn.ln.gain"],
                           P[f"{p}.attn.ln.bias"])
            ff = gelu(matmul(x, P[f"{p}.ffn.w1"]) + P[f"{p}.ffn.b1"])
            ff = matmul(ff, P[f"{p}.ffn.w2"]) + P[f"{p}.ffn.b2"]
            ff = dropout(ff, cfg.dropout_prob, rng, training)
            x = layer_norm(x + ff, P[f"{p}.ffn.ln.gain"], P[f"{p}.ffn.ln.bias"])
            hidden_states.append(x)

        first = x[:, 0, :]  # [B, H]
        pooled = (matmul(first, P["pooler.w"]) + P["pooler.b"]).tanh()
        logits = matmul(pooled, P["classifier.w"]) + P["classifier.b"]

        return EncoderTrace(
            embedding_output=embedding_output,
            attention_scores=attention_scores,
            hidden_states=hidden_states,
            logits=logits,
            attention_mask=attention_mask,
        )

    __call__ = forward
