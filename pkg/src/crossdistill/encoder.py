"""Tiny pre-norm transformer encoder with optional LoRA on the Q/K/V projections."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

ATTN_PROJ = ("query", "key", "value", "output")
# dropout call sites within a layer, used as RNG counters
_OP_EMBED, _OP_ATTN, _OP_FFN, _OP_LORA = 0, 1, 2, 3


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    d_ff: int = 256
    max_positions: int = 512
    dropout_rate: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "num_layers", "num_heads", "d_ff", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class LoraConfig:
    rank: int = 32
    alpha: float = 64.0
    dropout_rate: float = 0.05
    targets: tuple = ("query", "key", "value")

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.rank < 1 or self.alpha <= 0:
            raise ValueError("LoRA needs rank >= 1 and alpha > 0")
        if not set(self.targets) <= {"query", "key", "value"}:
            raise ValueError(f"LoRA targets must be a subset of query/key/value, got {self.targets}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.add(T.matmul(x, weight), bias)


def freeze(model):
    """Mark every tensor of ``model`` as not requiring gradients. Returns ``model``."""
    for t in model.named_tensors().values():
        t.requires_grad = False
        t.grad = None
    return model


def trainable_parameters(model) -> list:
    """Name-sorted ``(name, tensor)`` pairs of the leaves that require gradients."""
    return sorted(((n, t) for n, t in model.named_tensors().items() if t.requires_grad),
                  key=lambda item: item[0])


class TransformerEncoder:
    """Parameters live in ``self.params`` under ``layer.<i>.<component>.<tensor>`` names."""

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
        d, f = config.d_model, config.d_ff
        p = {
            "embed.token": _normal(rng, (config.vocab_size, d), 1.0, dtype),
            "embed.position": _normal(rng, (config.max_positions, d), 0.1, dtype),
        }
        for i in range(config.num_layers):
            for proj in ATTN_PROJ:
                p[f"layer.{i}.attn.{proj}.weight"] = _normal(rng, (d, d), 1.0 / math.sqrt(d), dtype)
                p[f"layer.{i}.attn.{proj}.bias"] = _zeros((d,), dtype)
            p[f"layer.{i}.ffn.in.weight"] = _normal(rng, (d, f), 1.0 / math.sqrt(d), dtype)
            p[f"layer.{i}.ffn.in.bias"] = _zeros((f,), dtype)
            p[f"layer.{i}.ffn.out.weight"] = _normal(rng, (f, d), 1.0 / math.sqrt(f), dtype)
            p[f"layer.{i}.ffn.out.bias"] = _zeros((d,), dtype)
            for norm in ("norm1", "norm2"):
                p[f"layer.{i}.{norm}.gain"] = _ones((d,), dtype)
                p[f"layer.{i}.{norm}.bias"] = _zeros((d,), dtype)
        p["final_norm.gain"] = _ones((d,), dtype)
        p["final_norm.bias"] = _zeros((d,), dtype)
        self.params = p

    def named_tensors(self) -> dict:
        return self.params

    def copy(self) -> "TransformerEncoder":
        clone = object.__new__(TransformerEncoder)
        clone.config = self.config
        clone.dtype = self.dtype
        clone.params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return clone

    def token_rows(self, ids) -> Tensor:
        return T.embedding_gather(self.params["embed.token"], ids)

    def forward(self, token_ids=None, attention_mask=None, input_embeddings: Optional[Tensor] = None,
                lora: Optional["LoraAdapters"] = None, training: bool = False,
                dropout_key: Optional[tuple] = None, capture: Optional[dict] = None) -> Tensor:
        """Encode ``[L]`` or ``[B, L]`` inputs into hidden states ``[(B,) L, d]``.

        Exactly one of ``token_ids`` / ``input_embeddings`` must be given. The
        latter skips the token lookup but still receives position embeddings.
        Keys with mask 0 get -inf attention logits.
        """
        if (token_ids is None) == (input_embeddings is None):
            raise ContractError("pass exactly one of token_ids or input_embeddings")
        cfg, p = self.config, self.params
        if token_ids is not None:
            ids = np.asarray(token_ids, dtype=np.int64)
            single = ids.ndim == 1
            if single:
                ids = ids[None]
            x = T.embedding_gather(p["embed.token"], ids)
        else:
            x = input_embeddings
            single = x.ndim == 2
            if single:
                x = T.reshape(x, (1,) + x.shape)
        B, L, d = x.shape
        if attention_mask is None:
            raise ContractError("attention_mask is required")
        mask = np.asarray(attention_mask).reshape(B, L)
        if L > cfg.max_positions:
            raise ContractError(f"sequence length {L} exceeds max_positions {cfg.max_positions}")

        def drop(t, layer, op, rate=cfg.dropout_rate):
            if not training or rate <= 0:
                return t
            if dropout_key is None:
                raise ContractError("training forward needs a dropout_key")
            return T.dropout(t, rate, T.counter_rng(*dropout_key, layer, op), True)

        x = T.add(x, T.embedding_gather(p["embed.position"], np.arange(L)))
        x = drop(x, cfg.num_layers, _OP_EMBED)
        key_masked = (mask == 0)[:, None, None, :]
        H = cfg.num_heads
        dh = d // H
        inv_sqrt = 1.0 / math.sqrt(dh)
        for i in range(cfg.num_layers):
            pre = f"layer.{i}"
            h = T.layernorm(x, p[f"{pre}.norm1.gain"], p[f"{pre}.norm1.bias"])
            h_lora = None
            if lora is not None:
                h_lora = drop(h, i, _OP_LORA, lora.config.dropout_rate)
            heads = []
            for proj in ("query", "key", "value"):
                y = linear(h, p[f"{pre}.attn.{proj}.weight"], p[f"{pre}.attn.{proj}.bias"])
                if lora is not None and proj in lora.config.targets:
                    y = T.add(y, lora.delta(h_lora, i, proj))
                heads.append(T.transpose(T.reshape(y, (B, L, H, dh)), (0, 2, 1, 3)))
            q, k, v = heads
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt)
            scores = T.masked_fill(scores, key_masked, -np.inf)
            attn = T.softmax(scores, axis=-1)
            if capture is not None:
                capture.setdefault("attention", []).append(attn.data)
            ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
            o = linear(ctx, p[f"{pre}.attn.output.weight"], p[f"{pre}.attn.output.bias"])
            x = T.add(x, drop(o, i, _OP_ATTN))
            h = T.layernorm(x, p[f"{pre}.norm2.gain"], p[f"{pre}.norm2.bias"])
            f = linear(T.gelu(linear(h, p[f"{pre}.ffn.in.weight"], p[f"{pre}.ffn.in.bias"])),
                       p[f"{pre}.ffn.out.weight"], p[f"{pre}.ffn.out.bias"])
            x = T.add(x, drop(f, i, _OP_FFN))
            if capture is not None:
                capture.setdefault("hidden", []).append(x.data)
        x = T.layernorm(x, p["final_norm.gain"], p["final_norm.bias"])
        if single:
            x = T.reshape(x, (L, d))
        return x


def encoder_forward(params: TransformerEncoder, token_ids=None, attention_mask=None,
                    input_embeddings=None, lora=None, **kwargs) -> Tensor:
    return params.forward(token_ids, attention_mask, input_embeddings, lora, **kwargs)


class LoraAdapters:
    """Low-rank updates ``(alpha/r) * B @ A`` for the targeted projections of each layer.

    ``A`` is ``[r, d]`` Gaussian, ``B`` is ``[d, r]`` zeros, so a fresh adapter is a no-op.
    """

    def __init__(self, config: LoraConfig, d_model: int, num_layers: int, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 29]))
        self.params = {}
        for i in range(num_layers):
            for target in config.targets:
                self.params[f"layer.{i}.{target}.A"] = _normal(
                    rng, (config.rank, d_model), 1.0 / math.sqrt(d_model), dtype)
                self.params[f"layer.{i}.{target}.B"] = _zeros((d_model, config.rank), dtype)

    def named_tensors(self) -> dict:
        return self.params

    def delta(self, x: Tensor, layer: int, target: str) -> Tensor:
        a = self.params[f"layer.{layer}.{target}.A"]
        b = self.params[f"layer.{layer}.{target}.B"]
        low = T.matmul(x, T.transpose(a, (1, 0)))
        return T.scale(T.matmul(low, T.transpose(b, (1, 0))), self.config.scaling)
