"""Toy post-LN transformer encoder with a CLS dense head and a vocabulary-logit sparse head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .. import tensor as T
from ..retrieval.sparse import SparseVector
from ..tensor import Tensor
from .vocab import TokenBatch, pad_batch

# exp() of this underflows to exactly 0.0, so padded keys get zero attention
_MASK_BIAS = -1e9


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    hidden: int = 64
    intermediate: int = 256
    heads: int = 4
    max_seq: int = 512
    pooling: str = "cls"
    lm_head: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the five special tokens")
        if self.layers < 1 or self.hidden < 1 or self.heads < 1 or self.intermediate < 1:
            raise ConfigError("layers, hidden, heads and intermediate must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.max_seq < 2:
            raise ConfigError("max_seq must be at least 2")
        if self.pooling not in ("cls", "max_sparse"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.pooling == "max_sparse" and not self.lm_head:
            raise ConfigError("max_sparse pooling needs an LM head")

    def to_kv(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "EncoderConfig":
        out = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.type in ("int", int):
                out[f.name] = int(raw)
            elif f.type in ("float", float):
                out[f.name] = float(raw)
            elif f.type in ("bool", bool):
                out[f.name] = raw == "True"
            else:
                out[f.name] = raw
        return cls(**out)


def layer_param_shapes(prefix: str, hidden: int, intermediate: int) -> list[tuple[str, tuple[int, ...]]]:
    h, i = hidden, intermediate
    out = []
    for proj in ("q", "k", "v", "o"):
        out += [(f"{prefix}.attn.{proj}.weight", (h, h)), (f"{prefix}.attn.{proj}.bias", (h,))]
    out += [(f"{prefix}.attn_norm.gamma", (h,)), (f"{prefix}.attn_norm.beta", (h,))]
    out += [(f"{prefix}.ffn.in.weight", (h, i)), (f"{prefix}.ffn.in.bias", (i,))]
    out += [(f"{prefix}.ffn.out.weight", (i, h)), (f"{prefix}.ffn.out.bias", (h,))]
    out += [(f"{prefix}.ffn_norm.gamma", (h,)), (f"{prefix}.ffn_norm.beta", (h,))]
    return out


def init_params(shapes: Iterable[tuple[str, tuple[int, ...]]], std: float, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes:
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def attention_mask_bias(mask: np.ndarray) -> np.ndarray:
    """[B, L] bool -> [B, 1, 1, L] additive bias over keys."""
    return np.where(mask, 0.0, _MASK_BIAS)[:, None, None, :]


def linear(p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return T.add_bias(T.matmul(x, p[prefix + ".weight"]), p[prefix + ".bias"])


def transformer_layer(p: dict[str, Tensor], prefix: str, x: Tensor, mask_bias: np.ndarray, heads: int) -> Tensor:
    b, l, h = x.shape
    d = h // heads

    def split(t):
        return T.permute(T.reshape(t, (b, l, heads, d)), (0, 2, 1, 3))

    q = split(linear(p, prefix + ".attn.q", x))
    k = split(linear(p, prefix + ".attn.k", x))
    v = split(linear(p, prefix + ".attn.v", x))
    scores = T.scale(T.matmul(q, T.transpose_last(k)), 1.0 / math.sqrt(d))
    probs = T.softmax_rows(T.add_constant(scores, mask_bias))
    ctx = T.reshape(T.permute(T.matmul(probs, v), (0, 2, 1, 3)), (b, l, h))
    x = T.layer_norm(
        T.add(x, linear(p, prefix + ".attn.o", ctx)),
        p[prefix + ".attn_norm.gamma"],
        p[prefix + ".attn_norm.beta"],
    )
    ff = linear(p, prefix + ".ffn.out", T.gelu(linear(p, prefix + ".ffn.in", x)))
    return T.layer_norm(T.add(x, ff), p[prefix + ".ffn_norm.gamma"], p[prefix + ".ffn_norm.beta"])


def as_batch(batch, pad_id: int = 0) -> TokenBatch:
    if isinstance(batch, TokenBatch):
        return batch
    return pad_batch(batch, pad_id)


class EncoderModel:
    def __init__(self, config: EncoderConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        expected = self.param_shapes()
        if params is None:
            params = init_params(expected, config.init_std, seed)
        else:
            got = {k: tuple(v.shape) for k, v in params.items()}
            want = dict(expected)
            if got != want:
                bad = sorted(set(got.items()) ^ set(want.items()))
                raise ConfigError(f"parameter names/shapes do not match config: {bad[:5]}")
            params = {name: params[name] for name, _ in expected}
        self.params = params

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        c = self.config
        shapes = [
            ("embeddings.token", (c.vocab_size, c.hidden)),
            ("embeddings.position", (c.max_seq, c.hidden)),
            ("embeddings.norm.gamma", (c.hidden,)),
            ("embeddings.norm.beta", (c.hidden,)),
        ]
        for i in range(c.layers):
            shapes += layer_param_shapes(f"layers.{i}", c.hidden, c.intermediate)
        if c.lm_head:
            shapes += [("lm_head.weight", (c.hidden, c.vocab_size)), ("lm_head.bias", (c.vocab_size,))]
        return shapes

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "EncoderModel":
        return EncoderModel(
            self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        )

    def _check(self, batch: TokenBatch) -> None:
        if batch.ids.shape[1] > self.config.max_seq:
            raise LengthError(f"sequence length {batch.ids.shape[1]} exceeds max_seq={self.config.max_seq}")
        if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= self.config.vocab_size):
            raise ConfigError("token id outside the vocabulary")

    def embed(self, batch: TokenBatch) -> Tensor:
        self._check(batch)
        b, l = batch.ids.shape
        p = self.params
        pos = np.broadcast_to(np.arange(l), (b, l))
        x = T.add(T.take(p["embeddings.token"], batch.ids), T.take(p["embeddings.position"], pos))
        return T.layer_norm(x, p["embeddings.norm.gamma"], p["embeddings.norm.beta"])

    def run_layers(self, x: Tensor, mask: np.ndarray) -> Tensor:
        bias = attention_mask_bias(mask)
        for i in range(self.config.layers):
            x = transformer_layer(self.params, f"layers.{i}", x, bias, self.config.heads)
        return x

    def hidden_states(self, batch) -> Tensor:
        batch = as_batch(batch)
        return self.run_layers(self.embed(batch), batch.mask)

    def lm_logits(self, hidden: Tensor) -> Tensor:
        if not self.config.lm_head:
            raise ConfigError("model has no LM head")
        return linear(self.params, "lm_head", hidden)


def encode_dense(model: EncoderModel, batch) -> Tensor:
    """CLS pooling: final hidden state at position 0, shape [B, hidden]."""
    hidden = model.hidden_states(batch)
    return T.take(hidden, (slice(None), 0))


def sparse_weights(model: EncoderModel, batch) -> Tensor:
    """Differentiable term weights [B, V]: max over real positions, then log(1 + relu)."""
    if not model.config.lm_head:
        raise ConfigError("sparse encoding needs an LM head")
    batch = as_batch(batch)
    logits = model.lm_logits(model.hidden_states(batch))
    return T.log1p(T.relu(T.max_over_positions(logits, batch.mask)))


def encode_sparse(model: EncoderModel, batch) -> list[SparseVector]:
    with T.no_grad():
        w = sparse_weights(model, batch)
    return [SparseVector.from_dense(row) for row in w.data]


def encode_texts(model: EncoderModel, texts: Sequence[str], vocab, batch_size: int = 64, sparse: bool | None = None):
    """Inference helper: dense ``[N, hidden]`` array or list of SparseVector."""
    from .vocab import tokenize_batch

    sparse = model.config.pooling == "max_sparse" if sparse is None else sparse
    out = []
    with T.no_grad():
        for start in range(0, len(texts), batch_size):
            batch = tokenize_batch(texts[start : start + batch_size], vocab, model.config.max_seq)
            if sparse:
                out.extend(encode_sparse(model, batch))
            else:
                out.append(encode_dense(model, batch).data)
    if sparse:
        return out
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.hidden))
