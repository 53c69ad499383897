"""Asymmetric masked auto-encoding: moderately masked encoder input, aggressively
masked single-layer decoder conditioned on the encoder's CLS embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .model import ConfigError, EncoderModel, attention_mask_bias, init_params, layer_param_shapes, linear, transformer_layer
from .vocab import TokenBatch, Vocab, pad_batch


@dataclass(frozen=True)
class MaskSpec:
    ratio_low: float
    ratio_high: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio_low <= self.ratio_high <= 1.0:
            raise ConfigError(f"mask ratios must satisfy 0 <= low <= high <= 1, got {self.ratio_low}, {self.ratio_high}")


ENCODER_MASK = MaskSpec(0.15, 0.30)
DECODER_MASK = MaskSpec(0.50, 0.70)


@dataclass
class MaskedSequence:
    ids: list[int]
    labels: dict[int, int]  # position -> original id
    ratio: float

    @property
    def masked_fraction(self) -> float:
        return self.ratio


def apply_mask(
    seq: Sequence[int],
    spec: MaskSpec,
    rng: np.random.Generator | None = None,
    special_ids: frozenset[int] = frozenset(range(5)),
    mask_id: int = 4,
) -> MaskedSequence:
    """Replace floor(r * #maskable) non-special tokens with ``mask_id``.

    ``r`` is drawn uniformly from the spec's range. Without an explicit
    generator the spec's seed is used, so repeated calls give the same mask.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    ratio = float(rng.uniform(spec.ratio_low, spec.ratio_high))
    candidates = [i for i, t in enumerate(seq) if t not in special_ids]
    # tolerance keeps e.g. 0.29 * 100 from flooring to 28
    count = min(len(candidates), math.floor(ratio * len(candidates) + 1e-9))
    chosen = sorted(rng.choice(candidates, size=count, replace=False).tolist()) if count else []
    ids = list(seq)
    labels = {}
    for pos in chosen:
        labels[pos] = ids[pos]
        ids[pos] = mask_id
    return MaskedSequence(ids, labels, ratio)


class RetroMaeDecoder:
    """One transformer layer plus an LM head; input embeddings come from the encoder."""

    def __init__(self, encoder_config, layers: int = 1, tie_lm_head: bool = False, seed: int = 1, params=None):
        if layers != 1:
            raise ConfigError(f"the decoder has exactly one layer, got {layers}")
        self.layers = layers
        self.tie_lm_head = tie_lm_head
        self.hidden = encoder_config.hidden
        self.heads = encoder_config.heads
        self.vocab_size = encoder_config.vocab_size
        shapes = self.param_shapes(encoder_config)
        if params is None:
            params = init_params(shapes, encoder_config.init_std, seed)
        elif {k: tuple(v.shape) for k, v in params.items()} != dict(shapes):
            raise ConfigError("decoder parameters do not match the encoder config")
        self.params = {name: params[name] for name, _ in shapes}

    def param_shapes(self, c) -> list[tuple[str, tuple[int, ...]]]:
        shapes = layer_param_shapes("decoder.layer", c.hidden, c.intermediate)
        if not self.tie_lm_head:
            shapes += [("decoder.lm_head.weight", (c.hidden, c.vocab_size)), ("decoder.lm_head.bias", (c.vocab_size,))]
        return shapes

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def decode(self, encoder: EncoderModel, batch: TokenBatch, cls_embedding: Tensor) -> Tensor:
        """Hidden states [B, L, H] with position 0 replaced by ``cls_embedding``."""
        emb = encoder.embed(batch)
        b, l, h = emb.shape
        first = T.reshape(cls_embedding, (b, 1, h))
        x = T.concat([first, T.take(emb, (slice(None), slice(1, None)))], axis=1) if l > 1 else first
        return transformer_layer(self.params, "decoder.layer", x, attention_mask_bias(batch.mask), self.heads)

    def logits(self, encoder: EncoderModel, hidden: Tensor) -> Tensor:
        if self.tie_lm_head:
            return encoder.lm_logits(hidden)
        return linear(self.params, "decoder.lm_head", hidden)


@dataclass
class RetroMaeOutput:
    encoder_logits: Tensor  # [L, V]
    decoder_logits: Tensor  # [L, V]
    cls_embedding: Tensor  # [H]
    encoder_input: MaskedSequence
    decoder_input: MaskedSequence


@dataclass
class RetroMaeBatch:
    """Logits only at labelled positions, row-aligned with the target arrays."""

    encoder_logits: Tensor  # [M_enc, V]
    encoder_targets: np.ndarray
    decoder_logits: Tensor  # [M_dec, V]
    decoder_targets: np.ndarray
    cls_embedding: Tensor  # [B, H]
    encoder_positions: tuple[np.ndarray, np.ndarray] = field(repr=False)
    encoder_batch: TokenBatch = field(repr=False)
    encoder_ratios: list[float] = field(default_factory=list)
    decoder_ratios: list[float] = field(default_factory=list)


def _label_index(masked: list[MaskedSequence]):
    rows, cols, targets = [], [], []
    for b, m in enumerate(masked):
        for pos, orig in sorted(m.labels.items()):
            rows.append(b)
            cols.append(pos)
            targets.append(orig)
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(targets, dtype=np.int64)


def retromae_batch(
    encoder: EncoderModel,
    decoder: RetroMaeDecoder,
    seqs: Sequence[Sequence[int]],
    rng: np.random.Generator,
    encoder_mask: MaskSpec = ENCODER_MASK,
    decoder_mask: MaskSpec = DECODER_MASK,
    vocab: Vocab | None = None,
) -> RetroMaeBatch:
    special = vocab.special_ids if vocab is not None else frozenset(range(5))
    mask_id = vocab.mask_id if vocab is not None else 4
    pad_id = vocab.pad_id if vocab is not None else 0
    enc_in = [apply_mask(s, encoder_mask, rng, special, mask_id) for s in seqs]
    dec_in = [apply_mask(s, decoder_mask, rng, special, mask_id) for s in seqs]
    enc_batch = pad_batch([m.ids for m in enc_in], pad_id)
    dec_batch = pad_batch([m.ids for m in dec_in], pad_id)

    hidden = encoder.hidden_states(enc_batch)
    cls = T.take(hidden, (slice(None), 0))
    er, ec, et = _label_index(enc_in)
    dr, dc, dt = _label_index(dec_in)
    enc_logits = encoder.lm_logits(T.take(hidden, (er, ec)))
    dec_hidden = decoder.decode(encoder, dec_batch, cls)
    dec_logits = decoder.logits(encoder, T.take(dec_hidden, (dr, dc)))
    return RetroMaeBatch(
        enc_logits, et, dec_logits, dt, cls, (er, ec), enc_batch,
        [m.ratio for m in enc_in], [m.ratio for m in dec_in],
    )


def retromae_forward(
    encoder: EncoderModel,
    decoder: RetroMaeDecoder,
    seq: Sequence[int],
    rng: np.random.Generator | None = None,
    encoder_mask: MaskSpec = ENCODER_MASK,
    decoder_mask: MaskSpec = DECODER_MASK,
) -> RetroMaeOutput:
    """Single sequence; full-length logits for both heads."""
    rng = np.random.default_rng(encoder_mask.seed) if rng is None else rng
    enc_in = apply_mask(seq, encoder_mask, rng)
    dec_in = apply_mask(seq, decoder_mask, rng)
    enc_batch = pad_batch([enc_in.ids])
    dec_batch = pad_batch([dec_in.ids])
    hidden = encoder.hidden_states(enc_batch)
    cls = T.take(hidden, (slice(None), 0))
    enc_logits = encoder.lm_logits(T.take(hidden, 0))
    dec_logits = decoder.logits(encoder, T.take(decoder.decode(encoder, dec_batch, cls), 0))
    return RetroMaeOutput(enc_logits, dec_logits, T.take(cls, 0), enc_in, dec_in)
