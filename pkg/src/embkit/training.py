"""Optimizer, stage-wise training loops, self-distillation and model merging.

A stage is fully determined by its StageConfig, the starting weights and the
data: every step draws its randomness from ``default_rng([seed, step])`` and
the batch sampler state is a handful of integers, so a run that is stopped,
saved and resumed follows the same trajectory as one that never stopped.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import objectives as O
from . import tensor as T
from .data import (
    BatchSampler,
    DataError,
    PairRecord,
    ParseError,
    PerturbConfig,
    SamplerConfig,
    format_instruction_query,
    group_by_dataset,
    perturb_positive,
    read_pairs,
)
from .encoder import (
    EncoderModel,
    MaskSpec,
    RetroMaeDecoder,
    Vocab,
    load_model,
    retromae_batch,
    save_model,
    sparse_weights,
    tokenize_batch,
)
from .encoder.checkpoint import load_checkpoint, save_checkpoint
from .encoder.model import encode_dense
from .tensor import Tensor

log = logging.getLogger(__name__)

STAGE_KINDS = ("retromae_pretrain", "retromae_distill", "contrastive", "score_distill", "self_distill", "domain_adapt")
NEEDS_TEACHER = ("retromae_distill", "score_distill", "self_distill")


class StageError(ValueError):
    pass


class OptimizerError(FloatingPointError):
    pass


class MergeError(ValueError):
    pass


# optimizer ------------------------------------------------------------------


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    decay_steps: int = 0  # >0: linear decay of the learning rate to 0 over this many steps

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise StageError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise StageError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise StageError("epsilon must be positive")
        if self.weight_decay < 0 or self.decay_steps < 0:
            raise StageError("weight_decay and decay_steps must be non-negative")

    def lr_at(self, t: int) -> float:
        if not self.decay_steps:
            return self.learning_rate
        return self.learning_rate * max(0.0, 1.0 - (t - 1) / self.decay_steps)


@dataclass
class OptimState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: OptimState,
    cfg: OptimConfig = OptimConfig(),
) -> tuple[dict[str, np.ndarray], OptimState]:
    """One adaptive-moment update with decoupled weight decay.

    A missing gradient counts as zero. Returns new parameter arrays and a new
    state; the inputs are left untouched.
    """
    bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        detail = ", ".join(f"{k} ({int(np.sum(~np.isfinite(grads[k])))} non-finite)" for k in bad[:8])
        raise OptimizerError(f"non-finite gradient at step {state.t + 1}: {detail}")
    t = state.t + 1
    lr = cfg.lr_at(t)
    c1, c2 = 1 - cfg.beta1**t, 1 - cfg.beta2**t
    new_params, m_out, v_out = {}, {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        elif g.shape != theta.shape:
            raise OptimizerError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = cfg.beta1 * state.m.get(name, 0.0) + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, 0.0) + (1 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        new_params[name] = theta - lr * update - lr * cfg.weight_decay * theta
        m_out[name], v_out[name] = m, v
    return new_params, OptimState(t, m_out, v_out)


def apply_step(tensors: Mapping[str, Tensor], state: OptimState, cfg: OptimConfig) -> OptimState:
    """optimizer_step over live Tensors, writing the new values in place."""
    new, state = optimizer_step({k: p.data for k, p in tensors.items()}, {k: p.grad for k, p in tensors.items()}, state, cfg)
    for k, p in tensors.items():
        p.data = new[k]
        p.grad = None
    return state


# teachers -------------------------------------------------------------------


class Teacher(Protocol):
    def score_matrix(self, queries: Sequence[str], passages: Sequence[str]) -> np.ndarray:
        """Similarity of every query to every passage, [n_queries, n_passages]."""


class EncoderTeacher:
    """Frozen encoder scoring with cosine (dense) or dot product (sparse)."""

    def __init__(self, model: EncoderModel, vocab: Vocab):
        self.model, self.vocab = model, vocab

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        batch = tokenize_batch(texts, self.vocab, self.model.config.max_seq)
        with T.no_grad():
            if self.model.config.pooling == "max_sparse":
                return sparse_weights(self.model, batch).data
            return encode_dense(self.model, batch).data

    def score_matrix(self, queries, passages):
        q, p = self.embed(queries), self.embed(passages)
        if self.model.config.pooling == "max_sparse":
            return q @ p.T
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        p = p / np.linalg.norm(p, axis=1, keepdims=True)
        return q @ p.T


# stage configuration ----------------------------------------------------------


@dataclass
class StageConfig:
    kind: str
    data: tuple[str, ...] = ()
    steps: int = 100
    batch_size: int = 8
    seed: int = 0
    teacher: str | None = None
    alpha_sampling: float = 0.5
    max_negatives: int = 3
    encoder_mask: tuple[float, float] = (0.15, 0.30)
    decoder_mask: tuple[float, float] = (0.50, 0.70)
    perturb: str | None = None  # fills in a negative for records without one, distillation only
    instruction: str | None = None  # task definition prepended to queries
    optim: OptimConfig = field(default_factory=OptimConfig)
    contrastive: O.ContrastiveConfig = field(default_factory=O.ContrastiveConfig)
    distill: O.DistillConfig = field(default_factory=O.DistillConfig)
    sparse: O.SparseLossConfig = field(default_factory=O.SparseLossConfig)

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise StageError(f"unknown stage kind {self.kind!r}; expected one of {', '.join(STAGE_KINDS)}")
        if self.steps < 0 or self.batch_size < 1:
            raise StageError("steps must be >= 0 and batch_size >= 1")
        if self.max_negatives < 0:
            raise StageError("max_negatives must be >= 0")
        if self.perturb is not None:
            PerturbConfig(self.perturb)
        self.data = tuple(str(d) for d in self.data)
        # MaskSpec validates the ranges
        self.encoder_mask = tuple(float(x) for x in self.encoder_mask)
        self.decoder_mask = tuple(float(x) for x in self.decoder_mask)
        MaskSpec(*self.encoder_mask)
        MaskSpec(*self.decoder_mask)

    @property
    def uses_teacher(self) -> bool:
        return self.kind in NEEDS_TEACHER or (self.kind == "domain_adapt" and self.teacher is not None)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["data"] = list(self.data)
        out["encoder_mask"], out["decoder_mask"] = list(self.encoder_mask), list(self.decoder_mask)
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "StageConfig":
        nested = {"optim": OptimConfig, "contrastive": O.ContrastiveConfig, "distill": O.DistillConfig, "sparse": O.SparseLossConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise StageError(f"unknown stage settings: {', '.join(sorted(unknown))}")
        kwargs = {}
        for key, value in raw.items():
            if key in nested:
                sub_known = {f.name for f in fields(nested[key])}
                extra = set(value) - sub_known
                if extra:
                    raise StageError(f"unknown [{key}] settings: {', '.join(sorted(extra))}")
                kwargs[key] = nested[key](**value)
            elif key in ("data",) and isinstance(value, str):
                kwargs[key] = (value,)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, O.LossConfigError) as exc:
            raise StageError(str(exc)) from None


# batches ----------------------------------------------------------------------


def _embed_rows(model: EncoderModel, vocab: Vocab, texts: Sequence[str]) -> Tensor:
    """Dense CLS embeddings or sparse term weights for ``texts`` in one forward pass."""
    batch = tokenize_batch(texts, vocab, model.config.max_seq)
    if model.config.pooling == "max_sparse":
        return sparse_weights(model, batch)
    return encode_dense(model, batch)


@dataclass
class PairBatch:
    queries: list[str]
    positives: list[str]
    negatives: list[list[str]]

    @property
    def pool(self) -> list[str]:
        return self.positives + [t for negs in self.negatives for t in negs]


def assemble_pairs(records: Sequence[PairRecord], stage: StageConfig, rng: np.random.Generator) -> PairBatch:
    queries, positives, negatives = [], [], []
    for r in records:
        q = format_instruction_query(stage.instruction, r.query) if stage.instruction else r.query
        negs = list(r.negatives[: stage.max_negatives])
        if not negs and stage.perturb and stage.uses_teacher and stage.max_negatives > 0:
            try:
                negs = [perturb_positive(r.positive, PerturbConfig(stage.perturb), rng)]
            except DataError:
                negs = []  # too short to perturb
        queries.append(q)
        positives.append(r.positive)
        negatives.append(negs)
    return PairBatch(queries, positives, negatives)


def _split_pool(model, vocab, pairs: PairBatch) -> O.ContrastiveBatch:
    n = len(pairs.queries)
    emb = _embed_rows(model, vocab, pairs.queries + pairs.pool)
    queries = T.take(emb, slice(0, n))
    positives = T.take(emb, slice(n, 2 * n))
    negatives, off = [], 2 * n
    for negs in pairs.negatives:
        negatives.append(T.take(emb, slice(off, off + len(negs))) if negs else None)
        off += len(negs)
    return O.ContrastiveBatch(queries, positives, negatives)


def _sparse_regularizers(batch: O.ContrastiveBatch, cfg: O.SparseLossConfig) -> dict[str, Tensor]:
    pool, _, _ = O.passage_pool(batch)
    return {
        "flops_q": O.flops_loss(batch.queries),
        "flops_p": O.flops_loss(pool),
        "norm_q": O.norm_from_weights(batch.queries),
        "norm_p": O.norm_from_weights(pool),
    }


def contrastive_step_loss(model, vocab, records, stage: StageConfig, rng) -> tuple[Tensor, dict[str, float]]:
    if model.config.pooling != "cls":
        raise StageError("contrastive training needs a dense (cls-pooled) model; train sparse models by distillation")
    pairs = assemble_pairs(records, stage, rng)
    loss = O.contrastive_loss(_split_pool(model, vocab, pairs), stage.contrastive)
    return loss, {"contrastive": loss.item()}


def distill_step_loss(model, vocab, records, stage: StageConfig, teacher: Teacher, rng) -> tuple[Tensor, dict[str, float]]:
    pairs = assemble_pairs(records, stage, rng)
    batch = _split_pool(model, vocab, pairs)
    sparse = model.config.pooling == "max_sparse"
    student, valid = O.candidate_scores(batch, "dot" if sparse else "cosine", stage.distill.in_batch)
    teacher_scores = np.asarray(teacher.score_matrix(pairs.queries, pairs.pool), dtype=np.float64)
    if teacher_scores.shape != student.shape:
        raise O.AlignmentError(f"teacher scored {teacher_scores.shape} candidates, student {student.shape}")
    kd = O.kd_loss(student, teacher_scores, stage.distill, valid)
    parts = {"kd": kd.item(), "candidates": float(valid.sum(axis=1).mean())}
    if not sparse:
        return kd, parts
    reg = _sparse_regularizers(batch, stage.sparse)
    loss = O.sparse_total_loss(kd, reg["flops_q"], reg["flops_p"], reg["norm_q"], reg["norm_p"], stage.sparse)
    parts.update({k: v.item() for k, v in reg.items()})
    return loss, parts


def retromae_step_loss(model, decoder, vocab, texts, stage: StageConfig, rng, teacher: EncoderModel | None = None):
    seqs = tokenize_batch(texts, vocab, model.config.max_seq)
    seqs = [row[: int(n)].tolist() for row, n in zip(seqs.ids, seqs.lengths)]
    out = retromae_batch(model, decoder, seqs, rng, MaskSpec(*stage.encoder_mask), MaskSpec(*stage.decoder_mask), vocab)
    parts = {}
    if out.decoder_targets.size == 0:
        raise StageError("decoder masked no positions; texts are too short")
    dec = O.mlm_loss(out.decoder_logits, out.decoder_targets)
    parts["decoder_mlm"] = dec.item()
    if out.encoder_targets.size == 0:
        parts["encoder"] = 0.0
        return dec, parts
    if teacher is None:
        enc = O.mlm_loss(out.encoder_logits, out.encoder_targets)
    else:
        with T.no_grad():
            rows, cols = out.encoder_positions
            t_hidden = teacher.hidden_states(out.encoder_batch)
            t_logits = teacher.lm_logits(T.take(t_hidden, (rows, cols))).data
        enc = O.mlm_distill_loss(out.encoder_logits, t_logits)
    parts["encoder"] = enc.item()
    return T.add(enc, dec), parts


# running ----------------------------------------------------------------------


@dataclass
class TrainState:
    step: int = 0
    optim: OptimState = field(default_factory=OptimState)
    sampler: dict | None = None


@dataclass
class StageResult:
    model: EncoderModel
    decoder: RetroMaeDecoder | None
    state: TrainState
    metrics: list[dict]


def load_texts(path) -> list[str]:
    """Text lines for pretraining: ``text`` of corpus lines or ``positive`` of pair lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            text = obj.get("text", obj.get("positive")) if isinstance(obj, dict) else None
            if not isinstance(text, str):
                raise ParseError(path, lineno, "expected a 'text' or 'positive' string")
            out.append(text)
    return out


def load_stage_data(stage: StageConfig) -> dict[str, list]:
    """Group the stage's input files into named datasets for the sampler."""
    if not stage.data:
        raise StageError("stage has no data files")
    if stage.kind.startswith("retromae"):
        return {f"{i}:{Path(p).stem}": load_texts(p) for i, p in enumerate(stage.data)}
    records = [r for p in stage.data for r in read_pairs(p)]
    return group_by_dataset(records)


def _resolve_teacher(stage: StageConfig, teacher, vocab: Vocab):
    if not stage.uses_teacher:
        return None
    if teacher is None and stage.teacher:
        teacher = load_model(stage.teacher)
    if teacher is None:
        raise StageError(f"stage {stage.kind} needs a teacher")
    if stage.kind.startswith("retromae"):
        if not isinstance(teacher, EncoderModel) or not teacher.config.lm_head:
            raise StageError("retromae_distill needs an encoder teacher with an LM head")
        if teacher.config.vocab_size != len(vocab):
            raise StageError("teacher vocabulary size differs from the student's")
        return teacher
    if isinstance(teacher, EncoderModel):
        return EncoderTeacher(teacher, vocab)
    return teacher


def _write_metrics(path: Path, rows: list[dict]) -> None:
    columns = ["step", "loss"]
    for row in rows:
        columns += [k for k in row if k not in columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items() if v != ""} for row in csv.DictReader(fh)]


def save_state(path, state: TrainState) -> None:
    header = {"step": str(state.step), "optim_t": str(state.optim.t), "sampler": json.dumps(state.sampler, sort_keys=True)}
    arrays = {f"m.{k}": v for k, v in state.optim.m.items()}
    arrays.update({f"v.{k}": v for k, v in state.optim.v.items()})
    save_checkpoint(path, header, arrays)


def load_state(path) -> TrainState:
    header, arrays = load_checkpoint(path)
    m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
    v = {k[2:]: v for k, v in arrays.items() if k.startswith("v.")}
    return TrainState(int(header["step"]), OptimState(int(header["optim_t"]), m, v), json.loads(header["sampler"]))


def save_stage(out_dir, result: StageResult, stage: StageConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.ckpt", result.model, result.decoder, {"stage": stage.kind, "step": str(result.state.step)})
    save_state(out / "state.ckpt", result.state)
    _write_metrics(out / "metrics.csv", result.metrics)


def run_stage(
    model: EncoderModel,
    stage: StageConfig,
    vocab: Vocab,
    data: Mapping[str, Sequence] | None = None,
    teacher=None,
    decoder: RetroMaeDecoder | None = None,
    state: TrainState | None = None,
    metrics: list[dict] | None = None,
    out_dir=None,
    stop_at: int | None = None,
    on_step: Callable[[int, dict], None] | None = None,
) -> StageResult:
    """Train ``model`` in place for ``stage.steps`` steps (or until ``stop_at``).

    ``data`` maps dataset names to PairRecords (or texts for the pretraining
    kinds); when omitted it is read from ``stage.data``. ``state`` and
    ``metrics`` continue an earlier run. With ``out_dir`` the final model,
    training state and metrics CSV are written there.
    """
    data = load_stage_data(stage) if data is None else data
    if isinstance(data, (list, tuple)):
        data = {"default": list(data)}
    teacher = _resolve_teacher(stage, teacher, vocab)
    retro = stage.kind.startswith("retromae")
    if retro and decoder is None:
        decoder = RetroMaeDecoder(model.config, seed=stage.seed + 1)
    if model.config.vocab_size != len(vocab):
        raise StageError(f"model vocabulary size {model.config.vocab_size} differs from vocab file ({len(vocab)})")
    sampler = BatchSampler(data, SamplerConfig(stage.alpha_sampling, stage.seed))
    state = state or TrainState()
    if state.sampler is not None:
        sampler.set_state(state.sampler)
    metrics = list(metrics or [])
    tensors = dict(model.params)
    if retro:
        tensors.update({k: v for k, v in decoder.params.items() if k not in tensors})
    end = stage.steps if stop_at is None else min(stop_at, stage.steps)

    while state.step < end:
        step = state.step + 1
        rng = np.random.default_rng([stage.seed, step])
        records = sampler.next_batch(stage.batch_size)
        with T.Graph():
            if retro:
                loss, parts = retromae_step_loss(model, decoder, vocab, records, stage, rng, teacher)
            elif stage.uses_teacher:
                loss, parts = distill_step_loss(model, vocab, records, stage, teacher, rng)
            else:
                loss, parts = contrastive_step_loss(model, vocab, records, stage, rng)
            T.backward(loss)
        value = loss.item()
        if not math.isfinite(value):
            raise OptimizerError(f"loss became {value} at step {step}")
        state.optim = apply_step(tensors, state.optim, stage.optim)
        state.step = step
        row = {"step": step, "loss": value, **parts}
        metrics.append(row)
        if on_step is not None:
            on_step(step, row)
    state.sampler = sampler.get_state()
    result = StageResult(model, decoder, state, metrics)
    if out_dir is not None:
        save_stage(out_dir, result, stage)
    return result


def resume_stage(out_dir, stage: StageConfig, vocab: Vocab, data=None, teacher=None, stop_at: int | None = None) -> StageResult:
    """Continue a stage from the files ``run_stage`` wrote into ``out_dir``."""
    out = Path(out_dir)
    model, decoder = load_model(out / "model.ckpt", with_decoder=True)
    state = load_state(out / "state.ckpt")
    metrics = read_metrics(out / "metrics.csv")
    return run_stage(model, stage, vocab, data, teacher, decoder, state, metrics, out_dir, stop_at)


def self_distill(
    teacher: EncoderModel,
    stage: StageConfig,
    vocab: Vocab,
    data=None,
    student: EncoderModel | None = None,
    out_dir=None,
) -> StageResult:
    """Score-distill a copy of ``teacher`` into itself; the teacher stays frozen."""
    if stage.kind != "self_distill":
        stage = replace(stage, kind="self_distill")
    student = teacher.copy() if student is None else student
    if student.config != teacher.config:
        raise StageError("self-distillation needs identical teacher and student architectures")
    frozen = teacher.copy()  # the caller's teacher object is never handed to training
    return run_stage(student, stage, vocab, data, frozen, out_dir=out_dir)


# merging ----------------------------------------------------------------------


@dataclass
class MergeSpec:
    entries: list[tuple[str, float]]

    def __post_init__(self):
        if not self.entries:
            raise MergeError("nothing to merge")
        weights = [float(w) for _, w in self.entries]
        if any(w < 0 or not math.isfinite(w) for w in weights):
            raise MergeError("merge weights must be finite and non-negative")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise MergeError(f"merge weights sum to {sum(weights)!r}, not 1")
        self.entries = [(str(p), float(w)) for p, w in self.entries]


def merge_state_dicts(states: Sequence[Mapping[str, np.ndarray]], weights: Sequence[float]) -> dict[str, np.ndarray]:
    """Elementwise convex combination with order-independent accumulation.

    Weighted contributions are sorted along the checkpoint axis before summing,
    so the result does not depend on the order the checkpoints are listed in.
    Zero-weight checkpoints are validated but contribute nothing.
    """
    if len(states) != len(weights) or not states:
        raise MergeError("need one weight per checkpoint")
    names = set(states[0])
    problems = []
    for i, s in enumerate(states[1:], start=1):
        for k in sorted(names ^ set(s)):
            problems.append(f"{k}: present in only one of checkpoints 0 and {i}")
        for k in sorted(names & set(s)):
            if s[k].shape != states[0][k].shape:
                problems.append(f"{k}: shape {states[0][k].shape} vs {s[k].shape} in checkpoint {i}")
    if problems:
        raise MergeError("checkpoints disagree:\n  " + "\n  ".join(problems))
    active = [(s, w) for s, w in zip(states, weights) if w != 0.0]
    merged = {}
    for name in states[0]:
        parts = np.stack([w * np.asarray(s[name], dtype=np.float64) for s, w in active])
        merged[name] = np.sort(parts, axis=0).sum(axis=0) if len(active) > 1 else parts[0]
    return merged


def merge_models(spec: MergeSpec, output=None) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Merge checkpoint files; the config header comes from the first entry."""
    loaded = [load_checkpoint(path) for path, _ in spec.entries]
    headers = [h for h, _ in loaded]
    keys = ("vocab_size", "layers", "hidden", "intermediate", "heads", "max_seq", "pooling", "lm_head")
    for (path, _), h in zip(spec.entries[1:], headers[1:]):
        diff = [k for k in keys if h.get(k) != headers[0].get(k)]
        if diff:
            raise MergeError(f"{path}: architecture differs from {spec.entries[0][0]} in {', '.join(diff)}")
    params = merge_state_dicts([p for _, p in loaded], [w for _, w in spec.entries])
    header = {k: v for k, v in headers[0].items() if k not in ("stage", "step")}
    if output is not None:
        save_checkpoint(output, header, params)
    return header, params
