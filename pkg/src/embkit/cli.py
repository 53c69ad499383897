"""Command-line entry point: ``embkit <subcommand> [options]``.

Every run is determined by the TOML config file, the flags and the seed.
Flags win over the config file; ``--set section.key=value`` overrides any
single config entry. Each command writes its artifact plus a manifest JSON
(inputs, hashes, seed, versions) next to it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .data import (
    DataError,
    MinerConfig,
    PairRecord,
    ParseError,
    PerturbConfig,
    mine_dataset,
    perturb_positive,
    read_corpus,
    read_pairs,
    write_pairs,
)
from .encoder import CheckpointError, ConfigError, EncoderConfig, EncoderModel, Vocab, encode_texts, load_model
from .retrieval import (
    DenseIndex,
    IndexFormatError,
    InvertedIndex,
    evaluate,
    index_kind,
    read_qrels,
    read_run,
    run_rankings,
    write_run,
)
from .training import NEEDS_TEACHER, MergeError, MergeSpec, StageConfig, StageError, load_texts, merge_models, run_stage, self_distill

log = logging.getLogger("embkit")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_PATH, EXIT_PARSE = 0, 1, 2, 3, 4


class CliError(Exception):
    code = EXIT_ERROR


class PathError(CliError):
    code = EXIT_PATH


class CliConfigError(CliError):
    code = EXIT_CONFIG


# config -----------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise PathError(f"config file not found: {p}")
        try:
            cfg = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise CliConfigError(f"{p}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise CliConfigError(f"--set expects section.key=value, got {item!r}")
        node = cfg
        *parents, leaf = key.strip().split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CliConfigError(f"--set {key}: {part} is not a table")
        node[leaf] = _parse_value(value.strip())
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise CliConfigError(f"[{name}] must be a table")
    return dict(sec)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path, what: str) -> Path:
    if path is None:
        raise CliConfigError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise PathError(f"{what} not found: {p}")
    return p


def write_manifest(path: Path, command: str, cfg: dict, seed, inputs: list, outputs: list) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "inputs": {str(p): file_hash(p) for p in inputs if p is not None and Path(p).is_file()},
        "outputs": {str(p): file_hash(p) for p in outputs if Path(p).is_file()},
        "versions": {"embkit": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _file_manifest(output: Path) -> Path:
    return output.with_name(output.name + ".manifest.json")


# model / vocab helpers ----------------------------------------------------------


def _vocab_for(args, model_path: Path | None) -> tuple[Vocab, Path]:
    path = Path(args.vocab) if args.vocab else (model_path.parent / "vocab.txt" if model_path else None)
    path = _require(path, "vocabulary file (--vocab)")
    return Vocab.load(path), path


def _build(cls, sec: dict, name: str):
    try:
        return cls(**sec)
    except TypeError as exc:
        raise CliConfigError(f"[{name}]: {exc}") from None


def _model_config(cfg: dict, vocab_size: int) -> EncoderConfig:
    sec = _section(cfg, "model")
    sec["vocab_size"] = vocab_size
    return _build(EncoderConfig, sec, "model")


def _stage_config(cfg: dict, args, kind_default: str, allowed: tuple[str, ...]) -> StageConfig:
    sec = _section(cfg, "stage")
    sec.setdefault("kind", kind_default)
    if args.data:
        sec["data"] = list(args.data)
    if args.seed is not None:
        sec["seed"] = args.seed
    if args.steps is not None:
        sec["steps"] = args.steps
    if args.batch_size is not None:
        sec["batch_size"] = args.batch_size
    if getattr(args, "teacher", None):
        sec["teacher"] = args.teacher
    stage = StageConfig.from_dict(sec)
    if stage.kind not in allowed:
        raise CliConfigError(f"stage kind {stage.kind!r} is not valid here; use one of {', '.join(allowed)}")
    for p in stage.data:
        _require(p, "data file")
    if stage.teacher:
        _require(stage.teacher, "teacher checkpoint")
    elif stage.kind in NEEDS_TEACHER:
        raise CliConfigError(f"stage {stage.kind} needs a teacher checkpoint (--teacher)")
    return stage


def _stage_command(args, cfg: dict, kind_default: str, allowed: tuple[str, ...]) -> int:
    stage = _stage_config(cfg, args, kind_default, allowed)
    out = Path(_require_output(args))
    out.mkdir(parents=True, exist_ok=True)
    # a self-distilled student starts from the teacher unless told otherwise
    init = args.init or (stage.teacher if stage.kind == "self_distill" else None)
    if init:
        model = load_model(_require(init, "initial checkpoint"))
        vocab, vocab_path = _vocab_for(args, Path(init))
    elif args.vocab:
        vocab_path = _require(args.vocab, "vocabulary file")
        vocab = Vocab.load(vocab_path)
        model = EncoderModel(_model_config(cfg, len(vocab)), seed=stage.seed)
    else:
        if not stage.data:
            raise CliConfigError("no data files (--data or [stage] data)")
        max_size = int(_section(cfg, "vocab").get("max_size", 2048))
        vocab, vocab_path = Vocab.build(_texts_for_vocab(stage), max_size=max_size), None
        model = EncoderModel(_model_config(cfg, len(vocab)), seed=stage.seed)
    vocab.save(out / "vocab.txt")

    if stage.kind == "self_distill":
        result = self_distill(load_model(stage.teacher), stage, vocab, student=model, out_dir=out)
    else:
        result = run_stage(model, stage, vocab, out_dir=out)
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"{stage.kind}: {result.state.step} steps, final loss {last:.6f}, wrote {out / 'model.ckpt'}")
    inputs = [*stage.data, stage.teacher, init, vocab_path]
    outputs = [out / "model.ckpt", out / "state.ckpt", out / "metrics.csv", out / "vocab.txt"]
    write_manifest(out / "manifest.json", args.command, {**cfg, "stage": stage.to_dict()}, stage.seed, inputs, outputs)
    return EXIT_OK


def _texts_for_vocab(stage: StageConfig) -> list[str]:
    if stage.kind.startswith("retromae"):
        return [t for p in stage.data for t in load_texts(p)]
    return [t for p in stage.data for r in read_pairs(p) for t in (r.query, r.positive, *r.negatives)]


def _require_output(args) -> str:
    if not args.output:
        raise CliConfigError("--output is required")
    return args.output


# commands ---------------------------------------------------------------------


def cmd_pretrain(args, cfg) -> int:
    return _stage_command(args, cfg, "retromae_pretrain", ("retromae_pretrain", "retromae_distill"))


def cmd_train(args, cfg) -> int:
    return _stage_command(args, cfg, "contrastive", ("contrastive", "domain_adapt"))


def cmd_distill(args, cfg) -> int:
    return _stage_command(args, cfg, "score_distill", ("score_distill", "self_distill", "domain_adapt"))


def _parse_merge_input(item: str) -> tuple[str, float]:
    path, sep, weight = item.rpartition(":")
    if not sep:
        raise CliConfigError(f"merge input must be PATH:WEIGHT, got {item!r}")
    try:
        return path, float(weight)
    except ValueError:
        raise CliConfigError(f"bad merge weight in {item!r}") from None


def cmd_merge(args, cfg) -> int:
    sec = _section(cfg, "merge")
    items = args.inputs or [f"{p}:{w}" for p, w in sec.get("inputs", [])]
    if not items:
        raise CliConfigError("nothing to merge (--inputs PATH:WEIGHT ...)")
    entries = [_parse_merge_input(i) if isinstance(i, str) else i for i in items]
    for p, _ in entries:
        _require(p, "checkpoint")
    out = Path(_require_output(args))
    out.parent.mkdir(parents=True, exist_ok=True)
    merge_models(MergeSpec(entries), out)
    first_vocab = Path(entries[0][0]).parent / "vocab.txt"
    if first_vocab.is_file() and first_vocab.resolve() != (out.parent / "vocab.txt").resolve():
        (out.parent / "vocab.txt").write_bytes(first_vocab.read_bytes())
    print(f"merged {len(entries)} checkpoints into {out}")
    write_manifest(_file_manifest(out), "merge", {**cfg, "merge": {"inputs": entries}}, None, [p for p, _ in entries], [out])
    return EXIT_OK


def _encode_parallel(model, texts, vocab, threads: int, sparse: bool):
    """Encode in fixed-size chunks; results are stitched back in input order."""
    chunk = 64
    starts = range(0, len(texts), chunk)

    def one(s):
        return encode_texts(model, texts[s : s + chunk], vocab, batch_size=chunk, sparse=sparse)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, starts))
    else:
        parts = [one(s) for s in starts]
    if sparse:
        return [v for part in parts for v in part]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, model.config.hidden))


def cmd_mine(args, cfg) -> int:
    sec = _section(cfg, "mine")
    if args.seed is not None:
        sec["seed"] = args.seed
    for flag, key in (("top_k", "top_k"), ("threshold", "false_negative_threshold"), ("negatives", "negatives_per_query")):
        if getattr(args, flag) is not None:
            sec[key] = getattr(args, flag)
    miner = _build(MinerConfig, sec, "mine")
    pairs_path = _require(args.pairs, "pair file (--pairs)")
    corpus_path = _require(args.corpus, "corpus file (--corpus)")
    model_path = _require(args.model, "scorer checkpoint (--model)")
    model = load_model(model_path)
    vocab, vocab_path = _vocab_for(args, model_path)
    records = read_pairs(pairs_path)
    corpus = [text for _, text in read_corpus(corpus_path)]

    def scorer(texts):
        return _encode_parallel(model, list(texts), vocab, 1, sparse=False)

    mined, skipped = mine_dataset(records, corpus, scorer, miner, threads=args.threads)
    out = Path(_require_output(args))
    write_pairs(out, mined)
    print(f"mined {len(mined)} records, skipped {skipped} with no surviving candidates")
    write_manifest(_file_manifest(out), "mine", {**cfg, "mine": sec}, miner.seed, [pairs_path, corpus_path, model_path, vocab_path], [out])
    return EXIT_OK


def cmd_perturb(args, cfg) -> int:
    sec = _section(cfg, "perturb")
    if args.mode:
        sec["mode"] = args.mode
    if args.seed is not None:
        sec["seed"] = args.seed
    pcfg = _build(PerturbConfig, sec, "perturb")
    pairs_path = _require(args.pairs, "pair file (--pairs)")
    out_records, changed = [], 0
    for i, r in enumerate(read_pairs(pairs_path)):
        negs = list(r.negatives)
        if not negs:
            try:
                negs = [perturb_positive(r.positive, pcfg, np.random.default_rng([pcfg.seed, i]))]
                changed += 1
            except DataError as exc:
                log.warning("record %d: %s; left without a negative", i + 1, exc)
        out_records.append(PairRecord(r.query, r.positive, negs, r.dataset_id))
    out = Path(_require_output(args))
    write_pairs(out, out_records)
    print(f"added perturbed negatives to {changed} of {len(out_records)} records")
    write_manifest(_file_manifest(out), "perturb", {**cfg, "perturb": sec}, pcfg.seed, [pairs_path], [out])
    return EXIT_OK


def cmd_index(args, cfg) -> int:
    model_path = _require(args.model, "checkpoint (--model)")
    corpus_path = _require(args.corpus, "corpus file (--corpus)")
    model = load_model(model_path)
    vocab, vocab_path = _vocab_for(args, model_path)
    docs = read_corpus(corpus_path)
    ids, texts = [d for d, _ in docs], [t for _, t in docs]
    out = Path(_require_output(args))
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "dense":
        DenseIndex(ids, _encode_parallel(model, texts, vocab, args.threads, sparse=False)).save(out)
    else:
        if not model.config.lm_head:
            raise CliConfigError("sparse indexing needs a model with an LM head")
        vecs = _encode_parallel(model, texts, vocab, args.threads, sparse=True)
        InvertedIndex(zip(ids, vecs), vocab_size=model.config.vocab_size).save(out)
    print(f"indexed {len(ids)} documents ({args.kind}) into {out}")
    write_manifest(_file_manifest(out), "index", {**cfg, "kind": args.kind}, None, [model_path, corpus_path, vocab_path], [out])
    return EXIT_OK


def cmd_search(args, cfg) -> int:
    index_path = _require(args.index, "index file (--index)")
    model_path = _require(args.model, "checkpoint (--model)")
    queries_path = _require(args.queries, "query file (--queries)")
    model = load_model(model_path)
    vocab, vocab_path = _vocab_for(args, model_path)
    k = args.k if args.k is not None else int(_section(cfg, "search").get("k", 10))
    queries = read_corpus(queries_path)
    qids, texts = [q for q, _ in queries], [t for _, t in queries]
    kind = index_kind(index_path)
    if kind == "dense":
        index = DenseIndex.load(index_path)
        vecs = _encode_parallel(model, texts, vocab, args.threads, sparse=False)
    else:
        index = InvertedIndex.load(index_path)
        vecs = _encode_parallel(model, texts, vocab, args.threads, sparse=True)

    def one(i):
        return index.search(vecs[i], k)

    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            hits = list(pool.map(one, range(len(qids))))
    else:
        hits = [one(i) for i in range(len(qids))]
    out = Path(_require_output(args))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_run(out, dict(zip(qids, hits)))
    print(f"searched {len(qids)} queries against {len(index)} documents ({kind}), wrote {out}")
    inputs = [index_path, model_path, queries_path, vocab_path]
    write_manifest(_file_manifest(out), "search", {**cfg, "k": k}, None, inputs, [out])
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    run_path = _require(args.run, "run file (--run)")
    qrels_path = _require(args.qrels, "qrels file (--qrels)")
    scores = evaluate(run_rankings(read_run(run_path)), read_qrels(qrels_path))
    out = Path(_require_output(args))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in scores.items():
            w.writerow([name, repr(value)])
    for name, value in scores.items():
        print(f"{name}\t{value:.4f}")
    write_manifest(_file_manifest(out), "eval", cfg, None, [run_path, qrels_path], [out])
    return EXIT_OK


# parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--threads", type=int, default=1, help="worker threads for encoding, mining and search")
    common.add_argument("--output", "-o", help="output file or directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. stage.steps=200 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="embkit", description="Train, distill, merge and evaluate text embedding models.")
    parser.add_argument("--version", action="version", version=f"embkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage_parser(name, help_text, teacher: bool):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--data", nargs="+", help="input JSONL files")
        p.add_argument("--vocab", help="vocabulary file (built from the data when omitted)")
        p.add_argument("--init", help="checkpoint to start from")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--teacher", help="teacher checkpoint" if teacher else argparse.SUPPRESS)
        return p

    stage_parser("pretrain", "masked auto-encoding pretraining (retromae_pretrain / retromae_distill)", True)
    stage_parser("train", "contrastive training (contrastive / domain_adapt)", True)
    stage_parser("distill", "score distillation (score_distill / self_distill / domain_adapt)", True)

    p = sub.add_parser("merge", parents=[common], help="weighted average of checkpoints")
    p.add_argument("--inputs", nargs="+", metavar="PATH:WEIGHT")

    p = sub.add_parser("mine", parents=[common], help="hard-negative mining")
    p.add_argument("--pairs")
    p.add_argument("--corpus")
    p.add_argument("--model")
    p.add_argument("--vocab")
    p.add_argument("--top-k", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--negatives", type=int)

    p = sub.add_parser("perturb", parents=[common], help="add perturbed positives as negatives")
    p.add_argument("--pairs")
    p.add_argument("--mode", choices=["delete_span", "swap_spans"])

    p = sub.add_parser("index", parents=[common], help="build a dense or sparse index")
    p.add_argument("kind", choices=["dense", "sparse"])
    p.add_argument("--model")
    p.add_argument("--vocab")
    p.add_argument("--corpus")

    p = sub.add_parser("search", parents=[common], help="query an index, write a run file")
    p.add_argument("--index")
    p.add_argument("--model")
    p.add_argument("--vocab")
    p.add_argument("--queries", help="JSONL with id and text")
    p.add_argument("--k", type=int)

    p = sub.add_parser("eval", parents=[common], help="nDCG@10, MRR@5 and recall@10 of a run")
    p.add_argument("--run")
    p.add_argument("--qrels")
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "distill": cmd_distill,
    "merge": cmd_merge,
    "mine": cmd_mine,
    "perturb": cmd_perturb,
    "index": cmd_index,
    "search": cmd_search,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("embkit: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"embkit: error: {exc}", file=sys.stderr)
        return exc.code
    except ParseError as exc:
        print(f"embkit: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, StageError, MergeError) as exc:
        print(f"embkit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"embkit: error: {exc}", file=sys.stderr)
        return EXIT_PATH
    except (DataError, CheckpointError, IndexFormatError, ValueError, FloatingPointError) as exc:
        print(f"embkit: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
