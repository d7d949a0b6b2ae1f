"""Command-line entry points for the pipeline stages.

Each subcommand runs one stage against a shared config file and the fixed
artifact names inside the working directory, so stages compose by pointing
at the same workdir. Config validation happens before any output is
touched; a validation failure exits 2, runtime failures exit 1.
"""

import argparse
import json
import os
import random
import sys
from typing import List, Optional, Sequence

from . import bootstrap as bootstrap_mod
from . import corpus, genclient, informalize, prover, retrieval, trainprep
from .config import (
    ConfigError,
    PipelineConfig,
    fork_seed,
    load_config,
    make_backend,
    make_budget,
    make_retry,
    make_tokenizer,
    make_verifier,
    stage_path,
)


class MissingArtifact(FileNotFoundError):
    """An upstream stage output this command depends on does not exist."""

    def __init__(self, path: str, producer: str):
        super().__init__(
            f"expected file {path} is missing; run `leanforge {producer}` first")


def _read_jsonl(path: str) -> List[dict]:
    entries = []
    with open(path, "r", encoding="utf-8") as source:
        for lineno, line in enumerate(source, start=1):
            if not line.strip():
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: unreadable JSON: {exc}")
    return entries


def _require(path: str, producer: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifact(path, producer)
    return path


def _field(entry: dict, key: str, path: str, index: int):
    if key not in entry:
        raise ValueError(f"{path}: entry {index + 1} has no {key!r} field")
    return entry[key]


def _save_theorems(records: Sequence[corpus.TheoremRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as sink:
        for r in records:
            sink.write(json.dumps({
                "name": r.name,
                "statement": r.statement,
                "proof": r.proof,
                "file_path": r.file_path,
                "commit": r.commit,
                "difficulty": r.difficulty,
            }, ensure_ascii=False) + "\n")


def _load_theorems(path: str) -> List[corpus.TheoremRecord]:
    return [
        corpus.TheoremRecord(
            name=_field(e, "name", path, i),
            statement=_field(e, "statement", path, i),
            proof=_field(e, "proof", path, i),
            file_path=_field(e, "file_path", path, i),
            commit=_field(e, "commit", path, i),
            difficulty=_field(e, "difficulty", path, i),
        )
        for i, e in enumerate(_read_jsonl(path))
    ]


# --- extract ---------------------------------------------------------------------


def _iter_corpus_sources(config: PipelineConfig):
    """Yield (source_text, file_path, commit) for every input file.

    The corpus path is either a directory tree of .lean files or a JSONL
    file whose entries carry source/file_path/commit.
    """
    root = config.corpus.path
    if os.path.isdir(root):
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames.sort()
            for filename in sorted(filenames):
                if not filename.endswith(".lean"):
                    continue
                full = os.path.join(dirpath, filename)
                relative = os.path.relpath(full, root)
                with open(full, "r", encoding="utf-8") as source:
                    yield source.read(), relative, config.corpus.commit
    else:
        _require(root, "extract with a corpus directory, or create the file")
        for i, entry in enumerate(_read_jsonl(root)):
            yield (_field(entry, "source", root, i),
                   _field(entry, "file_path", root, i),
                   entry.get("commit", config.corpus.commit))


def cmd_extract(args, config: PipelineConfig) -> int:
    if not config.corpus.path:
        raise ConfigError(["corpus.path: required for extract"])
    os.makedirs(config.workdir, exist_ok=True)
    records: List[corpus.TheoremRecord] = []
    skips: List[dict] = []
    files = 0
    for source, file_path, commit in _iter_corpus_sources(config):
        files += 1
        try:
            records.extend(corpus.extract_theorems(source, file_path, commit))
        except corpus.LexError as exc:
            skips.append({"file": file_path, "reason": str(exc)})
    _save_theorems(records, stage_path(config, "theorems"))
    with open(stage_path(config, "extract_skips"), "w", encoding="utf-8",
              newline="\n") as sink:
        for entry in skips:
            sink.write(json.dumps(entry, ensure_ascii=False) + "\n")
    print(f"extracted {len(records)} theorems from {files} files "
          f"({len(skips)} files skipped)")
    return 0


# --- train-retriever -------------------------------------------------------------


def _load_pairs(path: str, dimension: int):
    """Pair file entries hold either nl/fl texts or precomputed vectors."""
    entries = _read_jsonl(path)
    texts = [e for e in entries if "nl" in e]
    if texts:
        embedder = retrieval.HashEmbedder(dimension)
        nl_vectors = embedder.embed([e["nl"] for e in entries])
        fl_vectors = embedder.embed([e["fl"] for e in entries])
        return list(zip(nl_vectors, fl_vectors))
    return [
        (retrieval.embedding([float(x) for x in e["nl_vector"]]),
         retrieval.embedding([float(x) for x in e["fl_vector"]]))
        for e in entries
    ]


def cmd_train_retriever(args, config: PipelineConfig) -> int:
    r = config.retrieval
    if not r.pairs:
        raise ConfigError(["retrieval.pairs: required for train-retriever"])
    _require(r.pairs, "extract, then build a pair file")
    os.makedirs(config.workdir, exist_ok=True)
    pairs = _load_pairs(r.pairs, r.dimension)
    train_config = retrieval.TrainConfig(
        lr=r.lr,
        steps=args.steps if args.steps is not None else r.steps,
        batch_size=r.batch_size,
        seed=fork_seed(config.seed, "train-retriever"),
        d_out=r.projection_dim,
    )
    head, trace = retrieval.train_projection(pairs, train_config)
    retrieval.save_head(head, stage_path(config, "projection"))
    with open(stage_path(config, "loss_trace"), "w", encoding="utf-8",
              newline="\n") as sink:
        sink.write("step,loss\n")
        for step, loss in enumerate(trace, start=1):
            sink.write(f"{step},{loss:.10f}\n")
    nl_vectors = [p[0] for p in pairs]
    fl_vectors = [p[1] for p in pairs]
    edges, counts, _ = retrieval.similarity_histogram(nl_vectors, fl_vectors, head)
    retrieval.write_histogram_csv(stage_path(config, "histogram"), edges, counts)
    final = trace[-1] if trace else float("nan")
    print(f"trained on {len(pairs)} pairs for {train_config.steps} steps, "
          f"final loss {final:.6f}")
    return 0


# --- informalize -----------------------------------------------------------------


def _load_example_pool(path: str) -> List[informalize.ExamplePair]:
    return [
        informalize.ExamplePair(
            name=_field(e, "name", path, i),
            nl=_field(e, "nl", path, i),
            fl=_field(e, "fl", path, i),
        )
        for i, e in enumerate(_read_jsonl(path))
    ]


def cmd_informalize(args, config: PipelineConfig) -> int:
    records = _load_theorems(
        _require(stage_path(config, "theorems"), "extract"))
    pool: Sequence[informalize.ExamplePair] = ()
    index = None
    embedder = None
    if config.retrieval.examples:
        _require(config.retrieval.examples, "informalize with a pool file")
        pool = _load_example_pool(config.retrieval.examples)
        head = retrieval.load_head(
            _require(stage_path(config, "projection"), "train-retriever"))
        embedder = retrieval.HashEmbedder(config.retrieval.dimension)
        index = informalize.build_example_index(
            pool, embedder, head, side=config.retrieval.side)
    os.makedirs(config.workdir, exist_ok=True)
    i = config.informalize
    stage = informalize.InformalizeConfig(
        backend=make_backend(config.backend),
        limits=informalize.QualityLimits(
            max_tokens=i.max_tokens,
            repetition_ngram=i.repetition_ngram,
            repetition_ratio_max=i.repetition_ratio_max,
        ),
        max_attempts=(args.max_attempts if args.max_attempts is not None
                      else i.max_attempts),
        k_examples=i.k_examples,
        pool=pool,
        index=index,
        embedder=embedder,
        checkpoint_path=stage_path(config, "informal_checkpoint"),
        restart=not args.resume,
        retry=make_retry(config.backend.retry, fork_seed(config.seed, "retry")),
        budget=make_budget(config.backend.budget),
        max_new_tokens=config.backend.max_new_tokens,
        temperature=config.backend.temperature,
    )
    results = informalize.informalize_corpus(records, stage)
    informalize.save_informal_dataset(
        records, results, stage_path(config, "informal"))
    passed = sum(1 for r in results if r.verdict == "pass")
    print(f"informalized {passed}/{len(results)} theorems "
          f"({len(results) - passed} failed screening)")
    return 0


# --- bootstrap -------------------------------------------------------------------


def cmd_bootstrap(args, config: PipelineConfig) -> int:
    records = _load_theorems(
        _require(stage_path(config, "theorems"), "extract"))
    entries = _read_jsonl(
        _require(stage_path(config, "informal"), "informalize"))
    by_name = {e["Name"]: e for e in entries}
    kept = [r for r in records if r.name in by_name]
    informals = [
        informalize.InformalizationResult(
            theorem_name=r.name,
            nl_statement_and_proof=by_name[r.name][
                "Generated_informal_statement_and_proof"],
            examples_used=(),
            attempts=0,
            verdict=by_name[r.name]["verdict"],
            reasons=tuple(by_name[r.name].get("reasons", ())),
        )
        for r in kept
    ]
    mode_name = args.mode or config.bootstrap.mode
    mode = bootstrap_mod.BootstrapMode[mode_name.upper()]
    backend = None
    if mode is bootstrap_mod.BootstrapMode.INTERLEAVED:
        backend = make_backend(config.backend)
    obt_records, stats = bootstrap_mod.bootstrap_corpus(
        kept,
        informals,
        backend=backend,
        mode=mode,
        max_attempts=config.bootstrap.max_attempts,
        retry=make_retry(config.backend.retry, fork_seed(config.seed, "retry")),
        budget=make_budget(config.backend.budget),
        max_new_tokens=config.backend.max_new_tokens,
        temperature=config.backend.temperature,
    )
    bootstrap_mod.save_obt_dataset(obt_records, stage_path(config, "obt"))
    print(f"bootstrapped {stats.emitted}/{stats.total} records "
          f"({stats.informal_failures} informal failures, "
          f"{stats.verification_fallbacks} verification fallbacks, "
          f"{stats.backend_fallbacks} backend fallbacks)")
    return 0


# --- prep ------------------------------------------------------------------------


def cmd_prep(args, config: PipelineConfig) -> int:
    obt_records = bootstrap_mod.load_obt_dataset(
        _require(stage_path(config, "obt"), "bootstrap"))
    p = config.prep
    stage = trainprep.PrepConfig(
        context_budget=(args.token_budget if args.token_budget is not None
                        else p.token_budget),
        tokenizer=make_tokenizer(p),
        use_nl=p.use_nl and not args.no_nl,
        use_bootstrapped=p.use_bootstrapped and not args.no_bootstrapped,
        use_block=p.use_block and not args.no_block,
        use_curriculum=p.use_curriculum and not args.no_curriculum,
        examples_use_bootstrapped=p.examples_use_bootstrapped,
    )
    packed, skipped = trainprep.emit_training_set(obt_records, stage)
    trainprep.save_training_set(packed, stage_path(config, "train"))
    trainprep.save_skip_report(skipped, stage_path(config, "train_skips"))
    print(f"packed {len(packed)} training records ({len(skipped)} skipped)")
    return 0


# --- prove / report --------------------------------------------------------------


def _load_problems(path: str) -> List[prover.Problem]:
    return [
        prover.Problem(
            name=_field(e, "name", path, i),
            fl_statement=_field(e, "fl_statement", path, i),
            nl_statement_and_proof=e.get("nl_statement_and_proof", ""),
            imports=e.get("imports", ""),
        )
        for i, e in enumerate(_read_jsonl(path))
    ]


def _load_seed_pool(path: str) -> List[prover.PoolExample]:
    return [
        prover.PoolExample(
            name=_field(e, "name", path, i),
            nl=_field(e, "nl", path, i),
            fl=_field(e, "fl", path, i),
        )
        for i, e in enumerate(_read_jsonl(path))
    ]


def cmd_prove(args, config: PipelineConfig) -> int:
    v = config.prover
    if not v.problems:
        raise ConfigError(["prover.problems: required for prove"])
    if not v.seed_examples:
        raise ConfigError(["prover.seed_examples: required for prove"])
    problems = _load_problems(_require(v.problems, "prove with a problem file"))
    seed_pool = _load_seed_pool(
        _require(v.seed_examples, "prove with a seed example file"))
    os.makedirs(config.workdir, exist_ok=True)
    stage = prover.HarnessConfig(
        n_samples=(args.n_samples if args.n_samples is not None
                   else v.n_samples),
        max_rounds=(args.max_rounds if args.max_rounds is not None
                    else v.max_rounds),
        k_range=(v.k_min, v.k_max),
        token_budget=v.token_budget,
        max_new_tokens=v.max_new_tokens,
        temperature=config.backend.temperature,
        tokenizer=make_tokenizer(config.prep),
        retry=make_retry(config.backend.retry, fork_seed(config.seed, "retry")),
        budget=make_budget(config.backend.budget),
    )
    report = prover.run_iterative(
        problems, seed_pool, make_backend(config.backend),
        make_verifier(v), stage)
    prover.save_report(report, stage_path(config, "report"))
    print(prover.format_report_table(report))
    return 0


def cmd_report(args, config: PipelineConfig) -> int:
    v = config.prover
    if not v.problems:
        raise ConfigError(["prover.problems: required for report"])
    problems = _load_problems(_require(v.problems, "prove with a problem file"))
    report = prover.load_report(
        _require(stage_path(config, "report"), "prove"),
        problems,
        make_verifier(v),
    )
    print(prover.format_report_table(report))
    return 0


# --- sample ----------------------------------------------------------------------

_NL_KEYS = ("Generated_informal_statement_and_proof",
            "nl_statement_and_proof", "nl", "instruction")
_FL_KEYS = ("Commented_proof", "proof", "Proof", "fl", "target")
_NAME_KEYS = ("Name", "name", "theorem_name")


def _pick(entry: dict, keys) -> str:
    for key in keys:
        if key in entry:
            return str(entry[key])
    return ""


def cmd_sample(args, config: PipelineConfig) -> int:
    dataset = args.dataset or stage_path(config, "obt")
    _require(dataset, "bootstrap, or pass --dataset")
    with open(dataset, "r", encoding="utf-8") as source:
        lines = [line for line in source if line.strip()]
    if args.n > len(lines):
        raise ValueError(
            f"cannot sample {args.n} records from a dataset of {len(lines)}")
    seed = args.seed if args.seed is not None else fork_seed(config.seed, "sample")
    rng = random.Random(seed)
    indices = rng.sample(range(len(lines)), args.n)
    os.makedirs(config.workdir, exist_ok=True)
    if args.for_review:
        output = args.output or stage_path(config, "review")
        with open(output, "w", encoding="utf-8", newline="\n") as sink:
            for index in indices:
                entry = json.loads(lines[index])
                sink.write(f"=== {_pick(entry, _NAME_KEYS)} ===\n")
                sink.write("[NL]\n")
                sink.write(_pick(entry, _NL_KEYS).rstrip("\n") + "\n")
                sink.write("[FL]\n")
                sink.write(_pick(entry, _FL_KEYS).rstrip("\n") + "\n\n")
    else:
        output = args.output or stage_path(config, "sample")
        # Original lines pass through untouched so the subset stays
        # byte-comparable against its source dataset.
        with open(output, "w", encoding="utf-8", newline="") as sink:
            for index in indices:
                sink.write(lines[index])
    print(f"sampled {args.n}/{len(lines)} records (seed {seed}) -> {output}")
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leanforge",
        description="Lean4 corpus-to-prover data pipeline and proof harness.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name, handler, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("-c", "--config", required=True,
                         help="pipeline config file")
        sub.set_defaults(handler=handler)
        return sub

    command("extract", cmd_extract,
            "pull theorem declarations out of a Lean4 corpus")

    train = command("train-retriever", cmd_train_retriever,
                    "train the NL-FL projection head")
    train.add_argument("--steps", type=int, default=None,
                       help="override training step count")

    inf = command("informalize", cmd_informalize,
                  "generate natural-language texts for extracted theorems")
    inf.add_argument("--resume", action="store_true",
                     help="continue from the stage checkpoint")
    inf.add_argument("--max-attempts", type=int, default=None,
                     help="override per-theorem attempt limit")

    boot = command("bootstrap", cmd_bootstrap,
                   "comment proofs with their natural-language steps")
    boot.add_argument("--mode", choices=["interleaved", "head"], default=None,
                      help="override bootstrap mode")

    prep = command("prep", cmd_prep, "pack the instruction-tuning dataset")
    prep.add_argument("--token-budget", type=int, default=None)
    prep.add_argument("--no-nl", action="store_true",
                      help="drop natural-language guidance from instructions")
    prep.add_argument("--no-bootstrapped", action="store_true",
                      help="target plain proofs instead of commented ones")
    prep.add_argument("--no-block", action="store_true",
                      help="disable in-context example packing")
    prep.add_argument("--no-curriculum", action="store_true",
                      help="keep input order instead of difficulty order")

    prove = command("prove", cmd_prove, "run the iterative proof harness")
    prove.add_argument("--n-samples", type=int, default=None)
    prove.add_argument("--max-rounds", type=int, default=None)

    sample = command("sample", cmd_sample, "draw a seeded dataset subset")
    sample.add_argument("--dataset", default=None,
                        help="JSONL to sample from (default: the OBT dataset)")
    sample.add_argument("-n", type=int, required=True,
                        help="number of records to draw")
    sample.add_argument("--seed", type=int, default=None)
    sample.add_argument("--for-review", action="store_true",
                        help="emit side-by-side NL/FL text instead of JSONL")
    sample.add_argument("--output", default=None)

    command("report", cmd_report, "re-verify and print a harness report")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        for error in exc.errors:
            print(f"config error: {error}", file=sys.stderr)
        return 2
    try:
        return args.handler(args, config)
    except ConfigError as exc:
        for error in exc.errors:
            print(f"config error: {error}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError,
            genclient.GenClientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
