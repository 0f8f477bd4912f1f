"""Command-line pipeline: bucket | mine | train | mli | retrieve | eval | ted | fixture-gen.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Logs go to stderr; artifacts go to the --out directory, which also
receives the resolved config for provenance. Concurrent runs against
one output directory are rejected via a lock file.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bucketing, encoder, fixtures, mining, mli, retrieval
from .config import ConfigError, PipelineConfig, load_config
from .corpus import Corpus, load_corpus
from .encoder import EncoderConfig, TrainConfig
from .mining import MiningConfig
from .mli import ProbeConfig, SweepGrid
from .ted import sim_struct_raw, ted
from .trees import ParseError, parse

logger = logging.getLogger("stare")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class DataError(Exception):
    pass


@contextlib.contextmanager
def _locked_out_dir(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"output directory {out} is locked by another run "
                        f"(remove {lock} if stale)")
    try:
        os.close(fd)
        yield out
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def _archive_config(config: PipelineConfig, out: Path) -> None:
    (out / "config_used.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")


def _load_train_corpus(config: PipelineConfig) -> Corpus:
    return load_corpus(config.path(config.corpus["train"]), config.corpus["dialect"])


def _load_dev_corpus(config: PipelineConfig) -> Corpus:
    return load_corpus(config.path(config.corpus["dev"]), config.corpus["dialect"])


def _encoder_config(config: PipelineConfig, corpus: Corpus) -> EncoderConfig:
    enc_cfg = config.encoder
    vocab = encoder.build_vocab([rec.utterance for rec in corpus])
    return EncoderConfig(vocab=vocab, d=enc_cfg["d"], layers=enc_cfg["layers"],
                         heads=enc_cfg["heads"], max_len=enc_cfg["max_len"],
                         seed=enc_cfg["seed"])


def _build_lsh(config: PipelineConfig, corpus: Corpus) -> bucketing.LshIndex:
    b = config.bucketing
    index = bucketing.LshIndex(num_hashes=b["num_hashes"], tau=b["tau"], seed=b["seed"])
    for rec in corpus:
        feats = bucketing.extract_features(rec.parse, corpus.dialect)
        index.insert(rec.id, bucketing.minhash(feats, b["num_hashes"], b["seed"]))
    return index


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_bucket(config: PipelineConfig, out: Path) -> int:
    corpus = _load_train_corpus(config)
    if not len(corpus):
        raise DataError("empty corpus")
    index = _build_lsh(config, corpus)
    index.save(out / "lsh_index.json")
    pool_sizes = sorted(len(index.query(index.signatures[rec.id], exclude=rec.id))
                        for rec in corpus)
    histogram: dict[str, int] = {}
    for size in pool_sizes:
        histogram[str(size)] = histogram.get(str(size), 0) + 1
    report = {
        "records": len(corpus),
        "bands": index.bands,
        "rows": index.rows,
        "pool_size_histogram": histogram,
        "mean_pool_size": float(np.mean(pool_sizes)),
    }
    (out / "bucket_report.json").write_text(json.dumps(report, indent=2, sort_keys=True),
                                            encoding="utf-8")
    logger.info("bucketed %d records (mean pool %.2f)", len(corpus),
                report["mean_pool_size"])
    return EXIT_OK


def cmd_mine(config: PipelineConfig, out: Path) -> int:
    corpus = _load_train_corpus(config)
    index_path = out / "lsh_index.json"
    if not index_path.exists():
        raise DataError(f"missing LSH index {index_path}; run 'bucket' first")
    index = bucketing.LshIndex.load(index_path)
    m = config.mining
    groups, report = mining.mine_all(corpus, index, MiningConfig(
        n_hard=m["n_hard"], n_rand=m["n_rand"], seed=m["seed"],
        anonymize=m["anonymize"]))
    mining.save_groups(groups, out / "pairs.jsonl")
    (out / "mining_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    logger.info("mined %d groups (%d skipped)", len(groups), report.skipped_empty_pool)
    return EXIT_OK


def cmd_train(config: PipelineConfig, out: Path) -> int:
    corpus = _load_train_corpus(config)
    pairs_path = out / "pairs.jsonl"
    if not pairs_path.exists():
        raise DataError(f"missing pairs file {pairs_path}; run 'mine' first")
    groups = mining.load_groups(pairs_path)
    cfg = _encoder_config(config, corpus)
    t = config.training
    train_cfg = TrainConfig(epochs=t["epochs"], lr=t["lr"],
                            weight_decay=t["weight_decay"], batch=t["batch"],
                            temperature=t["temperature"], seed=t["seed"])
    if train_cfg.epochs == 0 or not groups:
        params, curve = encoder.init_params(cfg), []
    else:
        params, curve = encoder.train(groups, corpus, cfg, train_cfg)
    encoder.save_params(out / "encoder.params", params, cfg)
    with open(out / "loss_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, loss in enumerate(curve, start=1):
            fh.write(f"{epoch},{loss!r}\n")
    logger.info("trained %d epochs; loss curve %s", len(curve),
                [round(x, 4) for x in curve])
    return EXIT_OK


def cmd_mli(config: PipelineConfig, out: Path) -> int:
    corpus = _load_train_corpus(config)
    dev = _load_dev_corpus(config)
    params_path = out / "encoder.params"
    if not params_path.exists():
        raise DataError(f"missing params file {params_path}; run 'train' first")
    params, cfg = encoder.load_params(params_path)
    m = config.mli
    if not m["label_corpora"]:
        raise DataError("mli.label_corpora is empty; nothing to probe")
    label_corpora = {}
    for prop in m["properties"]:
        path = m["label_corpora"].get(prop)
        if path is None:
            continue
        label_corpora[prop] = mli.load_token_label_corpus(config.path(path), prop)
    layers = m["layers"] or mli.default_sweep_layers(cfg.layers)
    grid = SweepGrid(layers=list(layers), properties=list(m["properties"]),
                     lambdas=[float(x) for x in m["lambdas"]])
    probe_cfg = ProbeConfig(epochs=m["probe"]["epochs"], lr=m["probe"]["lr"],
                            l2=m["probe"]["l2"])
    dev_queries = [(rec.utterance, rec.parse) for rec in dev]
    result = mli.sweep(dev_queries, corpus, params, cfg, label_corpora, grid,
                       k=m["k"], probe_config=probe_cfg,
                       anonymize=config.mining["anonymize"])
    mli.write_sweep_report(result, out / "mli_grid.csv")
    best = result.best
    if best is None:
        (out / "direction.json").write_text(json.dumps(
            {"format_version": mli.DIRECTION_FORMAT_VERSION, "baseline": True},
            sort_keys=True), encoding="utf-8")
        logger.info("sweep kept the uninjected baseline (score %.4f)",
                    result.baseline_score)
    else:
        mli.save_direction(best, out / "direction.json")
        logger.info("sweep best: %s layer %d lambda %.2f (%.4f vs baseline %.4f)",
                    best.prop, best.layer, best.lam, result.best_score,
                    result.baseline_score)
    return EXIT_OK


def _load_direction(out: Path):
    path = out / "direction.json"
    if not path.exists():
        return None
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("baseline"):
        return None
    return mli.load_direction(path)


def cmd_retrieve(config: PipelineConfig, out: Path, args: argparse.Namespace) -> int:
    corpus = _load_train_corpus(config)
    params_path = Path(args.params) if args.params else out / "encoder.params"
    if not params_path.exists():
        raise DataError(f"missing params file {params_path}")
    params, cfg = encoder.load_params(params_path)
    injection = _load_direction(out) if args.use_direction else None
    if args.index:
        index = retrieval.load_index(Path(args.index))
    else:
        index = retrieval.build_index(corpus, params, cfg, injection)
    hits = retrieval.topk(index, args.query, args.k, params, cfg,
                          injection=injection, exclude=args.exclude)
    if args.format == "json":
        print(json.dumps([{"id": rid, "score": score} for rid, score in hits],
                         indent=2))
        return EXIT_OK
    p = config.prompt
    spec = retrieval.PromptSpec(task_name=p["task_name"], k=args.k,
                                template=p["template"],
                                schema_text=p.get("schema_text"))
    # topk is descending; prompts want ascending similarity, query last.
    exemplars = [(corpus.get(rid).utterance, corpus.get(rid).parse)
                 for rid, _ in reversed(hits)]
    print(retrieval.build_prompt(spec, exemplars, args.query))
    return EXIT_OK


def cmd_eval(config: PipelineConfig, out: Path) -> int:
    corpus = _load_train_corpus(config)
    dev = _load_dev_corpus(config)
    params_path = out / "encoder.params"
    if not params_path.exists():
        raise DataError(f"missing params file {params_path}; run 'train' first")
    trained_params, cfg = encoder.load_params(params_path)
    untrained_params = encoder.init_params(cfg)
    injection = _load_direction(out)
    k = config.retrieval["k"]
    anonymize = config.mining["anonymize"]
    dev_queries = [(rec.utterance, rec.parse) for rec in dev]

    rankers = {
        "untrained": retrieval.make_dense_ranker(
            retrieval.build_index(corpus, untrained_params, cfg), untrained_params, cfg),
        "trained": retrieval.make_dense_ranker(
            retrieval.build_index(corpus, trained_params, cfg), trained_params, cfg),
        "bm25": retrieval.make_bm25_ranker(corpus),
    }
    if injection is not None:
        rankers["trained_mli"] = retrieval.make_dense_ranker(
            retrieval.build_index(corpus, trained_params, cfg, injection),
            trained_params, cfg, injection)
    else:
        rankers["trained_mli"] = rankers["trained"]

    metrics = {name: retrieval.evaluate(rank, dev_queries, corpus, k, anonymize)
               for name, rank in rankers.items()}
    payload = {"k": k, "metrics": metrics}
    (out / "eval_metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True),
                                           encoding="utf-8")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ted(args: argparse.Namespace) -> int:
    a = parse(args.a, args.dialect)
    b = parse(args.b, args.dialect)
    distance = ted(a, b)
    raw = sim_struct_raw(a, b)
    print(json.dumps({
        "ted": distance,
        "sim_struct": max(0.0, min(1.0, raw)),
        "sim_struct_raw": raw,
        "size_a": a.size,
        "size_b": b.size,
    }, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_fixture_gen(args: argparse.Namespace) -> int:
    spec = fixtures.FixtureSpec(clusters=args.clusters, per_cluster=args.per_cluster,
                                dev_per_cluster=args.dev_per_cluster, seed=args.seed)
    fixtures.write_fixture(args.out, spec)
    print(f"fixture written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def make_parser() -> _Parser:
    parser = _Parser(prog="stare", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        return p

    stage("bucket", "build the LSH candidate index")
    stage("mine", "mine contrastive groups from the index")
    stage("train", "train the encoder on mined groups")
    stage("mli", "probe layers and sweep injection configurations")
    p = stage("retrieve", "retrieve exemplars for a query")
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--exclude")
    p.add_argument("--format", choices=("json", "prompt"), default="json")
    p.add_argument("--index", help="saved retrieval index (default: build in memory)")
    p.add_argument("--params", help="encoder params file (default: <out>/encoder.params)")
    p.add_argument("--use-direction", action="store_true",
                   help="apply <out>/direction.json while embedding")
    stage("eval", "compare untrained / trained / trained+MLI / BM25")
    p = sub.add_parser("ted", help="tree edit distance between two parses")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--dialect", default="bracketed",
                   choices=("bracketed", "sexpr", "sql_skeleton"))
    p = sub.add_parser("fixture-gen", help="generate the synthetic fixture corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--per-cluster", type=int, default=20)
    p.add_argument("--dev-per-cluster", type=int, default=3)
    return parser


_STAGES = {"bucket": cmd_bucket, "mine": cmd_mine, "train": cmd_train,
           "mli": cmd_mli, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "ted":
            return cmd_ted(args)
        if args.command == "fixture-gen":
            return cmd_fixture_gen(args)
        config = load_config(args.config)
        with _locked_out_dir(Path(args.out)) as out:
            _archive_config(config, out)
            if args.command == "retrieve":
                return cmd_retrieve(config, out, args)
            return _STAGES[args.command](config, out)
    except (ConfigError, DataError, ParseError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except (encoder.NonFiniteLoss, FloatingPointError, ZeroDivisionError) as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
