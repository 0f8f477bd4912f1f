"""Exemplar retrieval: dense cosine top-k, BM25 control, prompt rendering.

The dense index is an exhaustive scan over unit-normalized sentence
embeddings; index provenance records the encoder parameters and any
injection so queries cannot silently be embedded under a different
geometry than the bank.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc
from .corpus import Corpus
from .encoder import EncoderConfig, InjectionDirection
from .ted import sim_struct
from .trees import anonymize_leaves, parse

BM25_K1 = 1.2
BM25_B = 0.75


class KTooLarge(ValueError):
    pass


class ProvenanceMismatch(ValueError):
    pass


class CountMismatch(ValueError):
    pass


class MissingSchema(ValueError):
    pass


def injection_provenance(injection: InjectionDirection | None) -> dict | None:
    if injection is None:
        return None
    u_hash = hashlib.sha256(
        np.ascontiguousarray(injection.u, dtype=np.float64).tobytes()).hexdigest()
    return {"property": injection.prop, "layer": injection.layer,
            "lambda": injection.lam, "u_sha256": u_hash}


@dataclass
class RetrievalIndex:
    ids: list[str]
    embeddings: np.ndarray  # (n, d), rows unit-normalized
    provenance: dict

    def __len__(self) -> int:
        return len(self.ids)


def build_index(bank: Corpus, params: dict[str, np.ndarray], cfg: EncoderConfig,
                injection: InjectionDirection | None = None) -> RetrievalIndex:
    """One unit-normalized utterance embedding per record, in corpus order."""
    rows = []
    for rec in bank:
        try:
            vec = enc.embed(rec.utterance, params, cfg, injection)
        except Exception as exc:
            raise type(exc)(f"record {rec.id!r}: {exc}") from exc
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise enc.ZeroVector(f"record {rec.id!r} embeds to the zero vector")
        rows.append(vec / norm)
    embeddings = np.vstack(rows) if rows else np.zeros((0, cfg.d))
    provenance = {"params_sha256": enc.params_fingerprint(params),
                  "injection": injection_provenance(injection)}
    return RetrievalIndex(ids=bank.ids(), embeddings=embeddings, provenance=provenance)


def topk(index: RetrievalIndex, query: str, k: int, params: dict[str, np.ndarray],
         cfg: EncoderConfig, injection: InjectionDirection | None = None,
         exclude: str | None = None) -> list[tuple[str, float]]:
    """k bank ids with the highest cosine to the query, ties to lower index.

    The query must be embedded under the same parameters and injection
    the index was built with; mismatches raise ProvenanceMismatch.
    """
    if k < 1:
        raise KTooLarge("k must be >= 1")
    if index.provenance["params_sha256"] != enc.params_fingerprint(params):
        raise ProvenanceMismatch("query parameters differ from index parameters")
    if index.provenance["injection"] != injection_provenance(injection):
        raise ProvenanceMismatch("query injection differs from index injection")
    vec = enc.embed(query, params, cfg, injection)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise enc.ZeroVector("query embeds to the zero vector")
    scores = index.embeddings @ (vec / norm)
    order = [i for i in np.argsort(-scores, kind="stable")
             if exclude is None or index.ids[i] != exclude]
    if k > len(order):
        raise KTooLarge(f"k={k} exceeds {len(order)} available records")
    return [(index.ids[i], float(scores[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# BM25 baseline
# ---------------------------------------------------------------------------

class Bm25:
    """Okapi scoring over whitespace/punctuation tokens of the utterances.

    idf(t) = ln(1 + (N - df + 0.5)/(df + 0.5)); each query token
    occurrence contributes idf * tf*(k1+1) / (tf + k1*(1 - b + b*dl/avgdl)).
    """

    def __init__(self, bank: Corpus, k1: float = BM25_K1, b: float = BM25_B):
        self.ids = bank.ids()
        self.k1, self.b = k1, b
        self.docs = [enc.word_tokens(rec.utterance) for rec in bank]
        self.doc_lens = [len(d) for d in self.docs]
        self.avgdl = float(np.mean(self.doc_lens)) if self.docs else 0.0
        self.term_freqs = [Counter(d) for d in self.docs]
        df: Counter[str] = Counter()
        for tf in self.term_freqs:
            df.update(tf.keys())
        n = len(self.docs)
        self.idf = {t: math.log(1.0 + (n - c + 0.5) / (c + 0.5)) for t, c in df.items()}

    def scores(self, query: str) -> np.ndarray:
        q_tokens = enc.word_tokens(query)
        out = np.zeros(len(self.docs))
        for i, tf in enumerate(self.term_freqs):
            denom_norm = self.k1 * (1.0 - self.b + self.b * self.doc_lens[i] / self.avgdl)
            s = 0.0
            for tok in q_tokens:
                f = tf.get(tok)
                if not f:
                    continue
                s += self.idf[tok] * f * (self.k1 + 1.0) / (f + denom_norm)
            out[i] = s
        return out

    def topk(self, query: str, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise KTooLarge("k must be >= 1")
        if k > len(self.ids):
            raise KTooLarge(f"k={k} exceeds {len(self.ids)} documents")
        scores = self.scores(query)
        order = np.argsort(-scores, kind="stable")
        return [(self.ids[i], float(scores[i])) for i in order[:k]]


def bm25_topk(bank: Corpus, query: str, k: int) -> list[tuple[str, float]]:
    return Bm25(bank).topk(query, k)


# ---------------------------------------------------------------------------
# prompt rendering
# ---------------------------------------------------------------------------

TEMPLATE_CONVERSATIONAL = "conversational"
TEMPLATE_SQL_SCHEMA = "sql_schema"


@dataclass
class PromptSpec:
    task_name: str
    k: int
    template: str = TEMPLATE_CONVERSATIONAL
    schema_text: str | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("prompt spec requires k >= 1")
        if self.template not in (TEMPLATE_CONVERSATIONAL, TEMPLATE_SQL_SCHEMA):
            raise ValueError(f"unknown template {self.template!r}")
        if self.template == TEMPLATE_SQL_SCHEMA and not self.schema_text:
            raise MissingSchema("sql_schema template requires schema_text")


def build_prompt(spec: PromptSpec, exemplars: list[tuple[str, str]], query: str) -> str:
    """Render the final prompt; exemplars must already be in ascending
    similarity order (the most similar sits closest to the query)."""
    if len(exemplars) != spec.k:
        raise CountMismatch(f"expected {spec.k} exemplars, got {len(exemplars)}")
    if spec.template == TEMPLATE_CONVERSATIONAL:
        header = (f"Below are examples of converting user utterances into "
                  f"{spec.task_name} semantic parses:")
        blocks = [f"Example {i}\nUser: {u}\nParse: {p}"
                  for i, (u, p) in enumerate(exemplars, start=1)]
        blocks.append(f"Query\nUser: {query}\nParse:")
        return header + "\n\n" + "\n\n".join(blocks)
    if spec.schema_text is None:
        raise MissingSchema("sql_schema template requires schema_text")
    blocks = [(f"/* Given the following database schema: */\n{spec.schema_text}\n"
               f"/* Answer the following: {u} */\nSQL Query: {p}")
              for u, p in exemplars]
    blocks.append(f"/* Given the following database schema: */\n{spec.schema_text}\n"
                  f"/* Answer the following: {query} */\nSQL Query:")
    return "\n\n".join(blocks)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def make_dense_ranker(index: RetrievalIndex, params: dict[str, np.ndarray],
                      cfg: EncoderConfig, injection: InjectionDirection | None = None):
    def rank(query: str) -> list[tuple[str, float]]:
        return topk(index, query, len(index), params, cfg, injection=injection)

    return rank


def make_bm25_ranker(bank: Corpus):
    bm25 = Bm25(bank)

    def rank(query: str) -> list[tuple[str, float]]:
        return bm25.topk(query, len(bm25.ids))

    return rank


def evaluate(rank_fn, dev_queries: list[tuple[str, str]], bank: Corpus, k: int,
             anonymize: bool = False) -> dict[str, float]:
    """Structural retrieval quality of a ranker against gold parses.

    mean_sim_struct_at_k: mean over queries of the mean structural
    similarity between the gold tree and the top-k retrieved parses.
    mrr_structural_nn: reciprocal rank of the first bank item tied for
    the globally best structural similarity. mean_top1_sim: the ranker's
    own top-1 score.
    """
    sims_at_k = []
    mrrs = []
    top1 = []
    for utterance, gold_parse in dev_queries:
        gold = parse(gold_parse, bank.dialect)
        if anonymize:
            gold = anonymize_leaves(gold)
        ranking = rank_fn(utterance)
        if k > len(ranking):
            raise KTooLarge(f"k={k} exceeds ranking of {len(ranking)}")
        head = ranking[:k]
        sims = [sim_struct(gold, bank.tree(rid, anonymize)) for rid, _ in head]
        sims_at_k.append(float(np.mean(sims)))
        top1.append(head[0][1])
        bank_sims = {rec.id: sim_struct(gold, bank.tree(rec.id, anonymize)) for rec in bank}
        best_sim = max(bank_sims.values())
        best_ids = {rid for rid, s in bank_sims.items() if s == best_sim}
        rank_of_best = next(pos for pos, (rid, _) in enumerate(ranking, start=1)
                            if rid in best_ids)
        mrrs.append(1.0 / rank_of_best)
    return {
        "mean_sim_struct_at_k": float(np.mean(sims_at_k)),
        "mrr_structural_nn": float(np.mean(mrrs)),
        "mean_top1_sim": float(np.mean(top1)),
    }


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

INDEX_FORMAT_VERSION = 1


def save_index(index: RetrievalIndex, path: str | Path) -> None:
    header = {
        "format_version": INDEX_FORMAT_VERSION,
        "n": len(index.ids),
        "d": int(index.embeddings.shape[1]) if index.embeddings.size else 0,
        "ids": index.ids,
        "provenance": index.provenance,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(index.embeddings, dtype=np.float64).tobytes())


def load_index(path: str | Path) -> RetrievalIndex:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format_version") != INDEX_FORMAT_VERSION:
            raise ValueError(f"unsupported index format: {header.get('format_version')}")
        n, d = header["n"], header["d"]
        buf = fh.read(n * d * 8)
        embeddings = np.frombuffer(buf, dtype=np.float64).reshape(n, d).copy()
    return RetrievalIndex(ids=list(header["ids"]), embeddings=embeddings,
                          provenance=header["provenance"])
