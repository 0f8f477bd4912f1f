"""Discrete parse features, MinHash sketches, and a banded LSH index.

The index serves high-recall candidate pools: two parses whose feature
sets have Jaccard similarity above the configured threshold are very
likely to collide in at least one band.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import trees
from .trees import ParseDialect

DEFAULT_NUM_HASHES = 128
DEFAULT_TAU = 0.5

_U64 = np.uint64
_DIGITS = re.compile(r"\d+")

# Skeleton labels that are not keywords, identifiers, or function names.
_SQL_NON_FEATURES = {"SELECT_STMT", trees.NUM_PLACEHOLDER, trees.STR_PLACEHOLDER}
_SQL_OPERATOR = re.compile(r"^[=<>!]+$")


class EmptyFeatureSet(ValueError):
    pass


class DuplicateId(ValueError):
    pass


class SignatureLengthMismatch(ValueError):
    pass


class NoFactorization(ValueError):
    pass


def _norm_terminal(token: str) -> str:
    return _DIGITS.sub("<d>", token.lower())


def extract_features(parse: str, dialect: ParseDialect | str) -> frozenset[str]:
    """Feature set of a parse: structural labels plus normalized terminals.

    Bracketed/S-expression: every bracket/head label verbatim, plus each
    terminal token lowercased with digit runs replaced by "<d>". SQL:
    uppercased keywords present, lowercased identifiers, and function
    names; literals are dropped.
    """
    dialect = ParseDialect(dialect)
    if dialect is ParseDialect.BRACKETED:
        trees.parse_bracketed(parse)  # validate; propagate parser errors
        feats: set[str] = set()
        toks = trees.lex_bracketed(parse)
        for idx, (tok, _) in enumerate(toks):
            if tok in "[]":
                continue
            if idx > 0 and toks[idx - 1][0] == "[":
                feats.add(tok)
            else:
                feats.add(_norm_terminal(tok))
        return frozenset(feats)
    if dialect is ParseDialect.SEXPR:
        trees.parse_sexpr(parse)
        feats = set()
        toks = trees.lex_sexpr(parse)
        for idx, (kind, value, _) in enumerate(toks):
            if kind == "atom":
                if idx > 0 and toks[idx - 1][0] == "open":
                    feats.add(value)
                else:
                    feats.add(_norm_terminal(value))
            elif kind == "string":
                feats.update(_norm_terminal(w) for w in value.split())
        return frozenset(feats)
    skeleton = trees.parse_sql_skeleton(parse)
    feats = set()
    for node in skeleton.postorder():
        lab = node.label
        if lab in _SQL_NON_FEATURES or _SQL_OPERATOR.match(lab):
            continue
        feats.add(lab)
    return frozenset(feats)


def exact_jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    """|a ∩ b| / |a ∪ b|, with 1.0 for two empty sets."""
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union


def _feature_hash(feature: str) -> int:
    return int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "big")


def _hash_family(num_hashes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Multiply-add parameters (a odd, b) derived deterministically from seed."""
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2**64, size=num_hashes, dtype=_U64) | _U64(1)
    b = rng.integers(0, 2**64, size=num_hashes, dtype=_U64)
    return a, b


def minhash(features: frozenset[str] | set[str], num_hashes: int = DEFAULT_NUM_HASHES,
            seed: int = 0) -> np.ndarray:
    """MinHash signature: per-permutation minima over the feature set.

    Position i holds min over features f of (a_i * h(f) + b_i) mod 2^64,
    a pairwise-independent multiply-add family seeded by (seed, i).
    """
    if not features:
        raise EmptyFeatureSet("cannot sketch an empty feature set")
    if num_hashes < 1:
        raise ValueError("num_hashes must be >= 1")
    a, b = _hash_family(num_hashes, seed)
    base = np.fromiter((_feature_hash(f) for f in sorted(features)), dtype=_U64)
    hashed = a[:, None] * base[None, :] + b[:, None]  # uint64 wraparound intended
    return hashed.min(axis=1)


def signature_agreement(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
    """Fraction of matching positions; unbiased Jaccard estimate."""
    if sig_a.shape != sig_b.shape:
        raise SignatureLengthMismatch(f"{sig_a.shape} vs {sig_b.shape}")
    return float(np.mean(sig_a == sig_b))


def lsh_params(tau: float, num_hashes: int) -> tuple[int, int]:
    """Band geometry (b, r) with b*r == num_hashes nearest the threshold.

    Minimizes |(1/b)^(1/r) - tau| over exact factorizations; ties break
    toward larger r (fewer false positives). The trivial splits always
    qualify, so a result exists for every num_hashes >= 2.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    if num_hashes < 2:
        raise ValueError("num_hashes must be >= 2")
    best: tuple[float, int, int] | None = None
    for b in range(1, num_hashes + 1):
        if num_hashes % b:
            continue
        r = num_hashes // b
        err = abs((1.0 / b) ** (1.0 / r) - tau)
        if best is None or err < best[0] - 1e-15 or (abs(err - best[0]) <= 1e-15 and r > best[2]):
            best = (err, b, r)
    if best is None:  # unreachable: b=1 always divides
        raise NoFactorization(str(num_hashes))
    return best[1], best[2]


def _band_digest(band: np.ndarray) -> int:
    return int.from_bytes(hashlib.blake2b(band.tobytes(), digest_size=8).digest(), "big")


@dataclass
class LshIndex:
    """Banded MinHash index; ids collide when any band digest matches."""

    num_hashes: int = DEFAULT_NUM_HASHES
    tau: float = DEFAULT_TAU
    seed: int = 0
    bands: int = field(init=False)
    rows: int = field(init=False)
    buckets: list[dict[int, list[str]]] = field(init=False, repr=False)
    signatures: dict[str, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.bands, self.rows = lsh_params(self.tau, self.num_hashes)
        self.buckets = [{} for _ in range(self.bands)]
        self.signatures = {}

    def __len__(self) -> int:
        return len(self.signatures)

    def _check_signature(self, sig: np.ndarray) -> None:
        if sig.shape != (self.num_hashes,):
            raise SignatureLengthMismatch(
                f"signature length {sig.shape} does not match index P={self.num_hashes}")

    def insert(self, record_id: str, sig: np.ndarray) -> None:
        self._check_signature(sig)
        if record_id in self.signatures:
            raise DuplicateId(record_id)
        self.signatures[record_id] = sig
        for band_idx in range(self.bands):
            band = sig[band_idx * self.rows : (band_idx + 1) * self.rows]
            self.buckets[band_idx].setdefault(_band_digest(band), []).append(record_id)

    def query(self, sig: np.ndarray, exclude: str | None = None) -> set[str]:
        """Union of bucket members colliding in at least one band."""
        self._check_signature(sig)
        pool: set[str] = set()
        for band_idx in range(self.bands):
            band = sig[band_idx * self.rows : (band_idx + 1) * self.rows]
            pool.update(self.buckets[band_idx].get(_band_digest(band), ()))
        pool.discard(exclude)
        return pool

    # -- persistence --------------------------------------------------------

    FORMAT_VERSION = 1

    def save(self, path: str | Path) -> None:
        payload = {
            "format_version": self.FORMAT_VERSION,
            "P": self.num_hashes,
            "b": self.bands,
            "r": self.rows,
            "tau": self.tau,
            "seed": self.seed,
            "records": [[rid, [int(v) for v in sig]] for rid, sig in self.signatures.items()],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LshIndex":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format_version") != cls.FORMAT_VERSION:
            raise ValueError(f"unsupported index format: {payload.get('format_version')}")
        index = cls(num_hashes=payload["P"], tau=payload["tau"], seed=payload["seed"])
        if (index.bands, index.rows) != (payload["b"], payload["r"]):
            raise ValueError("band geometry mismatch in saved index")
        for rid, values in payload["records"]:
            index.insert(rid, np.asarray(values, dtype=_U64))
        return index
