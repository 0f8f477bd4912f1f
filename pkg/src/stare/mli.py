"""Middle-layer injection: linear probes, dominant directions, grid sweep.

A logistic-regression probe is trained on one layer's token states for a
linguistic property (POS, DEPS, or PT); the top right singular vector of
its weight matrix, found by power iteration, becomes a unit steering
direction. The sweep scores (layer, property, intensity) cells by the
structural similarity of what the injected retriever fetches for dev
queries, with the uninjected retriever always included as baseline.
"""

from __future__ import annotations

import csv
import importlib.resources
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import retrieval
from .corpus import Corpus
from .encoder import EncoderConfig, InjectionDirection
from .ted import sim_struct
from .trees import ParseDialect, anonymize_leaves, parse

PROPERTIES = ("POS", "DEPS", "PT")

_LABEL_FILES = {"POS": "labels_pos.txt", "DEPS": "labels_deps.txt", "PT": "labels_pt.txt"}


class LabelSetMismatch(ValueError):
    pass


class EmptySentence(ValueError):
    pass


class DegenerateLabels(ValueError):
    pass


class ZeroMatrix(ValueError):
    pass


@dataclass
class TokenLabelCorpus:
    sentences: list[tuple[list[str], list[str]]]
    label_set: list[str]
    prop: str

    def __post_init__(self) -> None:
        known = set(self.label_set)
        for tokens, labels in self.sentences:
            if not tokens:
                raise EmptySentence("token-label corpus contains an empty sentence")
            if len(tokens) != len(labels):
                raise LabelSetMismatch(
                    f"token/label length mismatch: {len(tokens)} vs {len(labels)}")
            for lab in labels:
                if lab not in known:
                    raise LabelSetMismatch(f"label {lab!r} not in label set")


def default_label_set(prop: str) -> list[str]:
    """Shipped merged label set for one of POS, DEPS, PT."""
    name = _LABEL_FILES[prop]
    text = importlib.resources.files("stare.data").joinpath(name).read_text("utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def load_label_set(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text("utf-8").splitlines()
            if line.strip()]


def load_token_label_corpus(path: str | Path, prop: str,
                            label_set: list[str] | None = None) -> TokenLabelCorpus:
    """TSV reader: "token<TAB>label" lines, blank line between sentences."""
    if label_set is None:
        label_set = default_label_set(prop)
    sentences: list[tuple[list[str], list[str]]] = []
    tokens: list[str] = []
    labels: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                if tokens:
                    sentences.append((tokens, labels))
                    tokens, labels = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'token<TAB>label'")
            tokens.append(parts[0])
            labels.append(parts[1])
    if tokens:
        sentences.append((tokens, labels))
    return TokenLabelCorpus(sentences, label_set, prop)


@dataclass
class Probe:
    W: np.ndarray  # (k, d)
    b: np.ndarray  # (k,)
    layer: int
    prop: str
    training_accuracy: float
    loss_curve: list[float] = field(default_factory=list)


@dataclass
class ProbeConfig:
    epochs: int = 300
    lr: float = 0.5
    l2: float = 1e-4


def collect_states(corpus: TokenLabelCorpus, params: dict[str, np.ndarray],
                   cfg: EncoderConfig, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Layer-N token states stacked over the corpus, with label indices.

    Corpus tokens are fed to the encoder one id per token (no
    re-tokenization), so rows align with labels; both are truncated at
    max_len together.
    """
    if not 1 <= layer <= cfg.layers:
        raise enc.LayerOutOfRange(f"layer {layer} outside [1, {cfg.layers}]")
    label_index = {lab: i for i, lab in enumerate(corpus.label_set)}
    xs: list[np.ndarray] = []
    ys: list[int] = []
    for tokens, labels in corpus.sentences:
        ids = enc.ids_for_tokens(tokens, cfg.vocab, cfg.max_len)
        hidden = enc.forward_ids(ids, params, cfg)
        rows = hidden.layers[layer]
        xs.append(rows)
        ys.extend(label_index[lab] for lab in labels[: len(ids)])
    return np.vstack(xs), np.asarray(ys, dtype=np.int64)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def probe_loss_and_grads(W: np.ndarray, b: np.ndarray, X: np.ndarray, y: np.ndarray,
                         l2: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy with an l2*||W||^2 penalty."""
    n = X.shape[0]
    logits = X @ W.T + b
    p = _softmax_rows(logits)
    loss = float(-np.log(p[np.arange(n), y] + 1e-300).mean() + l2 * np.sum(W * W))
    dz = p
    dz[np.arange(n), y] -= 1.0
    dz /= n
    dW = dz.T @ X + 2.0 * l2 * W
    db = dz.sum(axis=0)
    return loss, dW, db


def train_probe(X: np.ndarray, y: np.ndarray, layer: int, prop: str,
                n_labels: int, config: ProbeConfig = ProbeConfig()) -> Probe:
    """Full-batch gradient descent from zero init; deterministic.

    The objective is convex, so the loss curve must not increase; if a
    step would increase it the learning rate is halved and the step
    retried.
    """
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("probe training needs at least 2 distinct labels")
    d = X.shape[1]
    W = np.zeros((n_labels, d))
    b = np.zeros(n_labels)
    lr = config.lr
    loss, dW, db = probe_loss_and_grads(W, b, X, y, config.l2)
    curve = [loss]
    for _ in range(config.epochs):
        stepped = False
        while lr >= 1e-12:
            W_new = W - lr * dW
            b_new = b - lr * db
            new_loss, new_dW, new_db = probe_loss_and_grads(W_new, b_new, X, y, config.l2)
            if new_loss <= loss:
                W, b, loss, dW, db = W_new, b_new, new_loss, new_dW, new_db
                stepped = True
                break
            lr *= 0.5
        if not stepped:
            break
        curve.append(loss)
    accuracy = float(np.mean(np.argmax(X @ W.T + b, axis=1) == y))
    return Probe(W=W, b=b, layer=layer, prop=prop, training_accuracy=accuracy,
                 loss_curve=curve)


def extract_direction(probe: Probe, tol: float = 1e-10,
                      max_iters: int | None = None) -> InjectionDirection:
    """Top right singular vector of the probe weights, by power iteration.

    Iterates v <- W'Wv / ||W'Wv|| until successive iterates differ by
    less than tol in norm (up to sign), budgeted at 10*d iterations with
    a floor of 640 so narrow-gap spectra on small matrices still
    converge; the sign is fixed so the first nonzero component is
    positive. Non-convergence returns the best iterate, flagged.
    """
    W = np.asarray(probe.W, dtype=np.float64)
    if not np.any(W):
        raise ZeroMatrix("probe weight matrix is all zeros")
    d = W.shape[1]
    if max_iters is None:
        max_iters = 10 * max(d, 64)
    A = W.T @ W
    rng = np.random.default_rng(0)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    converged = False
    for _ in range(max_iters):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break  # started in the null space; keep current iterate
        w /= norm
        step = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
        if step < tol:
            v = w
            converged = True
            break
        v = w
    v = v / np.linalg.norm(v)
    nonzero = np.flatnonzero(v)
    if nonzero.size and v[nonzero[0]] < 0:
        v = -v
    return InjectionDirection(u=v, layer=probe.layer, lam=0.0, prop=probe.prop,
                              converged=converged)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def default_sweep_layers(num_layers: int) -> list[int]:
    """Low/middle/last injection candidates, scaled to the layer count."""
    cands = {int(np.ceil(num_layers / 3)), int(np.ceil(2 * num_layers / 3)), num_layers}
    return sorted(cands)


DEFAULT_LAMBDAS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0)


@dataclass
class SweepGrid:
    layers: list[int]
    properties: list[str]
    lambdas: list[float]


@dataclass
class SweepRow:
    prop: str  # "" for the uninjected baseline
    layer: int
    lam: float
    score: float
    error: str = ""


@dataclass
class SweepResult:
    best: InjectionDirection | None  # None means the baseline won
    best_score: float
    baseline_score: float
    rows: list[SweepRow] = field(default_factory=list)
    probes: dict[tuple[str, int], Probe] = field(default_factory=dict)


def _mean_sim_at_k(index: retrieval.RetrievalIndex, dev_queries, bank: Corpus,
                   params, cfg, injection, k: int, dialect: ParseDialect,
                   anonymize: bool) -> float:
    scores = []
    for utterance, gold_parse in dev_queries:
        gold = parse(gold_parse, dialect)
        if anonymize:
            gold = anonymize_leaves(gold)
        hits = retrieval.topk(index, utterance, k, params, cfg, injection=injection)
        sims = [sim_struct(gold, bank.tree(rid, anonymize)) for rid, _ in hits]
        scores.append(float(np.mean(sims)))
    return float(np.mean(scores))


def sweep(dev_queries: list[tuple[str, str]], bank: Corpus,
          params: dict[str, np.ndarray], cfg: EncoderConfig,
          label_corpora: dict[str, TokenLabelCorpus], grid: SweepGrid,
          k: int, probe_config: ProbeConfig = ProbeConfig(),
          anonymize: bool = False) -> SweepResult:
    """Score every grid cell by mean structural similarity at k.

    Probes are trained once per (property, layer); each cell rebuilds
    the retrieval index under its injection. Cell failures are recorded
    in the report rather than raised. The baseline row always comes
    first and wins ties.
    """
    rows: list[SweepRow] = []
    probes: dict[tuple[str, int], Probe] = {}
    directions: dict[tuple[str, int], InjectionDirection] = {}

    base_index = retrieval.build_index(bank, params, cfg)
    baseline = _mean_sim_at_k(base_index, dev_queries, bank, params, cfg, None, k,
                              bank.dialect, anonymize)
    rows.append(SweepRow(prop="", layer=0, lam=0.0, score=baseline))
    best: InjectionDirection | None = None
    best_score = baseline

    for prop in grid.properties:
        corpus = label_corpora.get(prop)
        if corpus is None:
            rows.append(SweepRow(prop=prop, layer=0, lam=0.0, score=float("nan"),
                                 error="no label corpus"))
            continue
        for layer in grid.layers:
            key = (prop, layer)
            try:
                if key not in directions:
                    X, y = collect_states(corpus, params, cfg, layer)
                    probes[key] = train_probe(X, y, layer, prop, len(corpus.label_set),
                                              probe_config)
                    directions[key] = extract_direction(probes[key])
            except Exception as exc:  # cell failures are data, not fatal
                rows.append(SweepRow(prop=prop, layer=layer, lam=0.0,
                                     score=float("nan"), error=str(exc)))
                continue
            for lam in grid.lambdas:
                injection = InjectionDirection(u=directions[key].u, layer=layer,
                                               lam=float(lam), prop=prop,
                                               converged=directions[key].converged)
                try:
                    if lam == 0.0:
                        score = baseline
                    else:
                        index = retrieval.build_index(bank, params, cfg, injection)
                        score = _mean_sim_at_k(index, dev_queries, bank, params, cfg,
                                               injection, k, bank.dialect, anonymize)
                except Exception as exc:
                    rows.append(SweepRow(prop=prop, layer=layer, lam=float(lam),
                                         score=float("nan"), error=str(exc)))
                    continue
                rows.append(SweepRow(prop=prop, layer=layer, lam=float(lam), score=score))
                if score > best_score:
                    best, best_score = injection, score
    return SweepResult(best=best, best_score=best_score, baseline_score=baseline,
                       rows=rows, probes=probes)


def write_sweep_report(result: SweepResult, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["property", "layer", "lambda", "score", "error"])
        for row in result.rows:
            writer.writerow([row.prop, row.layer, row.lam, repr(row.score), row.error])


# ---------------------------------------------------------------------------
# direction persistence
# ---------------------------------------------------------------------------

DIRECTION_FORMAT_VERSION = 1


def save_direction(direction: InjectionDirection, path: str | Path) -> None:
    payload = {
        "format_version": DIRECTION_FORMAT_VERSION,
        "property": direction.prop,
        "layer": direction.layer,
        "lambda": direction.lam,
        "converged": direction.converged,
        "u": [float(x) for x in direction.u],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_direction(path: str | Path) -> InjectionDirection:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != DIRECTION_FORMAT_VERSION:
        raise ValueError(f"unsupported direction format: {payload.get('format_version')}")
    return InjectionDirection(u=np.asarray(payload["u"], dtype=np.float64),
                              layer=int(payload["layer"]), lam=float(payload["lambda"]),
                              prop=payload["property"],
                              converged=bool(payload.get("converged", True)))
