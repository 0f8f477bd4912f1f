"""Self-contained trainable text encoder with exposed per-layer states.

A small pre-norm transformer encoder (multi-head self-attention +
position-wise feed-forward, residual connections, layer normalization)
implemented directly in numpy, with analytic gradients for contrastive
training. Hidden states are the residual-stream outputs of each block;
layer 0 is embeddings + positions. Sentence embeddings are the mean of
the final layer's token rows, so an additive injection at the last
block shifts the pooled embedding by exactly the injected vector.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNK_TOKEN = "<unk>"
UNK_ID = 0

_LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class EmptyInput(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class LayerOutOfRange(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


@dataclass
class EncoderConfig:
    vocab: dict[str, int]
    d: int = 64
    layers: int = 4
    heads: int = 4
    max_len: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.layers < 2:
            raise ValueError("need at least 2 layers so a middle layer exists")

    def to_dict(self) -> dict:
        return {"vocab": self.vocab, "d": self.d, "layers": self.layers,
                "heads": self.heads, "max_len": self.max_len, "seed": self.seed}

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        return cls(vocab=dict(obj["vocab"]), d=obj["d"], layers=obj["layers"],
                   heads=obj["heads"], max_len=obj["max_len"], seed=obj["seed"])


@dataclass
class InjectionDirection:
    """Additive steering vector applied to every token row after one block."""

    u: np.ndarray
    layer: int
    lam: float = 0.0
    prop: str | None = None
    converged: bool = True


@dataclass
class HiddenStates:
    layers: list[np.ndarray]  # length L+1; each (tokens, d)

    @property
    def final(self) -> np.ndarray:
        return self.layers[-1]


def word_tokens(text: str) -> list[str]:
    """Lowercased tokens split at whitespace and punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Mapping[str, int], max_len: int | None = None) -> list[int]:
    """Lowercase, split at whitespace and punctuation, map to vocab ids."""
    if not text or not text.strip():
        raise EmptyInput("cannot tokenize empty text")
    tokens = word_tokens(text)
    if not tokens:
        raise EmptyInput("no tokens found")
    ids = [vocab.get(tok, UNK_ID) for tok in tokens]
    if max_len is not None and len(ids) > max_len:
        logger.debug("truncating %d tokens to max_len=%d", len(ids), max_len)
        ids = ids[:max_len]
    return ids


def ids_for_tokens(tokens: Sequence[str], vocab: Mapping[str, int],
                   max_len: int | None = None) -> list[int]:
    """Map pre-tokenized words directly to ids, without re-splitting."""
    if not tokens:
        raise EmptyInput("empty token sequence")
    ids = [vocab.get(tok.lower(), UNK_ID) for tok in tokens]
    if max_len is not None and len(ids) > max_len:
        ids = ids[:max_len]
    return ids


def build_vocab(texts: Sequence[str]) -> dict[str, int]:
    """Token -> id map in first-seen corpus order; id 0 is reserved for UNK."""
    vocab: dict[str, int] = {UNK_TOKEN: UNK_ID}
    for text in texts:
        for tok in _TOKEN_RE.findall(text.lower()):
            if tok not in vocab:
                vocab[tok] = len(vocab)
    return vocab


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter order; persistence and init both follow it."""
    d, dff = cfg.d, 4 * cfg.d
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (len(cfg.vocab), d)),
        ("pos_emb", (cfg.max_len, d)),
    ]
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "w1", (d, dff)), (p + "b1", (dff,)),
            (p + "w2", (dff, d)), (p + "b2", (d,)),
        ]
    return shapes


def init_params(cfg: EncoderConfig) -> dict[str, np.ndarray]:
    """Fan-in-scaled uniform init; biases zero, layer norms identity."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        base = name.rsplit(".", 1)[-1]
        if base in ("g",):
            params[name] = np.ones(shape)
        elif base in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            params[name] = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            bound = 1.0 / np.sqrt(cfg.d)
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zerolike_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_backward(dy: np.ndarray, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


def _gelu_forward(x: np.ndarray):
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(dy: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    tokens, d = x.shape
    return x.reshape(tokens, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, tokens, dh = x.shape
    return x.transpose(1, 0, 2).reshape(tokens, heads * dh)


def _validate_injection(injection: InjectionDirection | None, cfg: EncoderConfig) -> None:
    if injection is None:
        return
    if not 1 <= injection.layer <= cfg.layers:
        raise LayerOutOfRange(f"injection layer {injection.layer} outside [1, {cfg.layers}]")
    if np.asarray(injection.u).shape != (cfg.d,):
        raise DimensionMismatch(
            f"injection dimension {np.asarray(injection.u).shape} != ({cfg.d},)")


def forward_ids(ids: Sequence[int], params: dict[str, np.ndarray], cfg: EncoderConfig,
                injection: InjectionDirection | None = None, with_cache: bool = False):
    """Run the encoder stack over token ids.

    Returns HiddenStates, or (HiddenStates, cache) when with_cache is
    set. The injection hook adds lam*u to every token row of layer N's
    output before block N+1 (or pooling) consumes it; lam == 0 is
    bit-identical to no injection.
    """
    _validate_injection(injection, cfg)
    ids = list(ids)
    if not ids:
        raise EmptyInput("empty id sequence")
    if len(ids) > cfg.max_len:
        ids = ids[: cfg.max_len]
    heads, scale = cfg.heads, 1.0 / np.sqrt(cfg.d // cfg.heads)

    x = params["tok_emb"][ids] + params["pos_emb"][: len(ids)]
    states = [x]
    caches = []
    for i in range(cfg.layers):
        p = f"layers.{i}."
        a_in, ln1_cache = _ln_forward(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = a_in @ params[p + "wq"] + params[p + "bq"]
        k = a_in @ params[p + "wk"] + params[p + "bk"]
        v = a_in @ params[p + "wv"] + params[p + "bv"]
        qh, kh, vh = (_split_heads(m, heads) for m in (q, k, v))
        scores = qh @ kh.transpose(0, 2, 1) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        expw = np.exp(scores)
        attn = expw / expw.sum(axis=-1, keepdims=True)
        oh = attn @ vh
        oc = _merge_heads(oh)
        attn_out = oc @ params[p + "wo"] + params[p + "bo"]
        x_mid = x + attn_out
        f_in, ln2_cache = _ln_forward(x_mid, params[p + "ln2.g"], params[p + "ln2.b"])
        pre = f_in @ params[p + "w1"] + params[p + "b1"]
        h1, gelu_t = _gelu_forward(pre)
        ffn_out = h1 @ params[p + "w2"] + params[p + "b2"]
        x = x_mid + ffn_out
        if injection is not None and injection.layer == i + 1:
            x = x + injection.lam * np.asarray(injection.u)
        states.append(x)
        if with_cache:
            caches.append({
                "ln1": ln1_cache, "a_in": a_in, "qh": qh, "kh": kh, "vh": vh,
                "attn": attn, "oc": oc, "ln2": ln2_cache, "f_in": f_in,
                "pre": pre, "h1": h1, "gelu_t": gelu_t,
            })
    hidden = HiddenStates(states)
    if with_cache:
        return hidden, {"ids": ids, "layers": caches, "scale": scale}
    return hidden


def backward_ids(d_final: np.ndarray, cache: dict, params: dict[str, np.ndarray],
                 cfg: EncoderConfig, grads: dict[str, np.ndarray]) -> None:
    """Accumulate parameter gradients for one sequence into ``grads``.

    ``d_final`` is the loss gradient w.r.t. the last block's output.
    An additive injection is constant w.r.t. parameters, so caches from
    injected forwards backpropagate identically.
    """
    heads, scale = cfg.heads, cache["scale"]
    dx = d_final
    for i in reversed(range(cfg.layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]
        # feed-forward sublayer
        dh1 = dx @ params[p + "w2"].T
        grads[p + "w2"] += c["h1"].T @ dx
        grads[p + "b2"] += dx.sum(axis=0)
        dpre = _gelu_backward(dh1, c["pre"], c["gelu_t"])
        df_in = dpre @ params[p + "w1"].T
        grads[p + "w1"] += c["f_in"].T @ dpre
        grads[p + "b1"] += dpre.sum(axis=0)
        dres, dg2, db2 = _ln_backward(df_in, c["ln2"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        dx_mid = dx + dres
        # attention sublayer
        doc = dx_mid @ params[p + "wo"].T
        grads[p + "wo"] += c["oc"].T @ dx_mid
        grads[p + "bo"] += dx_mid.sum(axis=0)
        doh = _split_heads(doc, heads)
        dattn = doh @ c["vh"].transpose(0, 2, 1)
        dvh = c["attn"].transpose(0, 2, 1) @ doh
        a = c["attn"]
        dscores = a * (dattn - (dattn * a).sum(axis=-1, keepdims=True))
        dqh = dscores @ c["kh"] * scale
        dkh = dscores.transpose(0, 2, 1) @ c["qh"] * scale
        dq, dk, dv = (_merge_heads(m) for m in (dqh, dkh, dvh))
        da_in = dq @ params[p + "wq"].T + dk @ params[p + "wk"].T + dv @ params[p + "wv"].T
        grads[p + "wq"] += c["a_in"].T @ dq
        grads[p + "bq"] += dq.sum(axis=0)
        grads[p + "wk"] += c["a_in"].T @ dk
        grads[p + "bk"] += dk.sum(axis=0)
        grads[p + "wv"] += c["a_in"].T @ dv
        grads[p + "bv"] += dv.sum(axis=0)
        dres, dg1, db1 = _ln_backward(da_in, c["ln1"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        dx = dx_mid + dres
    ids = cache["ids"]
    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][: len(ids)] += dx


def forward(text: str, params: dict[str, np.ndarray], cfg: EncoderConfig,
            injection: InjectionDirection | None = None) -> HiddenStates:
    return forward_ids(tokenize(text, cfg.vocab, cfg.max_len), params, cfg, injection)


def embed(text: str, params: dict[str, np.ndarray], cfg: EncoderConfig,
          injection: InjectionDirection | None = None) -> np.ndarray:
    """Sentence embedding: arithmetic mean of the final layer's token rows."""
    return forward(text, params, cfg, injection).final.mean(axis=0)


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------

def _checked_norm(vec: np.ndarray, role: str) -> float:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ZeroVector(f"{role} embedding has zero norm")
    return norm


def infonce_loss(anchor: np.ndarray, positive: np.ndarray,
                 negatives: Sequence[np.ndarray], temperature: float) -> float:
    """Temperature-scaled contrastive loss over cosine similarities.

    -log( exp(cos(a,p)/T) / (exp(cos(a,p)/T) + sum_i exp(cos(a,n_i)/T)) ),
    evaluated with log-sum-exp stabilization. Zero with no negatives.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    na = _checked_norm(anchor, "anchor")
    sims = []
    for role, other in [("positive", positive)] + [("negative", n) for n in negatives]:
        no = _checked_norm(other, role)
        sims.append(float(anchor @ other) / (na * no))
    z = np.asarray(sims) / temperature
    m = z.max()
    return float(-z[0] + m + np.log(np.exp(z - m).sum()))


def _infonce_embedding_grads(anchor: np.ndarray, others: list[np.ndarray],
                             temperature: float) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Loss plus gradients w.r.t. the anchor and each other embedding."""
    na = _checked_norm(anchor, "anchor")
    norms = [_checked_norm(o, "candidate") for o in others]
    cos = np.array([float(anchor @ o) / (na * n) for o, n in zip(others, norms)])
    z = cos / temperature
    m = z.max()
    ez = np.exp(z - m)
    p = ez / ez.sum()
    loss = float(-z[0] + m + np.log(ez.sum()))
    dcos = p.copy()
    dcos[0] -= 1.0
    dcos /= temperature
    d_anchor = np.zeros_like(anchor)
    d_others = []
    for i, (other, no) in enumerate(zip(others, norms)):
        d_anchor += dcos[i] * (other / (na * no) - cos[i] * anchor / (na * na))
        d_others.append(dcos[i] * (anchor / (na * no) - cos[i] * other / (no * no)))
    return loss, d_anchor, d_others


def group_loss_and_grads(texts: list[str], params: dict[str, np.ndarray],
                         cfg: EncoderConfig, temperature: float,
                         grads: dict[str, np.ndarray]) -> float:
    """InfoNCE over [anchor, positive, *negatives]; grads accumulate in place."""
    runs = []
    embs = []
    for text in texts:
        hidden, cache = forward_ids(tokenize(text, cfg.vocab, cfg.max_len), params, cfg,
                                    with_cache=True)
        runs.append((hidden, cache))
        embs.append(hidden.final.mean(axis=0))
    loss, d_anchor, d_others = _infonce_embedding_grads(embs[0], embs[1:], temperature)
    dembs = [d_anchor] + d_others
    for (hidden, cache), demb in zip(runs, dembs):
        tokens = hidden.final.shape[0]
        d_final = np.tile(demb / tokens, (tokens, 1))
        backward_ids(d_final, cache, params, cfg, grads)
    return loss


# ---------------------------------------------------------------------------
# optimizer and training
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, g in grads.items():
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[key] -= self.lr * (update + self.weight_decay * params[key])


@dataclass
class TrainConfig:
    epochs: int = 3
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch: int = 1
    temperature: float = 0.07
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.epochs <= 3:
            raise ValueError("epochs must be in [0, 3]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def group_texts(group, corpus) -> list[str]:
    return [corpus.get(group.anchor_id).utterance,
            corpus.get(group.positive_id).utterance] + [
        corpus.get(nid).utterance for nid in group.negative_ids()]


def mean_group_loss(groups, corpus, params: dict[str, np.ndarray], cfg: EncoderConfig,
                    temperature: float) -> float:
    """Mean InfoNCE over groups at fixed parameters (no updates)."""
    total = 0.0
    for group in groups:
        texts = group_texts(group, corpus)
        embs = [embed(t, params, cfg) for t in texts]
        total += infonce_loss(embs[0], embs[1], embs[2:], temperature)
    return total / len(groups)


def train(groups, corpus, cfg: EncoderConfig, train_cfg: TrainConfig,
          params: dict[str, np.ndarray] | None = None
          ) -> tuple[dict[str, np.ndarray], list[float]]:
    """Minimize mean InfoNCE over groups; deterministic in fixed order.

    Returns the trained parameters and the per-epoch mean step loss.
    """
    if not groups:
        raise ValueError("no training groups")
    if params is None:
        params = init_params(cfg)
    else:
        params = {k: v.copy() for k, v in params.items()}
    opt = AdamW(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    curve: list[float] = []
    for _ in range(train_cfg.epochs):
        step_losses = []
        for start in range(0, len(groups), train_cfg.batch):
            batch = groups[start : start + train_cfg.batch]
            grads = zerolike_params(params)
            loss = 0.0
            for group in batch:
                loss += group_loss_and_grads(group_texts(group, corpus), params, cfg,
                                             train_cfg.temperature, grads)
            loss /= len(batch)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at group {batch[0].anchor_id}")
            for g in grads.values():
                g /= len(batch)
            opt.step(params, grads)
            step_losses.append(loss)
        curve.append(float(np.mean(step_losses)))
    return params, curve


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def save_params(path: str | Path, params: dict[str, np.ndarray], cfg: EncoderConfig) -> None:
    """Versioned file: one JSON header line, then raw float64 arrays in order."""
    shapes = param_shapes(cfg)
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "arrays": [{"name": name, "shape": list(shape)} for name, shape in shapes],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name, shape in shapes:
            arr = np.ascontiguousarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionMismatch(f"{name}: {arr.shape} != {shape}")
            fh.write(arr.tobytes())


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], EncoderConfig]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported params format: {header.get('format_version')}")
        cfg = EncoderConfig.from_dict(header["config"])
        params: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            params[spec["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return params, cfg


def params_fingerprint(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()
