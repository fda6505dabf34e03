# retrieval_xattn/model.py
#
# Small pre-layer-norm encoder-decoder transformer with hand-written
# backpropagation. Cross-attention is pluggable: the decoder hands its
# post-norm hidden state to a CrossAttentionProvider once per layer per head
# and gets a d_head context back. Everything is dtype-preserving; weights
# are float32 unless promoted with `ModelWeights.astype`.

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Protocol

import numpy as np

from .errors import (
    ArgumentError,
    ConfigValidationError,
    ProviderError,
    VocabError,
    WindowError,
)
from .numerics import Rng, log_softmax_rows, seeded_normal, softmax_backward, softmax_rows

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------------------------
# Configuration + weights
# --------------------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    n_enc_layers: int = 1
    n_dec_layers: int = 1
    d_ff: int = 64
    vocab_size: int = 64
    window: int = 16
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        for f in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "vocab_size", "window"):
            if int(getattr(self, f)) < 1:
                raise ConfigValidationError(f"model.{f} must be >= 1, got {getattr(self, f)}")
        if self.d_model % self.n_heads:
            raise ConfigValidationError(
                f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})"
            )
        if self.window < 4 or self.window % 4:
            raise ConfigValidationError(f"model.window must be >= 4 and divisible by 4, got {self.window}")
        if self.vocab_size < 4:
            raise ConfigValidationError(f"model.vocab_size must be >= 4, got {self.vocab_size}")
        if not self.init_std > 0:
            raise ConfigValidationError(f"model.init_std must be > 0, got {self.init_std}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigValidationError(f"unknown model keys: {', '.join(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class HeadProjection:
    """One cross-attention head of one decoder layer (views into ModelWeights)."""

    layer: int
    head: int
    wq: np.ndarray  # d_model x d_head
    wk: np.ndarray
    wv: np.ndarray
    bq: np.ndarray  # d_head
    bk: np.ndarray
    bv: np.ndarray
    wo: np.ndarray  # d_head x d_model

    @property
    def d_head(self) -> int:
        return self.wq.shape[1]


def _attention_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Stable, ordered parameter names and shapes (biases and norms are 1 x n)."""
    D, F, V, W = config.d_model, config.d_ff, config.vocab_size, config.window
    shapes: dict[str, tuple[int, int]] = {
        "tok_emb": (V, D),
        "pos_emb": (W, D),
        "out_bias": (1, V),
    }

    def attn(prefix):
        for name in _attention_names(prefix):
            shapes[name] = (1, D) if name.rsplit(".", 1)[1].startswith("b") else (D, D)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (1, D)
        shapes[f"{prefix}.b"] = (1, D)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (D, F)
        shapes[f"{prefix}.b1"] = (1, F)
        shapes[f"{prefix}.w2"] = (F, D)
        shapes[f"{prefix}.b2"] = (1, D)

    for i in range(config.n_enc_layers):
        norm(f"enc.{i}.ln1")
        attn(f"enc.{i}.self")
        norm(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ff")
    norm("enc.ln_f")
    for i in range(config.n_dec_layers):
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ff")
    norm("dec.ln_f")
    return shapes


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @classmethod
    def initialize(cls, config: ModelConfig, rng: Rng | None = None) -> ModelWeights:
        rng = rng or Rng(config.seed).split("init")
        params = {}
        for name, (rows, cols) in parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if name.endswith(".g"):
                params[name] = np.ones((rows, cols), dtype=np.float32)
            elif leaf.startswith("b") or name == "out_bias":
                params[name] = np.zeros((rows, cols), dtype=np.float32)
            else:
                params[name] = seeded_normal(rng.split(name), rows, cols, config.init_std)
        return cls(config, params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def astype(self, dtype) -> ModelWeights:
        return ModelWeights(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> ModelWeights:
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def head_projection(self, layer: int, head: int) -> HeadProjection:
        cfg = self.config
        if not (0 <= layer < cfg.n_dec_layers and 0 <= head < cfg.n_heads):
            raise ArgumentError(f"no cross-attention head ({layer}, {head})")
        sl = slice(head * cfg.d_head, (head + 1) * cfg.d_head)
        p = f"dec.{layer}.cross"
        return HeadProjection(
            layer=layer,
            head=head,
            wq=self.params[f"{p}.wq"][:, sl],
            wk=self.params[f"{p}.wk"][:, sl],
            wv=self.params[f"{p}.wv"][:, sl],
            bq=self.params[f"{p}.bq"][0, sl],
            bk=self.params[f"{p}.bk"][0, sl],
            bv=self.params[f"{p}.bv"][0, sl],
            wo=self.params[f"{p}.wo"][sl, :],
        )

    def head_projections(self) -> list[HeadProjection]:
        return [
            self.head_projection(l, h)
            for l in range(self.config.n_dec_layers)
            for h in range(self.config.n_heads)
        ]


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    memory: np.ndarray | None = None  # gradient w.r.t. the encoder states the provider attended to

    @classmethod
    def zeros_like(cls, weights: ModelWeights) -> Gradients:
        return cls({k: np.zeros_like(v) for k, v in weights.params.items()})

    def global_norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in self.params.values())))


# --------------------------------------------------------------------------------------
# Cross-attention provider contract
# --------------------------------------------------------------------------------------

@dataclass
class HeadGradients:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    h_d: np.ndarray                  # T x d_model
    memory: np.ndarray | None = None  # n x d_model, rows outside the selection are zero


class CrossAttentionProvider(Protocol):
    """What the decoder needs from a cross-attention source.

    `attend` receives the decoder states entering one head's cross-attention
    (T x d_model) and the decoding steps they belong to, and returns the
    T x d_head contexts plus an opaque cache for `attend_backward`.
    `begin_pass(log_from)` opens a forward pass; steps before `log_from` are
    recomputed context and are not logged again.
    """

    def begin_pass(self, log_from: int = 0) -> None: ...

    def attend(self, hp: HeadProjection, h_d: np.ndarray, steps: np.ndarray) -> tuple[np.ndarray, Any]: ...

    def attend_backward(self, hp: HeadProjection, cache: Any, d_context: np.ndarray) -> HeadGradients: ...


# --------------------------------------------------------------------------------------
# Layer kernels (forward returns a cache, backward accumulates into grads)
# --------------------------------------------------------------------------------------

def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy, cache, p, prefix, grads):
    xhat, rstd = cache
    g = p[f"{prefix}.g"]
    grads[f"{prefix}.g"] += np.sum(dy * xhat, axis=0, keepdims=True)
    grads[f"{prefix}.b"] += np.sum(dy, axis=0, keepdims=True)
    dxhat = dy * g
    return rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _ffn(x, p, prefix):
    h = x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]
    a, gc = _gelu(h)
    return a @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"], (x, a, gc)


def _ffn_backward(dy, cache, p, prefix, grads):
    x, a, gc = cache
    grads[f"{prefix}.w2"] += a.T @ dy
    grads[f"{prefix}.b2"] += np.sum(dy, axis=0, keepdims=True)
    dh = _gelu_backward(dy @ p[f"{prefix}.w2"].T, gc)
    grads[f"{prefix}.w1"] += x.T @ dh
    grads[f"{prefix}.b1"] += np.sum(dh, axis=0, keepdims=True)
    return dh @ p[f"{prefix}.w1"].T


def _split_heads(x, n_heads):
    T, D = x.shape
    return x.reshape(T, n_heads, D // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    H, T, dh = x.shape
    return x.transpose(1, 0, 2).reshape(T, H * dh)


def _self_attention(x, p, prefix, n_heads, causal, past=None):
    """Multi-head self-attention; `past` is an optional (K, V) of earlier positions."""
    q = x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = x @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = x @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    if past is not None and past[0].shape[0]:
        K = np.concatenate([past[0], k], axis=0)
        V = np.concatenate([past[1], v], axis=0)
    else:
        K, V = k, v
    T, S = x.shape[0], K.shape[0]
    offset = S - T
    qh, kh, vh = _split_heads(q, n_heads), _split_heads(K, n_heads), _split_heads(V, n_heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    s = (qh @ kh.transpose(0, 2, 1)) * scale
    if causal:
        future = np.arange(S)[None, :] > (offset + np.arange(T))[:, None]
        s = np.where(future[None], -np.inf, s)
    a = softmax_rows(s)
    ctx = _merge_heads(a @ vh)
    out = ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
    return out, (x, qh, kh, vh, a, ctx, scale), (K, V)


def _self_attention_backward(dout, cache, p, prefix, grads):
    x, qh, kh, vh, a, ctx, scale = cache
    n_heads = qh.shape[0]
    grads[f"{prefix}.wo"] += ctx.T @ dout
    grads[f"{prefix}.bo"] += np.sum(dout, axis=0, keepdims=True)
    dctx = _split_heads(dout @ p[f"{prefix}.wo"].T, n_heads)
    da = dctx @ vh.transpose(0, 2, 1)
    dvh = a.transpose(0, 2, 1) @ dctx
    ds = softmax_backward(a, da) * scale
    dq = _merge_heads(ds @ kh)
    dk = _merge_heads(ds.transpose(0, 2, 1) @ qh)
    dv = _merge_heads(dvh)
    dx = np.zeros_like(x)
    for name, d in (("q", dq), ("k", dk), ("v", dv)):
        grads[f"{prefix}.w{name}"] += x.T @ d
        grads[f"{prefix}.b{name}"] += np.sum(d, axis=0, keepdims=True)
        dx += d @ p[f"{prefix}.w{name}"].T
    return dx


# --------------------------------------------------------------------------------------
# Encoder
# --------------------------------------------------------------------------------------

def _check_tokens(tokens, config: ModelConfig, what: str) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ArgumentError(f"{what}: empty token sequence")
    if ids.size > config.window:
        raise WindowError(f"{what}: {ids.size} tokens exceed the window of {config.window}")
    bad = ids[(ids < 0) | (ids >= config.vocab_size)]
    if bad.size:
        raise VocabError(f"{what}: token id {int(bad[0])} outside vocabulary of {config.vocab_size}")
    return ids


def _encoder_forward(weights: ModelWeights, ids: np.ndarray):
    p, cfg = weights.params, weights.config
    x = p["tok_emb"][ids] + p["pos_emb"][: ids.size]
    layers = []
    for i in range(cfg.n_enc_layers):
        a, c1 = _layer_norm(x, p[f"enc.{i}.ln1.g"], p[f"enc.{i}.ln1.b"])
        sa, c2, _ = _self_attention(a, p, f"enc.{i}.self", cfg.n_heads, causal=False)
        x = x + sa
        b, c3 = _layer_norm(x, p[f"enc.{i}.ln2.g"], p[f"enc.{i}.ln2.b"])
        f, c4 = _ffn(b, p, f"enc.{i}.ff")
        x = x + f
        layers.append((c1, c2, c3, c4))
    h, cf = _layer_norm(x, p["enc.ln_f.g"], p["enc.ln_f.b"])
    return h, (ids, layers, cf)


def encode_window(weights: ModelWeights, tokens) -> np.ndarray:
    """Top-layer encoder hidden states (len x d_model) for one window."""
    ids = _check_tokens(tokens, weights.config, "encode_window")
    h, _ = _encoder_forward(weights, ids)
    return h


def encode_window_train(weights: ModelWeights, tokens) -> tuple[np.ndarray, Any]:
    """encode_window that also returns the cache `encode_window_backward` needs."""
    ids = _check_tokens(tokens, weights.config, "encode_window")
    return _encoder_forward(weights, ids)


def encode_window_backward(weights: ModelWeights, cache, d_hidden: np.ndarray, grads: Gradients) -> None:
    p, g = weights.params, grads.params
    ids, layers, cf = cache
    dx = _layer_norm_backward(d_hidden, cf, p, "enc.ln_f", g)
    for i in reversed(range(len(layers))):
        c1, c2, c3, c4 = layers[i]
        db = _ffn_backward(dx, c4, p, f"enc.{i}.ff", g)
        dx = dx + _layer_norm_backward(db, c3, p, f"enc.{i}.ln2", g)
        da = _self_attention_backward(dx, c2, p, f"enc.{i}.self", g)
        dx = dx + _layer_norm_backward(da, c1, p, f"enc.{i}.ln1", g)
    np.add.at(g["tok_emb"], ids, dx)
    g["pos_emb"][: ids.size] += dx


# --------------------------------------------------------------------------------------
# Decoder
# --------------------------------------------------------------------------------------

@dataclass
class DecoderCache:
    """Self-attention keys/values of already-decoded positions, one pair per layer."""

    kv: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    length: int = 0


CrossFn = Callable[[int, np.ndarray, np.ndarray], tuple[np.ndarray, Any]]


def _provider_cross(weights: ModelWeights, cross: CrossAttentionProvider) -> CrossFn:
    def run(layer: int, b: np.ndarray, steps: np.ndarray):
        p = weights.params
        contexts, head_caches = [], []
        for h in range(weights.config.n_heads):
            hp = weights.head_projection(layer, h)
            try:
                ctx, hc = cross.attend(hp, b, steps)
            except ProviderError:
                raise
            except Exception as exc:
                raise ProviderError(layer, h, exc) from exc
            contexts.append(ctx)
            head_caches.append(hc)
        concat = np.concatenate(contexts, axis=1)
        out = concat @ p[f"dec.{layer}.cross.wo"] + p[f"dec.{layer}.cross.bo"]
        return out, (concat, head_caches)

    return run


def _provider_cross_backward(weights, cross, layer, cache, dout, grads: Gradients):
    p, g, cfg = weights.params, grads.params, weights.config
    prefix = f"dec.{layer}.cross"
    concat, head_caches = cache
    g[f"{prefix}.wo"] += concat.T @ dout
    g[f"{prefix}.bo"] += np.sum(dout, axis=0, keepdims=True)
    dconcat = dout @ p[f"{prefix}.wo"].T
    dh = cfg.d_head
    d_b = np.zeros((dout.shape[0], cfg.d_model), dtype=dout.dtype)
    for h, hc in enumerate(head_caches):
        sl = slice(h * dh, (h + 1) * dh)
        hp = weights.head_projection(layer, h)
        try:
            hg = cross.attend_backward(hp, hc, dconcat[:, sl])
        except Exception as exc:
            raise ProviderError(layer, h, exc) from exc
        g[f"{prefix}.wq"][:, sl] += hg.wq
        g[f"{prefix}.wk"][:, sl] += hg.wk
        g[f"{prefix}.wv"][:, sl] += hg.wv
        g[f"{prefix}.bq"][0, sl] += hg.bq
        g[f"{prefix}.bk"][0, sl] += hg.bk
        g[f"{prefix}.bv"][0, sl] += hg.bv
        d_b += hg.h_d
        if hg.memory is not None:
            grads.memory = hg.memory if grads.memory is None else grads.memory + hg.memory
    return d_b


def _dense_cross(weights: ModelWeights, memory: np.ndarray) -> CrossFn:
    """Standard multi-head cross-attention over every encoder state, no provider."""

    def run(layer: int, b: np.ndarray, steps: np.ndarray):
        p, H = weights.params, weights.config.n_heads
        prefix = f"dec.{layer}.cross"
        q = _split_heads(b @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"], H)
        k = _split_heads(memory @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"], H)
        v = _split_heads(memory @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"], H)
        a = softmax_rows((q @ k.transpose(0, 2, 1)) / math.sqrt(q.shape[-1]))
        return _merge_heads(a @ v) @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"], None

    return run


def _decoder_forward(weights: ModelWeights, ids: np.ndarray, cross_fn: CrossFn, cache: DecoderCache | None = None):
    p, cfg = weights.params, weights.config
    start = cache.length if cache is not None else 0
    steps = np.arange(start, start + ids.size)
    x = p["tok_emb"][ids] + p["pos_emb"][steps]
    layers = []
    for i in range(cfg.n_dec_layers):
        past = cache.kv[i] if cache is not None and i < len(cache.kv) else None
        a, c1 = _layer_norm(x, p[f"dec.{i}.ln1.g"], p[f"dec.{i}.ln1.b"])
        sa, c2, kv = _self_attention(a, p, f"dec.{i}.self", cfg.n_heads, causal=True, past=past)
        if cache is not None:
            if i < len(cache.kv):
                cache.kv[i] = kv
            else:
                cache.kv.append(kv)
        x = x + sa
        b, c3 = _layer_norm(x, p[f"dec.{i}.ln2.g"], p[f"dec.{i}.ln2.b"])
        ca, c4 = cross_fn(i, b, steps)
        x = x + ca
        c, c5 = _layer_norm(x, p[f"dec.{i}.ln3.g"], p[f"dec.{i}.ln3.b"])
        f, c6 = _ffn(c, p, f"dec.{i}.ff")
        x = x + f
        layers.append((c1, c2, c3, c4, c5, c6))
    y, cf = _layer_norm(x, p["dec.ln_f.g"], p["dec.ln_f.b"])
    logits = y @ p["tok_emb"].T + p["out_bias"]
    if cache is not None:
        cache.length += ids.size
    return logits, (ids, layers, y, cf)


def _decoder_backward(weights, cross, cache, dlogits, grads: Gradients) -> None:
    p, g = weights.params, grads.params
    ids, layers, y, cf = cache
    g["tok_emb"] += dlogits.T @ y
    g["out_bias"] += np.sum(dlogits, axis=0, keepdims=True)
    dx = _layer_norm_backward(dlogits @ p["tok_emb"], cf, p, "dec.ln_f", g)
    for i in reversed(range(len(layers))):
        c1, c2, c3, c4, c5, c6 = layers[i]
        dc = _ffn_backward(dx, c6, p, f"dec.{i}.ff", g)
        dx = dx + _layer_norm_backward(dc, c5, p, f"dec.{i}.ln3", g)
        db = _provider_cross_backward(weights, cross, i, c4, dx, grads)
        dx = dx + _layer_norm_backward(db, c3, p, f"dec.{i}.ln2", g)
        da = _self_attention_backward(dx, c2, p, f"dec.{i}.self", g)
        dx = dx + _layer_norm_backward(da, c1, p, f"dec.{i}.ln1", g)
    np.add.at(g["tok_emb"], ids, dx)
    g["pos_emb"][: ids.size] += dx


def decode_step(
    weights: ModelWeights,
    prefix,
    cross: CrossAttentionProvider,
    cache: DecoderCache | None = None,
) -> np.ndarray:
    """Next-token logits (vocab_size) after `prefix`.

    Without a cache the whole prefix runs in one pass. With a cache only the
    positions not yet in it are processed, so an incremental caller invokes the
    provider once per layer per head per step. Either way only the last
    position is logged by a retrieving provider.
    """
    ids = _check_tokens(prefix, weights.config, "decode_step")
    if cache is None:
        cross.begin_pass(log_from=ids.size - 1)
        logits, _ = _decoder_forward(weights, ids, _provider_cross(weights, cross))
        return logits[-1]
    if cache.length >= ids.size:
        raise ArgumentError(f"decode_step: cache already holds {cache.length} of {ids.size} positions")
    if cache.length == 0:
        cross.begin_pass(log_from=ids.size - 1)
    logits, _ = _decoder_forward(weights, ids[cache.length :], _provider_cross(weights, cross), cache)
    return logits[-1]


def greedy_generate(weights: ModelWeights, cross: CrossAttentionProvider, max_new_tokens: int) -> list[int]:
    if max_new_tokens < 0:
        raise ArgumentError(f"max_new_tokens must be >= 0, got {max_new_tokens}")
    budget = min(max_new_tokens, weights.config.window - 1)
    prefix, out = [BOS], []
    cache = DecoderCache()
    for _ in range(budget):
        logits = decode_step(weights, prefix, cross, cache)
        tok = int(np.argmax(logits))  # first maximum, i.e. lowest id on ties
        if tok == EOS:
            break
        out.append(tok)
        prefix.append(tok)
    return out


def _check_target(target, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(target, dtype=np.int64).reshape(-1)
    if not 2 <= ids.size <= config.window:
        raise ArgumentError(f"target length {ids.size} outside [2, {config.window}]")
    if ids[0] != BOS or ids[-1] != EOS:
        raise ArgumentError("target must begin with BOS and end with EOS")
    bad = ids[(ids < 0) | (ids >= config.vocab_size)]
    if bad.size:
        raise VocabError(f"target token id {int(bad[0])} outside vocabulary of {config.vocab_size}")
    return ids


def _cross_entropy(logits, gold):
    logp = log_softmax_rows(logits)
    T = gold.size
    loss = -float(np.mean(logp[np.arange(T), gold]))
    d = softmax_rows(logits)
    d[np.arange(T), gold] -= 1.0
    return loss, d / T


def teacher_forced_loss(
    weights: ModelWeights,
    source_cross: CrossAttentionProvider,
    target,
) -> tuple[float, Gradients]:
    """Mean cross-entropy over target positions 1..end, with full gradients.

    When the provider retrieves, the returned `Gradients.memory` holds the
    gradient w.r.t. the encoder states (non-retrieved rows are zero); the
    retrieved index sets are whatever the provider chose in this pass.
    """
    ids = _check_target(target, weights.config)
    source_cross.begin_pass()
    logits, cache = _decoder_forward(weights, ids[:-1], _provider_cross(weights, source_cross))
    loss, dlogits = _cross_entropy(logits, ids[1:])
    grads = Gradients.zeros_like(weights)
    _decoder_backward(weights, source_cross, cache, dlogits.astype(logits.dtype), grads)
    return loss, grads


def monolithic_logits(weights: ModelWeights, source, prefix) -> np.ndarray:
    """Plain encoder-decoder forward over one window; no provider involved."""
    memory = encode_window(weights, source)
    ids = _check_tokens(prefix, weights.config, "monolithic_logits")
    logits, _ = _decoder_forward(weights, ids, _dense_cross(weights, memory))
    return logits


def monolithic_loss(weights: ModelWeights, source, target) -> float:
    ids = _check_target(target, weights.config)
    logits = monolithic_logits(weights, source, ids[:-1])
    loss, _ = _cross_entropy(logits, ids[1:])
    return loss
