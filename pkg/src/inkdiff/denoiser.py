"""Conditional noise predictor: a small U-Net with cross-attention over prompt tokens.

The text encoder is a learned token-embedding table (``embed.tokens``). Linear
layers route through an optional adapter so low-rank deltas can be applied
without touching the base weights.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import RandomStream, normal

PAD, UNK, NULL, IDENTIFIER = 0, 1, 2, 3
RESERVED = ["<pad>", "<unk>", "<null>", "[V]"]
MAX_TOKENS = 12
EMBED_DIM = 64


@dataclass
class TokenVocabulary:
    tokens: list = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self._index = {tok.lower(): i for i, tok in enumerate(self.tokens)}

    @classmethod
    def from_prompts(cls, prompts) -> "TokenVocabulary":
        tokens = list(RESERVED)
        seen = {t.lower() for t in tokens}
        for prompt in prompts:
            for word in prompt.lower().split():
                if word not in seen:
                    seen.add(word)
                    tokens.append(word)
        return cls(tokens)

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token.lower(), UNK)

    def to_json(self) -> list:
        return list(self.tokens)


def tokenize(prompt: str, vocab: TokenVocabulary, max_tokens: int = MAX_TOKENS) -> np.ndarray:
    words = prompt.strip().lower().split()
    if not words:
        raise ValueError("prompt is empty")
    ids = np.full(max_tokens, PAD, dtype=np.int64)
    for i, word in enumerate(words[:max_tokens]):
        ids[i] = vocab.id(word)
    return ids


def null_ids(max_tokens: int = MAX_TOKENS) -> np.ndarray:
    ids = np.full(max_tokens, PAD, dtype=np.int64)
    ids[0] = NULL
    return ids


@dataclass
class ConditioningContext:
    embeddings: Tensor  # (n, max_tokens, embed_dim)
    mask: np.ndarray  # (n, max_tokens) bool, True where attended


def embed_tokens(ids, params) -> ConditioningContext:
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    emb = ag.take_rows(params["embed.tokens"], ids)
    return ConditioningContext(emb, ids != PAD)


def drop_conditioning(ids, stream: RandomStream, p_drop: float) -> tuple[np.ndarray, np.ndarray]:
    """Replace each row of ``ids`` by the null prompt with probability ``p_drop``.

    Working on ids is equivalent to swapping whole contexts, since embedding
    is a row lookup. Returns the new ids and the boolean drop mask.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must lie in [0, 1]")
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    dropped = stream.uniform(ids.shape[0]) < p_drop
    out = ids.copy()
    out[dropped] = null_ids(ids.shape[1])
    return out, dropped


def time_embedding(t, dim: int, T: int | None = None) -> np.ndarray:
    """Interleaved sinusoidal embedding: [sin(t w_0), cos(t w_0), sin(t w_1), ...].

    ``w_i = 10000 ** (-2i / dim)``. With ``T`` given, steps must lie in [1, T].
    """
    t = np.atleast_1d(np.asarray(t))
    if T is not None and (t.min() < 1 or t.max() > T):
        raise ValueError(f"time step out of range [1, {T}]")
    half = dim // 2
    omega = 10000.0 ** (-2.0 * np.arange(half) / dim)
    angles = t.astype(np.float64)[:, None] * omega[None, :]
    emb = np.empty((t.shape[0], dim), dtype=np.float64)
    emb[:, 0 : 2 * half : 2] = np.sin(angles)
    emb[:, 1 : 2 * half : 2] = np.cos(angles)
    if dim % 2:
        emb[:, -1] = 0.0
    return emb.astype(ag.get_default_dtype())


@dataclass
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 1
    channels: tuple = (32, 64)
    res_blocks: int = 2
    groups: int = 8
    time_dim: int = 64
    context_dim: int = EMBED_DIM
    max_tokens: int = MAX_TOKENS
    vocab_size: int = 16
    T: int = 1000

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.image_size % (2 ** (len(self.channels) - 1)):
            raise ValueError("image size must be divisible by 2^(levels-1)")
        if any(c % self.groups for c in self.channels):
            raise ValueError("every level's channel count must be divisible by groups")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


# ---------------------------------------------------------------- initialisation


class _Init:
    def __init__(self, stream: RandomStream):
        self.stream = stream
        self.params = {}

    def kaiming(self, name, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        u = self.stream.uniform(shape).reshape(shape)
        self.params[name] = ag.parameter((2.0 * u - 1.0) * bound)

    def zeros(self, name, shape):
        self.params[name] = ag.parameter(np.zeros(shape))

    def ones(self, name, shape):
        self.params[name] = ag.parameter(np.ones(shape))

    def conv(self, name, c_in, c_out, k=3):
        self.kaiming(f"{name}.w", (c_out, c_in, k, k), c_in * k * k)
        self.zeros(f"{name}.b", (c_out,))

    def linear(self, name, d_in, d_out, bias=True):
        self.kaiming(f"{name}.w", (d_out, d_in), d_in)
        if bias:
            self.zeros(f"{name}.b", (d_out,))

    def norm(self, name, c):
        self.ones(f"{name}.g", (c,))
        self.zeros(f"{name}.b", (c,))

    def res_block(self, name, c_in, c_out, time_dim):
        self.norm(f"{name}.norm1", c_in)
        self.conv(f"{name}.conv1", c_in, c_out)
        self.linear(f"{name}.temb", time_dim, c_out)
        self.norm(f"{name}.norm2", c_out)
        self.conv(f"{name}.conv2", c_out, c_out)
        if c_in != c_out:
            self.conv(f"{name}.skip", c_in, c_out, k=1)


def init_params(config: DenoiserConfig, stream: RandomStream) -> dict:
    """Kaiming-uniform convs/linears, N(0, 0.02) embeddings, zero biases."""
    init = _Init(stream)
    ch = config.channels
    init.linear("time.lin1", config.time_dim, config.time_dim)
    init.linear("time.lin2", config.time_dim, config.time_dim)
    init.conv("conv_in", config.in_channels, ch[0])
    c = ch[0]
    for level, c_level in enumerate(ch):
        for r in range(config.res_blocks):
            init.res_block(f"down.{level}.res.{r}", c, c_level, config.time_dim)
            c = c_level
        if level < len(ch) - 1:
            init.conv(f"down.{level}.down", c, c)
    init.res_block("mid.res.0", c, c, config.time_dim)
    init.norm("mid.attn.norm", c)
    init.linear("mid.attn.q", c, c, bias=False)
    init.linear("mid.attn.k", config.context_dim, c, bias=False)
    init.linear("mid.attn.v", config.context_dim, c, bias=False)
    init.linear("mid.attn.o", c, c)
    init.res_block("mid.res.1", c, c, config.time_dim)
    for level in reversed(range(len(ch))):
        for r in range(config.res_blocks):
            c_in = c + ch[level] if r == 0 else ch[level]
            init.res_block(f"up.{level}.res.{r}", c_in, ch[level], config.time_dim)
            c = ch[level]
        if level > 0:
            init.conv(f"up.{level}.up", c, c)
    init.norm("out.norm", c)
    init.conv("out.conv", c, config.in_channels)
    init.params["embed.tokens"] = ag.parameter(
        0.02 * normal(stream, (config.vocab_size, config.context_dim))
    )
    return init.params


def attention_targets(params) -> list[str]:
    """Default adapter targets: cross-attention projections and bottleneck linears."""
    return sorted(
        name
        for name in params
        if name.endswith(".w") and params[name].ndim == 2 and name.startswith("mid.")
    )


# ---------------------------------------------------------------- forward


def _linear(x, params, name, adapter=None, bias=True):
    w = params[f"{name}.w"]
    b = params.get(f"{name}.b") if bias else None
    if adapter is not None and f"{name}.w" in adapter:
        return adapter.forward(f"{name}.w", x, w, b)
    return ag.linear(x, w, b)


def _conv(x, params, name, padding=1):
    return ag.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding=padding)


def _norm(x, params, name, groups):
    return ag.group_norm(x, groups, params[f"{name}.g"], params[f"{name}.b"])


def _res_block(x, temb, params, name, config, adapter):
    h = _conv(ag.silu(_norm(x, params, f"{name}.norm1", config.groups)), params, f"{name}.conv1")
    proj = _linear(temb, params, f"{name}.temb", adapter)
    h = h + ag.reshape(proj, proj.shape + (1, 1))
    h = _conv(ag.silu(_norm(h, params, f"{name}.norm2", config.groups)), params, f"{name}.conv2")
    skip = _conv(x, params, f"{name}.skip", padding=0) if f"{name}.skip.w" in params else x
    return h + skip


def cross_attention(h, context: ConditioningContext, params, config, adapter=None, return_weights=False):
    """Spatial features query the prompt tokens; masked tokens get zero weight."""
    n, c, hh, ww = h.shape
    x = _norm(h, params, "mid.attn.norm", config.groups)
    tokens = ag.transpose(ag.reshape(x, (n, c, hh * ww)), (0, 2, 1))
    emb = context.embeddings
    mask = context.mask
    if emb.shape[0] != n:
        emb = ag.concat([emb] * n, axis=0) if emb.shape[0] == 1 else emb
        mask = np.broadcast_to(mask, (n, mask.shape[1]))
    q = _linear(tokens, params, "mid.attn.q", adapter, bias=False)
    k = _linear(emb, params, "mid.attn.k", adapter, bias=False)
    v = _linear(emb, params, "mid.attn.v", adapter, bias=False)
    logits = ag.scale(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(q.shape[-1]))
    weights = ag.masked_softmax(logits, mask[:, None, :], axis=-1)
    out = _linear(ag.matmul(weights, v), params, "mid.attn.o", adapter)
    out = ag.reshape(ag.transpose(out, (0, 2, 1)), (n, c, hh, ww))
    result = h + out
    return (result, weights) if return_weights else result


def unet_forward(x, t, context: ConditioningContext, params, config: DenoiserConfig, adapter=None) -> Tensor:
    """Predict the noise in ``x`` (n, c, h, w) at integer steps ``t``."""
    x = ag.as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != (config.in_channels, config.image_size, config.image_size):
        raise ValueError(
            f"expected input (n, {config.in_channels}, {config.image_size}, {config.image_size}), got {x.shape}"
        )
    n = x.shape[0]
    t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))
    temb = Tensor(time_embedding(t, config.time_dim, config.T))
    temb = _linear(ag.silu(_linear(temb, params, "time.lin1", adapter)), params, "time.lin2", adapter)
    temb = ag.silu(temb)

    ch = config.channels
    h = _conv(x, params, "conv_in")
    skips = []
    for level in range(len(ch)):
        for r in range(config.res_blocks):
            h = _res_block(h, temb, params, f"down.{level}.res.{r}", config, adapter)
        skips.append(h)
        if level < len(ch) - 1:
            h = _conv(ag.avg_pool2(h), params, f"down.{level}.down")
    h = _res_block(h, temb, params, "mid.res.0", config, adapter)
    h = cross_attention(h, context, params, config, adapter)
    h = _res_block(h, temb, params, "mid.res.1", config, adapter)
    for level in reversed(range(len(ch))):
        h = ag.concat([h, skips[level]], axis=1)
        for r in range(config.res_blocks):
            h = _res_block(h, temb, params, f"up.{level}.res.{r}", config, adapter)
        if level > 0:
            h = _conv(ag.upsample2(h), params, f"up.{level}.up")
    h = ag.silu(_norm(h, params, "out.norm", config.groups))
    return _conv(h, params, "out.conv")


class Denoiser:
    """Bundles config, vocabulary, parameters and an optional adapter."""

    def __init__(self, config: DenoiserConfig, vocab: TokenVocabulary, params: dict, adapter=None):
        self.config = config
        self.vocab = vocab
        self.params = params
        self.adapter = adapter

    @classmethod
    def fresh(cls, config: DenoiserConfig, vocab: TokenVocabulary, stream: RandomStream) -> "Denoiser":
        config.vocab_size = len(vocab)
        return cls(config, vocab, init_params(config, stream))

    def tokenize(self, prompts) -> np.ndarray:
        if isinstance(prompts, str):
            prompts = [prompts]
        return np.stack([tokenize(p, self.vocab, self.config.max_tokens) for p in prompts])

    def __call__(self, x, t, ids) -> Tensor:
        context = embed_tokens(ids, self.params)
        return unet_forward(x, t, context, self.params, self.config, self.adapter)
