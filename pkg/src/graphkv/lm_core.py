"""Byte-level tokenizer and a seeded, frozen decoder-only transformer.

The model is deliberately small (4 layers, 4 heads, width 64 by default) and
runs in float64 numpy. Rotary position encoding is applied at absolute
positions, so computing a sequence in one prefill or as prefill + extends
yields the same attention inputs.

KV caches are split into a shared *prefix* segment and a private *suffix*
segment. A sealed prefix is read-only and may back any number of forks.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from graphkv.costs import LmShape, cost_model
from graphkv.errors import CapacityError, DomainError, SealedSegmentError

BOS, EOS, PAD, GRAPH_SLOT = 256, 257, 258, 259
VOCAB_SIZE = 260
SPECIALS = frozenset((BOS, EOS, PAD, GRAPH_SLOT))


@dataclass(frozen=True)
class Tokenizer:
    """UTF-8 bytes plus four special ids (BOS, EOS, PAD, graph soft slot)."""

    vocab_size: int = VOCAB_SIZE

    def encode(self, text: str, *, bos: bool = True) -> list[int]:
        ids = list(text.encode("utf-8"))
        return [BOS] + ids if bos else ids

    def decode(self, ids: Sequence[int]) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def tokenize(t: Tokenizer, text: str) -> list[int]:
    return t.encode(text)


def detokenize(t: Tokenizer, ids: Sequence[int]) -> str:
    return t.decode(ids)


@dataclass(frozen=True)
class LmConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 64
    max_seq: int = 1024
    ffn_mult: int = 4
    soft_dim: int = 64
    seed: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise DomainError("model dim must be divisible by heads")
        if (self.dim // self.heads) % 2:
            raise DomainError("head dim must be even for rotary encoding")
        if self.max_seq < 1:
            raise DomainError("max_seq must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def shape(self) -> LmShape:
        return LmShape(self.layers, self.heads, self.head_dim, self.ffn_mult)


class KVCache:
    """Per-layer keys/values of shape (heads, tokens, head_dim), in two segments."""

    def __init__(self, config: LmConfig):
        self.config = config
        empty = np.zeros((config.heads, 0, config.head_dim))
        self._prefix_k = [empty] * config.layers
        self._prefix_v = [empty] * config.layers
        self._suffix_k = [empty] * config.layers
        self._suffix_v = [empty] * config.layers
        self.prefix_tokens: list[int] = []
        self.suffix_tokens: list[int] = []
        self.sealed = False
        self.released = False
        self.last_logits: Optional[np.ndarray] = None
        self.prefix_logits: Optional[np.ndarray] = None
        self.prefill_cost = 0
        self.decode_cost = 0

    @property
    def prefix_len(self) -> int:
        return len(self.prefix_tokens)

    @property
    def token_count(self) -> int:
        return len(self.prefix_tokens) + len(self.suffix_tokens)

    def __len__(self):
        return self.token_count

    def keys(self, layer: int) -> np.ndarray:
        if self._suffix_k[layer].shape[1] == 0:
            return self._prefix_k[layer]
        return np.concatenate([self._prefix_k[layer], self._suffix_k[layer]], axis=1)

    def values(self, layer: int) -> np.ndarray:
        if self._suffix_v[layer].shape[1] == 0:
            return self._prefix_v[layer]
        return np.concatenate([self._prefix_v[layer], self._suffix_v[layer]], axis=1)

    def _append(self, segment: str, layer: int, k: np.ndarray, v: np.ndarray):
        if segment == "prefix":
            if self.sealed:
                raise SealedSegmentError("the prefix segment is sealed")
            if self.suffix_tokens:
                raise SealedSegmentError("cannot grow the prefix once a suffix exists")
            self._prefix_k[layer] = np.concatenate([self._prefix_k[layer], k], axis=1)
            self._prefix_v[layer] = np.concatenate([self._prefix_v[layer], v], axis=1)
        else:
            self._suffix_k[layer] = np.concatenate([self._suffix_k[layer], k], axis=1)
            self._suffix_v[layer] = np.concatenate([self._suffix_v[layer], v], axis=1)

    def seal(self) -> "KVCache":
        """Freeze the prefix segment; later writes into it raise."""
        for arr in self._prefix_k + self._prefix_v:
            arr.setflags(write=False)
        self.sealed = True
        return self

    def fork(self) -> "KVCache":
        """A new cache reading this sealed prefix, with an empty private suffix."""
        if not self.sealed:
            raise SealedSegmentError("only a sealed prefix can be shared")
        if self.released:
            raise SealedSegmentError("prefix has been released")
        other = KVCache(self.config)
        other._prefix_k = self._prefix_k
        other._prefix_v = self._prefix_v
        other.prefix_tokens = self.prefix_tokens
        other.sealed = True
        other.prefix_logits = other.last_logits = self.prefix_logits
        return other

    def drop_suffix(self):
        empty = np.zeros((self.config.heads, 0, self.config.head_dim))
        self._suffix_k = [empty] * self.config.layers
        self._suffix_v = [empty] * self.config.layers
        self.suffix_tokens = []
        self.last_logits = self.prefix_logits

    def release(self):
        """Drop both segments; the cache cannot be used afterwards."""
        self.drop_suffix()
        empty = np.zeros((self.config.heads, 0, self.config.head_dim))
        self._prefix_k = [empty] * self.config.layers
        self._prefix_v = [empty] * self.config.layers
        self.prefix_tokens = []
        self.released = True

    def prefix_nbytes(self) -> int:
        return sum(a.nbytes for a in self._prefix_k + self._prefix_v)

    def suffix_nbytes(self) -> int:
        return sum(a.nbytes for a in self._suffix_k + self._suffix_v)

    def nbytes(self) -> int:
        return self.prefix_nbytes() + self.suffix_nbytes()

    def prefix_digest(self) -> str:
        h = hashlib.sha256()
        for arr in self._prefix_k + self._prefix_v:
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


_ROW_CHUNK = 128


# added to the trailing square block of a row chunk: row r sees columns <= r
_CAUSAL_BLOCK = np.triu(np.full((_ROW_CHUNK, _ROW_CHUNK), -np.inf), k=1)
_CAUSAL_BLOCK.setflags(write=False)


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


class ToyLm:
    """Seeded random pre-norm transformer with rotary attention and tied-free output head."""

    def __init__(self, config: LmConfig = LmConfig()):
        self.config = config
        d, hd = config.dim, config.head_dim
        rng = np.random.default_rng([config.seed, 0x4C4D])
        self.embed = rng.standard_normal((VOCAB_SIZE, d))
        self.w_qkv = [rng.standard_normal((d, 3 * d)) / np.sqrt(d) for _ in range(config.layers)]
        self.w_o = [rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(config.layers)]
        f = config.ffn_mult * d
        self.w_up = [rng.standard_normal((d, f)) / np.sqrt(d) for _ in range(config.layers)]
        self.w_down = [rng.standard_normal((f, d)) / np.sqrt(f) for _ in range(config.layers)]
        self.w_out = rng.standard_normal((d, VOCAB_SIZE)) / np.sqrt(d)
        self.w_soft = rng.standard_normal((config.soft_dim, d))
        inv_freq = config.rope_base ** (-np.arange(0, hd, 2) / hd)
        angles = np.arange(config.max_seq)[:, None] * inv_freq[None, :]
        self._cos, self._sin = np.cos(angles), np.sin(angles)
        for w in (self.embed, self.w_out, self.w_soft, *self.w_qkv, *self.w_o, *self.w_up, *self.w_down):
            w.setflags(write=False)
        self.tokenizer = Tokenizer()

    @property
    def shape(self) -> LmShape:
        return self.config.shape

    def _rope(self, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
        cos, sin = self._cos[positions], self._sin[positions]
        x1, x2 = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = x1 * cos - x2 * sin
        out[..., 1::2] = x1 * sin + x2 * cos
        return out

    def soft_embedding(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.config.soft_dim,):
            raise DomainError(f"soft prefix must have shape ({self.config.soft_dim},), got {vec.shape}")
        return vec @ self.w_soft

    def forward(
        self,
        cache: KVCache,
        tokens: Sequence[int],
        *,
        segment: str = "suffix",
        soft_prefix: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Run ``tokens`` on top of ``cache`` and return last-position logits.

        With ``soft_prefix`` the projected vector is injected as an extra
        leading position whose token id is GRAPH_SLOT.
        """
        cfg = self.config
        ids = list(tokens)
        rows = [self.embed[i] for i in ids]
        if soft_prefix is not None:
            ids = [GRAPH_SLOT] + ids
            rows = [self.soft_embedding(soft_prefix)] + rows
        n = len(ids)
        if n == 0:
            return cache.last_logits
        start = cache.token_count
        if start + n > cfg.max_seq:
            raise CapacityError(f"{start} cached + {n} new tokens exceed max_seq {cfg.max_seq}")
        if cache.released:
            raise SealedSegmentError("cache has been released")

        x = np.stack(rows)
        positions = np.arange(start, start + n)
        H, hd = cfg.heads, cfg.head_dim
        scale = 1.0 / np.sqrt(hd)
        for layer in range(cfg.layers):
            h = _rms_norm(x) @ self.w_qkv[layer]
            q, k, v = (h[:, i * cfg.dim:(i + 1) * cfg.dim].reshape(n, H, hd).transpose(1, 0, 2) for i in range(3))
            q = self._rope(q, positions) * scale
            k = self._rope(k, positions)
            cache._append(segment, layer, k, v)
            keys, vals = cache.keys(layer), cache.values(layer)
            attn = np.empty((H, n, hd))
            for lo in range(0, n, _ROW_CHUNK):
                hi = min(n, lo + _ROW_CHUNK)
                visible = start + hi
                rows = hi - lo
                scores = q[:, lo:hi] @ keys[:, :visible].transpose(0, 2, 1)
                if rows > 1:
                    scores[:, :, visible - rows:] += _CAUSAL_BLOCK[:rows, :rows]
                scores -= scores.max(axis=-1, keepdims=True)
                np.exp(scores, out=scores)
                scores /= scores.sum(axis=-1, keepdims=True)
                attn[:, lo:hi] = scores @ vals[:, :visible]
            attn = attn.transpose(1, 0, 2).reshape(n, cfg.dim)
            x = x + attn @ self.w_o[layer]
            x = x + _gelu(_rms_norm(x) @ self.w_up[layer]) @ self.w_down[layer]

        if segment == "prefix":
            cache.prefix_tokens = cache.prefix_tokens + ids
        else:
            cache.suffix_tokens = cache.suffix_tokens + ids
        logits = _rms_norm(x[-1]) @ self.w_out
        cache.last_logits = logits
        if segment == "prefix":
            cache.prefix_logits = logits
        return logits


def prefill(lm: ToyLm, tokens: Sequence[int], soft_prefix: Optional[np.ndarray] = None) -> tuple[KVCache, np.ndarray]:
    """Fresh cache holding ``tokens`` (optionally behind a soft slot) in its prefix segment."""
    n = len(tokens) + (soft_prefix is not None)
    if n > lm.config.max_seq:
        raise CapacityError(f"{n} tokens exceed max_seq {lm.config.max_seq}")
    if n == 0:
        raise DomainError("prefill needs at least one token")
    cache = KVCache(lm.config)
    logits = lm.forward(cache, tokens, segment="prefix", soft_prefix=soft_prefix)
    cache.prefill_cost += cost_model(0, n, lm.shape)
    return cache, logits


def extend(lm: ToyLm, cache: KVCache, tokens: Sequence[int]) -> tuple[KVCache, np.ndarray]:
    """Append ``tokens`` to the private suffix, attending to everything cached."""
    if cache.token_count + len(tokens) > lm.config.max_seq:
        raise CapacityError(f"{cache.token_count} cached + {len(tokens)} new tokens exceed max_seq {lm.config.max_seq}")
    before = cache.token_count
    logits = lm.forward(cache, tokens, segment="suffix")
    cache.prefill_cost += cost_model(before, len(tokens), lm.shape)
    return cache, logits


_NEVER_EMIT = np.zeros(VOCAB_SIZE, dtype=bool)
_NEVER_EMIT[[BOS, PAD, GRAPH_SLOT]] = True

LogitBias = Callable[[int, Sequence[int]], Optional[np.ndarray]]


@dataclass
class GenerationResult:
    token_ids: list[int] = field(default_factory=list)
    text: str = ""
    timestamps_ns: list[int] = field(default_factory=list)
    prefill_proxy: int = 0
    decode_proxy: int = 0

    @property
    def first_token_ns(self) -> Optional[int]:
        return self.timestamps_ns[0] if self.timestamps_ns else None


def greedy_decode(
    lm: ToyLm,
    cache: KVCache,
    max_new: int,
    logit_bias: Optional[LogitBias] = None,
    clock: Callable[[], int] = time.perf_counter_ns,
) -> GenerationResult:
    """Argmax decoding (lowest id wins ties) until EOS, ``max_new`` tokens or a full context.

    BOS, PAD and the graph slot are never emitted.

    ``logit_bias(step, generated_so_far)`` may return an additive logit vector.
    The emitted EOS, if any, is kept in ``token_ids``.
    """
    if cache.token_count == 0 or cache.last_logits is None:
        raise DomainError("greedy_decode needs a non-empty cache")
    out = GenerationResult(prefill_proxy=cache.prefill_cost)
    logits = cache.last_logits
    last_ts = 0
    for step in range(max_new):
        if logit_bias is not None:
            bias = logit_bias(step, out.token_ids)
            if bias is not None:
                logits = logits + bias
        tok = int(np.argmax(np.where(_NEVER_EMIT, -np.inf, logits)))
        out.token_ids.append(tok)
        last_ts = max(clock(), last_ts + 1)
        out.timestamps_ns.append(last_ts)
        if tok == EOS or step == max_new - 1 or cache.token_count >= lm.config.max_seq:
            break
        before = cache.token_count
        logits = lm.forward(cache, [tok], segment="suffix")
        cost = cost_model(before, 1, lm.shape)
        cache.decode_cost += cost
        out.decode_proxy += cost
    out.text = lm.tokenizer.decode(out.token_ids)
    return out
