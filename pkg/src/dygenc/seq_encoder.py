"""Temporal position signals for frame tokens, and their compression into a
fixed bank of query tokens by cross-attention (two pre-norm layers, four
heads each).

Three interchangeable temporal variants:

* ``ape``  — fixed sinusoid added at the original frame index
* ``te``   — cos(t*omega + phi) with learnable frequency/phase vectors
* ``rope`` — rotation of consecutive feature pairs by t-scaled angles
             (default; applied to the input tokens, queries stay unrotated)

Positions are the *original* frame indices, which survive compaction, so
interval and duration structure stays visible after duplicate frames are
dropped.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .nn import Module, linear

logger = logging.getLogger(__name__)

TEMPORAL_KINDS = ("te", "ape", "rope", "none")
ROPE_BASE = 10000.0


class TemporalEncoder(Module):
    def __init__(self, d, kind="rope", rng=None):
        super().__init__()
        kind = kind.lower()
        if kind not in TEMPORAL_KINDS:
            raise ConfigError(f"unknown temporal encoding {kind!r}; expected one of {TEMPORAL_KINDS}")
        if kind == "rope" and d % 2 != 0:
            raise ConfigError(f"rotary encoding needs an even token dim, got {d}")
        self.kind = kind
        self.d = d
        if kind == "te":
            rng = rng or np.random.default_rng(0)
            # init frequencies on the standard inverse-power ladder, phases at 0
            freqs = ROPE_BASE ** (-np.arange(d) / d)
            self.register("omega", ad.param(freqs))
            self.register("phi", ad.zeros((d,)))

    def apply(self, m_tokens, t):
        """``m_tokens``: Tensor (m, d); ``t``: original frame indices (m,)."""
        t = np.asarray(t, dtype=ad.default_dtype())
        if len(t) != m_tokens.shape[0]:
            raise ConfigError(f"got {len(t)} positions for {m_tokens.shape[0]} tokens")
        if self.kind == "none":
            return m_tokens
        if self.kind == "ape":
            return ad.add(m_tokens, ad.Tensor(sinusoid_table(t, self.d)))
        if self.kind == "te":
            angle = ad.add(ad.mul(ad.Tensor(t[:, None]), self._params["omega"]), self._params["phi"])
            return ad.add(m_tokens, ad.cos(angle))
        cos_arr, sin_arr = rope_angles(t, self.d)
        return ad.add(ad.mul(m_tokens, ad.Tensor(cos_arr)), ad.mul(ad.rotate_pairs(m_tokens), ad.Tensor(sin_arr)))


def sinusoid_table(t, d):
    """Classic fixed sin/cos position features at (possibly gapped) positions."""
    t = np.asarray(t, dtype=np.float64)
    pe = np.zeros((len(t), d))
    half = (d + 1) // 2
    denom = ROPE_BASE ** (2.0 * np.arange(half) / d)
    args = t[:, None] / denom[None, :]
    pe[:, 0::2] = np.sin(args)
    pe[:, 1::2] = np.cos(args[:, : d // 2])
    return pe.astype(ad.default_dtype())


def rope_angles(t, d):
    """Per-token cos/sin arrays, each value repeated across its feature pair."""
    if d % 2 != 0:
        raise ConfigError(f"rotary encoding needs an even token dim, got {d}")
    t = np.asarray(t, dtype=np.float64)
    theta = ROPE_BASE ** (-2.0 * np.arange(d // 2) / d)
    ang = t[:, None] * theta[None, :]
    cos_arr = np.repeat(np.cos(ang), 2, axis=1).astype(ad.default_dtype())
    sin_arr = np.repeat(np.sin(ang), 2, axis=1).astype(ad.default_dtype())
    return cos_arr, sin_arr


class QFormerParams(Module):
    """k learnable query tokens plus the cross-attention decoder stack."""

    def __init__(self, d, rng, k=1, num_layers=2, heads=4, ffn_mult=4):
        super().__init__()
        if k < 1:
            raise ConfigError(f"need at least one query token, got k={k}")
        if d % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide token dim ({d})")
        self.d = d
        self.k = k
        self.num_layers = num_layers
        self.heads = heads
        self.head_dim = d // heads
        self.register("query", ad.param(rng.normal(0.0, 0.02, size=(k, d))))
        ff = ffn_mult * d
        for layer in range(num_layers):
            for blk in ("self", "cross"):
                for nm in ("wq", "wk", "wv", "wo"):
                    self.register(f"l{layer}.{blk}.{nm}", ad.glorot(rng, d, d))
                for nm in ("bq", "bk", "bv", "bo"):
                    self.register(f"l{layer}.{blk}.{nm}", ad.zeros((d,)))
            for ln in ("ln1", "ln2", "ln3"):
                self.register(f"l{layer}.{ln}_g", ad.ones((d,)))
                self.register(f"l{layer}.{ln}_b", ad.zeros((d,)))
            self.register(f"l{layer}.ffn.w1", ad.glorot(rng, d, ff))
            self.register(f"l{layer}.ffn.b1", ad.zeros((ff,)))
            self.register(f"l{layer}.ffn.w2", ad.glorot(rng, ff, d))
            self.register(f"l{layer}.ffn.b2", ad.zeros((d,)))
        self.register("ln_f_g", ad.ones((d,)))
        self.register("ln_f_b", ad.zeros((d,)))

    def blk(self, layer, blk, nm):
        return self._params[f"l{layer}.{blk}.{nm}"]


def pair_attention(xq, xkv, pair_q, pair_kv, p: QFormerParams, layer, blk, collect=None):
    """Multi-head attention along explicit (query_row, key_row) pairs.

    Softmax normalizes over all pairs sharing a query row, so arbitrary
    sample boundaries and query/key counts are expressed purely by the pair
    lists. Returns the attended output per query row.
    """
    H, dh = p.heads, p.head_dim
    nq = xq.shape[0]
    q = ad.reshape(linear(xq, p.blk(layer, blk, "wq"), p.blk(layer, blk, "bq")), (nq, H, dh))
    k = ad.reshape(linear(xkv, p.blk(layer, blk, "wk"), p.blk(layer, blk, "bk")), (-1, H, dh))
    v = ad.reshape(linear(xkv, p.blk(layer, blk, "wv"), p.blk(layer, blk, "bv")), (-1, H, dh))
    qg = ad.gather_rows(q, pair_q)
    kg = ad.gather_rows(k, pair_kv)
    vg = ad.gather_rows(v, pair_kv)
    scores = ad.mul(ad.tsum(ad.mul(qg, kg), axis=-1), 1.0 / math.sqrt(dh))  # (P, H)
    alpha = ad.segment_softmax(scores, pair_q, nq)
    if collect is not None:
        collect.append(alpha.data.copy())
    out = ad.segment_sum(ad.mul(ad.reshape(alpha, (-1, H, 1)), vg), pair_q, nq)
    return linear(ad.reshape(out, (nq, H * dh)), p.blk(layer, blk, "wo"), p.blk(layer, blk, "bo"))


def _self_pairs(n_samples, k):
    qi = np.arange(n_samples * k, dtype=np.int64)
    pair_q = np.repeat(qi, k)
    offs = (qi // k) * k
    pair_kv = (np.repeat(offs, k).reshape(-1, k) + np.arange(k, dtype=np.int64)).reshape(-1)
    return pair_q, pair_kv


def _cross_pairs(token_sample, n_samples, k):
    counts = np.bincount(token_sample, minlength=n_samples)
    token_rows = np.arange(len(token_sample), dtype=np.int64)
    pair_q_parts, pair_kv_parts = [], []
    for s in range(n_samples):
        rows = token_rows[token_sample == s]
        queries = np.arange(s * k, (s + 1) * k, dtype=np.int64)
        pair_q_parts.append(np.repeat(queries, len(rows)))
        pair_kv_parts.append(np.tile(rows, k))
    return np.concatenate(pair_q_parts), np.concatenate(pair_kv_parts), counts


def compress_batch(tokens, token_sample, n_samples, p: QFormerParams, collect_maps=False):
    """Compress each sample's tokens into its k query tokens.

    ``tokens``: Tensor (T, d) holding every sample's (temporally encoded)
    frame tokens back to back; ``token_sample`` assigns rows to samples.
    Returns (Tensor (n_samples*k, d), maps) where maps is a list of
    (layer, head, weights (k, m_s)) per sample when requested.
    """
    token_sample = np.asarray(token_sample, dtype=np.int64)
    counts = np.bincount(token_sample, minlength=n_samples)
    if (counts == 0).any():
        raise ConfigError("every sample needs at least one token")
    if p.k > counts.min():
        logger.warning(
            "query tokens k=%d exceed the shortest sequence m=%d; compression is still defined "
            "but this is outside the intended operating regime",
            p.k,
            int(counts.min()),
        )
    self_q, self_kv = _self_pairs(n_samples, p.k)
    cross_q, cross_kv, _ = _cross_pairs(token_sample, n_samples, p.k)

    x = ad.reshape(
        ad.gather_rows(p._params["query"], np.tile(np.arange(p.k, dtype=np.int64), n_samples)),
        (n_samples * p.k, p.d),
    )
    raw_maps = [] if collect_maps else None
    for layer in range(p.num_layers):
        xn = ad.layer_norm(x, p._params[f"l{layer}.ln1_g"], p._params[f"l{layer}.ln1_b"])
        x = ad.add(x, pair_attention(xn, xn, self_q, self_kv, p, layer, "self"))
        xn = ad.layer_norm(x, p._params[f"l{layer}.ln2_g"], p._params[f"l{layer}.ln2_b"])
        x = ad.add(x, pair_attention(xn, tokens, cross_q, cross_kv, p, layer, "cross", collect=raw_maps))
        xn = ad.layer_norm(x, p._params[f"l{layer}.ln3_g"], p._params[f"l{layer}.ln3_b"])
        ff = linear(ad.gelu(linear(xn, p._params[f"l{layer}.ffn.w1"], p._params[f"l{layer}.ffn.b1"])),
                    p._params[f"l{layer}.ffn.w2"], p._params[f"l{layer}.ffn.b2"])
        x = ad.add(x, ff)
    x = ad.layer_norm(x, p._params["ln_f_g"], p._params["ln_f_b"])

    maps = None
    if collect_maps:
        maps = _split_maps(raw_maps, cross_q, cross_kv, token_sample, n_samples, p)
    return x, maps


def _split_maps(raw_maps, cross_q, cross_kv, token_sample, n_samples, p):
    """Reshape flat pair weights into per-sample (layer, head, k x m) maps."""
    out = [[] for _ in range(n_samples)]
    counts = np.bincount(token_sample, minlength=n_samples)
    for layer, alpha in enumerate(raw_maps):
        for s in range(n_samples):
            m = int(counts[s])
            sel = (cross_q >= s * p.k) & (cross_q < (s + 1) * p.k)
            w = alpha[sel].reshape(p.k, m, p.heads)  # pairs are query-major per sample
            for head in range(p.heads):
                out[s].append((layer, head, w[:, :, head].copy()))
    return out


def compress(m_hat, p: QFormerParams):
    """Single-sequence compression: (m, d) -> (k, d)."""
    out, _ = compress_batch(m_hat, np.zeros(m_hat.shape[0], dtype=np.int64), 1, p)
    return out


def attention_maps(m_hat, p: QFormerParams):
    """Cross-attention weights per (layer, head): list of (layer, head, (k, m))."""
    _, maps = compress_batch(m_hat, np.zeros(m_hat.shape[0], dtype=np.int64), 1, p, collect_maps=True)
    return maps[0]


def write_attention_csv(maps, path):
    """CSV columns: layer,head,query_index,frame_index,weight."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("layer,head,query_index,frame_index,weight\n")
        for layer, head, w in maps:
            for qi in range(w.shape[0]):
                for fi in range(w.shape[1]):
                    f.write(f"{layer},{head},{qi},{fi},{float(w[qi, fi])!r}\n")
