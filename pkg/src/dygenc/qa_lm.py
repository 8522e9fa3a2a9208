"""Answer generation over soft graph prompts.

The compressed dynamic-graph tokens are projected into the decoder's
embedding space and spliced between ``<graph>``/``</graph>`` marker
embeddings inside the literal prompt

    "based on scene graph , <graph> ... </graph> , <question>"

after which a small trainable decoder generates the answer greedily. The
decoder stands in for a pretrained LLM (its low-rank attention adapters and
the frozen-base training mode still mirror the parameter-efficient recipe).
"""

from __future__ import annotations

import logging
import math
import re

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericsError
from .nn import Module, linear
from .seq_encoder import sinusoid_table

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS, GRAPH_OPEN, GRAPH_CLOSE = range(6)
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>", "<graph>", "</graph>")
PROMPT_PREFIX = "based on scene graph ,"

_WORD_RE = re.compile(r"[a-z0-9_']+|[^\sa-z0-9_']")


def normalize_text(s: str) -> str:
    return " ".join(s.lower().split())


def word_tokenize(s: str):
    return _WORD_RE.findall(s.lower())


class Tokenizer:
    """Word-level tokenizer over a closed corpus vocabulary plus specials."""

    def __init__(self, words):
        self.vocab = list(SPECIALS) + sorted(set(words) - set(SPECIALS))
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def build(cls, texts):
        words = set()
        for t in texts:
            words.update(word_tokenize(t))
        words.update(word_tokenize(PROMPT_PREFIX))
        return cls(words)

    def __len__(self):
        return len(self.vocab)

    def encode(self, s, warn_all_unknown=False):
        toks = word_tokenize(s)
        ids = [self.index.get(t, UNK) for t in toks]
        if warn_all_unknown and ids and all(i == UNK for i in ids):
            logger.warning("question %r contains no known tokens; proceeding with %s", s, SPECIALS[UNK])
        return ids

    def decode(self, ids):
        return " ".join(self.vocab[i] for i in ids if i != PAD)

    def roundtrip(self, s):
        return self.decode(self.encode(s))


class Projector(Module):
    """Two-layer GELU MLP mapping compressed tokens into the decoder space."""

    def __init__(self, d_in, d_out, rng, hidden=None):
        super().__init__()
        hidden = hidden or d_out
        self.register("w1", ad.glorot(rng, d_in, hidden))
        self.register("b1", ad.zeros((hidden,)))
        self.register("w2", ad.glorot(rng, hidden, d_out))
        self.register("b2", ad.zeros((d_out,)))

    def forward(self, x):
        return linear(ad.gelu(linear(x, self._params["w1"], self._params["b1"])), self._params["w2"], self._params["b2"])


class ToyDecoderLM(Module):
    """Pre-norm causal decoder with a tied embedding head.

    Low-rank adapters (zero-initialized B, scaled by alpha/r) can be attached
    to the query and value projections; they are registered under ``lora.*``
    so checkpoints can separate base and adapter tensors.
    """

    def __init__(self, vocab_size, rng, d=128, num_layers=4, heads=4, ffn_mult=4,
                 lora_enabled=False, lora_r=8, lora_alpha=16.0, lora_dropout=0.05):
        super().__init__()
        if d % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide model dim ({d})")
        self.vocab_size = vocab_size
        self.d = d
        self.num_layers = num_layers
        self.heads = heads
        self.head_dim = d // heads
        self.lora_enabled = lora_enabled
        self.lora_r = lora_r
        self.lora_scale = lora_alpha / lora_r
        self.lora_dropout = lora_dropout

        self.register("emb", ad.param(rng.normal(0.0, 0.02, size=(vocab_size, d))))
        ff = ffn_mult * d
        for layer in range(num_layers):
            for nm in ("q_proj", "k_proj", "v_proj", "o_proj"):
                self.register(f"l{layer}.{nm}.w", ad.glorot(rng, d, d))
                self.register(f"l{layer}.{nm}.b", ad.zeros((d,)))
            for ln in ("ln1", "ln2"):
                self.register(f"l{layer}.{ln}_g", ad.ones((d,)))
                self.register(f"l{layer}.{ln}_b", ad.zeros((d,)))
            self.register(f"l{layer}.ffn.w1", ad.glorot(rng, d, ff))
            self.register(f"l{layer}.ffn.b1", ad.zeros((ff,)))
            self.register(f"l{layer}.ffn.w2", ad.glorot(rng, ff, d))
            self.register(f"l{layer}.ffn.b2", ad.zeros((d,)))
        self.register("ln_f_g", ad.ones((d,)))
        self.register("ln_f_b", ad.zeros((d,)))
        if lora_enabled:
            for layer in range(num_layers):
                for target in ("q_proj", "v_proj"):
                    self.register(f"lora.l{layer}.{target}.a", ad.param(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, lora_r))))
                    self.register(f"lora.l{layer}.{target}.b", ad.zeros((lora_r, d)))

    # -- structure helpers ----------------------------------------------
    def base_param_names(self):
        return [n for n in self._params if not n.startswith("lora.")]

    def adapter_param_names(self):
        return [n for n in self._params if n.startswith("lora.")]

    def _proj(self, x, layer, target, train_mode, rng):
        out = linear(x, self._params[f"l{layer}.{target}.w"], self._params[f"l{layer}.{target}.b"])
        if self.lora_enabled and target in ("q_proj", "v_proj"):
            xin = x
            if train_mode and self.lora_dropout > 0.0:
                xin = ad.dropout(xin, self.lora_dropout, rng)
            delta = ad.matmul(ad.matmul(xin, self._params[f"lora.l{layer}.{target}.a"]), self._params[f"lora.l{layer}.{target}.b"])
            out = ad.add(out, ad.mul(delta, self.lora_scale))
        return out

    def forward_embedded(self, x, pos_idx=None, key_mask=None, train_mode=False, dropout_rng=None):
        """Logits over the vocabulary for a batch of embedded sequences.

        ``x``: Tensor (B, L, d). ``pos_idx``: per-token position indices
        (B, L) for left-padded batches; defaults to 0..L-1. ``key_mask``:
        additive (B, 1, 1, L) mask for padded keys.
        """
        b, seq_len, _ = x.shape
        if pos_idx is None:
            pe = sinusoid_table(np.arange(seq_len), self.d)[None, :, :]
        else:
            pe = sinusoid_table(np.asarray(pos_idx).reshape(-1), self.d).reshape(b, seq_len, self.d)
        x = ad.add(x, ad.Tensor(pe))

        causal = np.triu(np.full((seq_len, seq_len), ad.NEG_INF, dtype=x.dtype), k=1)
        mask = causal[None, None, :, :]
        if key_mask is not None:
            mask = mask + key_mask
        mask_t = ad.Tensor(mask)

        H, dh = self.heads, self.head_dim
        for layer in range(self.num_layers):
            xn = ad.layer_norm(x, self._params[f"l{layer}.ln1_g"], self._params[f"l{layer}.ln1_b"])
            q = self._proj(xn, layer, "q_proj", train_mode, dropout_rng)
            k = self._proj(xn, layer, "k_proj", train_mode, dropout_rng)
            v = self._proj(xn, layer, "v_proj", train_mode, dropout_rng)
            q = ad.transpose(ad.reshape(q, (b, seq_len, H, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (b, seq_len, H, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (b, seq_len, H, dh)), (0, 2, 1, 3))
            scores = ad.add(ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh)), mask_t)
            attn = ad.softmax(scores, axis=-1)
            ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, seq_len, self.d))
            x = ad.add(x, linear(ctx, self._params[f"l{layer}.o_proj.w"], self._params[f"l{layer}.o_proj.b"]))
            xn = ad.layer_norm(x, self._params[f"l{layer}.ln2_g"], self._params[f"l{layer}.ln2_b"])
            ff = linear(ad.gelu(linear(xn, self._params[f"l{layer}.ffn.w1"], self._params[f"l{layer}.ffn.b1"])),
                        self._params[f"l{layer}.ffn.w2"], self._params[f"l{layer}.ffn.b2"])
            x = ad.add(x, ff)
        x = ad.layer_norm(x, self._params["ln_f_g"], self._params["ln_f_b"])
        return ad.matmul(x, ad.transpose(self._params["emb"]))

    def embed_ids(self, ids):
        return ad.embedding_lookup(self._params["emb"], np.asarray(ids, dtype=np.int64))


def prompt_token_segments(tokenizer: Tokenizer, question: str):
    """(ids before the soft block, ids after it). The soft block sits between
    the <graph> and </graph> markers; a comma follows before the question."""
    prefix_ids = tokenizer.encode(PROMPT_PREFIX)
    question_ids = tokenizer.encode(question, warn_all_unknown=True)
    before = prefix_ids + [GRAPH_OPEN]
    after = [GRAPH_CLOSE, tokenizer.index[","]] + question_ids
    return before, after


def assemble_prompt(h_llm, question: str, lm: ToyDecoderLM, tokenizer: Tokenizer):
    """Embedded prompt (L, d): literal tokens with the k soft vectors spliced
    in at embedding level, bypassing the vocabulary."""
    before, after = prompt_token_segments(tokenizer, question)
    return ad.concat([lm.embed_ids(before), h_llm, lm.embed_ids(after)], axis=0)


def answer_loss(lm: ToyDecoderLM, prompt_emb, answer_ids, train_mode=False, dropout_rng=None):
    """Teacher-forced mean cross-entropy over answer positions only."""
    answer_ids = list(answer_ids)
    targets = np.array(answer_ids + [EOS], dtype=np.int64)
    full = ad.concat([prompt_emb, lm.embed_ids(answer_ids)], axis=0) if answer_ids else prompt_emb
    seq_len = full.shape[0]
    logits = ad.reshape(lm.forward_embedded(ad.reshape(full, (1, seq_len, lm.d)),
                                            train_mode=train_mode, dropout_rng=dropout_rng),
                        (seq_len, lm.vocab_size))
    prompt_len = prompt_emb.shape[0]
    rows = ad.gather_rows(logits, np.arange(prompt_len - 1, seq_len, dtype=np.int64))
    loss = ad.cross_entropy(rows, targets)
    if not np.isfinite(loss.data):
        raise NumericsError("non-finite answer loss")
    return loss


def _gen_mask(vocab_size, dtype):
    mask = np.zeros(vocab_size, dtype=dtype)
    for sp in (PAD, UNK, BOS, GRAPH_OPEN, GRAPH_CLOSE):
        mask[sp] = ad.NEG_INF
    return mask


def greedy_generate(lm: ToyDecoderLM, tokenizer: Tokenizer, prompts, max_len=16):
    """Batched greedy decoding until <eos> or ``max_len`` tokens.

    ``prompts``: list of embedded prompts (L_b, d). Batches are left-padded
    so every sequence ends at the same column; positions and key masks keep
    each sample's numbers identical to an unbatched forward.
    """
    specials_mask = _gen_mask(lm.vocab_size, ad.default_dtype())
    outputs = [[] for _ in prompts]
    with ad.no_grad():
        lens = [p.shape[0] for p in prompts]
        width = max(lens)
        b = len(prompts)
        x = np.zeros((b, width, lm.d), dtype=ad.default_dtype())
        pos_idx = np.zeros((b, width), dtype=np.int64)
        key_mask = np.zeros((b, 1, 1, width), dtype=ad.default_dtype())
        for i, p in enumerate(prompts):
            pad = width - lens[i]
            x[i, pad:] = p.data
            pos_idx[i, pad:] = np.arange(lens[i])
            key_mask[i, 0, 0, :pad] = ad.NEG_INF
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            logits = lm.forward_embedded(ad.Tensor(x), pos_idx=pos_idx, key_mask=key_mask).data
            last = logits[:, -1, :] + specials_mask
            nxt = last.argmax(axis=1)
            nxt[done] = EOS
            done |= nxt == EOS
            for i, t in enumerate(nxt):
                if t != EOS:
                    outputs[i].append(int(t))
            if done.all():
                break
            emb = lm._params["emb"].data[nxt]
            x = np.concatenate([x, emb[:, None, :]], axis=1)
            pos_idx = np.concatenate([pos_idx, (pos_idx[:, -1] + 1)[:, None]], axis=1)
            key_mask = np.concatenate([key_mask, np.zeros((b, 1, 1, 1), dtype=key_mask.dtype)], axis=3)
    return [tokenizer.decode(ids).lower() for ids in outputs]


def generate(lm: ToyDecoderLM, tokenizer: Tokenizer, prompt_emb, max_len=16):
    """Single-prompt greedy decoding; returns the detokenized lowercase answer."""
    return greedy_generate(lm, tokenizer, [prompt_emb], max_len=max_len)[0]


def accuracy(pred: str, gold: str) -> bool:
    """Containment semantics: the normalized reference must contain the
    normalized prediction as a substring."""
    p = normalize_text(pred)
    g = normalize_text(gold)
    if not p:
        return False
    return p in g
