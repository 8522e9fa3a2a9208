"""End-to-end pipeline: frames -> graph tokens -> temporal encoding ->
query-token compression -> projection -> decoder prompt.

Forward passes are batched across samples: every frame of every sample in a
batch is packed into one flat graph, compressed per sample with segment
attention, and spliced into right-padded prompt tensors in a single scatter,
so a training step costs a fixed number of tensor ops regardless of batch
size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .embed import TextEmbedder, embed_graph
from .errors import ConfigError
from .graph_encoder import GraphEncoderParams, encode_flat, flatten_frames
from .qa_lm import (
    EOS,
    Projector,
    Tokenizer,
    ToyDecoderLM,
    greedy_generate,
    prompt_token_segments,
)
from .seq_encoder import QFormerParams, TemporalEncoder, compress_batch

GROUP_ADAPTER = "adapter"
GROUP_BASE_LM = "base_lm"


@dataclass
class ModelConfig:
    d_text: int = 64
    d_lpe: int = 4
    ge_hidden: int = 64
    d_g: int = 64
    ge_layers: int = 2
    ge_heads: int = 4
    temporal_kind: str = "rope"
    k_tokens: int = 1
    qf_layers: int = 2
    qf_heads: int = 4
    qf_ffn_mult: int = 4
    proj_hidden: int = 128
    d_llm: int = 128
    lm_layers: int = 4
    lm_heads: int = 4
    lm_ffn_mult: int = 4
    lora_enabled: bool = False
    lora_r: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    enable_ge: bool = True
    enable_te: bool = True
    enable_se: bool = True
    embed_seed: int = 0

    def validate(self):
        if self.k_tokens < 1:
            raise ConfigError("k_tokens must be >= 1")
        if not self.enable_ge and self.d_text != self.d_g:
            raise ConfigError(
                f"with the graph encoder disabled, frame tokens are mean text embeddings, "
                f"so d_text ({self.d_text}) must equal d_g ({self.d_g})"
            )
        return self

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class EncodedBatch:
    """Soft rows plus the bookkeeping to splice them into prompts."""

    soft: object  # Tensor (R, d_llm)
    ranges: list  # per sample (lo, hi) rows of `soft`
    maps: object = None
    frame_t: np.ndarray = field(default=None)


class DygencModel:
    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer, init_seed=0):
        cfg.validate()
        self.cfg = cfg
        self.tokenizer = tokenizer
        ss = np.random.SeedSequence(init_seed)
        r_ge, r_te, r_qf, r_pr, r_lm = [np.random.default_rng(s) for s in ss.spawn(5)]
        self.embedder = TextEmbedder(d=cfg.d_text, seed=cfg.embed_seed)
        self.graph_encoder = GraphEncoderParams(
            in_dim=cfg.d_text + cfg.d_lpe,
            edge_dim=cfg.d_text,
            rng=r_ge,
            hidden=cfg.ge_hidden,
            out_dim=cfg.d_g,
            num_layers=cfg.ge_layers,
            heads=cfg.ge_heads,
        )
        kind = cfg.temporal_kind if cfg.enable_te else "none"
        self.temporal = TemporalEncoder(cfg.d_g, kind=kind, rng=r_te)
        self.qformer = QFormerParams(
            cfg.d_g, r_qf, k=cfg.k_tokens, num_layers=cfg.qf_layers, heads=cfg.qf_heads, ffn_mult=cfg.qf_ffn_mult
        )
        self.projector = Projector(cfg.d_g, cfg.d_llm, r_pr, hidden=cfg.proj_hidden)
        self.lm = ToyDecoderLM(
            len(tokenizer),
            r_lm,
            d=cfg.d_llm,
            num_layers=cfg.lm_layers,
            heads=cfg.lm_heads,
            ffn_mult=cfg.lm_ffn_mult,
            lora_enabled=cfg.lora_enabled,
            lora_r=cfg.lora_r,
            lora_alpha=cfg.lora_alpha,
            lora_dropout=cfg.lora_dropout,
        )

    # -- parameter registry ---------------------------------------------
    def components(self):
        return {
            "graph_encoder": self.graph_encoder,
            "temporal": self.temporal,
            "qformer": self.qformer,
            "projector": self.projector,
            "lm": self.lm,
        }

    def params(self):
        out = {}
        for prefix, comp in self.components().items():
            for name, t in comp.params().items():
                out[f"{prefix}.{name}"] = t
        return out

    def groups(self):
        out = {}
        for name in self.params():
            if name.startswith("lm.lora."):
                out[name] = GROUP_ADAPTER
            elif name.startswith("lm."):
                out[name] = GROUP_BASE_LM
            else:
                out[name] = name.split(".", 1)[0]
        return out

    def trainable_params(self, freeze_base=False):
        """With the base frozen, only adapters, projector and the two
        encoders keep receiving gradients."""
        params = self.params()
        if not freeze_base:
            return params
        kept = {}
        for name, t in params.items():
            frozen = name.startswith("lm.") and not name.startswith("lm.lora.")
            t.requires_grad = not frozen
            if not frozen:
                kept[name] = t
        return kept

    def export_arrays(self):
        return {name: t.data.copy() for name, t in self.params().items()}

    def load_arrays(self, arrays):
        params = self.params()
        for name, arr in arrays.items():
            if name in params:
                params[name].data = np.asarray(arr, dtype=params[name].data.dtype).copy()

    # -- feature caching --------------------------------------------------
    def sample_features(self, sample):
        feats = sample._cache.get("features")
        if feats is None:
            embedded = [embed_graph(g, self.embedder, d_lpe=self.cfg.d_lpe) for g in sample.dg.graphs]
            feats = (embedded, np.asarray(sample.dg.indices, dtype=np.int64))
            sample._cache["features"] = feats
        return feats

    # -- encoding ----------------------------------------------------------
    def encode_soft(self, samples, collect_maps=False, reverse_time=False):
        """Soft prompt rows for a batch. Returns an EncodedBatch."""
        cfg = self.cfg
        all_embedded, all_t, sample_ids = [], [], []
        for b, s in enumerate(samples):
            embedded, ts = self.sample_features(s)
            if reverse_time:
                tmax = int(ts[-1])
                embedded = list(reversed(embedded))
                ts = np.array([tmax - t for t in reversed(ts)], dtype=np.int64)
            all_embedded.extend(embedded)
            all_t.append(ts)
            sample_ids.extend([b] * len(embedded))
        flat = flatten_frames(all_embedded, np.concatenate(all_t), sample_ids=sample_ids)

        if cfg.enable_ge:
            m_tokens = encode_flat(flat, self.graph_encoder)
        else:
            # ablation: frame token = mean of node text embeddings
            rows = np.stack([eg.node_matrix[:, : cfg.d_text].mean(axis=0) for eg in all_embedded])
            m_tokens = ad.Tensor(rows)

        m_tokens = self.temporal.apply(m_tokens, flat.frame_t)

        if cfg.enable_se:
            compressed, maps = compress_batch(
                m_tokens, flat.frame_sample, len(samples), self.qformer, collect_maps=collect_maps
            )
            soft = self.projector.forward(compressed)
            ranges = [(b * cfg.k_tokens, (b + 1) * cfg.k_tokens) for b in range(len(samples))]
        else:
            # ablation: every frame token is projected into the prompt
            soft = self.projector.forward(m_tokens)
            counts = np.bincount(flat.frame_sample, minlength=len(samples))
            offs = np.concatenate([[0], np.cumsum(counts)])
            ranges = [(int(offs[b]), int(offs[b + 1])) for b in range(len(samples))]
            maps = None
        return EncodedBatch(soft=soft, ranges=ranges, maps=maps, frame_t=flat.frame_t)

    # -- training loss ------------------------------------------------------
    def batch_loss(self, samples, train_mode=True, dropout_rng=None, reverse_time=False):
        """Mean over samples of the per-sample answer cross-entropy."""
        enc = self.encode_soft(samples, reverse_time=reverse_time)
        tok = self.tokenizer
        b = len(samples)
        seqs = []
        for s, (lo, hi) in zip(samples, enc.ranges):
            before, after = prompt_token_segments(tok, s.question)
            ans = tok.encode(s.answer)
            seqs.append((before, lo, hi, after, ans))
        lmax = max(len(bf) + (hi - lo) + len(af) + len(an) for bf, lo, hi, af, an in seqs)

        tok_pos, tok_ids, soft_pos, soft_rows = [], [], [], []
        loss_pos, loss_tgt, loss_w = [], [], []
        for i, (before, lo, hi, after, ans) in enumerate(seqs):
            base = i * lmax
            pos = 0
            for t in before:
                tok_pos.append(base + pos)
                tok_ids.append(t)
                pos += 1
            for r in range(lo, hi):
                soft_pos.append(base + pos)
                soft_rows.append(r)
                pos += 1
            for t in after:
                tok_pos.append(base + pos)
                tok_ids.append(t)
                pos += 1
            prompt_len = pos
            for t in ans:
                tok_pos.append(base + pos)
                tok_ids.append(t)
                pos += 1
            targets = ans + [EOS]
            w = 1.0 / (b * len(targets))
            for j, tgt in enumerate(targets):
                loss_pos.append(base + prompt_len - 1 + j)
                loss_tgt.append(tgt)
                loss_w.append(w)

        flat_rows = b * lmax
        tok_embs = self.lm.embed_ids(tok_ids)
        x = ad.scatter_rows(tok_embs, np.array(tok_pos, dtype=np.int64), flat_rows)
        soft_sel = ad.gather_rows(enc.soft, np.array(soft_rows, dtype=np.int64))
        x = ad.add(x, ad.scatter_rows(soft_sel, np.array(soft_pos, dtype=np.int64), flat_rows))
        x = ad.reshape(x, (b, lmax, self.cfg.d_llm))

        logits = self.lm.forward_embedded(x, train_mode=train_mode, dropout_rng=dropout_rng)
        rows = ad.gather_rows(ad.reshape(logits, (flat_rows, self.lm.vocab_size)), np.array(loss_pos, dtype=np.int64))
        return ad.cross_entropy(rows, np.array(loss_tgt, dtype=np.int64), weights=np.array(loss_w))

    def sample_loss(self, sample, **kw):
        return self.batch_loss([sample], **kw)

    # -- generation -----------------------------------------------------------
    def generate_batch(self, samples, max_len=16, reverse_time=False):
        with ad.no_grad():
            enc = self.encode_soft(samples, reverse_time=reverse_time)
            prompts = []
            for s, (lo, hi) in zip(samples, enc.ranges):
                before, after = prompt_token_segments(self.tokenizer, s.question)
                soft = ad.take(enc.soft, (slice(lo, hi), slice(None)))
                prompts.append(ad.concat([self.lm.embed_ids(before), soft, self.lm.embed_ids(after)], axis=0))
            return greedy_generate(self.lm, self.tokenizer, prompts, max_len=max_len)

    def answer(self, sample, max_len=16):
        return self.generate_batch([sample], max_len=max_len)[0]
