"""Per-frame graph encoding: edge-restricted multi-head attention over the
graph's neighborhoods with edge-feature injection, residual + layer norm per
layer, then mean pooling into a single frame token.

All forwards run on a *flattened* batch: the frames of one or many samples
are packed into one disjoint graph and pooled back per frame with segment
ops, so the per-frame python cost is constant.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .embed import embed_graph
from .errors import ConfigError, EmptyGraphError
from .nn import Module, linear

__all__ = ["GraphEncoderParams", "FlatFrames", "flatten_frames", "encode_flat", "encode_graph", "encode_sequence"]


class GraphEncoderParams(Module):
    def __init__(self, in_dim, edge_dim, rng, hidden=64, out_dim=64, num_layers=2, heads=4):
        super().__init__()
        if hidden % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide hidden dim ({hidden})")
        self.in_dim = in_dim
        self.edge_dim = edge_dim
        self.hidden = hidden
        self.out_dim = out_dim
        self.num_layers = num_layers
        self.heads = heads
        self.head_dim = hidden // heads

        self.register("w_in", ad.glorot(rng, in_dim, hidden))
        self.register("b_in", ad.zeros((hidden,)))
        for layer in range(num_layers):
            for name in ("wq", "wk", "wv", "wo"):
                self.register(f"l{layer}.{name}", ad.glorot(rng, hidden, hidden))
            for name in ("bq", "bk", "bv", "bo"):
                self.register(f"l{layer}.{name}", ad.zeros((hidden,)))
            self.register(f"l{layer}.we_k", ad.glorot(rng, edge_dim, hidden))
            self.register(f"l{layer}.we_v", ad.glorot(rng, edge_dim, hidden))
            self.register(f"l{layer}.ln_g", ad.ones((hidden,)))
            self.register(f"l{layer}.ln_b", ad.zeros((hidden,)))
        if hidden != out_dim:
            self.register("w_out", ad.glorot(rng, hidden, out_dim))
            self.register("b_out", ad.zeros((out_dim,)))

    def layer(self, i, name):
        return self._params[f"l{i}.{name}"]


class FlatFrames:
    """Frames packed into one disjoint graph. Self-loops (zero edge features)
    are appended so isolated nodes attend to themselves."""

    __slots__ = ("node_feats", "edge_feats", "edge_src", "edge_dst", "node_frame", "n_frames", "frame_t", "frame_sample")

    def __init__(self, node_feats, edge_feats, edge_src, edge_dst, node_frame, n_frames, frame_t, frame_sample):
        self.node_feats = node_feats
        self.edge_feats = edge_feats
        self.edge_src = edge_src
        self.edge_dst = edge_dst
        self.node_frame = node_frame
        self.n_frames = n_frames
        self.frame_t = frame_t
        self.frame_sample = frame_sample


def flatten_frames(embedded, ts, sample_ids=None):
    """Pack EmbeddedGraphs into one FlatFrames batch.

    ``embedded``: list of EmbeddedGraph (one per frame, any sample mix);
    ``ts``: original frame index per frame; ``sample_ids``: which sample each
    frame belongs to (defaults to all zeros).
    """
    if sample_ids is None:
        sample_ids = [0] * len(embedded)
    node_blocks, edge_blocks, srcs, dsts, node_frames = [], [], [], [], []
    offset = 0
    edge_dim = embedded[0].edge_matrix.shape[1] if embedded else 0
    for fi, eg in enumerate(embedded):
        n = eg.num_nodes
        if n == 0:
            raise EmptyGraphError("cannot encode a frame with zero nodes")
        node_blocks.append(eg.node_matrix)
        node_frames.append(np.full(n, fi, dtype=np.int64))
        if eg.num_edges:
            edge_blocks.append(eg.edge_matrix)
            srcs.append(eg.edge_index[0] + offset)
            dsts.append(eg.edge_index[1] + offset)
        # self-loops with zero edge features
        loop = np.arange(offset, offset + n, dtype=np.int64)
        srcs.append(loop)
        dsts.append(loop)
        edge_blocks.append(np.zeros((n, edge_dim), dtype=eg.node_matrix.dtype))
        offset += n
    return FlatFrames(
        node_feats=np.concatenate(node_blocks, axis=0),
        edge_feats=np.concatenate(edge_blocks, axis=0),
        edge_src=np.concatenate(srcs),
        edge_dst=np.concatenate(dsts),
        node_frame=np.concatenate(node_frames),
        n_frames=len(embedded),
        frame_t=np.asarray(ts, dtype=np.int64),
        frame_sample=np.asarray(sample_ids, dtype=np.int64),
    )


def _attention(h, flat, p: GraphEncoderParams, layer):
    n = h.shape[0]
    H, dh = p.heads, p.head_dim
    scale = 1.0 / math.sqrt(dh)
    q = ad.reshape(linear(h, p.layer(layer, "wq"), p.layer(layer, "bq")), (n, H, dh))
    k = ad.reshape(linear(h, p.layer(layer, "wk"), p.layer(layer, "bk")), (n, H, dh))
    v = ad.reshape(linear(h, p.layer(layer, "wv"), p.layer(layer, "bv")), (n, H, dh))
    e = ad.Tensor(flat.edge_feats)
    ek = ad.reshape(linear(e, p.layer(layer, "we_k")), (-1, H, dh))
    ev = ad.reshape(linear(e, p.layer(layer, "we_v")), (-1, H, dh))

    q_dst = ad.gather_rows(q, flat.edge_dst)
    k_src = ad.add(ad.gather_rows(k, flat.edge_src), ek)
    v_src = ad.add(ad.gather_rows(v, flat.edge_src), ev)

    scores = ad.mul(ad.tsum(ad.mul(q_dst, k_src), axis=-1), scale)  # (E, H)
    alpha = ad.segment_softmax(scores, flat.edge_dst, n)
    weighted = ad.mul(ad.reshape(alpha, (-1, H, 1)), v_src)
    pooled = ad.segment_sum(weighted, flat.edge_dst, n)  # (N, H, dh)
    return linear(ad.reshape(pooled, (n, H * dh)), p.layer(layer, "wo"), p.layer(layer, "bo"))


def encode_flat(flat: FlatFrames, p: GraphEncoderParams):
    """Returns frame tokens M as a Tensor of shape (n_frames, out_dim)."""
    h = linear(ad.Tensor(flat.node_feats), p._params["w_in"], p._params["b_in"])
    for layer in range(p.num_layers):
        attn = _attention(h, flat, p, layer)
        h = ad.layer_norm(ad.add(h, attn), p.layer(layer, "ln_g"), p.layer(layer, "ln_b"))
    m = ad.segment_mean(h, flat.node_frame, flat.n_frames)
    if "w_out" in p._params:
        m = linear(m, p._params["w_out"], p._params["b_out"])
    return m


def encode_graph(eg, p: GraphEncoderParams):
    """Single-frame token (Tensor of shape (out_dim,))."""
    if eg.num_nodes == 0:
        raise EmptyGraphError("cannot encode a graph with zero nodes")
    flat = flatten_frames([eg], [0])
    return ad.reshape(encode_flat(flat, p), (p.out_dim,))


def encode_sequence(dg, embedder, p: GraphEncoderParams, d_lpe=4):
    """All frames of one dynamic graph -> (M Tensor (m, out_dim), t array)."""
    embedded = [embed_graph(g, embedder, d_lpe=d_lpe) for g in dg.graphs]
    flat = flatten_frames(embedded, list(dg.indices))
    return encode_flat(flat, p), flat.frame_t
