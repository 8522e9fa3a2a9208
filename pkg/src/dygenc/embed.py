"""Deterministic text embeddings and spectral node positions.

The pretrained sentence encoder is replaced by signed feature hashing
(words + character trigrams), which is reproducible bit-for-bit with zero
weight dependencies; a file-backed mode accepts precomputed vectors so a
real encoder's outputs can be plugged in unchanged.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .autodiff import default_dtype
from .errors import EmbedError
from .sg import SceneGraph

__all__ = ["TextEmbedder", "EmbeddedGraph", "laplacian_pe", "embed_graph"]


def _stable_hash(feature: str, key: bytes) -> int:
    h = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=key)
    return int.from_bytes(h.digest(), "little")


def _features(text: str):
    words = [w for w in "".join(c if c.isalnum() else " " for c in text.lower()).split() if w]
    feats = [f"w:{w}" for w in words]
    for w in words:
        padded = f"^{w}$"
        feats.extend(f"t:{padded[i:i + 3]}" for i in range(len(padded) - 2))
    return feats


class TextEmbedder:
    """Maps text to a unit vector in R^d. Pure and immutable after construction."""

    def __init__(self, d=64, mode="hashed", seed=0, vectors=None):
        if mode not in ("hashed", "file"):
            raise EmbedError(f"unknown embedder mode {mode!r}")
        if mode == "file" and vectors is None:
            raise EmbedError("file-backed mode needs a vectors mapping")
        self.d = int(d)
        self.mode = mode
        self.seed = int(seed)
        self._key = self.seed.to_bytes(8, "little")
        self._vectors = vectors
        self._cache = {}

    @classmethod
    def from_jsonl(cls, path, d=None):
        """Load a file-backed embedder from {"text": ..., "vector": [...]} lines."""
        vectors = {}
        with open(path, "r", encoding="utf-8") as f:
            for raw in f:
                raw = raw.strip()
                if not raw:
                    continue
                obj = json.loads(raw)
                v = np.asarray(obj["vector"], dtype=np.float64)
                n = np.linalg.norm(v)
                vectors[obj["text"]] = v / n if n > 0 else v
        if not vectors:
            raise EmbedError(f"no vectors in {path}")
        dims = {len(v) for v in vectors.values()}
        if len(dims) != 1:
            raise EmbedError(f"inconsistent vector dimensions {sorted(dims)}")
        dim = dims.pop()
        if d is not None and d != dim:
            raise EmbedError(f"requested d={d} but file carries d={dim}")
        return cls(d=dim, mode="file", vectors=vectors)

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmbedError("cannot embed empty text")
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        if self.mode == "file":
            v = self._vectors.get(text)
            if v is None:
                raise EmbedError(f"no stored vector for {text!r}")
            out = np.asarray(v, dtype=default_dtype())
        else:
            acc = np.zeros(self.d, dtype=np.float64)
            for feat in _features(text):
                h = _stable_hash(feat, self._key)
                bucket = h % self.d
                sign = 1.0 if (h >> 62) & 1 else -1.0
                acc[bucket] += sign
            norm = np.linalg.norm(acc)
            if norm == 0.0:
                raise EmbedError(f"text {text!r} produced no features")
            out = (acc / norm).astype(default_dtype())
        out.flags.writeable = False
        self._cache[text] = out
        return out

    def cosine(self, a: str, b: str) -> float:
        return float(self.embed_text(a) @ self.embed_text(b))


def _components(n, adj):
    seen = [False] * n
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def _sym_laplacian(indices, adj_matrix):
    sub = adj_matrix[np.ix_(indices, indices)]
    deg = sub.sum(axis=1)
    dm = 1.0 / np.sqrt(deg)
    return np.eye(len(indices)) - dm[:, None] * sub * dm[None, :]


def laplacian_pe(g: SceneGraph, d_lpe=4, sign_flip_rng=None, return_values=False):
    """Spectral node positions from the symmetric normalized Laplacian.

    Works on the undirected skeleton, per connected component: columns are the
    eigenvectors for the d_lpe smallest nontrivial eigenvalues (zero-padded
    when the component is too small), each column's sign fixed so its first
    entry above tolerance is positive. Size-1 components get zero rows.
    ``sign_flip_rng`` applies the random per-column flip used as a training
    augmentation.
    """
    n = g.num_nodes
    dtype = default_dtype()
    pe = np.zeros((n, d_lpe), dtype=np.float64)
    vals = np.zeros((n, d_lpe), dtype=np.float64)
    if n == 0:
        return (pe.astype(dtype), vals.astype(dtype)) if return_values else pe.astype(dtype)

    pos = {nid: k for k, (nid, _) in enumerate(g.nodes)}
    adj_matrix = np.zeros((n, n))
    adj = [set() for _ in range(n)]
    for src, dst, _ in g.edges:
        a, b = pos[src], pos[dst]
        adj_matrix[a, b] = adj_matrix[b, a] = 1.0
        adj[a].add(b)
        adj[b].add(a)

    for comp in _components(n, adj):
        if len(comp) == 1:
            continue
        lap = _sym_laplacian(comp, adj_matrix)
        w, v = np.linalg.eigh(lap)
        take = min(d_lpe, len(comp) - 1)
        for col in range(take):
            vec = v[:, col + 1]
            nz = np.nonzero(np.abs(vec) > 1e-12)[0]
            if nz.size and vec[nz[0]] < 0:
                vec = -vec
            if sign_flip_rng is not None and sign_flip_rng.random() < 0.5:
                vec = -vec
            pe[comp, col] = vec
            vals[comp, col] = w[col + 1]
    pe = pe.astype(dtype)
    vals = vals.astype(dtype)
    return (pe, vals) if return_values else pe


class EmbeddedGraph:
    """Numeric form of one frame: node features (text || spectral), edge features."""

    __slots__ = ("node_matrix", "edge_index", "edge_matrix")

    def __init__(self, node_matrix, edge_index, edge_matrix):
        self.node_matrix = node_matrix  # |V| x (d + d_lpe)
        self.edge_index = edge_index  # 2 x |E|, positions into node rows
        self.edge_matrix = edge_matrix  # |E| x d

    @property
    def num_nodes(self):
        return self.node_matrix.shape[0]

    @property
    def num_edges(self):
        return self.edge_index.shape[1]


def embed_graph(g: SceneGraph, emb: TextEmbedder, d_lpe=4, sign_flip_rng=None) -> EmbeddedGraph:
    """Node rows are [text embedding || laplacian position]; edge rows are predicate embeddings."""
    dtype = default_dtype()
    pe = laplacian_pe(g, d_lpe=d_lpe, sign_flip_rng=sign_flip_rng)
    if g.num_nodes:
        text = np.stack([emb.embed_text(label) for _, label in g.nodes])
    else:
        text = np.zeros((0, emb.d), dtype=dtype)
    node_matrix = np.concatenate([text, pe], axis=1).astype(dtype)
    pos = {nid: k for k, (nid, _) in enumerate(g.nodes)}
    if g.num_edges:
        edge_index = np.array([[pos[s] for s, _, _ in g.edges], [pos[d] for _, d, _ in g.edges]], dtype=np.int64)
        edge_matrix = np.stack([emb.embed_text(p) for _, _, p in g.edges]).astype(dtype)
    else:
        edge_index = np.zeros((2, 0), dtype=np.int64)
        edge_matrix = np.zeros((0, emb.d), dtype=dtype)
    return EmbeddedGraph(node_matrix, edge_index, edge_matrix)
