"""Query-conditioned subgraph retrieval via prize-collecting Steiner trees.

Node prizes come from ranked cosine similarity between the query embedding
and node-label embeddings; edge costs start at a constant and shrink with
predicate similarity (floored, so costs stay positive). Small instances are
solved exactly by subtree enumeration; larger ones by moat-growing with
strong pruning plus a greedy leaf-improvement pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed import TextEmbedder
from .errors import ConfigError
from .sg import DynamicGraph, SceneGraph

DEFAULT_EDGE_COST = 0.5
MIN_EDGE_COST = 0.05
EXACT_EDGE_LIMIT = 15


@dataclass
class PrizedGraph:
    labels: list  # node position -> label
    edges: list  # (u, v, cost), undirected, deduplicated
    prizes: np.ndarray

    @property
    def num_nodes(self):
        return len(self.labels)

    def validate(self):
        if np.any(self.prizes < 0) or not np.all(np.isfinite(self.prizes)):
            raise ConfigError("prizes must be finite and non-negative")
        if any(c <= 0 for _, _, c in self.edges):
            raise ConfigError("edge costs must be positive")
        return self


@dataclass
class Solution:
    nodes: tuple
    edges: tuple  # (u, v) pairs
    objective: float


def assign_prizes(g: SceneGraph, query: str, emb: TextEmbedder, top_n=4, base_cost=DEFAULT_EDGE_COST) -> PrizedGraph:
    """Rank-based node prizes (top_n..1) from query/label similarity; edge
    costs reduced by a clipped predicate-similarity bonus."""
    qv = emb.embed_text(query)
    labels = [lab for _, lab in g.nodes]
    sims = np.array([float(qv @ emb.embed_text(lab)) for lab in labels]) if labels else np.zeros(0)
    prizes = np.zeros(len(labels))
    order = sorted(range(len(labels)), key=lambda i: (-sims[i], i))
    for rank, i in enumerate(order[:top_n]):
        prizes[i] = top_n - rank

    pos = {nid: k for k, (nid, _) in enumerate(g.nodes)}
    seen = {}
    for src, dst, pred in g.edges:
        u, v = sorted((pos[src], pos[dst]))
        bonus = max(0.0, min(1.0, float(qv @ emb.embed_text(pred))))
        cost = max(MIN_EDGE_COST, base_cost - bonus)
        key = (u, v)
        seen[key] = min(seen.get(key, np.inf), cost)
    edges = [(u, v, c) for (u, v), c in sorted(seen.items())]
    return PrizedGraph(labels=labels, edges=edges, prizes=prizes).validate()


# ---------------------------------------------------------------------------
# exact solver: enumerate all subtrees (edge subsets + singletons)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def pcst_exact(pg: PrizedGraph) -> Solution:
    """Brute force over every connected acyclic edge subset, plus singletons
    and the empty tree. Exponential in |E|; guarded by EXACT_EDGE_LIMIT."""
    if len(pg.edges) > EXACT_EDGE_LIMIT:
        raise ConfigError(f"exact search limited to {EXACT_EDGE_LIMIT} edges, got {len(pg.edges)}")
    best = Solution(nodes=(), edges=(), objective=0.0)
    for i, p in enumerate(pg.prizes):
        if p > best.objective:
            best = Solution(nodes=(i,), edges=(), objective=float(p))
    m = len(pg.edges)
    for mask in range(1, 1 << m):
        chosen = [pg.edges[j] for j in range(m) if mask >> j & 1]
        verts = sorted({u for u, _, _ in chosen} | {v for _, v, _ in chosen})
        if len(chosen) != len(verts) - 1:
            continue  # wrong edge count for a tree on these vertices
        uf = _UnionFind(pg.num_nodes)
        if not all(uf.union(u, v) for u, v, _ in chosen):
            continue  # cycle
        obj = float(pg.prizes[verts].sum() - sum(c for _, _, c in chosen))
        if obj > best.objective:
            best = Solution(nodes=tuple(verts), edges=tuple((u, v) for u, v, _ in chosen), objective=obj)
    return best


# ---------------------------------------------------------------------------
# approximate solver: moat growing (Goemans-Williamson style) + strong pruning


def _components(pg: PrizedGraph):
    adj = {i: set() for i in range(pg.num_nodes)}
    for u, v, _ in pg.edges:
        adj[u].add(v)
        adj[v].add(u)
    seen, comps = set(), []
    for s in range(pg.num_nodes):
        if s in seen:
            continue
        stack, comp = [s], []
        seen.add(s)
        while stack:
            x = stack.pop()
            comp.append(x)
            for y in adj[x]:
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        comps.append(sorted(comp))
    return comps


def _grow_forest(pg: PrizedGraph, nodes):
    """Moat growing restricted to one component; returns the merge forest."""
    nodeset = set(nodes)
    edges = [(u, v, c) for u, v, c in pg.edges if u in nodeset]
    uf = _UnionFind(pg.num_nodes)
    active = {i: True for i in nodes}
    potential = {i: float(pg.prizes[i]) for i in nodes}
    fill = [0.0] * len(edges)
    forest = []
    n_active = len(nodes)

    while n_active > 1:
        best_dt, best_kind, best_idx = np.inf, None, None
        roots = {i: uf.find(i) for i in nodes}
        for idx, (u, v, c) in enumerate(edges):
            ru, rv = roots[u], roots[v]
            if ru == rv:
                continue
            rate = int(active[ru]) + int(active[rv])
            if rate == 0:
                continue
            dt = (c - fill[idx]) / rate
            if dt < best_dt - 1e-15:
                best_dt, best_kind, best_idx = dt, "merge", idx
        for i in nodes:
            r = roots[i]
            if r == i and active[r]:
                dt = potential[r]
                if dt < best_dt - 1e-15:
                    best_dt, best_kind, best_idx = dt, "deactivate", r
        if best_kind is None:
            break
        # advance time
        for idx, (u, v, c) in enumerate(edges):
            ru, rv = roots[u], roots[v]
            if ru == rv:
                continue
            rate = int(active[ru]) + int(active[rv])
            fill[idx] += rate * best_dt
        seen_roots = set()
        for i in nodes:
            r = roots[i]
            if r not in seen_roots and active[r]:
                potential[r] -= best_dt
                seen_roots.add(r)
        if best_kind == "merge":
            u, v, c = edges[best_idx]
            ru, rv = uf.find(u), uf.find(v)
            forest.append((u, v, c))
            uf.union(ru, rv)
            merged = uf.find(ru)
            pot = potential[ru] + potential[rv]
            was_active = active[ru] or active[rv]
            for r in (ru, rv):
                active[r] = False
                potential[r] = 0.0
            active[merged] = was_active
            potential[merged] = pot
            n_active = sum(1 for i in nodes if uf.find(i) == i and active[i])
        else:
            active[best_idx] = False
            n_active -= 1
    return forest


def _strong_prune(nodes, forest_edges, prizes):
    """Best pruned subtree of a tree/forest: returns (objective, nodes, edges)."""
    adj = {i: [] for i in nodes}
    for u, v, c in forest_edges:
        adj[u].append((v, c))
        adj[v].append((u, c))

    best = (0.0, (), ())
    for i, p in ((i, prizes[i]) for i in nodes):
        if p > best[0]:
            best = (float(p), (i,), ())

    def net_from(root):
        # iterative post-order DP over the tree containing root
        parent = {root: None}
        order = [root]
        stack = [root]
        while stack:
            x = stack.pop()
            for y, c in adj[x]:
                if y not in parent:
                    parent[y] = x
                    order.append(y)
                    stack.append(y)
        net = {}
        keep = {}
        for x in reversed(order):
            total = float(prizes[x])
            kept_children = []
            for y, c in adj[x]:
                if parent.get(y) == x:
                    gain = net[y] - c
                    if gain > 0:
                        total += gain
                        kept_children.append(y)
            net[x] = total
            keep[x] = kept_children
        # collect kept subtree from root
        sel_nodes, sel_edges = [root], []
        stack = [root]
        while stack:
            x = stack.pop()
            for y in keep[x]:
                sel_nodes.append(y)
                sel_edges.append((x, y))
                stack.append(y)
        return net[root], sel_nodes, sel_edges

    tree_nodes = {i for e in forest_edges for i in e[:2]}
    for root in sorted(tree_nodes):
        obj, sn, se = net_from(root)
        if obj > best[0]:
            best = (obj, tuple(sorted(sn)), tuple(se))
    return best


def _leaf_improve(pg, nodes, edges):
    """Greedy: attach any outside node whose prize beats the connecting cost."""
    nodes = set(nodes)
    edges = list(edges)
    by_pair = {}
    for u, v, c in pg.edges:
        by_pair[(u, v)] = c
        by_pair[(v, u)] = c
    improved = True
    while improved:
        improved = False
        for (u, v), c in sorted(by_pair.items()):
            if u in nodes and v not in nodes and pg.prizes[v] - c > 0:
                nodes.add(v)
                edges.append((u, v))
                improved = True
    return nodes, edges


def _objective(pg, nodes, edges):
    by_pair = {}
    for u, v, c in pg.edges:
        by_pair[(u, v)] = c
        by_pair[(v, u)] = c
    return float(sum(pg.prizes[i] for i in nodes) - sum(by_pair[e] for e in edges))


def pcst_gw(pg: PrizedGraph) -> Solution:
    """Moat growing + strong pruning + leaf improvement, per component."""
    best = Solution(nodes=(), edges=(), objective=0.0)
    for comp in _components(pg):
        if len(comp) == 1:
            obj = float(pg.prizes[comp[0]])
            if obj > best.objective:
                best = Solution(nodes=(comp[0],), edges=(), objective=obj)
            continue
        forest = _grow_forest(pg, comp)
        obj, nodes, edges = _strong_prune(comp, forest, pg.prizes)
        if nodes:
            nodes, edges = _leaf_improve(pg, nodes, edges)
            obj = _objective(pg, nodes, edges)
        if obj > best.objective:
            best = Solution(nodes=tuple(sorted(nodes)), edges=tuple(edges), objective=obj)
    return best


def pcst_solve(pg: PrizedGraph, mode="auto") -> Solution:
    """Exact search on small instances, moat-growing approximation otherwise."""
    pg.validate()
    if mode not in ("auto", "exact", "approx"):
        raise ConfigError(f"unknown solver mode {mode!r}")
    if mode == "exact" or (mode == "auto" and len(pg.edges) <= EXACT_EDGE_LIMIT):
        return pcst_exact(pg)
    return pcst_gw(pg)


def solution_is_tree(sol: Solution) -> bool:
    """Connected + acyclic over the selected nodes (empty counts as valid)."""
    if not sol.nodes:
        return len(sol.edges) == 0
    if len(sol.edges) != len(sol.nodes) - 1:
        return False
    uf = _UnionFind(max(sol.nodes) + 1)
    return all(uf.union(u, v) for u, v in sol.edges)


# ---------------------------------------------------------------------------
# frame-level retrieval


def score_frames(dg: DynamicGraph, query: str, emb: TextEmbedder, top_n=4, base_cost=DEFAULT_EDGE_COST, mode="auto"):
    """Per-frame solved subgraph objectives for a query."""
    return [
        pcst_solve(assign_prizes(g, query, emb, top_n=top_n, base_cost=base_cost), mode=mode).objective
        for g in dg.graphs
    ]


def retrieve_frames(dg: DynamicGraph, query: str, emb: TextEmbedder, budget_frames: int,
                    top_n=4, base_cost=DEFAULT_EDGE_COST, mode="auto") -> DynamicGraph:
    """Keep the ``budget_frames`` highest-scoring frames in original order."""
    if budget_frames < 1:
        raise ConfigError("budget must be at least one frame")
    if budget_frames >= len(dg):
        return dg
    scores = score_frames(dg, query, emb, top_n=top_n, base_cost=base_cost, mode=mode)
    ranked = sorted(range(len(dg)), key=lambda i: (-scores[i], i))
    keep = sorted(ranked[:budget_frames])
    return DynamicGraph(frames=tuple(dg.frames[i] for i in keep))
