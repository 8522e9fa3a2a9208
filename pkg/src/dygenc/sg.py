"""Textual scene graphs, dynamic graphs, QA samples, and their JSONL format.

All types are immutable after construction and safe to share across
workers. Canonicalization is a signature-refinement heuristic (not full
isomorphism): it is strictly invariant under node-id relabeling, and exact
whenever the refined signatures leave only small or edge-free tie groups.
A miss only makes frame compaction less aggressive.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

from .errors import EmptySequence, SchemaError

EMPTY_SENTINEL = "∅"
_TIE_ENUM_LIMIT = 720  # max orderings enumerated before falling back to collapsed ids

VALID_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SceneGraph:
    """One frame: objects as nodes, directed typed relations as edges."""

    nodes: tuple[tuple[int, str], ...]
    edges: tuple[tuple[int, int, str], ...]

    def __post_init__(self):
        nodes = tuple((int(i), str(s)) for i, s in self.nodes)
        edges = tuple((int(a), int(b), str(p)) for a, b, p in self.edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        ids = [i for i, _ in nodes]
        idset = set(ids)
        if len(ids) != len(idset):
            raise SchemaError(f"duplicate node id in {sorted(ids)}")
        for _, label in nodes:
            if not label:
                raise SchemaError("empty node label")
        for src, dst, pred in edges:
            if src == dst:
                raise SchemaError(f"self-loop on node {src}")
            if src not in idset or dst not in idset:
                raise SchemaError(f"edge ({src},{dst},{pred!r}) references missing node")
            if not pred:
                raise SchemaError("empty edge predicate")

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_edges(self):
        return len(self.edges)

    def label_of(self):
        return {i: s for i, s in self.nodes}


@dataclass(frozen=True)
class DynamicGraph:
    """Time-ordered scene graphs; ``t`` keeps original frame indices."""

    frames: tuple[tuple[SceneGraph, int], ...]

    def __post_init__(self):
        frames = tuple((g, int(t)) for g, t in self.frames)
        object.__setattr__(self, "frames", frames)
        ts = [t for _, t in frames]
        if any(t < 0 for t in ts):
            raise SchemaError("negative frame index")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise SchemaError(f"frame indices not strictly increasing: {ts}")

    def __len__(self):
        return len(self.frames)

    @property
    def graphs(self):
        return tuple(g for g, _ in self.frames)

    @property
    def indices(self):
        return tuple(t for _, t in self.frames)


@dataclass(frozen=True)
class QASample:
    dg: DynamicGraph
    question: str
    answer: str
    template_id: str
    split: str
    # cache slot for encoded features; not part of equality or serialization
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.question:
            raise SchemaError("empty question")
        if not self.answer:
            raise SchemaError("empty answer")
        if self.split not in VALID_SPLITS:
            raise SchemaError(f"unknown split {self.split!r}")


# ---------------------------------------------------------------------------
# canonical form


def _rank_compress(raw):
    """Map values to their rank among sorted distinct values (keeps order, shrinks size)."""
    ranks = {v: r for r, v in enumerate(sorted(set(raw.values())))}
    return {k: ranks[v] for k, v in raw.items()}


def _refine_colors(g: SceneGraph):
    """Iterated neighborhood refinement; returns a stable color rank per node id."""
    labels = g.label_of()
    out_inc = {i: [] for i, _ in g.nodes}
    in_inc = {i: [] for i, _ in g.nodes}
    for src, dst, pred in g.edges:
        out_inc[src].append((pred, dst))
        in_inc[dst].append((pred, src))
    raw = {}
    for i, label in g.nodes:
        sig = tuple(sorted(("o", p, labels[d]) for p, d in out_inc[i])) + tuple(
            sorted(("i", p, labels[s]) for p, s in in_inc[i])
        )
        raw[i] = (label, len(out_inc[i]) + len(in_inc[i]), sig)
    colors = _rank_compress(raw)
    while True:
        raw = {}
        for i, _ in g.nodes:
            nbr = tuple(sorted(("o", p, colors[d]) for p, d in out_inc[i])) + tuple(
                sorted(("i", p, colors[s]) for p, s in in_inc[i])
            )
            raw[i] = (colors[i], nbr)
        new = _rank_compress(raw)
        if len(set(new.values())) == len(set(colors.values())):
            return new
        colors = new


def _encode(order, g: SceneGraph):
    """Render node/edge lists under a node-id -> position mapping."""
    pos = {nid: k for k, nid in enumerate(order)}
    labels = g.label_of()
    node_part = ",".join(labels[nid] for nid in order)
    edge_part = ";".join(sorted(f"{pos[s]}>{pos[d]}:{p}" for s, d, p in g.edges))
    return f"N[{node_part}]E[{edge_part}]"


def canonical_form(g: SceneGraph) -> str:
    """Relabeling-invariant text form of a scene graph."""
    if g.num_nodes == 0:
        return EMPTY_SENTINEL
    colors = _refine_colors(g)
    groups = {}
    for nid, c in colors.items():
        groups.setdefault(c, []).append(nid)
    ordered_groups = [sorted(groups[c]) for c in sorted(groups)]

    touched = {nid for s, d, _ in g.edges for nid in (s, d)}
    n_orderings = 1
    for grp in ordered_groups:
        if len(grp) > 1 and any(nid in touched for nid in grp):
            n_orderings *= _factorial(len(grp))

    if n_orderings <= _TIE_ENUM_LIMIT:
        # exact: minimize the rendered form over all orderings consistent
        # with the color order (edge-free groups contribute identically)
        per_group = [
            list(itertools.permutations(grp)) if len(grp) > 1 and any(n in touched for n in grp) else [tuple(grp)]
            for grp in ordered_groups
        ]
        best = None
        for combo in itertools.product(*per_group):
            order = [nid for grp in combo for nid in grp]
            enc = _encode(order, g)
            if best is None or enc < best:
                best = enc
        return best

    # fallback: collapse node positions to group indices (still invariant,
    # may merge rare non-isomorphic symmetric structures)
    group_of = {}
    for gi, grp in enumerate(ordered_groups):
        for nid in grp:
            group_of[nid] = gi
    labels = g.label_of()
    node_part = ",".join(f"{labels[grp[0]]}*{len(grp)}" for grp in ordered_groups)
    edge_part = ";".join(sorted(f"{group_of[s]}>{group_of[d]}:{p}" for s, d, p in g.edges))
    return f"~N[{node_part}]E[{edge_part}]"


def _factorial(n):
    out = 1
    for k in range(2, n + 1):
        out *= k
    return out


# ---------------------------------------------------------------------------
# compaction


def compact(frames, global_unique=False) -> DynamicGraph:
    """Collapse repeated frames, keeping the original index of each run start.

    Default mode drops only *consecutive* duplicates so recurring states keep
    their later occurrences (needed for interval/duration reasoning).
    ``global_unique=True`` keeps just the first occurrence of each form.
    """
    frames = list(frames)
    if not frames:
        raise EmptySequence("compact() needs at least one frame")
    kept = []
    if global_unique:
        seen = set()
        for idx, g in enumerate(frames):
            c = canonical_form(g)
            if c not in seen:
                seen.add(c)
                kept.append((g, idx))
    else:
        prev = None
        for idx, g in enumerate(frames):
            c = canonical_form(g)
            if c != prev:
                kept.append((g, idx))
                prev = c
    return DynamicGraph(frames=tuple(kept))


# ---------------------------------------------------------------------------
# JSONL interchange


def _sample_to_obj(s: QASample):
    return {
        "frames": [
            {
                "nodes": [[i, lab] for i, lab in g.nodes],
                "edges": [[a, b, p] for a, b, p in g.edges],
                "t": t,
            }
            for g, t in s.dg.frames
        ],
        "question": s.question,
        "answer": s.answer,
        "template_id": s.template_id,
        "split": s.split,
    }


def _sample_from_obj(obj, line=None):
    try:
        frames = []
        for fr in obj["frames"]:
            g = SceneGraph(
                nodes=tuple((i, lab) for i, lab in fr["nodes"]),
                edges=tuple((a, b, p) for a, b, p in fr["edges"]),
            )
            frames.append((g, fr["t"]))
        return QASample(
            dg=DynamicGraph(frames=tuple(frames)),
            question=obj["question"],
            answer=obj["answer"],
            template_id=obj["template_id"],
            split=obj["split"],
        )
    except SchemaError as e:
        raise SchemaError(str(e), line=line) from None
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"bad sample object: {e}", line=line) from None


def save_jsonl(samples, path):
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(_sample_to_obj(s), ensure_ascii=False, sort_keys=True, separators=(",", ":")))
            f.write("\n")


def load_jsonl(path):
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e}", line=lineno) from None
            samples.append(_sample_from_obj(obj, line=lineno))
    return samples
