"""Scene-graph domain model: canonicalization, compaction, JSONL round-trips."""

import numpy as np
import pytest

from dygenc.errors import EmptySequence, SchemaError
from dygenc.sg import (
    EMPTY_SENTINEL,
    DynamicGraph,
    QASample,
    SceneGraph,
    canonical_form,
    compact,
    load_jsonl,
    save_jsonl,
)

LABELS = ["person", "cup", "table", "door", "book", "chair"]
PREDS = ["holds", "on", "near", "opens", "held"]


def random_graph(rng, max_nodes=12):
    n = int(rng.integers(1, max_nodes + 1))
    nodes = tuple((i, LABELS[rng.integers(0, len(LABELS))]) for i in range(n))
    edges = []
    for _ in range(int(rng.integers(0, 2 * n))):
        a, b = rng.integers(0, n, size=2)
        if a != b:
            edges.append((int(a), int(b), PREDS[rng.integers(0, len(PREDS))]))
    return SceneGraph(nodes=nodes, edges=tuple(edges))


def permute_ids(g, rng):
    perm = rng.permutation(g.num_nodes)
    mapping = {old: int(perm[k]) for k, (old, _) in enumerate(g.nodes)}
    nodes = tuple(sorted((mapping[i], lab) for i, lab in g.nodes))
    edges = tuple((mapping[a], mapping[b], p) for a, b, p in g.edges)
    return SceneGraph(nodes=nodes, edges=edges)


class TestSceneGraphInvariants:
    def test_duplicate_node_id_rejected(self):
        with pytest.raises(SchemaError):
            SceneGraph(nodes=((0, "a"), (0, "b")), edges=())

    def test_dangling_edge_rejected(self):
        with pytest.raises(SchemaError):
            SceneGraph(nodes=((0, "a"),), edges=((0, 1, "x"),))

    def test_self_loop_rejected(self):
        with pytest.raises(SchemaError):
            SceneGraph(nodes=((0, "a"),), edges=((0, 0, "x"),))

    def test_empty_label_rejected(self):
        with pytest.raises(SchemaError):
            SceneGraph(nodes=((0, ""),), edges=())

    def test_non_increasing_t_rejected(self):
        g = SceneGraph(nodes=((0, "a"),), edges=())
        with pytest.raises(SchemaError):
            DynamicGraph(frames=((g, 3), (g, 3)))


class TestCanonicalForm:
    def test_relabeling_symmetry(self):
        g1 = SceneGraph(nodes=((0, "person"), (1, "cup")), edges=((0, 1, "holds"),))
        g2 = SceneGraph(nodes=((0, "cup"), (1, "person")), edges=((1, 0, "holds"),))
        assert canonical_form(g1) == canonical_form(g2)

    def test_empty_graph_sentinel(self):
        assert canonical_form(SceneGraph(nodes=(), edges=())) == EMPTY_SENTINEL

    def test_predicate_difference_detected(self):
        base = ((0, "person"), (1, "cup"))
        a = SceneGraph(nodes=base, edges=((0, 1, "holds"),))
        b = SceneGraph(nodes=base, edges=((0, 1, "held"),))
        assert canonical_form(a) != canonical_form(b)

    def test_direction_matters(self):
        base = ((0, "person"), (1, "person"))
        a = SceneGraph(nodes=base, edges=((0, 1, "near"),))
        b = SceneGraph(nodes=base, edges=((1, 0, "near"),))
        # symmetric labels: reversing the edge relabels to the same graph
        assert canonical_form(a) == canonical_form(b)
        c = SceneGraph(nodes=((0, "person"), (1, "cup")), edges=((0, 1, "near"),))
        d = SceneGraph(nodes=((0, "person"), (1, "cup")), edges=((1, 0, "near"),))
        assert canonical_form(c) != canonical_form(d)

    def test_invariance_under_permutation_1000_graphs(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            g = random_graph(rng)
            assert canonical_form(g) == canonical_form(permute_ids(g, rng))

    def test_isolated_symmetric_nodes_fast(self):
        nodes = tuple((i, "cup") for i in range(12))
        g = SceneGraph(nodes=nodes, edges=())
        assert canonical_form(g) == canonical_form(SceneGraph(nodes=tuple(reversed(nodes)), edges=()))


class TestCompact:
    def mk(self, label):
        return SceneGraph(nodes=((0, label),), edges=())

    def test_run_collapse_keeps_first_index(self):
        a, b = self.mk("a"), self.mk("b")
        dg = compact([a, a, b, a])
        assert dg.indices == (0, 2, 3)
        assert [canonical_form(g) for g in dg.graphs] == [canonical_form(x) for x in (a, b, a)]

    def test_single_frame_identity(self):
        dg = compact([self.mk("a")])
        assert dg.indices == (0,)

    def test_long_run_collapses_to_one(self):
        dg = compact([self.mk("a")] * 30)
        assert dg.indices == (0,) and len(dg) == 1

    def test_empty_rejected(self):
        with pytest.raises(EmptySequence):
            compact([])

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        frames = []
        for _ in range(20):
            g = random_graph(rng, max_nodes=4)
            frames.extend([g] * int(rng.integers(1, 4)))
        once = compact(frames)
        twice = compact(list(once.graphs))
        assert len(twice) == len(once)
        assert twice.indices == tuple(range(len(once)))

    def test_global_dedup_drops_recurrences(self):
        a, b = self.mk("a"), self.mk("b")
        dg = compact([a, b, a, b], global_unique=True)
        assert dg.indices == (0, 1)


class TestJsonl:
    def sample(self, rng, split="train"):
        n_frames = int(rng.integers(1, 4))
        frames = []
        t = 0
        for _ in range(n_frames):
            frames.append((random_graph(rng, max_nodes=5), t))
            t += int(rng.integers(1, 4))
        return QASample(
            dg=DynamicGraph(frames=tuple(frames)),
            question="what happened?",
            answer="something",
            template_id="t0",
            split=split,
        )

    def test_round_trip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(11)
        samples = [self.sample(rng) for _ in range(100)]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_jsonl(samples, p1)
        save_jsonl(load_jsonl(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_missing_answer_reports_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        rng = np.random.default_rng(1)
        save_jsonl([self.sample(rng), self.sample(rng)], p)
        lines = p.read_text().splitlines()
        obj = lines[1].replace('"answer":"something",', "")
        p.write_text(lines[0] + "\n" + obj + "\n")
        with pytest.raises(SchemaError) as ei:
            load_jsonl(p)
        assert ei.value.line == 2

    def test_duplicate_node_id_is_schema_error(self, tmp_path):
        p = tmp_path / "dup.jsonl"
        rng = np.random.default_rng(2)
        save_jsonl([self.sample(rng)], p)
        txt = p.read_text()
        txt = txt.replace('"nodes":[[0,', '"nodes":[[0,"x"],[0,', 1)
        p.write_text(txt)
        with pytest.raises(SchemaError):
            load_jsonl(p)

    def test_invalid_json_reports_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("{not json}\n")
        with pytest.raises(SchemaError) as ei:
            load_jsonl(p)
        assert ei.value.line == 1

    def test_empty_file_gives_empty_list(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert load_jsonl(p) == []
