"""Genome construction, mutation, and serialization."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdsound import genome as G


def _structure(g):
    doc = json.loads(G.serialize(g))
    doc.pop("lineage_id")
    doc.pop("parent_id")
    return doc


def _strip_weights(doc):
    doc = json.loads(json.dumps(doc))
    for conn in doc["cppn"]["connections"]:
        conn["weight"] = None
    return doc


class TestMinimalGenome:
    def test_smallest_topology(self):
        g = G.minimal_genome(0)
        G.validate(g)
        hidden = [
            n for n in g.cppn.nodes
            if n not in g.cppn.inputs and n not in g.cppn.taps
        ]
        assert hidden == []
        gains = [n for n in g.dsp.nodes.values() if n.kind == "gain"]
        assert len(gains) == 1
        assert len(g.dsp.nodes) == 2  # gain + output
        assert len(g.cppn.connections) == 1

    def test_deterministic(self):
        assert G.serialize(G.minimal_genome(0)) == G.serialize(G.minimal_genome(0))

    def test_seeds_differ_only_in_weights(self):
        a = _structure(G.minimal_genome(0))
        b = _structure(G.minimal_genome(1))
        assert a != b
        assert _strip_weights(a) == _strip_weights(b)


class TestMutate:
    def test_perturb_only_keeps_topology(self):
        g = G.minimal_genome(0)
        rates = G.MutationRates(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        rates.perturb_weight = 1.0
        child = G.mutate(g, np.random.default_rng(1), rates)
        G.validate(child)
        assert _strip_weights(_structure(child)) == _strip_weights(_structure(g))
        pw = {c.id: c.weight for c in g.cppn.connections.values()}
        cw = {c.id: c.weight for c in child.cppn.connections.values()}
        assert any(pw[k] != cw[k] for k in pw)

    def test_add_cppn_node_only(self):
        g = G.minimal_genome(0)
        rates = G.MutationRates(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        child = G.mutate(g, np.random.default_rng(1), rates)
        G.validate(child)
        assert len(child.cppn.nodes) == len(g.cppn.nodes) + 1

    def test_parent_untouched_and_lineage_recorded(self):
        g = G.minimal_genome(0)
        before = G.serialize(g)
        child = G.mutate(g, np.random.default_rng(2))
        assert G.serialize(g) == before
        assert child.parent_id == g.lineage_id
        assert child.lineage_id != g.lineage_id

    def test_deterministic_given_rng_state(self):
        g = G.minimal_genome(3)
        a = G.mutate(g, np.random.default_rng(42))
        b = G.mutate(g, np.random.default_rng(42))
        assert G.serialize(a) == G.serialize(b)

    def test_all_zero_rates_still_changes_child(self):
        g = G.minimal_genome(0)
        rates = G.MutationRates(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        child = G.mutate(g, np.random.default_rng(5), rates)
        assert _structure(child) != _structure(g)

    def test_monotone_complexification(self):
        rng = np.random.default_rng(11)
        cur = G.minimal_genome(0)
        counts = []
        for _ in range(1000):
            cur = G.mutate(cur, rng)
            counts.append(len(cur.cppn.nodes) + len(cur.dsp.nodes))
        assert all(b >= a for a, b in zip(counts, counts[1:]))
        assert counts[-1] > counts[0]

    def test_innovation_counter_strictly_increases_on_growth(self):
        rng = np.random.default_rng(13)
        cur = G.minimal_genome(0)
        for _ in range(200):
            nxt = G.mutate(cur, rng)
            assert nxt.next_innovation >= cur.next_innovation
            grew = (
                len(nxt.cppn.nodes) + len(nxt.dsp.nodes)
                + len(nxt.cppn.connections) + len(nxt.dsp.connections)
            ) > (
                len(cur.cppn.nodes) + len(cur.dsp.nodes)
                + len(cur.cppn.connections) + len(cur.dsp.connections)
            )
            if grew:
                assert nxt.next_innovation > cur.next_innovation
            cur = nxt

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_children_always_valid(self, seed):
        rng = np.random.default_rng(seed)
        cur = G.minimal_genome(seed % 7)
        for _ in range(40):
            cur = G.mutate(cur, rng)
            G.validate(cur)

    def test_acyclic_after_many_mutations(self):
        # ten lineages of a thousand mutations each
        rng = np.random.default_rng(17)
        for seed in range(10):
            cur = G.minimal_genome(seed)
            for _ in range(1000):
                cur = G.mutate(cur, rng)
            G.validate(cur)


class TestSerialization:
    def test_minimal_roundtrip(self):
        g = G.minimal_genome(0)
        assert G.serialize(G.deserialize(G.serialize(g))) == G.serialize(g)

    def test_mutated_roundtrip(self):
        rng = np.random.default_rng(23)
        cur = G.minimal_genome(1)
        for _ in range(100):
            cur = G.mutate(cur, rng)
        back = G.deserialize(G.serialize(cur))
        assert G.serialize(back) == G.serialize(cur)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), steps=st.integers(0, 60))
    def test_fuzz_roundtrip(self, seed, steps):
        rng = np.random.default_rng(seed)
        cur = G.minimal_genome(0)
        for _ in range(steps):
            cur = G.mutate(cur, rng)
        assert G.serialize(G.deserialize(G.serialize(cur))) == G.serialize(cur)

    def test_truncated_bytes_rejected(self):
        data = G.serialize(G.minimal_genome(0))
        with pytest.raises(G.GenomeDecodeError):
            G.deserialize(data[: len(data) // 2])

    def test_missing_field_named_in_error(self):
        doc = json.loads(G.serialize(G.minimal_genome(0)))
        del doc["cppn"]["nodes"][0]["activation"]
        with pytest.raises(G.GenomeDecodeError, match="activation"):
            G.deserialize(json.dumps(doc).encode())

    def test_invalid_graph_rejected(self):
        doc = json.loads(G.serialize(G.minimal_genome(0)))
        doc["cppn"]["connections"][0]["source"] = 999
        with pytest.raises(G.GenomeDecodeError):
            G.deserialize(json.dumps(doc).encode())
