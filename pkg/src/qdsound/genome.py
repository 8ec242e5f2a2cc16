"""CPPN+DSP genome representation and mutation operators.

A genome has two halves. The CPPN half is a small directed acyclic
network of waveform-activation nodes; it reads a time ramp and a pitch
sinusoid and exposes a list of tap nodes whose signals feed the DSP
half. The DSP half is a directed acyclic graph of processing units
(gain, mix, delay, filter, shaper) draining into a single output node.
DSP parameter slots hold either a constant in unit position [0, 1] or a
binding to a CPPN tap.

Variation is mutation-only: weights and parameters are perturbed, and
structure grows by node insertion and new connections. There is no
crossover and no speciation. Genomes should be treated as immutable
once built; ``mutate`` deep-copies its parent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import Optional

import numpy as np

ACTIVATIONS = ("sine", "square", "sawtooth", "triangle", "identity")

DSP_KINDS = ("gain", "mix", "delay-line", "biquad-filter", "wave-shaper", "output")

BIQUAD_MODES = ("lowpass", "highpass", "bandpass")

# Parameter slots per DSP kind: name -> (scale, low, high, rate).
# Slot values are stored as unit positions in [0, 1] and mapped onto
# [low, high] at render time, linearly or log-linearly. "audio" slots
# accept per-sample CPPN drive; "control" slots collapse a bound tap to
# a single value for the whole render.
PARAM_SPECS = {
    "gain": {"amount": ("lin", 0.0, 2.0, "audio")},
    "mix": {},
    "delay-line": {"time_s": ("lin", 0.0, 0.25, "control")},
    "biquad-filter": {
        "cutoff_hz": ("log", 40.0, 7000.0, "control"),
        "q": ("log", 0.5, 6.0, "control"),
    },
    "wave-shaper": {"drive": ("log", 0.5, 8.0, "audio")},
    "output": {},
}

WEIGHT_LIMIT = 8.0
WEIGHT_SIGMA = 0.5
PARAM_SIGMA = 0.1

# Bounded retry counts for structural mutations and for the
# resample-until-something-fires loop in mutate().
_STRUCT_RETRIES = 20
_MUTATE_ROUNDS = 100


class GenomeError(ValueError):
    """A genome violates a structural invariant."""


class GenomeDecodeError(ValueError):
    """Serialized genome bytes are malformed; message names the field."""


@dataclass
class MutationRates:
    """Per-operator firing probabilities, all in [0, 1]."""

    perturb_weight: float = 0.8
    add_cppn_node: float = 0.05
    add_cppn_connection: float = 0.1
    add_dsp_node: float = 0.03
    add_dsp_connection: float = 0.05
    perturb_dsp_parameter: float = 0.3
    toggle_connection: float = 0.02


@dataclass
class CppnNode:
    id: int
    activation: str


@dataclass
class CppnConnection:
    id: int
    source: int
    target: int
    weight: float
    enabled: bool = True


@dataclass
class CppnGraph:
    """Nodes and connections keyed by innovation id.

    ``inputs`` lists the two input descriptor ids (time ramp first,
    pitch sinusoid second); input nodes pass their signal through
    untouched. ``taps`` lists output descriptor ids in tap-index order.
    """

    nodes: dict = field(default_factory=dict)
    connections: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    taps: list = field(default_factory=list)


@dataclass
class ParamSlot:
    """Constant unit value or CPPN tap binding (exactly one is set)."""

    value: Optional[float] = None
    tap: Optional[int] = None


@dataclass
class DspNode:
    id: int
    kind: str
    params: dict = field(default_factory=dict)
    mode: Optional[str] = None
    audio_tap: Optional[int] = None


@dataclass
class DspConnection:
    id: int
    source: int
    target: int


@dataclass
class DspGraph:
    nodes: dict = field(default_factory=dict)
    connections: dict = field(default_factory=dict)
    output_id: int = -1


@dataclass
class Genome:
    cppn: CppnGraph
    dsp: DspGraph
    next_innovation: int
    lineage_id: str
    parent_id: Optional[str] = None


def _lineage_id(rng: np.random.Generator) -> str:
    return f"{int(rng.integers(0, 2**63)):016x}"


def clone(g: Genome) -> Genome:
    """Field-by-field copy; much faster than copy.deepcopy on the
    mutation hot path."""
    cppn = CppnGraph(
        nodes={k: CppnNode(n.id, n.activation) for k, n in g.cppn.nodes.items()},
        connections={
            k: CppnConnection(c.id, c.source, c.target, c.weight, c.enabled)
            for k, c in g.cppn.connections.items()
        },
        inputs=list(g.cppn.inputs),
        taps=list(g.cppn.taps),
    )
    dsp = DspGraph(
        nodes={
            k: DspNode(
                n.id,
                n.kind,
                {name: ParamSlot(s.value, s.tap) for name, s in n.params.items()},
                n.mode,
                n.audio_tap,
            )
            for k, n in g.dsp.nodes.items()
        },
        connections={
            k: DspConnection(c.id, c.source, c.target)
            for k, c in g.dsp.connections.items()
        },
        output_id=g.dsp.output_id,
    )
    return Genome(cppn, dsp, g.next_innovation, g.lineage_id, g.parent_id)


def minimal_genome(rng_seed: int) -> Genome:
    """Build the smallest legal genome, deterministically for a seed.

    CPPN: time-ramp input wired straight to one identity tap, weight
    drawn uniformly from [-1, 1]. DSP: a single gain node fed by that
    tap, at unit gain, feeding the output node.
    """
    rng = np.random.default_rng(rng_seed)
    cppn = CppnGraph()
    cppn.nodes[0] = CppnNode(0, "identity")  # time ramp input
    cppn.nodes[1] = CppnNode(1, "identity")  # pitch sinusoid input
    cppn.inputs = [0, 1]
    cppn.nodes[2] = CppnNode(2, "identity")
    cppn.taps = [2]
    cppn.connections[3] = CppnConnection(3, 0, 2, float(rng.uniform(-1.0, 1.0)))

    dsp = DspGraph(output_id=5)
    dsp.nodes[4] = DspNode(4, "gain", {"amount": ParamSlot(value=0.5)}, audio_tap=0)
    dsp.nodes[5] = DspNode(5, "output", {})
    dsp.connections[6] = DspConnection(6, 4, 5)

    return Genome(cppn, dsp, next_innovation=7, lineage_id=_lineage_id(rng))


# ---------------------------------------------------------------------------
# graph utilities


def _creates_cycle(edges, source: int, target: int) -> bool:
    """Would adding source->target close a cycle over ``edges``?

    Checks reachability of ``source`` from ``target`` across all given
    (src, dst) pairs, disabled connections included, so re-enabling a
    toggled connection can never introduce a cycle.
    """
    if source == target:
        return True
    adj: dict = {}
    for s, d in edges:
        adj.setdefault(s, []).append(d)
    stack = [target]
    seen = {target}
    while stack:
        node = stack.pop()
        if node == source:
            return True
        for nxt in adj.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return False


def topological_order(node_ids, edges) -> list:
    """Kahn's algorithm with a min-heap so ties resolve by node id."""
    indeg = {n: 0 for n in node_ids}
    adj: dict = {n: [] for n in node_ids}
    for s, d in edges:
        adj[s].append(d)
        indeg[d] += 1
    ready: list = []
    for n in node_ids:
        if indeg[n] == 0:
            heappush(ready, n)
    order = []
    while ready:
        n = heappop(ready)
        order.append(n)
        for d in sorted(adj[n]):
            indeg[d] -= 1
            if indeg[d] == 0:
                heappush(ready, d)
    if len(order) != len(indeg):
        raise GenomeError("graph contains a cycle")
    return order


def _has_input_output_path(cppn: CppnGraph) -> bool:
    adj: dict = {}
    for conn in cppn.connections.values():
        if conn.enabled:
            adj.setdefault(conn.source, []).append(conn.target)
    stack = list(cppn.inputs)
    seen = set(stack)
    taps = set(cppn.taps)
    while stack:
        node = stack.pop()
        if node in taps:
            return True
        for nxt in adj.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return False


def validate(g: Genome) -> None:
    """Raise GenomeError if any structural invariant is broken."""
    cppn, dsp = g.cppn, g.dsp
    for conn in cppn.connections.values():
        if conn.source not in cppn.nodes or conn.target not in cppn.nodes:
            raise GenomeError(f"cppn connection {conn.id} references a missing node")
        if not np.isfinite(conn.weight) or abs(conn.weight) > WEIGHT_LIMIT:
            raise GenomeError(f"cppn connection {conn.id} weight out of range")
    for node in cppn.nodes.values():
        if node.activation not in ACTIVATIONS:
            raise GenomeError(f"cppn node {node.id} has unknown activation")
    topological_order(
        cppn.nodes, [(c.source, c.target) for c in cppn.connections.values()]
    )
    if not _has_input_output_path(cppn):
        raise GenomeError("no enabled path from any cppn input to any tap")

    if dsp.output_id not in dsp.nodes or dsp.nodes[dsp.output_id].kind != "output":
        raise GenomeError("dsp graph lacks its output node")
    outputs = [n for n in dsp.nodes.values() if n.kind == "output"]
    if len(outputs) != 1:
        raise GenomeError("dsp graph must have exactly one output node")
    for conn in dsp.connections.values():
        if conn.source not in dsp.nodes or conn.target not in dsp.nodes:
            raise GenomeError(f"dsp connection {conn.id} references a missing node")
    topological_order(
        dsp.nodes, [(c.source, c.target) for c in dsp.connections.values()]
    )
    # every node must drain into the output
    radj: dict = {}
    for conn in dsp.connections.values():
        radj.setdefault(conn.target, []).append(conn.source)
    stack = [dsp.output_id]
    reach = {dsp.output_id}
    while stack:
        node = stack.pop()
        for prev in radj.get(node, ()):
            if prev not in reach:
                reach.add(prev)
                stack.append(prev)
    if reach != set(dsp.nodes):
        raise GenomeError("dsp node disconnected from output")

    n_taps = len(cppn.taps)
    for node in dsp.nodes.values():
        if node.kind not in DSP_KINDS:
            raise GenomeError(f"dsp node {node.id} has unknown kind")
        spec = PARAM_SPECS[node.kind]
        if set(node.params) != set(spec):
            raise GenomeError(f"dsp node {node.id} has wrong parameter slots")
        for name, slot in node.params.items():
            if (slot.value is None) == (slot.tap is None):
                raise GenomeError(
                    f"dsp node {node.id} param {name} must be constant or bound"
                )
            if slot.value is not None and not 0.0 <= slot.value <= 1.0:
                raise GenomeError(f"dsp node {node.id} param {name} outside [0, 1]")
            if slot.tap is not None and not 0 <= slot.tap < n_taps:
                raise GenomeError(f"dsp node {node.id} param {name} binds a bad tap")
        if node.audio_tap is not None and not 0 <= node.audio_tap < n_taps:
            raise GenomeError(f"dsp node {node.id} audio tap index out of range")
        if node.kind == "biquad-filter" and node.mode not in BIQUAD_MODES:
            raise GenomeError(f"dsp node {node.id} has unknown filter mode")


# ---------------------------------------------------------------------------
# mutation operators
#
# Each operator returns the number of changes it applied (0 if it could
# not find a legal move within its retry budget). Drawing order is
# fixed so identical rng state gives identical children.


def _pick(rng: np.random.Generator, items):
    return items[int(rng.integers(len(items)))]


def _perturb_weights(g: Genome, rng: np.random.Generator) -> int:
    conns = [g.cppn.connections[k] for k in sorted(g.cppn.connections)]
    if not conns:
        return 0
    for conn in conns:
        w = conn.weight + float(rng.normal(0.0, WEIGHT_SIGMA))
        conn.weight = float(np.clip(w, -WEIGHT_LIMIT, WEIGHT_LIMIT))
    return len(conns)


def _add_cppn_node(g: Genome, rng: np.random.Generator) -> int:
    enabled = [
        g.cppn.connections[k] for k in sorted(g.cppn.connections)
        if g.cppn.connections[k].enabled
    ]
    if not enabled:
        return 0
    conn = _pick(rng, enabled)
    conn.enabled = False
    nid = g.next_innovation
    g.cppn.nodes[nid] = CppnNode(nid, _pick(rng, ACTIVATIONS))
    g.cppn.connections[nid + 1] = CppnConnection(nid + 1, conn.source, nid, 1.0)
    g.cppn.connections[nid + 2] = CppnConnection(nid + 2, nid, conn.target, conn.weight)
    g.next_innovation = nid + 3
    return 1


def _add_cppn_connection(g: Genome, rng: np.random.Generator) -> int:
    # A quarter of the time, grow a fresh tap instead of wiring two
    # existing nodes; this is how the genome gains extra control
    # signals for DSP bindings.
    if rng.random() < 0.25:
        src = _pick(rng, sorted(g.cppn.nodes))
        nid = g.next_innovation
        g.cppn.nodes[nid] = CppnNode(nid, _pick(rng, ACTIVATIONS))
        g.cppn.taps.append(nid)
        weight = float(rng.uniform(-1.0, 1.0))
        g.cppn.connections[nid + 1] = CppnConnection(nid + 1, src, nid, weight)
        g.next_innovation = nid + 2
        return 1
    ids = sorted(g.cppn.nodes)
    targets = [n for n in ids if n not in g.cppn.inputs]
    pairs = {(c.source, c.target) for c in g.cppn.connections.values()}
    edges = [(c.source, c.target) for c in g.cppn.connections.values()]
    for _ in range(_STRUCT_RETRIES):
        src = _pick(rng, ids)
        dst = _pick(rng, targets)
        if (src, dst) in pairs or _creates_cycle(edges, src, dst):
            continue
        cid = g.next_innovation
        g.cppn.connections[cid] = CppnConnection(
            cid, src, dst, float(rng.uniform(-1.0, 1.0))
        )
        g.next_innovation = cid + 1
        return 1
    return 0


def _random_dsp_node(rng: np.random.Generator, nid: int) -> DspNode:
    kind = _pick(rng, ("gain", "mix", "delay-line", "biquad-filter", "wave-shaper"))
    params = {name: ParamSlot(value=float(rng.random())) for name in PARAM_SPECS[kind]}
    mode = _pick(rng, BIQUAD_MODES) if kind == "biquad-filter" else None
    return DspNode(nid, kind, params, mode=mode)


def _add_dsp_node(g: Genome, rng: np.random.Generator) -> int:
    conns = [g.dsp.connections[k] for k in sorted(g.dsp.connections)]
    conn = _pick(rng, conns)
    nid = g.next_innovation
    g.dsp.nodes[nid] = _random_dsp_node(rng, nid)
    del g.dsp.connections[conn.id]
    g.dsp.connections[nid + 1] = DspConnection(nid + 1, conn.source, nid)
    g.dsp.connections[nid + 2] = DspConnection(nid + 2, nid, conn.target)
    g.next_innovation = nid + 3
    return 1


def _add_dsp_connection(g: Genome, rng: np.random.Generator) -> int:
    ids = sorted(g.dsp.nodes)
    sources = [n for n in ids if n != g.dsp.output_id]
    pairs = {(c.source, c.target) for c in g.dsp.connections.values()}
    edges = [(c.source, c.target) for c in g.dsp.connections.values()]
    for _ in range(_STRUCT_RETRIES):
        src = _pick(rng, sources)
        dst = _pick(rng, ids)
        if dst == src or (src, dst) in pairs or _creates_cycle(edges, src, dst):
            continue
        cid = g.next_innovation
        g.dsp.connections[cid] = DspConnection(cid, src, dst)
        g.next_innovation = cid + 1
        return 1
    return 0


def _perturb_dsp_parameter(g: Genome, rng: np.random.Generator) -> int:
    slots = []
    for nid in sorted(g.dsp.nodes):
        for name in sorted(g.dsp.nodes[nid].params):
            slots.append((nid, name))
    if not slots:
        return 0
    nid, name = _pick(rng, slots)
    slot = g.dsp.nodes[nid].params[name]
    r = rng.random()
    if r < 0.2:
        slot.tap = int(rng.integers(len(g.cppn.taps)))
        slot.value = None
    elif slot.tap is not None:
        slot.value = float(rng.random())
        slot.tap = None
    else:
        v = slot.value + float(rng.normal(0.0, PARAM_SIGMA))
        slot.value = float(np.clip(v, 0.0, 1.0))
    return 1


def _toggle_connection(g: Genome, rng: np.random.Generator) -> int:
    ids = sorted(g.cppn.connections)
    for _ in range(_STRUCT_RETRIES):
        conn = g.cppn.connections[_pick(rng, ids)]
        conn.enabled = not conn.enabled
        if _has_input_output_path(g.cppn):
            return 1
        conn.enabled = not conn.enabled
    return 0


def mutate(
    parent: Genome, rng: np.random.Generator, rates: MutationRates = None
) -> Genome:
    """Produce a mutated copy of ``parent``.

    Operators fire independently at their configured rates; rounds are
    resampled until at least one change lands. If nothing lands within
    the round budget (possible when all rates are 0 or every structural
    move is blocked), a weight perturbation is forced so the child
    always differs from its parent.
    """
    if rates is None:
        rates = MutationRates()
    child = clone(parent)
    child.lineage_id = ""
    child.parent_id = parent.lineage_id
    ops = (
        (rates.add_cppn_node, _add_cppn_node),
        (rates.add_cppn_connection, _add_cppn_connection),
        (rates.add_dsp_node, _add_dsp_node),
        (rates.add_dsp_connection, _add_dsp_connection),
        (rates.perturb_weight, _perturb_weights),
        (rates.perturb_dsp_parameter, _perturb_dsp_parameter),
        (rates.toggle_connection, _toggle_connection),
    )
    applied = 0
    for _ in range(_MUTATE_ROUNDS):
        for rate, op in ops:
            if rate > 0.0 and rng.random() < rate:
                applied += op(child, rng)
        if applied:
            break
    if not applied:
        _perturb_weights(child, rng)
    child.lineage_id = _lineage_id(rng)
    return child


# ---------------------------------------------------------------------------
# serialization

SCHEMA_VERSION = 1


def serialize(g: Genome) -> bytes:
    doc = {
        "schema": SCHEMA_VERSION,
        "lineage_id": g.lineage_id,
        "parent_id": g.parent_id,
        "next_innovation": g.next_innovation,
        "cppn": {
            "nodes": [
                {"id": n.id, "activation": n.activation}
                for n in (g.cppn.nodes[k] for k in sorted(g.cppn.nodes))
            ],
            "connections": [
                {
                    "id": c.id,
                    "source": c.source,
                    "target": c.target,
                    "weight": c.weight,
                    "enabled": c.enabled,
                }
                for c in (g.cppn.connections[k] for k in sorted(g.cppn.connections))
            ],
            "inputs": list(g.cppn.inputs),
            "taps": list(g.cppn.taps),
        },
        "dsp": {
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "mode": n.mode,
                    "audio_tap": n.audio_tap,
                    "params": {
                        name: {"value": s.value} if s.tap is None else {"tap": s.tap}
                        for name, s in sorted(n.params.items())
                    },
                }
                for n in (g.dsp.nodes[k] for k in sorted(g.dsp.nodes))
            ],
            "connections": [
                {"id": c.id, "source": c.source, "target": c.target}
                for c in (g.dsp.connections[k] for k in sorted(g.dsp.connections))
            ],
            "output_id": g.dsp.output_id,
        },
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def _need(doc: dict, key: str, ctx: str):
    if not isinstance(doc, dict) or key not in doc:
        raise GenomeDecodeError(f"missing field '{ctx}{key}'")
    return doc[key]


def deserialize(data: bytes) -> Genome:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GenomeDecodeError(f"not valid genome JSON: {exc}") from exc
    if _need(doc, "schema", "") != SCHEMA_VERSION:
        raise GenomeDecodeError("unsupported value in field 'schema'")

    cdoc = _need(doc, "cppn", "")
    cppn = CppnGraph(
        inputs=list(_need(cdoc, "inputs", "cppn.")),
        taps=list(_need(cdoc, "taps", "cppn.")),
    )
    for i, nd in enumerate(_need(cdoc, "nodes", "cppn.")):
        ctx = f"cppn.nodes[{i}]."
        node = CppnNode(
            id=int(_need(nd, "id", ctx)),
            activation=_need(nd, "activation", ctx),
        )
        cppn.nodes[node.id] = node
    for i, cd in enumerate(_need(cdoc, "connections", "cppn.")):
        ctx = f"cppn.connections[{i}]."
        conn = CppnConnection(
            id=int(_need(cd, "id", ctx)),
            source=int(_need(cd, "source", ctx)),
            target=int(_need(cd, "target", ctx)),
            weight=float(_need(cd, "weight", ctx)),
            enabled=bool(_need(cd, "enabled", ctx)),
        )
        cppn.connections[conn.id] = conn

    ddoc = _need(doc, "dsp", "")
    dsp = DspGraph(output_id=int(_need(ddoc, "output_id", "dsp.")))
    for i, nd in enumerate(_need(ddoc, "nodes", "dsp.")):
        ctx = f"dsp.nodes[{i}]."
        params = {}
        for name, sd in _need(nd, "params", ctx).items():
            if not isinstance(sd, dict) or ("value" in sd) == ("tap" in sd):
                raise GenomeDecodeError(f"malformed field '{ctx}params.{name}'")
            if "value" in sd:
                params[name] = ParamSlot(value=float(sd["value"]))
            else:
                params[name] = ParamSlot(tap=int(sd["tap"]))
        node = DspNode(
            id=int(_need(nd, "id", ctx)),
            kind=_need(nd, "kind", ctx),
            params=params,
            mode=_need(nd, "mode", ctx),
            audio_tap=_need(nd, "audio_tap", ctx),
        )
        dsp.nodes[node.id] = node
    for i, cd in enumerate(_need(ddoc, "connections", "dsp.")):
        ctx = f"dsp.connections[{i}]."
        conn = DspConnection(
            id=int(_need(cd, "id", ctx)),
            source=int(_need(cd, "source", ctx)),
            target=int(_need(cd, "target", ctx)),
        )
        dsp.connections[conn.id] = conn

    genome = Genome(
        cppn=cppn,
        dsp=dsp,
        next_innovation=int(_need(doc, "next_innovation", "")),
        lineage_id=_need(doc, "lineage_id", ""),
        parent_id=doc.get("parent_id"),
    )
    try:
        validate(genome)
    except GenomeError as exc:
        raise GenomeDecodeError(f"decoded genome invalid: {exc}") from exc
    return genome
