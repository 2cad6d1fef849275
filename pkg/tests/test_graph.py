import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artikit.core import JointType
from artikit.errors import ParseError, ProviderError, ShapeError, StructuralError, TransportError
from artikit.graph import (
    ConnectivityGraph,
    GraphNode,
    adjacency_to_attention_mask,
    encode_routing_embeddings,
    graph_from_object,
    parse_structure_response,
    serialize_graph,
    to_adjacency_matrix,
    validate_graph,
)
from artikit.providers import HttpChatProvider, MockProvider, infer_structure, load_prompt
from artikit.synthetic import random_object

from conftest import FIXTURES

RECORDINGS = FIXTURES / "provider" / "recordings.json"


def chain(n):
    return ConnectivityGraph([GraphNode(i, f"n{i}", "fixed" if i == 0 else "revolute") for i in range(n)],
                             [(i, i + 1) for i in range(n - 1)], 0)


def random_tree(seed, n):
    rng = np.random.default_rng(seed)
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    return ConnectivityGraph([GraphNode(i, f"l{i % 3}", "fixed") for i in range(n)], edges, 0)


# --- validation -------------------------------------------------------------------------

def test_chain_valid():
    assert validate_graph(chain(3)).ok


def test_duplicate_edge():
    g = ConnectivityGraph(chain(3).nodes, [(0, 1), (0, 1), (1, 2)], 0)
    assert "duplicate-edge" in validate_graph(g).codes()


def test_two_roots():
    g = ConnectivityGraph(chain(3).nodes, [(0, 1)], 0)
    assert "multiple-roots" in validate_graph(g).codes()


def test_cycle_and_multi_parent():
    nodes = chain(3).nodes
    assert not validate_graph(ConnectivityGraph(nodes, [(0, 1), (1, 2), (2, 1)], 0)).ok
    assert "multi-parent" in validate_graph(ConnectivityGraph(nodes, [(0, 2), (1, 2), (0, 1)], 0)).codes()


# --- adjacency & masks ----------------------------------------------------------------------

def test_chain_adjacency():
    adj = to_adjacency_matrix(chain(3))
    expected = np.zeros((3, 3), bool)
    for i, j in [(0, 1), (1, 0), (1, 2), (2, 1)]:
        expected[i, j] = True
    assert np.array_equal(adj, expected)


def test_single_node_adjacency():
    adj = to_adjacency_matrix(chain(1))
    assert adj.shape == (1, 1) and not adj[0, 0]


def test_star_adjacency():
    g = ConnectivityGraph([GraphNode(i, "x") for i in range(4)], [(0, 1), (0, 2), (0, 3)], 0)
    adj = to_adjacency_matrix(g)
    assert adj[0].tolist() == [False, True, True, True]
    for leaf in (1, 2, 3):
        assert np.flatnonzero(adj[leaf]).tolist() == [0]


def test_invalid_graph_adjacency_raises():
    with pytest.raises(StructuralError):
        to_adjacency_matrix(ConnectivityGraph(chain(3).nodes, [(0, 1)], 0))


def test_mask_hops():
    adj = to_adjacency_matrix(chain(3))
    m1 = adjacency_to_attention_mask(adj, self_loops=True, hops=1)
    assert np.array_equal(m1, np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], bool))
    m2 = adjacency_to_attention_mask(adj, self_loops=True, hops=2)
    assert m2.all()
    assert not adjacency_to_attention_mask(adj, self_loops=False, hops=1).diagonal().any()


def test_mask_non_square():
    with pytest.raises(ShapeError):
        adjacency_to_attention_mask(np.zeros((2, 3), bool))


@settings(max_examples=60)
@given(st.integers(0, 2**31), st.integers(1, 9))
def test_mask_properties(seed, n):
    adj = to_adjacency_matrix(random_tree(seed, n))
    assert np.array_equal(adj, adj.T) and not adj.diagonal().any()
    masks = [adjacency_to_attention_mask(adj, True, k) for k in range(1, n + 1)]
    for a, b in zip(masks, masks[1:]):
        assert np.all(a <= b)
    assert adjacency_to_attention_mask(adj, True, max(n - 1, 1)).all()


# --- routing embeddings ----------------------------------------------------------------------

def test_routing_layout_and_determinism():
    g = ConnectivityGraph([GraphNode(0, "body"), GraphNode(1, "door", "revolute"),
                           GraphNode(2, "door", "revolute"), GraphNode(3, "door", "prismatic")],
                          [(0, 1), (0, 2), (0, 3)], 0)
    E = encode_routing_embeddings(g, seed=0)
    assert E.shape == (4, 21)
    assert np.array_equal(E[1], E[2])
    diff = np.flatnonzero(E[1] != E[3])
    assert set(diff) <= set(range(5)) and len(diff) == 2
    assert E[0, :5].tolist() == [1, 0, 0, 0, 0]
    assert np.array_equal(E, encode_routing_embeddings(g, seed=0))
    assert not np.array_equal(E[:, 5:], encode_routing_embeddings(g, seed=1)[:, 5:])


# --- response schema ------------------------------------------------------------------------

def test_minimal_payload():
    g = parse_structure_response('{"root": 0, "nodes": [{"id": 0, "label": "body", "joint_type": "fixed"}], "edges": []}')
    assert len(g) == 1 and g.edges == ()


def test_unknown_joint_type_named():
    payload = '{"root": 0, "nodes": [{"id": 0, "label": "a", "joint_type": "hinge"}], "edges": []}'
    with pytest.raises(ParseError, match="hinge") as info:
        parse_structure_response(payload)
    assert info.value.payload == payload


def test_malformed_payload_offset():
    with pytest.raises(ParseError) as info:
        parse_structure_response('{"root": 0, "nodes": [}')
    assert info.value.offset == 22


def test_missing_root():
    with pytest.raises(ParseError, match="root"):
        parse_structure_response('{"nodes": [], "edges": []}')


def test_non_tree_payload():
    with pytest.raises(ParseError):
        parse_structure_response('{"root": 0, "nodes": [{"id": 0, "label": "a", "joint_type": "fixed"},'
                                 '{"id": 1, "label": "b", "joint_type": "fixed"}], "edges": []}')


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_serialize_round_trip(seed):
    obj, _ = random_object(seed, 6, with_meshes=False)
    g = graph_from_object(obj)
    assert parse_structure_response(serialize_graph(g)) == g
    assert parse_structure_response(serialize_graph(g, indent=2)) == g


# --- providers ------------------------------------------------------------------------------

def test_mock_cabinet():
    g = infer_structure(MockProvider(RECORDINGS), "a wooden cabinet with one door")
    assert g.labels == ["base", "door"]
    assert g.joint_types == [JointType.FIXED, JointType.REVOLUTE]
    assert g.edges == ((0, 1),)


def test_mock_microwave_text():
    g = infer_structure(MockProvider(RECORDINGS), "a microwave with one door")
    assert len(g) == 2 and g.edges == ((0, 1),) and g.nodes[1].joint_type is JointType.REVOLUTE


def test_mock_image_route():
    g = infer_structure(MockProvider(RECORDINGS), FIXTURES / "provider" / "cabinet.png")
    assert g.labels == ["base", "door"]


def test_mock_missing_root_is_parse_error():
    with pytest.raises(ParseError) as info:
        infer_structure(MockProvider(RECORDINGS), "a chair")
    assert "seat" in info.value.payload


def test_mock_unknown_condition():
    with pytest.raises(ProviderError):
        infer_structure(MockProvider(RECORDINGS), "a spaceship")


def test_mock_is_deterministic():
    a = serialize_graph(infer_structure(MockProvider(RECORDINGS), "a microwave with one door"))
    b = serialize_graph(infer_structure(MockProvider(RECORDINGS), "a microwave with one door"))
    assert a == b


class _Recorder(MockProvider):
    def __init__(self, path):
        super().__init__(path)
        self.transcripts = []

    def complete(self, messages, image=None):
        self.transcripts.append([dict(m) for m in messages])
        return super().complete(messages, image)


def test_three_step_protocol():
    rec = _Recorder(RECORDINGS)
    infer_structure(rec, "a microwave with one door")
    assert [sum(m["role"] == "user" for m in t) for t in rec.transcripts] == [1, 2, 3]
    # step 2 and 3 prompts quote the previous answer
    assert "swings open" in rec.transcripts[2][-1]["content"]
    assert "a microwave with one door" in rec.transcripts[0][0]["content"]


def test_prompt_templates_versioned():
    for k in (1, 2, 3):
        assert "{previous}" in load_prompt(k) or "{condition}" in load_prompt(k)


def test_http_provider_unreachable_is_transport_error():
    p = HttpChatProvider("http://127.0.0.1:9/v1/chat/completions", timeout=0.5, max_retries=1)
    p.backoff = 0.0
    with pytest.raises(TransportError):
        infer_structure(p, "a microwave")


def test_http_provider_round_trip(monkeypatch):
    import io
    import urllib.request

    payload = json.loads(RECORDINGS.read_text())["responses"][1]["steps"]
    calls = []

    class Reply(io.BytesIO):
        def __enter__(self):
            return self

        def __exit__(self, *a):
            return False

    def fake_urlopen(req, timeout):
        body = json.loads(req.data)
        calls.append((req.headers.get("Authorization"), body))
        text = payload[len(calls) - 1]
        return Reply(json.dumps({"choices": [{"message": {"content": text}}]}).encode())

    monkeypatch.setattr(urllib.request, "urlopen", fake_urlopen)
    monkeypatch.setenv("ARTIKIT_VLM_TOKEN", "secret")
    g = infer_structure(HttpChatProvider("http://example.invalid/chat"), "a microwave with one door")
    assert g.labels == ["body", "door"]
    assert calls[0][0] == "Bearer secret"
    assert len(calls[2][1]["messages"]) == 5
