import json

import numpy as np
import pytest

from fixquant import toys
from fixquant.errors import GraphError, ModelFormatError, ShapeError
from fixquant.graph_ir import GraphModel, Node, load_model, model_paths, save_model


def tiny_graph():
    return GraphModel(
        [
            Node("in", "input"),
            Node("fc", "linear", ["in"], weights={"weight": [[1.0, 2.0]], "bias": [0.5]}),
            Node("act", "relu", ["fc"]),
            Node("out", "output", ["act"]),
        ],
        name="tiny",
    )


class TestNodeValidation:
    def test_unknown_kind(self):
        with pytest.raises(GraphError):
            Node("n", "softmax", ["in"])

    def test_weighted_kind_requires_tensors(self):
        with pytest.raises(GraphError):
            Node("fc", "linear", ["in"])

    def test_plain_kind_rejects_tensors(self):
        with pytest.raises(GraphError):
            Node("r", "relu", ["in"], weights={"weight": [1.0]})

    def test_required_tensor_names(self):
        with pytest.raises(GraphError):
            Node("fc", "linear", ["in"], weights={"weight": [[1.0]]})  # no bias

    def test_weights_snapped_to_float32_values(self):
        n = Node("fc", "linear", ["in"], weights={"weight": [[0.1]], "bias": [0.0]})
        assert n.weights["weight"].dtype == np.float64
        assert n.weights["weight"][0, 0] == float(np.float32(0.1))

    def test_set_weight_rejects_new_names(self):
        n = Node("fc", "linear", ["in"], weights={"weight": [[1.0]], "bias": [0.0]})
        with pytest.raises(GraphError):
            n.set_weight("scale", [1.0])


class TestGraphValidation:
    def test_duplicate_ids(self):
        with pytest.raises(GraphError):
            GraphModel([Node("a", "input"), Node("a", "input"), Node("o", "output", ["a"])])

    def test_needs_input_and_output(self):
        with pytest.raises(GraphError):
            GraphModel([Node("a", "input")])

    def test_unknown_producer(self):
        with pytest.raises(GraphError):
            GraphModel([Node("a", "input"), Node("o", "output", ["ghost"])])

    def test_cycle_detected(self):
        with pytest.raises(GraphError):
            GraphModel(
                [
                    Node("a", "input"),
                    Node("x", "add", ["a", "y"]),
                    Node("y", "relu", ["x"]),
                    Node("o", "output", ["y"]),
                ]
            )

    def test_output_cannot_feed_nodes(self):
        with pytest.raises(GraphError):
            GraphModel(
                [
                    Node("a", "input"),
                    Node("o", "output", ["a"]),
                    Node("r", "relu", ["o"]),
                    Node("o2", "output", ["r"]),
                ]
            )

    def test_topo_order_respects_edges(self):
        g = toys.three_group_model(seed=0)
        order = g.topo_order()
        pos = {nid: i for i, nid in enumerate(order)}
        for node in g.nodes.values():
            for src in node.inputs:
                assert pos[src] < pos[node.id]


def test_forward_computes_composition():
    g = tiny_graph()
    y = g.forward(np.array([[1.0, 1.0], [-2.0, 0.0]]))
    assert np.allclose(y, [[3.5], [0.0]])


def test_forward_dict_feed_and_missing_input():
    g = tiny_graph()
    y = g.forward({"in": np.array([[1.0, 1.0]])})
    assert np.allclose(y, [[3.5]])
    with pytest.raises(ShapeError):
        g.forward({"wrong": np.zeros((1, 2))})


def test_evaluate_all_returns_every_node():
    g = tiny_graph()
    values = g.evaluate_all(np.array([[1.0, 1.0]]))
    assert set(values) == {"in", "fc", "act", "out"}
    assert np.allclose(values["fc"], [[3.5]])


def test_copy_is_deep():
    g = tiny_graph()
    g2 = g.copy()
    g2.nodes["fc"].set_weight("bias", [9.0])
    g2.nodes["fc"].attrs["tag"] = 1
    assert g.nodes["fc"].weights["bias"][0] == 0.5
    assert "tag" not in g.nodes["fc"].attrs


class TestSaveLoad:
    def test_round_trip_bit_identical(self, tmp_path):
        g = toys.conv_bn_relu_conv(seed=7)
        prefix = tmp_path / "m"
        save_model(g, prefix)
        g2 = load_model(prefix)
        x = np.random.default_rng(0).normal(size=(2, 3, 6, 6))
        assert np.array_equal(g.forward(x), g2.forward(x))
        for nid, node in g.nodes.items():
            for name, arr in node.weights.items():
                assert np.array_equal(arr, g2.nodes[nid].weights[name])

    def test_offsets_are_in_float_elements(self, tmp_path):
        g = tiny_graph()
        save_model(g, tmp_path / "m")
        manifest = json.loads((tmp_path / "m.model.json").read_text())
        fc = next(n for n in manifest["nodes"] if n["id"] == "fc")
        assert fc["tensors"]["weight"]["offset"] == 0
        assert fc["tensors"]["bias"]["offset"] == 2  # elements, not bytes
        blob = (tmp_path / "m.weights.bin").read_bytes()
        assert len(blob) == 3 * 4  # three float32 values

    def test_wrong_format_tag(self, tmp_path):
        p = tmp_path / "bad.model.json"
        p.write_text(json.dumps({"format": "something-else", "nodes": []}))
        (tmp_path / "bad.weights.bin").write_bytes(b"")
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "bad")

    def test_truncated_blob(self, tmp_path):
        g = tiny_graph()
        save_model(g, tmp_path / "m")
        blob = (tmp_path / "m.weights.bin").read_bytes()
        (tmp_path / "m.weights.bin").write_bytes(blob[:-4])
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "m")

    def test_oversized_blob(self, tmp_path):
        g = tiny_graph()
        save_model(g, tmp_path / "m")
        blob = (tmp_path / "m.weights.bin").read_bytes()
        (tmp_path / "m.weights.bin").write_bytes(blob + b"\x00" * 4)
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "m")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "nope")

    def test_model_paths_derivation(self):
        m, b = model_paths("/tmp/x/net")
        assert str(m).endswith("net.model.json")
        assert str(b).endswith("net.weights.bin")


def test_toy_models_run():
    x = np.random.default_rng(1).normal(size=(2, 3, 6, 6))
    assert toys.conv_bn_relu_conv(seed=0).forward(x).shape[0] == 2
    mlp = toys.mlp([4, 8, 3], seed=0)
    assert mlp.forward(np.zeros((5, 4))).shape == (5, 3)
    dw = toys.depthwise_net(seed=0)
    y = dw.forward(np.random.default_rng(2).normal(size=(1, 3, 6, 6)))
    assert np.isfinite(y).all()
