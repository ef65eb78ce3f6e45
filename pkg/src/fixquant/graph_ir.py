"""Dataflow graph IR and its on-disk format.

A model is a list of nodes in any topological-compatible order. Each node
has a unique id, a kind from the supported set, input edges naming producer
nodes, kind-specific attributes, and (for linear / conv2d / batchnorm) named
weight tensors. A node produces exactly one tensor, named by the node id.

On disk a model is two files:

* ``<prefix>.model.json`` - the manifest: nodes, attributes, and for every
  weight tensor its shape and offset (in float32 elements) into the blob.
* ``<prefix>.weights.bin`` - all weight tensors, concatenated contiguously
  in manifest order, raw little-endian float32.

Weights are float32-valued in memory too (stored as float64 for
arithmetic), so save followed by load is an identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import GraphError, ModelFormatError, ShapeError

__all__ = ["Node", "GraphModel", "load_model", "save_model", "model_paths"]

NODE_KINDS = {
    "linear",
    "conv2d",
    "batchnorm",
    "relu",
    "relu6",
    "add",
    "concat",
    "maxpool",
    "avgpool",
    "input",
    "output",
}
WEIGHTED_KINDS = {"linear", "conv2d", "batchnorm"}
MAC_KINDS = {"linear", "conv2d"}

_REQUIRED_WEIGHTS = {
    "linear": ("weight", "bias"),
    "conv2d": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "var"),
}

MANIFEST_FORMAT = "fixquant-model-v1"


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise GraphError(f"node {self.id!r} has unsupported kind {self.kind!r}")
        if bool(self.weights) != (self.kind in WEIGHTED_KINDS):
            state = "must" if self.kind in WEIGHTED_KINDS else "must not"
            raise GraphError(f"{self.kind} node {self.id!r} {state} carry weight tensors")
        for name in _REQUIRED_WEIGHTS.get(self.kind, ()):
            if name not in self.weights:
                raise GraphError(f"{self.kind} node {self.id!r} is missing tensor {name!r}")
        self.weights = {k: tc.f32(v) for k, v in self.weights.items()}

    def set_weight(self, name: str, value) -> None:
        if name not in self.weights:
            raise GraphError(f"node {self.id!r} has no tensor {name!r}")
        self.weights[name] = tc.f32(value)


class GraphModel:
    """An ordered, validated collection of nodes."""

    def __init__(self, nodes: list[Node], name: str = "model"):
        self.name = name
        self.nodes: dict[str, Node] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise GraphError(f"duplicate node id {node.id!r}")
            self.nodes[node.id] = node
        self._validate()

    # -- structure -----------------------------------------------------

    def _validate(self) -> None:
        inputs = [n for n in self.nodes.values() if n.kind == "input"]
        outputs = [n for n in self.nodes.values() if n.kind == "output"]
        if not inputs or not outputs:
            raise GraphError("graph needs at least one input node and one output node")
        for node in self.nodes.values():
            if node.kind == "input":
                if node.inputs:
                    raise GraphError(f"input node {node.id!r} cannot have inputs")
                continue
            if not node.inputs:
                raise GraphError(f"node {node.id!r} has no inputs")
            if node.kind == "output" and len(node.inputs) != 1:
                raise GraphError(f"output node {node.id!r} must have exactly one input")
            for src in node.inputs:
                if src not in self.nodes:
                    raise GraphError(f"node {node.id!r} references unknown producer {src!r}")
                if self.nodes[src].kind == "output":
                    raise GraphError(f"output node {src!r} cannot feed node {node.id!r}")
        self.topo_order()  # raises on cycles

    def topo_order(self) -> list[str]:
        """Kahn's algorithm, insertion order among ready nodes (deterministic)."""
        order_hint = {nid: i for i, nid in enumerate(self.nodes)}
        pending = {nid: len(n.inputs) for nid, n in self.nodes.items()}
        ready = sorted((nid for nid, d in pending.items() if d == 0), key=order_hint.get)
        consumers = self.consumers()
        out: list[str] = []
        while ready:
            nid = ready.pop(0)
            out.append(nid)
            next_ready = []
            for cid in consumers.get(nid, ()):
                pending[cid] -= self.nodes[cid].inputs.count(nid)
                if pending[cid] == 0:
                    next_ready.append(cid)
            ready = sorted(ready + next_ready, key=order_hint.get)
        if len(out) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return out

    def consumers(self) -> dict[str, list[str]]:
        cons: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for src in set(node.inputs):
                cons[src].append(node.id)
        return cons

    @property
    def input_ids(self) -> list[str]:
        return [n.id for n in self.nodes.values() if n.kind == "input"]

    @property
    def output_ids(self) -> list[str]:
        return [n.id for n in self.nodes.values() if n.kind == "output"]

    def copy(self) -> "GraphModel":
        nodes = [
            Node(
                id=n.id,
                kind=n.kind,
                inputs=list(n.inputs),
                attrs=json.loads(json.dumps(n.attrs)),
                weights={k: v.copy() for k, v in n.weights.items()},
            )
            for n in self.nodes.values()
        ]
        return GraphModel(nodes, name=self.name)

    # -- evaluation ------------------------------------------------------

    def forward(self, inputs):
        """Run the graph in float. Returns one array, or a dict for multi-output."""
        values = self.evaluate_all(inputs)
        outs = {oid: values[oid] for oid in self.output_ids}
        if len(outs) == 1:
            return next(iter(outs.values()))
        return outs

    def evaluate_all(self, inputs) -> dict[str, np.ndarray]:
        """Run the graph and return every node's output tensor, keyed by node id."""
        feed = self._normalize_inputs(inputs)
        values: dict[str, np.ndarray] = {}
        for nid in self.topo_order():
            node = self.nodes[nid]
            if node.kind == "input":
                values[nid] = feed[nid]
            else:
                values[nid] = eval_node(node, [values[s] for s in node.inputs])
        return values

    def _normalize_inputs(self, inputs) -> dict[str, np.ndarray]:
        ids = self.input_ids
        if isinstance(inputs, dict):
            missing = set(ids) - set(inputs)
            if missing:
                raise ShapeError(f"missing values for inputs {sorted(missing)}")
            return {k: np.asarray(inputs[k], dtype=np.float64) for k in ids}
        if len(ids) != 1:
            raise ShapeError(f"graph has inputs {ids}; pass a dict of input values")
        return {ids[0]: np.asarray(inputs, dtype=np.float64)}


def eval_node(node: Node, inputs: list[np.ndarray]) -> np.ndarray:
    """Apply one node's kernel to already-computed input tensors."""
    return eval_kind(node.kind, node.attrs, node.weights, inputs)


def eval_kind(k: str, attrs: dict, w: dict, inputs: list[np.ndarray]) -> np.ndarray:
    """Kernel dispatch on raw fields (lets callers substitute weights)."""
    if k == "linear":
        return tc.linear(inputs[0], w["weight"], w["bias"])
    if k == "conv2d":
        return tc.conv2d(
            inputs[0],
            w["weight"],
            w["bias"],
            stride=attrs.get("stride", 1),
            padding=attrs.get("padding", 0),
            groups=attrs.get("groups", 1),
        )
    if k == "batchnorm":
        return tc.batchnorm(
            inputs[0], w["gamma"], w["beta"], w["mean"], w["var"], eps=attrs.get("eps", 1e-5)
        )
    if k == "output":
        return inputs[0]
    return tc.elementwise(k, inputs, **attrs)


# ---------------------------------------------------------------------------
# On-disk format


def model_paths(prefix) -> tuple[Path, Path]:
    """Manifest and blob paths for a path prefix."""
    return Path(f"{prefix}.model.json"), Path(f"{prefix}.weights.bin")


def save_model(model: GraphModel, manifest_path, blob_path=None) -> None:
    """Write the manifest + blob pair; a single argument is taken as a prefix."""
    if blob_path is None:
        manifest_path, blob_path = model_paths(manifest_path)
    manifest_nodes = []
    chunks: list[np.ndarray] = []
    offset = 0
    for node in model.nodes.values():
        tensors = {}
        for name, arr in node.weights.items():
            tensors[name] = {"shape": list(arr.shape), "offset": offset}
            chunks.append(arr.astype("<f4").ravel())
            offset += arr.size
        entry = {"id": node.id, "kind": node.kind, "inputs": node.inputs, "attrs": node.attrs}
        if tensors:
            entry["tensors"] = tensors
        manifest_nodes.append(entry)
    manifest = {"format": MANIFEST_FORMAT, "name": model.name, "nodes": manifest_nodes}
    Path(manifest_path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    blob = np.concatenate(chunks) if chunks else np.empty(0, dtype="<f4")
    Path(blob_path).write_bytes(blob.tobytes())


def load_model(manifest_path, blob_path=None) -> GraphModel:
    """Inverse of :func:`save_model`; a single argument is taken as a prefix."""
    if blob_path is None:
        manifest_path, blob_path = model_paths(manifest_path)
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"cannot read model manifest {manifest_path}: {e}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != MANIFEST_FORMAT:
        raise ModelFormatError(f"{manifest_path} is not a {MANIFEST_FORMAT} manifest")
    if not isinstance(manifest.get("nodes"), list):
        raise ModelFormatError("manifest has no node list")
    try:
        blob = np.frombuffer(Path(blob_path).read_bytes(), dtype="<f4")
    except OSError as e:
        raise ModelFormatError(f"cannot read weight blob {blob_path}: {e}") from None

    nodes = []
    expected = 0
    for entry in manifest["nodes"]:
        try:
            nid, kind = entry["id"], entry["kind"]
            inputs = list(entry.get("inputs", []))
            attrs = dict(entry.get("attrs", {}))
            tspecs = dict(entry.get("tensors", {}))
        except (TypeError, KeyError) as e:
            raise ModelFormatError(f"malformed node entry {entry!r}: {e}") from None
        weights = {}
        for name, spec in tspecs.items():
            shape = tuple(int(d) for d in spec["shape"])
            off = int(spec["offset"])
            size = int(np.prod(shape)) if shape else 1
            if off < 0 or off + size > blob.size:
                raise ModelFormatError(
                    f"tensor {nid}.{name} (offset {off}, size {size}) exceeds blob "
                    f"of {blob.size} floats"
                )
            weights[name] = blob[off : off + size].reshape(shape).astype(np.float64)
            expected += size
        try:
            nodes.append(Node(id=nid, kind=kind, inputs=inputs, attrs=attrs, weights=weights))
        except GraphError as e:
            raise ModelFormatError(str(e)) from None
    if expected != blob.size:
        raise ModelFormatError(
            f"weight blob holds {blob.size} floats but the manifest declares {expected}"
        )
    try:
        return GraphModel(nodes, name=str(manifest.get("name", "model")))
    except GraphError as e:
        raise ModelFormatError(str(e)) from None
