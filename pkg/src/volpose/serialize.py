"""On-disk model format: versioned graph JSON plus a flat parameter blob.

Layout of a model directory:
  graph.json     node list (op kinds, inputs, attrs, parameter shapes)
  params.bin     all parameters and state buffers, little-endian float32,
                 concatenated in manifest order
  manifest.json  maps each buffer id to (kind, offset, shape); offsets are
                 in elements
Extra JSON documents (detector config, run config) sit next to these.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from volpose.graph import Graph, GraphError, Node

FORMAT_VERSION = 1


def graph_to_dict(graph: Graph) -> dict:
    return {
        "version": FORMAT_VERSION,
        "dtype": graph.dtype.name,
        "loss": graph.loss_id,
        "inputs": dict(graph.inputs),
        "checkpoints": sorted(graph.checkpoint_set),
        "nodes": [
            {
                "id": n.nid,
                "op": n.op,
                "inputs": n.inputs,
                "attrs": n.attrs,
                "params": {k: list(v.shape) for k, v in n.params.items()},
                "state": {k: list(v.shape) for k, v in n.state.items()},
            }
            for n in graph.nodes
        ],
    }


def graph_from_dict(doc: dict) -> Graph:
    if doc.get("version") != FORMAT_VERSION:
        raise GraphError(f"unsupported graph format version {doc.get('version')}")
    g = Graph(np.dtype(doc["dtype"]))
    for spec in doc["nodes"]:
        node = Node(
            spec["id"],
            spec["op"],
            list(spec["inputs"]),
            {k: np.zeros(shape, dtype=g.dtype) for k, shape in spec["params"].items()},
            {k: np.zeros(shape, dtype=g.dtype) for k, shape in spec["state"].items()},
            dict(spec["attrs"]),
        )
        g.nodes.append(node)
    g.inputs = {k: int(v) for k, v in doc["inputs"].items()}
    g.loss_id = doc["loss"]
    g.set_checkpoints(set(doc.get("checkpoints", [])))
    return g


def save_model(
    model_dir: str | Path,
    graph: Graph,
    extras: dict[str, dict] | None = None,
    note: dict | None = None,
) -> None:
    """Write graph.json, params.bin, manifest.json (+ extra JSON docs).

    ``note`` (e.g. the run-config stamp) is merged into graph.json and
    manifest.json so the whole model directory is traceable.
    """
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    graph_doc = {**(note or {}), **graph_to_dict(graph)}
    (model_dir / "graph.json").write_text(json.dumps(graph_doc, sort_keys=True, indent=1))

    entries = {}
    chunks = []
    offset = 0
    buffers = [("param", graph.parameters()), ("state", graph.buffers())]
    for kind, table in buffers:
        for key in sorted(table):
            arr = np.ascontiguousarray(table[key], dtype="<f4")
            entries[key] = {"kind": kind, "offset": offset, "shape": list(arr.shape)}
            chunks.append(arr.tobytes())
            offset += arr.size
    (model_dir / "params.bin").write_bytes(b"".join(chunks))
    manifest = {
        **(note or {}),
        "version": FORMAT_VERSION,
        "dtype": "<f4",
        "total_elements": offset,
        "entries": entries,
    }
    (model_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    for name, doc in (extras or {}).items():
        (model_dir / name).write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_model(model_dir: str | Path) -> Graph:
    model_dir = Path(model_dir)
    graph = graph_from_dict(json.loads((model_dir / "graph.json").read_text()))
    manifest = json.loads((model_dir / "manifest.json").read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise GraphError(f"unsupported manifest version {manifest.get('version')}")
    blob = np.frombuffer((model_dir / "params.bin").read_bytes(), dtype="<f4")
    if blob.size != manifest["total_elements"]:
        raise GraphError(
            f"params.bin holds {blob.size} elements, manifest says {manifest['total_elements']}"
        )
    for key, entry in manifest["entries"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = blob[entry["offset"] : entry["offset"] + count].reshape(shape).astype(graph.dtype)
        nid_s, name = key.split(".", 1)
        node = graph.nodes[int(nid_s)]
        table = node.params if entry["kind"] == "param" else node.state
        if name not in table or table[name].shape != arr.shape:
            raise GraphError(f"manifest entry '{key}' does not match graph structure")
        table[name] = arr
    return graph
