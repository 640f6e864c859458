"""Explicit computation graph with plain and checkpointed reverse-mode autodiff.

A :class:`Graph` is a topologically ordered list of nodes. Running
``forward`` stores node values; ``backward_plain`` walks the graph in reverse
and returns gradients for every learnable parameter. With ``discard=True``
the forward pass frees every value that is neither a checkpoint nor otherwise
needed later, and ``backward_checkpointed`` recomputes the freed values
segment by segment while backpropagating. Because every primitive has a fixed
reduction order, the checkpointed gradients are bitwise identical to the
plain ones.

Values that stay live during a discarding forward pass:
  * members of ``checkpoint_set``,
  * input and loss nodes (implicit checkpoints),
  * direct inputs of any ``channel_concat`` node, which must survive across
    the skip connection until the consuming segment is recomputed.

The memory meter counts node value buffers only (not parameters, not
gradients): those buffers are the quantity checkpointing manipulates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from volpose import ops
from volpose.ops import ShapeMismatch


class GraphError(RuntimeError):
    pass


class NonFiniteValue(GraphError):
    """A node produced a non-finite value; carries the first offending node."""

    def __init__(self, node_id: int, op: str, detail: str = ""):
        self.node_id = node_id
        self.op = op
        super().__init__(f"non-finite value at node {node_id} ({op}){detail}")


class MissingValue(GraphError):
    pass


class CheckpointInvariantError(GraphError):
    pass


class MemoryCapExceeded(GraphError):
    pass


@dataclass
class MemMeter:
    """Tracks live and peak bytes of node value buffers."""

    live: int = 0
    peak: int = 0
    cap: int | None = None

    def alloc(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live
        if self.cap is not None and self.live > self.cap:
            raise MemoryCapExceeded(
                f"live node bytes {self.live} exceed simulated cap {self.cap}"
            )

    def free(self, nbytes: int) -> None:
        self.live -= nbytes

    def reset(self) -> None:
        self.live = 0
        self.peak = 0


@dataclass
class Node:
    nid: int
    op: str
    inputs: list[int]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    state: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    value: np.ndarray | None = None
    is_checkpoint: bool = False


OPS = (
    "input",
    "conv3d",
    "deconv3d",
    "max_pool3d",
    "batch_norm",
    "relu",
    "channel_concat",
    "add",
    "l2_loss",
)


def primitive_forward(node: Node, input_values: list[np.ndarray]) -> np.ndarray:
    """Evaluate one node from its input values. Pure and deterministic."""
    op = node.op
    if op == "conv3d":
        return ops.conv3d_forward(input_values[0], node.params["weight"], node.params["bias"])
    if op == "deconv3d":
        return ops.deconv3d_forward(input_values[0], node.params["weight"], node.params["bias"])
    if op == "max_pool3d":
        return ops.max_pool3d_forward(input_values[0])
    if op == "batch_norm":
        if node.attrs.get("use_running", False):
            return ops.batch_norm_forward(
                input_values[0],
                node.params["gamma"],
                node.params["beta"],
                node.attrs.get("eps", 1e-5),
                node.state["running_mean"],
                node.state["running_var"],
            )
        return ops.batch_norm_forward(
            input_values[0], node.params["gamma"], node.params["beta"], node.attrs.get("eps", 1e-5)
        )
    if op == "relu":
        return ops.relu_forward(input_values[0])
    if op == "channel_concat":
        return ops.concat_forward(input_values)
    if op == "add":
        return ops.add_forward(input_values[0], input_values[1])
    if op == "l2_loss":
        return ops.l2_loss_forward(input_values[0], input_values[1])
    raise GraphError(f"unknown op '{op}' at node {node.nid}")


def _primitive_backward(
    node: Node, input_values: list[np.ndarray], grad_out: np.ndarray
) -> tuple[list[np.ndarray | None], dict[str, np.ndarray]]:
    op = node.op
    if op == "conv3d":
        gx, gw, gb = ops.conv3d_backward(input_values[0], node.params["weight"], grad_out)
        return [gx], {"weight": gw, "bias": gb}
    if op == "deconv3d":
        gx, gw, gb = ops.deconv3d_backward(input_values[0], node.params["weight"], grad_out)
        return [gx], {"weight": gw, "bias": gb}
    if op == "max_pool3d":
        return [ops.max_pool3d_backward(input_values[0], grad_out)], {}
    if op == "batch_norm":
        if node.attrs.get("use_running", False):
            gx, gg, gb = ops.batch_norm_backward(
                input_values[0],
                node.params["gamma"],
                grad_out,
                node.attrs.get("eps", 1e-5),
                node.state["running_mean"],
                node.state["running_var"],
            )
        else:
            gx, gg, gb = ops.batch_norm_backward(
                input_values[0], node.params["gamma"], grad_out, node.attrs.get("eps", 1e-5)
            )
        return [gx], {"gamma": gg, "beta": gb}
    if op == "relu":
        return [ops.relu_backward(input_values[0], grad_out)], {}
    if op == "channel_concat":
        return ops.concat_backward([v.shape[0] for v in input_values], grad_out), {}
    if op == "add":
        return [grad_out, grad_out], {}
    if op == "l2_loss":
        gp, gt = ops.l2_loss_backward(input_values[0], input_values[1], grad_out)
        return [gp, gt], {}
    raise GraphError(f"cannot backprop through op '{op}' at node {node.nid}")


class Graph:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.loss_id: int | None = None
        self.checkpoint_set: set[int] = set()
        self.meter = MemMeter()
        self._last_forward: dict | None = None

    # -- construction -------------------------------------------------------

    def add_input(self, name: str) -> int:
        nid = self.add("input", [], attrs={"name": name})
        self.inputs[name] = nid
        return nid

    def add(self, op: str, inputs: list[int], params=None, state=None, attrs=None) -> int:
        if op not in OPS:
            raise GraphError(f"unknown op '{op}'")
        nid = len(self.nodes)
        for i in inputs:
            if not (0 <= i < nid):
                raise GraphError(f"node {nid}: input {i} does not precede it topologically")
        self.nodes.append(
            Node(nid, op, list(inputs), dict(params or {}), dict(state or {}), dict(attrs or {}))
        )
        return nid

    def set_loss(self, nid: int) -> None:
        self.loss_id = nid

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def value(self, nid: int) -> np.ndarray:
        v = self.nodes[nid].value
        if v is None:
            raise MissingValue(f"node {nid} has no stored value")
        return v

    def consumers(self) -> list[list[int]]:
        cons: list[list[int]] = [[] for _ in self.nodes]
        for n in self.nodes:
            for i in n.inputs:
                cons[i].append(n.nid)
        return cons

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Live views of every learnable parameter, keyed '<nid>.<name>'."""
        out: dict[str, np.ndarray] = {}
        for n in self.nodes:
            for name, arr in n.params.items():
                out[f"{n.nid}.{name}"] = arr
        return out

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for key, arr in values.items():
            nid_s, name = key.split(".", 1)
            node = self.nodes[int(nid_s)]
            if name not in node.params:
                raise GraphError(f"unknown parameter '{key}'")
            if node.params[name].shape != arr.shape:
                raise GraphError(
                    f"parameter '{key}': shape {arr.shape} != {node.params[name].shape}"
                )
            node.params[name] = np.asarray(arr, dtype=self.dtype)

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-learnable state (e.g. batch-norm running statistics)."""
        out: dict[str, np.ndarray] = {}
        for n in self.nodes:
            for name, arr in n.state.items():
                out[f"{n.nid}.{name}"] = arr
        return out

    def clone(self) -> "Graph":
        """Structure-sharing copy with fresh parameter/state arrays, no values."""
        g = Graph(self.dtype)
        for n in self.nodes:
            g.nodes.append(
                Node(
                    n.nid,
                    n.op,
                    list(n.inputs),
                    {k: v.copy() for k, v in n.params.items()},
                    {k: v.copy() for k, v in n.state.items()},
                    dict(n.attrs),
                    None,
                    n.is_checkpoint,
                )
            )
        g.inputs = dict(self.inputs)
        g.loss_id = self.loss_id
        g.checkpoint_set = set(self.checkpoint_set)
        return g

    # -- checkpoint bookkeeping ----------------------------------------------

    def set_checkpoints(self, ids: set[int]) -> None:
        for i in ids:
            if not (0 <= i < len(self.nodes)):
                raise GraphError(f"checkpoint id {i} not in graph")
        self.checkpoint_set = set(ids)
        for n in self.nodes:
            n.is_checkpoint = n.nid in self.checkpoint_set

    def _retained_set(self, need: list[int], target: int) -> set[int]:
        retained = set(self.checkpoint_set) | set(self.inputs.values()) | {target}
        if self.loss_id is not None:
            retained.add(self.loss_id)
        for nid in need:
            if self.nodes[nid].op == "channel_concat":
                retained.update(self.nodes[nid].inputs)
        return retained

    def _ancestors(self, target: int) -> list[int]:
        seen = {target}
        stack = [target]
        while stack:
            for i in self.nodes[stack.pop()].inputs:
                if i not in seen:
                    seen.add(i)
                    stack.append(i)
        return sorted(seen)

    # -- value management -----------------------------------------------------

    def _set_value(self, nid: int, value: np.ndarray) -> None:
        node = self.nodes[nid]
        if node.value is not None:
            self.meter.free(node.value.nbytes)
        node.value = value
        self.meter.alloc(value.nbytes)

    def _free_value(self, nid: int) -> None:
        node = self.nodes[nid]
        if node.value is not None:
            self.meter.free(node.value.nbytes)
            node.value = None

    def clear_values(self) -> None:
        for n in self.nodes:
            if n.value is not None:
                self.meter.free(n.value.nbytes)
                n.value = None

    def feed(self, name: str, value: np.ndarray) -> None:
        """Replace one named input's stored value in place (after a forward).

        Downstream values are not recomputed; callers re-running only the
        backward pass use this to swap supervision targets cheaply.
        """
        if name not in self.inputs:
            raise GraphError(f"unknown input '{name}'")
        self._set_value(self.inputs[name], np.ascontiguousarray(value, dtype=self.dtype))

    # -- forward ---------------------------------------------------------------

    def forward(
        self,
        feeds: dict[str, np.ndarray],
        discard: bool = False,
        update_stats: bool = False,
        to_node: int | None = None,
    ) -> float:
        """Run the graph up to ``to_node`` (default: the loss node).

        With ``discard=True``, values that are not retained (checkpoints,
        inputs, loss, concat inputs) are freed as soon as their last forward
        consumer has run. The loss value is identical either way.
        """
        target = self.loss_id if to_node is None else to_node
        if target is None:
            raise GraphError("graph has no loss node and no to_node was given")
        if discard and not self.checkpoint_set:
            raise GraphError("discarding forward requires a non-empty checkpoint_set")

        need = self._ancestors(target)
        retained = self._retained_set(need, target)
        need_set = set(need)
        uses = {nid: 0 for nid in need}
        for nid in need:
            for i in self.nodes[nid].inputs:
                uses[i] += 1

        self.clear_values()
        self.meter.reset()

        for nid in need:
            node = self.nodes[nid]
            if node.op == "input":
                name = node.attrs["name"]
                if name not in feeds:
                    raise GraphError(f"missing feed for input '{name}' (node {nid})")
                val = np.ascontiguousarray(feeds[name], dtype=self.dtype)
            else:
                vals = []
                for i in node.inputs:
                    if self.nodes[i].value is None:
                        raise MissingValue(f"node {nid}: input {i} has no value")
                    vals.append(self.nodes[i].value)
                try:
                    val = primitive_forward(node, vals)
                except ShapeMismatch as e:
                    raise ShapeMismatch(f"node {nid} ({node.op}): {e}") from e
            self._set_value(nid, val)
            if not np.all(np.isfinite(val)):
                raise NonFiniteValue(nid, node.op, f" tag={node.attrs.get('tag', '')}")
            if (
                update_stats
                and node.op == "batch_norm"
                and not node.attrs.get("use_running", False)
            ):
                self._update_running_stats(node)
            if discard:
                for i in node.inputs:
                    uses[i] -= 1
                    if uses[i] == 0 and i not in retained:
                        self._free_value(i)

        self._last_forward = {
            "discard": discard,
            "need": need,
            "retained": retained if discard else need_set,
            "target": target,
        }
        out = self.nodes[target].value
        return float(out) if out.ndim == 0 else out

    def _update_running_stats(self, node: Node) -> None:
        x = self.nodes[node.inputs[0]].value
        mean, var = ops.spatial_stats(x)
        mom = np.asarray(node.attrs.get("momentum", 0.1), dtype=self.dtype)
        node.state["running_mean"] = (1 - mom) * node.state["running_mean"] + mom * mean
        node.state["running_var"] = (1 - mom) * node.state["running_var"] + mom * var

    # -- backward ----------------------------------------------------------------

    def _backward_step(self, node: Node, grads: dict, gradmap: dict) -> None:
        g = grads.pop(node.nid, None)
        if g is None or node.op == "input":
            return
        vals = []
        for i in node.inputs:
            if self.nodes[i].value is None:
                raise MissingValue(f"backward of node {node.nid}: input {i} has no value")
            vals.append(self.nodes[i].value)
        gins, gparams = _primitive_backward(node, vals, g)
        for i, gi in zip(node.inputs, gins):
            if gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
        for name, gp in gparams.items():
            gradmap[f"{node.nid}.{name}"] = gp

    def backward_plain(self) -> dict[str, np.ndarray]:
        """Gradients of the loss w.r.t. every reachable learnable parameter.

        Requires a prior ``forward(discard=False)``; all node values must be
        present. Does not free any values (the naive memory baseline).
        """
        lf = self._last_forward
        if lf is None or lf["target"] != self.loss_id:
            raise MissingValue("backward_plain: run forward to the loss node first")
        if lf["discard"]:
            raise MissingValue("backward_plain: last forward discarded values; rerun with discard=False")
        need = lf["need"]
        loss_node = self.nodes[self.loss_id]
        if loss_node.value is None:
            raise MissingValue("backward_plain: loss value missing")
        grads: dict[int, np.ndarray] = {self.loss_id: np.asarray(1.0, dtype=self.dtype)}
        gradmap: dict[str, np.ndarray] = {}
        for nid in reversed(need):
            self._backward_step(self.nodes[nid], grads, gradmap)
        return gradmap

    def backward_checkpointed(self) -> dict[str, np.ndarray]:
        """Backward pass after a discarding forward.

        Discarded values are recovered by re-running their segment (a maximal
        run of consecutive non-retained nodes) from still-live values, then
        backpropagating. Gradients are bitwise identical to
        ``backward_plain`` on the same graph and inputs. Values are freed as
        soon as no remaining backward step needs them, so the meter reflects
        true liveness.
        """
        lf = self._last_forward
        if lf is None or lf["target"] != self.loss_id:
            raise MissingValue("backward_checkpointed: run forward to the loss node first")
        need: list[int] = lf["need"]
        retained: set[int] = lf["retained"]

        # segments = maximal runs of non-retained nodes, in forward order
        seg_of: dict[int, int] = {}
        segments: list[list[int]] = []
        for idx, nid in enumerate(need):
            if nid in retained:
                continue
            if segments and idx > 0 and need[idx - 1] == segments[-1][-1]:
                segments[-1].append(nid)
            else:
                segments.append([nid])
            seg_of[nid] = len(segments) - 1

        # validate: every edge entering a segment comes from a retained node
        # or from inside the same segment
        for si, seg in enumerate(segments):
            seg_set = set(seg)
            for nid in seg:
                for i in self.nodes[nid].inputs:
                    if i not in retained and i not in seg_set:
                        raise CheckpointInvariantError(
                            f"segment {si} (nodes {seg[0]}..{seg[-1]}): node {nid} needs "
                            f"node {i}, which was discarded and is outside the segment"
                        )

        uses = {nid: 0 for nid in need}
        for nid in need:
            for i in self.nodes[nid].inputs:
                uses[i] += 1

        def recompute(seg: list[int]) -> None:
            for m in seg:
                node = self.nodes[m]
                vals = []
                for i in node.inputs:
                    if self.nodes[i].value is None:
                        raise CheckpointInvariantError(
                            f"recompute of node {m}: upstream value {i} was discarded"
                        )
                    vals.append(self.nodes[i].value)
                self._set_value(m, primitive_forward(node, vals))

        grads: dict[int, np.ndarray] = {self.loss_id: np.asarray(1.0, dtype=self.dtype)}
        gradmap: dict[str, np.ndarray] = {}
        for nid in reversed(need):
            node = self.nodes[nid]
            if node.op != "input" and nid in grads:
                missing_segs = []
                for i in node.inputs:
                    if self.nodes[i].value is None:
                        si = seg_of.get(i)
                        if si is None:
                            raise MissingValue(
                                f"backward of node {nid}: retained input {i} lost its value"
                            )
                        if si not in missing_segs:
                            missing_segs.append(si)
                for si in missing_segs:
                    recompute(segments[si])
            self._backward_step(node, grads, gradmap)
            for i in node.inputs:
                uses[i] -= 1
                if uses[i] == 0:
                    self._free_value(i)
            if uses.get(nid, 0) == 0:
                self._free_value(nid)
        self._last_forward = None
        return gradmap


# ---------------------------------------------------------------------------
# checkpoint selection policies
# ---------------------------------------------------------------------------

def select_checkpoints(
    graph: Graph,
    policy: str,
    k: int | None = None,
    manual: list[int] | None = None,
) -> set[int]:
    """Choose the retained-node set for a discarding forward pass.

    Policies:
      * ``block_boundary``: nodes tagged as block outputs by the detector
        builder, minus any node that directly feeds a channel_concat (those
        stay live through the runtime's skip-connection pinning instead).
      * ``every_k``: every k-th node id, plus inputs and loss.
      * ``manual``: a caller-provided id list, validated.
    """
    n = len(graph.nodes)
    implicit = set(graph.inputs.values())
    if graph.loss_id is not None:
        implicit.add(graph.loss_id)
    if policy == "manual":
        if manual is None:
            raise GraphError("manual policy requires a node id list")
        bad = [i for i in manual if not (0 <= i < n)]
        if bad:
            raise GraphError(f"manual checkpoint list references unknown node ids {bad}")
        return set(manual) | implicit
    if policy == "every_k":
        if not k or k < 1:
            raise GraphError("every_k policy requires k >= 1")
        return {nid for nid in range(n) if nid % k == 0} | implicit
    if policy == "block_boundary":
        concat_inputs: set[int] = set()
        for node in graph.nodes:
            if node.op == "channel_concat":
                concat_inputs.update(node.inputs)
        marks = {
            node.nid
            for node in graph.nodes
            if node.attrs.get("block_output", False) and node.nid not in concat_inputs
        }
        if not marks:
            raise GraphError("block_boundary policy: graph has no tagged block outputs")
        return marks | implicit
    raise GraphError(f"unknown checkpoint policy '{policy}'")


def backward_plain(graph: Graph) -> dict[str, np.ndarray]:
    return graph.backward_plain()


def backward_checkpointed(graph: Graph) -> dict[str, np.ndarray]:
    return graph.backward_checkpointed()
