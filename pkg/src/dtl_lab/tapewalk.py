"""Brute-force retention oracle.

Re-derives, from the bare tape (op kinds, input edges, output shapes and the
trainable flags of parameter leaves), which buffers a backward pass would
need.  It deliberately ignores the ``requires_grad``/``saved_for_backward``
fields the engine filled in, so it can be used to check them.
"""

from __future__ import annotations

from collections import defaultdict

from .tensor import Graph

# op kind -> which operands the gradient rules read, given which inputs carry
# gradient.  "out" is the op's own result.
_NEEDS = {
    "matmul": lambda g: ({0} if g[1] else set()) | ({1} if g[0] else set()),
    "mul": lambda g: ({1} if g[0] else set()) | ({0} if g[1] else set()),
    "depthwise_conv2d": lambda g: ({0} if g[1] else set()) | ({1} if g[0] else set()),
    "layer_norm": lambda g: {0, 1} if g[0] else ({0} if g[1] else set()),
    "softmax": lambda g: {"out"},
    "gelu": lambda g: {0},
    "swish": lambda g: {0},
    "cross_entropy": lambda g: {0},
}
_LAYOUT = {"add", "scale", "sum", "reshape", "transpose", "expand", "concat_tokens", "split_tokens"}


def _reaches_trainable(graph: Graph, start: int) -> bool:
    """Walk input edges from ``start`` looking for a trainable parameter leaf."""
    stack, seen = [start], set()
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        node = graph.nodes[nid]
        if node.op_kind == "param" and node.output.trainable:  # type: ignore[attr-defined]
            return True
        stack.extend(node.input_ids)
    return False


def needed_buffers(graph: Graph) -> set[int]:
    """Node ids (non-parameter) whose outputs must stay alive for backward."""
    grad_flows = [_reaches_trainable(graph, n.id) for n in graph.nodes]
    needed: set[int] = set()
    for node in graph.nodes:
        if node.op_kind in ("param", "const") or not grad_flows[node.id]:
            continue
        if node.op_kind in _LAYOUT:
            continue
        rule = _NEEDS.get(node.op_kind)
        if rule is None:
            raise KeyError(f"tape walk has no rule for op {node.op_kind!r}")
        mask = tuple(grad_flows[i] for i in node.input_ids)
        for which in rule(mask):
            nid = node.id if which == "out" else node.input_ids[which]
            if graph.nodes[nid].op_kind != "param":
                needed.add(nid)
    return needed


def oracle_bytes(graph: Graph, region=None) -> tuple[int, dict[str, int], dict[str, int]]:
    """(total, bytes per region, tensors per region) of the buffers backward needs."""
    if region is None:
        from .memory import region
    per: dict[str, int] = defaultdict(int)
    count: dict[str, int] = defaultdict(int)
    for nid in needed_buffers(graph):
        out = graph.nodes[nid].output
        nbytes = out.dtype.itemsize * _numel(out.shape)
        key = region(graph.nodes[nid].scope)
        per[key] += nbytes
        count[key] += 1
    return sum(per.values()), dict(sorted(per.items())), dict(sorted(count.items()))


def _numel(shape: tuple[int, ...]) -> int:
    n = 1
    for s in shape:
        n *= s
    return n
