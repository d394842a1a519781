"""Tensors, recorded graphs and reverse-mode differentiation.

Every primitive call made while a :class:`Graph` is active appends a
:class:`GraphNode`.  A node keeps references to the tensors its backward rule
needs (``saved_for_backward``) and *only* when one of its inputs requires a
gradient, so the saved sets double as a ledger of the activations a training
step has to hold in memory.  The memory meter reads that ledger directly.

Outside of an active graph the primitives just compute values; nothing is
recorded or retained (inference mode).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


class GraphError(RuntimeError):
    """Raised for misuse of the recorded graph (foreign tensors, bad loss...)."""


class Tensor:
    """Dense row-major float tensor.

    ``node`` is set when the tensor is the output of a recorded primitive.
    Tensors produced outside of a graph are plain values.
    """

    __slots__ = ("data", "shape", "dtype", "node", "requires_grad")

    def __init__(self, data: Any, dtype: Any = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data: np.ndarray | None = arr
        self.shape: tuple[int, ...] = arr.shape
        self.dtype: np.dtype = arr.dtype
        self.node: GraphNode | None = None
        self.requires_grad = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbytes(self) -> int:
        # works after the buffer was released
        return self.size * self.dtype.itemsize

    def numpy(self) -> np.ndarray:
        if self.data is None:
            raise GraphError("tensor buffer was released")
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name})"

    # operator sugar; the primitives live in dtl_lab.ops
    def __add__(self, other: Tensor) -> Tensor:
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        from . import ops

        return ops.matmul(self, other)


class Param(Tensor):
    """A named leaf tensor.  ``trainable`` is fixed for the lifetime of the object."""

    __slots__ = ("name", "_trainable")

    def __init__(self, name: str, data: Any, trainable: bool = False, dtype: Any = None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self._trainable = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable

    def assign(self, value: np.ndarray) -> None:
        """Rebind the buffer (optimizer updates).  Never mutates the old array."""
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != self.shape:
            raise ValueError(f"{self.name}: cannot assign shape {value.shape} to {self.shape}")
        self.data = value

    def clone(self, trainable: bool | None = None) -> Param:
        return Param(self.name, self.numpy().copy(), self.trainable if trainable is None else trainable)

    def __repr__(self) -> str:
        flag = "trainable" if self.trainable else "frozen"
        return f"Param({self.name!r}, shape={list(self.shape)}, {flag})"


@dataclass(eq=False)
class GraphNode:
    id: int
    op_kind: str
    input_ids: tuple[int, ...]
    output: Tensor
    requires_grad: bool
    saved_for_backward: tuple[Tensor, ...] = ()
    saved_ids: tuple[int, ...] = ()
    scope: str = ""
    ctx: dict = field(default_factory=dict)
    needs: tuple[bool, ...] = ()
    graph: Graph | None = field(default=None, repr=False)

    @property
    def is_leaf(self) -> bool:
        return self.op_kind in ("param", "const")


class Graph:
    """One recorded forward execution.  Use as a context manager."""

    def __init__(self) -> None:
        self.nodes: list[GraphNode] = []
        self._leaves: dict[int, GraphNode] = {}
        self._scopes: list[str] = []
        self.dtype: np.dtype | None = None

    def __enter__(self) -> Graph:
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        stack.pop()

    @property
    def current_scope(self) -> str:
        return self._scopes[-1] if self._scopes else ""

    @contextmanager
    def scope(self, name: str) -> Iterator[None]:
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()

    def _check_dtype(self, dtype: np.dtype, op_kind: str) -> None:
        if self.dtype is None:
            self.dtype = dtype
        elif dtype != self.dtype:
            raise TypeError(f"{op_kind}: graph dtype is {self.dtype.name}, got {dtype.name}")

    def node_for(self, t: Tensor, op_kind: str = "?") -> GraphNode:
        if t.node is not None:
            if t.node.graph is not self:
                raise GraphError(f"{op_kind}: input tensor belongs to a different graph")
            return t.node
        node = self._leaves.get(id(t))
        if node is not None:
            return node
        self._check_dtype(t.dtype, op_kind)
        if isinstance(t, Param):
            kind, rg, scope = "param", t.trainable, t.name
        else:
            kind, rg, scope = "const", False, "input"
        node = GraphNode(len(self.nodes), kind, (), t, rg, scope=scope, graph=self)
        self.nodes.append(node)
        # keep the leaf alive so id() stays unique for the lifetime of the graph
        self._leaves[id(t)] = node
        return node

    def tensor(self, node_id: int) -> Tensor:
        return self.nodes[node_id].output

    def release_unsaved(self, keep: Sequence[Tensor] = ()) -> int:
        """Drop every non-parameter buffer that no backward rule saved.

        Returns the number of buffers released.  Used to prove that backward
        only ever touches the retention ledger.
        """
        saved = {sid for n in self.nodes for sid in n.saved_ids}
        saved.update(t.node.id for t in keep if t.node is not None)
        released = 0
        for node in self.nodes:
            if node.op_kind == "param" or node.id in saved:
                continue
            if node.output.data is not None:
                node.output.data = None
                released += 1
        return released


def _graph_stack() -> list[Graph]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


@contextmanager
def scope(name: str) -> Iterator[None]:
    """Tag nodes recorded inside the block (no-op without an active graph)."""
    g = active_graph()
    if g is None:
        yield
        return
    with g.scope(name):
        yield


@contextmanager
def no_graph() -> Iterator[None]:
    """Temporarily suspend recording (inference mode)."""
    stack = _graph_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


# ---------------------------------------------------------------------------
# primitive registry and recording


class Op:
    """A differentiable primitive.

    ``forward`` receives raw arrays and returns ``(out, ctx)``; ``ctx`` may hold
    shapes and scalars but never input buffers.  ``saves`` names which inputs
    (by index, ``-1`` for the output) backward needs given the requires-grad
    mask of the inputs.  ``backward`` gets exactly those buffers.
    """

    kind: str = ""

    def check(self, shapes: list[tuple[int, ...]], attrs: dict) -> None:
        pass

    def forward(self, *arrays: np.ndarray, **attrs: Any) -> tuple[np.ndarray, dict]:
        raise NotImplementedError

    def saves(self, needs: tuple[bool, ...]) -> tuple[int, ...]:
        return ()

    def backward(
        self, grad: np.ndarray, saved: list[np.ndarray], ctx: dict, needs: tuple[bool, ...]
    ) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError


OPS: dict[str, Op] = {}


def register(op_cls: type[Op]) -> type[Op]:
    OPS[op_cls.kind] = op_cls()
    return op_cls


def record(op_kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """Run primitive ``op_kind`` and append a node to the active graph, if any."""
    op = OPS[op_kind]
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        names = ", ".join(sorted(d.name for d in dtypes))
        raise TypeError(f"{op_kind}: mixed dtypes ({names})")
    op.check([t.shape for t in inputs], attrs)
    graph = active_graph()
    in_nodes = [graph.node_for(t, op_kind) for t in inputs] if graph is not None else []

    arrays = []
    for t in inputs:
        if t.data is None:
            raise GraphError(f"{op_kind}: input buffer was released")
        arrays.append(t.data)
    out_data, ctx = op.forward(*arrays, **attrs)
    out = Tensor(out_data)
    if graph is None:
        return out

    needs = tuple(n.requires_grad for n in in_nodes)
    rg = any(needs)
    saved: tuple[Tensor, ...] = ()
    saved_ids: tuple[int, ...] = ()
    node_id = len(graph.nodes)
    if rg:
        keep = op.saves(needs)
        saved = tuple(out if k == -1 else inputs[k] for k in keep)
        saved_ids = tuple(node_id if k == -1 else in_nodes[k].id for k in keep)
    node = GraphNode(
        id=node_id,
        op_kind=op_kind,
        input_ids=tuple(n.id for n in in_nodes),
        output=out,
        requires_grad=rg,
        saved_for_backward=saved,
        saved_ids=saved_ids,
        scope=graph.current_scope,
        ctx=ctx,
        needs=needs,
        graph=graph,
    )
    graph._check_dtype(out.dtype, op_kind)
    graph.nodes.append(node)
    out.node = node
    out.requires_grad = rg
    return out


class GradStore(dict):
    """Param name -> gradient array (same shape as the Param)."""


def backward(loss: Tensor) -> GradStore:
    """Reverse-mode sweep from a scalar loss.

    Nodes are visited in reverse recording order and input gradients are
    accumulated in input order, so results are bitwise reproducible.  Nodes
    whose ``requires_grad`` is false are never visited.
    """
    if loss.shape != ():
        raise GraphError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if loss.node is None or loss.node.graph is None:
        raise GraphError("loss was not recorded in a graph")
    if not loss.node.requires_grad:
        raise GraphError("loss does not depend on any trainable parameter")
    graph = loss.node.graph
    grads: dict[int, np.ndarray] = {loss.node.id: np.ones((), dtype=loss.dtype)}
    store = GradStore()
    for node in reversed(graph.nodes[: loss.node.id + 1]):
        g = grads.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        if node.op_kind == "param":
            name = node.output.name  # type: ignore[attr-defined]
            store[name] = store[name] + g if name in store else g
            continue
        op = OPS[node.op_kind]
        saved = []
        for t in node.saved_for_backward:
            if t.data is None:
                raise GraphError(f"{node.op_kind}: saved buffer was released")
            saved.append(t.data)
        in_grads = op.backward(g, saved, node.ctx, node.needs)
        for in_id, need, ig in zip(node.input_ids, node.needs, in_grads):
            if not need or ig is None:
                continue
            prev = grads.get(in_id)
            grads[in_id] = ig if prev is None else prev + ig
    # a Param that is reused shows up once in the store (leaves are per-object)
    for name, g in store.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    return store


def trainable_leaves(graph: Graph) -> list[Param]:
    return [n.output for n in graph.nodes if n.op_kind == "param" and n.requires_grad]  # type: ignore[misc]


def run_traced(fn: Callable[[], Tensor]) -> tuple[Graph, Tensor]:
    """Record ``fn()`` in a fresh graph."""
    with Graph() as g:
        out = fn()
    return g, out
