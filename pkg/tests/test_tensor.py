import numpy as np
import pytest

from dtl_lab import ops
from dtl_lab.tensor import Graph, GraphError, Param, Tensor, active_graph, backward, no_graph, run_traced


def test_no_graph_records_nothing():
    a = Param("a", np.ones((2, 2)), trainable=True)
    out = ops.matmul(a, a)
    assert out.node is None
    assert active_graph() is None


def test_frozen_graph_saves_nothing():
    w = Param("w", np.ones((3, 3)))
    x = Tensor(np.ones((2, 3)))
    g, out = run_traced(lambda: ops.gelu(ops.matmul(x, w)))
    assert len(g.nodes) > 0
    assert all(not n.requires_grad and not n.saved_for_backward for n in g.nodes)


def test_matmul_saves_only_what_backward_needs():
    w = Param("w", np.ones((3, 4)), trainable=True)
    x = Tensor(np.ones((2, 3)))
    with Graph() as g:
        y = ops.matmul(x, w)
    node = y.node
    # dL/dw needs x; dL/dx is not needed so w is not saved
    assert node.saved_ids == (g.node_for(x).id,)


def test_scalar_loss_required():
    w = Param("w", np.ones((2,)), trainable=True)
    with Graph():
        y = ops.mul(w, w)
    with pytest.raises(GraphError, match="scalar"):
        backward(y)


def test_unrecorded_loss_rejected():
    with pytest.raises(GraphError, match="not recorded"):
        backward(Tensor(np.array(1.0)))


def test_loss_without_trainable_rejected():
    x = Tensor(np.ones(3))
    with Graph():
        s = ops.sum(x)
    with pytest.raises(GraphError, match="trainable"):
        backward(s)


def test_mixed_dtype_rejected():
    a = Tensor(np.ones((2, 2), np.float32))
    b = Tensor(np.ones((2, 2), np.float64))
    with pytest.raises(TypeError, match="mixed dtypes"):
        ops.add(a, b)


def test_foreign_graph_tensor_rejected():
    w = Param("w", np.ones((2, 2)), trainable=True)
    with Graph():
        y = ops.mul(w, w)
    with Graph():
        with pytest.raises(GraphError, match="different graph"):
            ops.add(y, w)


def test_reused_param_accumulates():
    w = Param("w", np.array([3.0]), trainable=True)
    with Graph():
        loss = ops.sum(ops.mul(w, w))
    g = backward(loss)
    assert g["w"] == pytest.approx([6.0])


def test_backward_is_bitwise_reproducible(rng):
    w = Param("w", rng.standard_normal((5, 4)), trainable=True)
    x = Tensor(rng.standard_normal((3, 5)))

    def grads():
        with Graph():
            loss = ops.sum(ops.gelu(ops.matmul(x, w)))
        return backward(loss)["w"]

    assert np.array_equal(grads(), grads())


def test_backward_uses_only_the_ledger(rng):
    """Dropping every unsaved buffer must not change the gradients."""
    w1 = Param("w1", rng.standard_normal((4, 6)), trainable=True)
    w2 = Param("w2", rng.standard_normal((6, 3)), trainable=True)
    x = Tensor(rng.standard_normal((5, 4)))

    def run(release):
        with Graph() as g:
            h = ops.gelu(ops.matmul(x, w1))
            loss = ops.sum(ops.softmax(ops.matmul(h, w2)) * Tensor(rng_fixed))
        if release:
            assert g.release_unsaved(keep=[loss]) > 0
        return backward(loss)

    rng_fixed = np.arange(15, dtype=float).reshape(5, 3)
    a, b = run(False), run(True)
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_released_buffer_access_fails(rng):
    w = Param("w", rng.standard_normal((3, 3)), trainable=True)
    with Graph() as g:
        h = ops.matmul(Tensor(np.ones((2, 3))), w)
        loss = ops.sum(h)
    g.release_unsaved(keep=[loss])
    assert h.data is None
    assert h.nbytes == 2 * 3 * 8
    with pytest.raises(GraphError):
        h.numpy()


def test_non_finite_gradient_names_param():
    w = Param("weird", np.array([np.inf, 1.0]), trainable=True)
    with Graph():
        loss = ops.sum(ops.mul(w, w))
    with pytest.raises(FloatingPointError, match="weird"):
        backward(loss)


def test_no_graph_suspends_outer_graph():
    w = Param("w", np.ones((2,)), trainable=True)
    with Graph() as g:
        with no_graph():
            ops.mul(w, w)
        assert active_graph() is g
    assert len(g.nodes) == 0


def test_param_trainable_is_immutable():
    p = Param("p", np.zeros(2))
    with pytest.raises(AttributeError):
        p.trainable = True
    q = p.clone(trainable=True)
    assert q.trainable and not p.trainable
    with pytest.raises(ValueError, match="shape"):
        p.assign(np.zeros(3))


def test_unsupported_dtype():
    t = Tensor(np.arange(3))  # ints are promoted
    assert t.dtype == np.float32
    with pytest.raises(TypeError):
        Tensor(np.zeros(2, dtype=np.float16), dtype=np.float16)
