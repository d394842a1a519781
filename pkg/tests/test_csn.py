import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtl_lab import ops
from dtl_lab.csn import (
    CSNConfig,
    CSNState,
    apply_g,
    csn_init,
    csn_step,
    dtl_forward,
    inject,
    param_shapes,
    stage_reset,
)
from dtl_lab.tensor import Graph, Tensor
from dtl_lab.vit import ViT, ViTConfig


def _image(cfg, seed=0, n=2, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).standard_normal((n, 3, cfg.img, cfg.img)).astype(dtype))


@pytest.mark.parametrize("variant", ["dtl", "dtlplus"])
@pytest.mark.parametrize("M", [1, 3, 5])
def test_init_identity_is_bitwise(small_vit, variant, M):
    w = csn_init(CSNConfig(M=M, variant=variant), small_vit.config, seed=M)
    x = _image(small_vit.config)
    ref, _ = small_vit.forward_with_taps(x)
    out = dtl_forward(small_vit, w, x)
    assert np.array_equal(out.numpy(), ref.numpy())


def test_init_distribution(small_cfg):
    w = csn_init(CSNConfig(M=2, variant="dtlplus"), small_cfg, seed=0)
    bound = 1 / np.sqrt(small_cfg.d)
    assert np.all(np.abs(w.a(1).numpy()) <= bound)
    assert not np.any(w.c(1).numpy())
    kernel, bias = w.g
    assert np.all(np.abs(kernel.numpy()) <= bound) and not np.any(bias.numpy())


def test_param_shapes_and_units(small_cfg):
    shapes = param_shapes(CSNConfig(d_prime=3, M=2, variant="dtlplus", kernel=5), small_cfg)
    assert shapes["csn.1.a"] == (small_cfg.d, 3) and shapes["csn.1.c"] == (3, small_cfg.d)
    assert shapes["csn.g.kernel"] == (small_cfg.d, 5, 5)
    w = csn_init(CSNConfig(M=2, variant="dtlplus"), small_cfg)
    assert w.structural_units() == small_cfg.N + 1


def test_config_validation(small_cfg):
    with pytest.raises(ValueError, match="outside"):
        CSNConfig(M=small_cfg.N + 2).validate(small_cfg)
    with pytest.raises(ValueError, match="odd"):
        CSNConfig(M=2, variant="dtlplus", kernel=4).validate(small_cfg)
    with pytest.raises(ValueError, match="variant"):
        CSNConfig(M=2, variant="nope").validate(small_cfg)
    with pytest.raises(ValueError, match="d_prime"):
        CSNConfig(M=2, d_prime=0).validate(small_cfg)


def test_dtlplus_needs_square_grid():
    cfg = ViTConfig(N=2, d=8, heads=2, img=8, patch=4)
    CSNConfig(variant="dtlplus", M=1).validate(cfg)  # 2x2 grid is fine


def test_csn_step_never_forms_dense_product(rng):
    z = Tensor(rng.standard_normal((2, 5, 8)))
    a, c = Tensor(rng.standard_normal((8, 2))), Tensor(rng.standard_normal((2, 8)))
    h = Tensor(np.zeros((2, 5, 8)))
    with Graph() as g:
        csn_step(h, z, a, c)
    shapes = [n.output.shape for n in g.nodes]
    assert (8, 8) not in shapes
    np.testing.assert_allclose(csn_step(h, z, a, c).numpy(), z.numpy() @ (a.numpy() @ c.numpy()), rtol=1e-12)


def test_csn_step_shape_errors(rng):
    z = Tensor(rng.standard_normal((2, 5, 8)))
    a, c = Tensor(rng.standard_normal((8, 2))), Tensor(rng.standard_normal((2, 8)))
    with pytest.raises(ValueError, match="stage reset"):
        csn_step(Tensor(np.zeros((2, 5, 16))), z, a, c)
    with pytest.raises(ValueError, match="tokens"):
        csn_step(Tensor(np.zeros((2, 4, 8))), z, a, c)


def test_stage_reset_changes_width():
    state = CSNState(Tensor(np.ones((2, 5, 8))))
    new = stage_reset(state, 16)
    assert new.h.shape == (2, 5, 16) and not np.any(new.h.numpy())


def test_inject_is_identity_before_M():
    z = Tensor(np.ones((1, 5, 4)))
    h = Tensor(np.full((1, 5, 4), 3.0))
    cfg = CSNConfig(M=3)
    assert inject(z, h, 2, cfg) is z
    np.testing.assert_allclose(inject(z, h, 3, cfg).numpy(), 1.0 + 3.0, rtol=1e-6)


def test_apply_g_bypasses_cls(rng):
    t = Tensor(rng.standard_normal((2, 10, 4)))
    k = Tensor(rng.standard_normal((4, 3, 3)))
    b = Tensor(rng.standard_normal(4))
    out = apply_g(t, k, b).numpy()
    assert np.array_equal(out[:, 0], t.numpy()[:, 0])
    grid = t.numpy()[:, 1:].reshape(2, 3, 3, 4).transpose(0, 3, 1, 2)
    ref = ops.depthwise_conv2d(Tensor(grid), k, b).numpy().transpose(0, 2, 3, 1).reshape(2, 9, 4)
    np.testing.assert_allclose(out[:, 1:], ref, rtol=1e-12)


def test_multistage_dtl_runs_with_resets(rng):
    cfg = ViTConfig(N=4, d=8, heads=2, img=8, patch=4, mlp_ratio=2, stages=((3, 16),))
    vit = ViT.init(cfg, seed=0)
    w = csn_init(CSNConfig(M=2), cfg, seed=0)
    assert w.a(3).shape == (16, 2)
    x = _image(cfg)
    ref, _ = vit.forward_with_taps(x)
    assert np.array_equal(dtl_forward(vit, w, x).numpy(), ref.numpy())


def test_swish_redundancy_fraction():
    """About half of theta(h) is negligible for zero-mean h."""
    h = np.random.default_rng(0).standard_normal(100_000)
    y = ops.swish(Tensor(h), 100.0).numpy()
    frac = np.mean(np.abs(y) < 0.01 * np.abs(h))
    assert 0.40 <= frac <= 0.60


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_init_identity_property(seed, M):
    cfg = ViTConfig(N=4, d=8, heads=2, img=8, patch=4, mlp_ratio=2)
    vit = ViT.init(cfg, seed=seed)
    w = csn_init(CSNConfig(M=M, variant="dtlplus" if seed % 2 else "dtl"), cfg, seed=seed)
    x = _image(cfg, seed)
    ref, _ = vit.forward_with_taps(x)
    assert np.array_equal(dtl_forward(vit, w, x).numpy(), ref.numpy())
