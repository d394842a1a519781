import json

import numpy as np
import pytest

from dtl_lab.tensor import Tensor
from dtl_lab.vit import ViT, ViTConfig, count_params, param_shapes
from dtl_lab.weights import ManifestError, load_weights, save_weights


def test_forward_shapes(small_vit, rng):
    cfg = small_vit.config
    x = Tensor(rng.standard_normal((3, 3, cfg.img, cfg.img)).astype(np.float32))
    z, taps = small_vit.forward_with_taps(x)
    assert z.shape == (3, cfg.n_tokens, cfg.d)
    assert len(taps) == cfg.N
    assert cfg.n_tokens == (cfg.img // cfg.patch) ** 2 + 1


def test_bad_image_size(small_vit):
    with pytest.raises(ValueError, match="expected image"):
        small_vit.patch_embed(Tensor(np.zeros((1, 3, 5, 5), np.float32)))


def test_block_index_and_token_checks(small_vit):
    z = Tensor(np.zeros((1, small_vit.config.n_tokens, small_vit.config.d), np.float32))
    with pytest.raises(ValueError, match="outside"):
        small_vit.block_forward(z, 0)
    with pytest.raises(ValueError, match="tokens"):
        small_vit.block_forward(Tensor(np.zeros((1, 3, small_vit.config.d), np.float32)), 1)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ViTConfig(img=30, patch=8)
    with pytest.raises(ValueError, match="heads"):
        ViTConfig(d=10, heads=4)
    with pytest.raises(ValueError):
        ViTConfig(N=0)


def test_multistage_config_runs(rng):
    cfg = ViTConfig(N=4, d=8, heads=2, img=8, patch=4, mlp_ratio=2, stages=((3, 16),))
    vit = ViT.init(cfg, seed=0)
    assert cfg.widths == [8, 16] and cfg.dim_of(2) == 8 and cfg.dim_of(3) == 16
    assert "stage.1.proj.w" in vit.params
    z, _ = vit.forward_with_taps(Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32)))
    assert z.shape[-1] == 16 == cfg.d_out


def test_init_is_deterministic(small_cfg):
    a, b = ViT.init(small_cfg, seed=3), ViT.init(small_cfg, seed=3)
    assert all(np.array_equal(a.state()[k], b.state()[k]) for k in a.state())
    assert count_params(a.params.values()) == sum(int(np.prod(s)) for s in param_shapes(small_cfg).values())


def test_no_key_bias(small_cfg):
    shapes = param_shapes(small_cfg)
    assert "block.1.attn.b_q" in shapes and "block.1.attn.b_k" not in shapes


def test_weights_roundtrip(tmp_path, small_vit):
    path = small_vit.save_weights(tmp_path / "w.json")
    vit2, warns = ViT.load_weights(small_vit.config, path)
    assert warns == []
    for k, v in small_vit.state().items():
        assert np.array_equal(vit2.state()[k], v)
        assert vit2.state()[k].dtype == v.dtype


def test_weights_float64_roundtrip(tmp_path, small_cfg):
    vit = ViT.init(small_cfg, seed=1, dtype=np.float64)
    vit2, _ = ViT.load_weights(small_cfg, vit.save_weights(tmp_path / "w.json"))
    assert vit2.dtype == np.float64


def test_missing_and_shape_mismatch_are_itemized(tmp_path):
    save_weights({"a": np.zeros((2, 3), np.float32)}, tmp_path / "m.json")
    with pytest.raises(ManifestError) as exc:
        load_weights(tmp_path / "m.json", {"a": ((3, 2), np.float32), "b": ((1,), np.float32)})
    assert any("missing b" in p for p in exc.value.problems)
    assert any("a: shape" in p for p in exc.value.problems)


def test_truncated_buffer(tmp_path):
    path = save_weights({"a": np.zeros(10, np.float32)}, tmp_path / "m.json")
    data = path.with_suffix(".bin")
    data.write_bytes(data.read_bytes()[:-4])
    with pytest.raises(ManifestError, match="truncated"):
        load_weights(path)


def test_duplicate_names(tmp_path):
    path = save_weights({"a": np.zeros(2, np.float32)}, tmp_path / "m.json")
    manifest = json.loads(path.read_text())
    manifest["tensors"].append(dict(manifest["tensors"][0]))
    path.write_text(json.dumps(manifest))
    with pytest.raises(ManifestError, match="duplicate"):
        load_weights(path)


def test_unknown_entries_warn_or_fail(tmp_path):
    path = save_weights({"a": np.zeros(2, np.float32), "extra": np.ones(1, np.float32)}, tmp_path / "m.json")
    arrays, warns = load_weights(path, {"a": ((2,), np.float32)})
    assert any("extra" in w for w in warns)
    with pytest.raises(ManifestError, match="extra"):
        load_weights(path, {"a": ((2,), np.float32)}, strict=True)
