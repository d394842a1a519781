import numpy as np
import pytest

from dtl_lab.adapters import DTL, DTLPlus, Linear, attach
from dtl_lab.data import (
    Dataset,
    DatasetSpec,
    build_dataset,
    read_image_file,
    write_image_file,
)
from dtl_lab.tensor import Graph, Param, Tensor
from dtl_lab.trainer import AdamState, TrainConfig, adamw_step, cosine_lr, evaluate, train
from dtl_lab.weights import load_weights


def _p(value, trainable=True):
    return Param("w", np.array([value], dtype=np.float64), trainable=trainable)


def test_adamw_first_step_moves_by_lr():
    cfg = TrainConfig(lr_max=0.1, weight_decay=0.0)
    p = _p(1.0)
    params = {"w": p}
    adamw_step(params, {"w": np.array([0.5])}, AdamState.for_params(params), 0.1, cfg)
    assert p.numpy()[0] == pytest.approx(0.9, abs=1e-6)  # bias-corrected m/sqrt(v) = 1


def test_adamw_decay_is_decoupled():
    cfg = TrainConfig(lr_max=0.1, weight_decay=0.5)
    p = _p(2.0)
    params = {"w": p}
    adamw_step(params, {}, AdamState.for_params(params), 0.1, cfg)
    assert p.numpy()[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adamw_skips_frozen():
    cfg = TrainConfig()
    p = _p(1.0, trainable=False)
    params = {"w": p}
    state = AdamState.for_params(params)
    assert not state.m
    adamw_step(params, {}, state, 0.1, cfg)
    assert p.numpy()[0] == 1.0


def test_adamw_names_nonfinite_param():
    p = _p(1.0)
    params = {"w": p}
    with pytest.raises(FloatingPointError, match="w"):
        adamw_step(params, {"w": np.array([np.nan])}, AdamState.for_params(params), 0.1, TrainConfig())
    assert p.numpy()[0] == 1.0


def test_cosine_schedule():
    cfg = TrainConfig(lr_max=1.0, lr_min=0.1)
    assert cosine_lr(0, 100, cfg) == 1.0
    assert cosine_lr(50, 100, cfg) == pytest.approx(0.55)
    assert cosine_lr(100, 100, cfg) == 0.1
    warm = TrainConfig(lr_max=1.0, warmup_steps=10)
    assert cosine_lr(5, 100, warm) == 0.5
    assert cosine_lr(10, 100, warm) == 1.0


def test_config_validation():
    with pytest.raises(ValueError, match="lr_min"):
        TrainConfig(lr_max=1e-3, lr_min=1e-2).validate()
    with pytest.raises(ValueError, match="epochs.*batch_size"):
        TrainConfig(epochs=0, batch_size=0).validate()


@pytest.fixture(scope="module")
def tiny_data(small_vit):
    return build_dataset(DatasetSpec("synthetic_linear", n_classes=3, n_train=48, n_test=24), small_vit)


def test_training_is_deterministic(small_vit, tiny_data):
    cfg = TrainConfig(lr_max=1e-2, epochs=3, batch_size=16)
    h1 = train(attach(DTL(2, 2), small_vit, 3), tiny_data, cfg)
    h2 = train(attach(DTL(2, 2), small_vit, 3), tiny_data, cfg)
    assert h1.to_csv() == h2.to_csv()
    assert len(h1.to_csv().splitlines()) == 4


def test_training_never_touches_backbone(small_vit, tiny_data):
    before = {k: v.copy() for k, v in small_vit.state().items()}
    model = attach(DTLPlus(2, 2), small_vit, 3)
    w0 = model.trainable_params()["csn.1.a"].numpy().copy()
    train(model, tiny_data, TrainConfig(lr_max=1e-2, epochs=2, batch_size=16))
    assert all(np.array_equal(before[k], v) for k, v in small_vit.state().items())
    assert not np.array_equal(w0, model.trainable_params()["csn.1.a"].numpy())


def test_linear_probe_learns_linear_task(small_vit, tiny_data):
    hist = train(attach(Linear(), small_vit, 3), tiny_data, TrainConfig(lr_max=3e-2, epochs=15, batch_size=16))
    assert hist.train_loss[-1] < hist.train_loss[0]
    assert hist.best_acc > 0.6


@pytest.mark.parametrize("spec", [DTL(2, 2), DTLPlus(2, 2), DTLPlus(2, 1)])
def test_side_network_starts_as_linear_probe(small_vit, tiny_data, spec):
    x, y = Tensor(tiny_data.train_x[:8]), tiny_data.train_y[:8]
    with Graph():
        a = attach(spec, small_vit, 3, seed=5).loss(x, y).numpy()
    with Graph():
        b = attach(Linear(), small_vit, 3, seed=5).loss(x, y).numpy()
    assert a == b


def test_evaluate_records_nothing(small_vit, tiny_data):
    model = attach(DTL(2, 2), small_vit, 3)
    with Graph() as g:
        acc = evaluate(model, tiny_data.test_x, tiny_data.test_y)
    assert len(g.nodes) == 0 and 0.0 <= acc <= 1.0


def test_checkpoint_holds_best_weights(small_vit, tiny_data, tmp_path):
    model = attach(DTL(2, 2), small_vit, 3)
    hist = train(model, tiny_data, TrainConfig(lr_max=1e-2, epochs=2, batch_size=16), checkpoint=tmp_path / "ck.json")
    saved, warnings = load_weights(tmp_path / "ck.json")
    assert set(saved) == set(model.trainable_params())
    assert hist.best_epoch in (1, 2) and not warnings


def test_nan_injection_aborts(small_vit, tiny_data):
    with pytest.raises(FloatingPointError, match="step 1"):
        train(attach(Linear(), small_vit, 3), tiny_data, TrainConfig(epochs=1, batch_size=16), inject_nan_at=1)


def test_train_input_errors(small_vit, tiny_data):
    empty = Dataset(tiny_data.train_x[:0], tiny_data.train_y[:0], tiny_data.test_x, tiny_data.test_y, 3)
    with pytest.raises(ValueError, match="empty"):
        train(attach(Linear(), small_vit, 3), empty, TrainConfig(epochs=1))
    with pytest.raises(ValueError, match="classes"):
        train(attach(Linear(), small_vit, 5), tiny_data, TrainConfig(epochs=1))
    with pytest.raises(ValueError, match="labels"):
        Dataset(tiny_data.train_x, tiny_data.train_y + 5, tiny_data.test_x, tiny_data.test_y, 3)


def test_planted_labels_are_balanced(small_vit):
    data = build_dataset(DatasetSpec("synthetic_planted", n_classes=2, n_train=64, n_test=32), small_vit)
    assert abs(np.mean(data.train_y) - 0.5) < 0.2
    assert data.info["readout"] == f"block.{small_vit.config.N // 2}"


def test_datasets_are_seeded(small_vit):
    spec = DatasetSpec("synthetic_planted", n_train=16, n_test=8, seed=3)
    a, b = build_dataset(spec, small_vit), build_dataset(spec, small_vit)
    assert np.array_equal(a.train_x, b.train_x) and np.array_equal(a.test_y, b.test_y)


def test_image_folder_roundtrip(small_vit, tmp_path):
    side = small_vit.config.img
    rng = np.random.default_rng(0)
    imgs = [rng.integers(0, 256, (5, side, side, 3), dtype=np.uint8) for _ in range(2)]
    for k, arr in enumerate(imgs):
        write_image_file(tmp_path / f"c{k}.img", arr)
        assert np.array_equal(read_image_file(tmp_path / f"c{k}.img"), arr)
    (tmp_path / "labels.csv").write_text("filename,label\nc0.img,0\nc1.img,1\n")
    spec = DatasetSpec("image_folder", n_classes=2, n_train=6, n_test=4, path=str(tmp_path), labels_csv=str(tmp_path / "labels.csv"))
    data = build_dataset(spec, small_vit)
    assert data.train_x.shape == (6, 3, side, side) and len(data.test_y) == 4
    assert data.train_x.min() >= -1.0 and data.train_x.max() <= 1.0
    assert sorted(np.concatenate([data.train_y, data.test_y]).tolist()) == [0] * 5 + [1] * 5


def test_image_file_errors(tmp_path):
    (tmp_path / "bad.img").write_bytes(b"NOTIMG1" + bytes(8))
    with pytest.raises(ValueError, match="magic"):
        read_image_file(tmp_path / "bad.img")
    write_image_file(tmp_path / "ok.img", np.zeros((1, 2, 2, 3), np.uint8))
    (tmp_path / "short.img").write_bytes((tmp_path / "ok.img").read_bytes()[:-1])
    with pytest.raises(ValueError, match="pixel bytes"):
        read_image_file(tmp_path / "short.img")
    with pytest.raises(ValueError, match="uint8"):
        write_image_file(tmp_path / "x.img", np.zeros((1, 2, 2, 3)))


def test_single_epoch_checkpoint_equals_final_weights(small_vit, tiny_data, tmp_path):
    model = attach(DTL(2, 2), small_vit, 3)
    train(model, tiny_data, TrainConfig(lr_max=1e-2, epochs=1, batch_size=16), checkpoint=tmp_path / "ck.json")
    saved, _ = load_weights(tmp_path / "ck.json")
    for name, p in model.trainable_params().items():
        assert np.array_equal(saved[name], p.numpy()), name
