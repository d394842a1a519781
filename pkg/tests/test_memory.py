import csv
import io

import pytest

from dtl_lab.adapters import DTL, SPEC_NAMES, DTLPlus, Full, Linear, attach, named_spec
from dtl_lab.memory import (
    CSV_COLUMNS,
    compare,
    measure,
    per_block_csv,
    profile,
    region,
    reports_to_csv,
    sweep_M,
)
from dtl_lab.tapewalk import oracle_bytes


def _blocks(report, N):
    return [report.block(i) for i in range(1, N + 1)]


@pytest.mark.parametrize("name", SPEC_NAMES)
def test_ledger_matches_tape_oracle(small_vit, name):
    model = attach(named_spec(name, M=2), small_vit, n_classes=3)
    rep = profile(model, batch=3)
    total, per, count = oracle_bytes(model.last_graph)
    assert rep.cached_activation_bytes == total
    assert rep.per_block == per and rep.per_block_tensors == count


def test_region_names():
    assert region("block.3.attn.qkv") == "block.3"
    assert region("csn.12") == "csn.12"
    assert region("csn.g.conv") == "csn.g"
    assert region("head") == "head"
    assert region("stage.1.proj") == "stage.1"


def test_linear_retains_nothing_in_blocks(toy_vit):
    rep = profile(attach(Linear(), toy_vit), batch=4)
    assert all(b == (0, 0) for b in _blocks(rep, toy_vit.config.N))
    assert rep.cached_activation_bytes > 0  # the head input


def test_full_bounds_strategies_without_extra_ops(small_vit):
    """Strategies that only re-flag existing leaves (or add side paths) never
    exceed full fine-tuning; SSF inserts elementwise scales whose inputs must
    be kept, so it can exceed it."""
    reports = compare([named_spec(n, M=2) for n in SPEC_NAMES], small_vit, batch=4)
    full = next(r for r in reports if r.spec == "full")
    for r in reports:
        if r.spec != "ssf":
            assert r.cached_activation_bytes <= full.cached_activation_bytes, r.spec


def test_dtl_prefix_keeps_one_boundary_tensor(toy_vit):
    rep = profile(attach(DTL(2, 7), toy_vit), batch=4)
    cfg = toy_vit.config
    boundary = 4 * cfg.n_tokens * cfg.d * 4  # float32 [B, n, d]
    for i in range(1, 7):
        assert rep.block(i) == (boundary, 1), i
    # blocks >= M sit between an injection point and the head
    for i in range(8, cfg.N + 1):
        assert rep.block(i)[1] > 1


def test_dtl_without_injection_is_linear_plus_boundaries(toy_vit):
    N = toy_vit.config.N
    dtl = profile(attach(DTL(2, N + 1), toy_vit), batch=4)
    lin = profile(attach(Linear(), toy_vit), batch=4)
    backbone = lambda r: {k: v for k, v in r.per_block.items() if k.startswith("block.")}
    assert sum(backbone(lin).values()) == 0
    # the side taps read the streams entering blocks 1..N: the embedding
    # output plus the outputs of blocks 1..N-1, one tensor each
    assert sorted(backbone(dtl)) == sorted(f"block.{i}" for i in range(1, N))
    assert all(dtl.per_block_tensors[k] == 1 for k in backbone(dtl))
    assert dtl.per_block_tensors["embed"] == 1
    cfg = toy_vit.config
    boundary = 4 * cfg.n_tokens * cfg.d * 4
    side = sum(v for k, v in dtl.per_block.items() if k.startswith("csn."))
    assert dtl.cached_activation_bytes == lin.cached_activation_bytes + N * boundary + side


def test_sweep_is_strictly_decreasing(small_vit):
    N = small_vit.config.N
    reps = sweep_M(small_vit, range(1, N + 2), batch=2)
    cached = [r.cached_activation_bytes for r in reps]
    assert all(a > b for a, b in zip(cached, cached[1:]))


def test_sweep_rejects_bad_M(small_vit):
    with pytest.raises(ValueError, match="outside"):
        sweep_M(small_vit, [0])
    with pytest.raises(ValueError, match="outside"):
        sweep_M(small_vit, [small_vit.config.N + 2])


def test_plus_M1_is_star(small_vit):
    (rep,) = sweep_M(small_vit, [1], batch=2, plus=True)
    star = profile(attach(DTLPlus(2, 1), small_vit), batch=2)
    assert rep.spec == "dtl+*" and rep.cached_activation_bytes == star.cached_activation_bytes


def test_report_accounting(small_vit):
    rep = profile(attach(DTL(2, 2), small_vit), batch=2)
    assert rep.optimizer_state_bytes == 2 * rep.trainable_param_bytes
    assert sum(rep.per_block.values()) == rep.cached_activation_bytes
    assert rep.grand_total == rep.cached_activation_bytes + rep.param_bytes + rep.optimizer_state_bytes
    assert rep.batch_shape[0] == 2


def test_csv_outputs(small_vit):
    reps = compare([Full(), Linear()], small_vit, batch=2)
    rows = list(csv.DictReader(io.StringIO(reports_to_csv(reps, reps[0].cached_activation_bytes))))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert float(rows[0]["ratio_vs_full"]) == 1.0
    blocks = list(csv.DictReader(io.StringIO(per_block_csv(reps[0]))))
    assert sum(int(r["cached_bytes"]) for r in blocks) == reps[0].cached_activation_bytes


def test_measure_needs_a_forward(small_vit):
    with pytest.raises(RuntimeError):
        measure(attach(Linear(), small_vit))


def test_inference_mode_is_not_measured(small_vit):
    model = attach(Full(), small_vit)
    from dtl_lab.memory import random_batch
    from dtl_lab.tensor import no_graph

    with no_graph():
        model.forward(random_batch(model, 2))
    assert model.last_graph is None


@pytest.mark.parametrize("extra", ["bitfit", "lora", "ssf", "adapter"])
def test_training_more_never_retains_less(small_vit, extra):
    """Retention only grows when more leaves are trainable."""
    lin = profile(attach(Linear(), small_vit), batch=2).cached_activation_bytes
    other = profile(attach(named_spec(extra), small_vit), batch=2).cached_activation_bytes
    assert other >= lin


def test_batch_scaling(small_vit):
    a = profile(attach(DTL(2, 2), small_vit), batch=2).cached_activation_bytes
    b = profile(attach(DTL(2, 2), small_vit), batch=4).cached_activation_bytes
    assert b == 2 * a
