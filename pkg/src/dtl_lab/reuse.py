"""Multi-task inference that runs the frozen prefix (blocks 1..M-1) once.

Every task keeps its own side network and head.  The streams entering
blocks ``1..M`` are computed once and fanned out; each task then replays
its side steps over the shared streams and runs its own suffix.  Because the
per-task computation is the very same sequence of primitives as standalone
inference, the logits are bitwise equal.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapters import DTL, AdaptedModel, DTLAdapter, DTLPlus, attach
from .csn import CSNState, dtl_suffix, run_prefix, side_prefix
from .tensor import Tensor, no_graph
from .vit import ViT, ViTConfig


@dataclass
class TaskBundle:
    task_id: str
    model: AdaptedModel

    def __post_init__(self) -> None:
        if not isinstance(self.model.adapter, DTLAdapter):
            raise TypeError(f"task {self.task_id}: feature reuse needs a DTL/DTL+ model, got {self.model.spec.label}")

    @property
    def M(self) -> int:
        return self.model.spec.M  # type: ignore[attr-defined]

    @property
    def weights(self):
        return self.model.adapter.weights  # type: ignore[attr-defined]

    @property
    def head(self):
        return self.model.head


def make_bundles(
    backbone: ViT, n_tasks: int, M: int = 7, d_prime: int = 2, plus: bool = False, n_classes: int = 10, seed: int = 0, scale: float = 0.1
) -> list[TaskBundle]:
    """``n_tasks`` bundles with distinct, non-identity side weights."""
    bundles = []
    for t in range(n_tasks):
        spec = DTLPlus(d_prime, M) if plus else DTL(d_prime, M)
        model = attach(spec, backbone, n_classes, seed=seed + t)
        rng = np.random.default_rng([seed, t, 0x5EED])
        for name, p in model.adapter.params.items():
            if name.endswith(".c") or name == "csn.g.bias":
                p.assign(rng.normal(0.0, scale, p.shape))
        bundles.append(TaskBundle(f"task{t}", model))
    return bundles


def _check_common_M(tasks: Sequence[TaskBundle]) -> int:
    if not tasks:
        raise ValueError("shared_prefix_infer needs at least one task")
    Ms = {t.M for t in tasks}
    if len(Ms) != 1:
        raise ValueError(f"tasks disagree on M: {sorted(Ms)}; the shared prefix needs one M")
    backbones = {id(t.model.backbone.params["embed.cls"]) for t in tasks}
    if len(backbones) != 1:
        raise ValueError("tasks must share one frozen backbone")
    return Ms.pop()


def standalone_infer(task: TaskBundle, image: Tensor) -> np.ndarray:
    with no_graph():
        return task.model.forward(image).numpy()


def _worker_count(threads: int | None, n: int) -> int:
    if threads is None:
        env = os.environ.get("DTL_LAB_THREADS")
        threads = int(env) if env else 1
    return max(1, min(threads, n))


def shared_prefix_infer(tasks: Sequence[TaskBundle], image: Tensor, threads: int | None = None) -> dict[str, np.ndarray]:
    """Per-task logits; blocks ``1..M-1`` execute once for all tasks.

    ``threads`` (default: ``$DTL_LAB_THREADS`` or 1) runs task suffixes
    concurrently; the shared prefix streams are only read.
    """
    M = _check_common_M(tasks)
    backbone = tasks[0].model.backbone
    N = backbone.config.N
    stop = min(M, N)
    with no_graph():
        streams = run_prefix(backbone, image, stop)

    def suffix(task: TaskBundle) -> np.ndarray:
        with no_graph():
            if stop > 1:
                state = side_prefix(task.weights, streams[: stop - 1], backbone)
            else:
                state = CSNState.zeros(streams[0])
            z = dtl_suffix(backbone, task.weights, streams[stop - 1], state, stop)
            return task.model.head_logits(task.model.features_from_tokens(z)).numpy()

    workers = _worker_count(threads, len(tasks))
    if workers == 1:
        outs = [suffix(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(suffix, tasks))
    return {t.task_id: o for t, o in zip(tasks, outs)}


# ---------------------------------------------------------------------------
# analytic cost model


def block_flops(vit: ViTConfig, i: int) -> int:
    """Multiply-adds x2 of one pre-LN block: q/k/v/o projections, two attention
    matmuls and the FFN (norms, softmax and GELU are ignored)."""
    n, w = vit.n_tokens, vit.dim_of(i)
    hidden = vit.mlp_ratio * w
    return 2 * n * (4 * w * w + 2 * n * w + 2 * w * hidden)


def csn_step_flops(vit: ViTConfig, i: int, d_prime: int) -> int:
    n, w = vit.n_tokens, vit.dim_of(i)
    return 2 * n * w * d_prime * 2 + n * w  # (z a) c plus the accumulation


def inject_flops(vit: ViTConfig, i: int, kernel: int | None) -> int:
    n, w = vit.n_tokens, vit.dim_of(i)
    flops = 5 * n * w  # swish (~4/elt) + residual add
    if kernel:
        flops += 2 * (n - 1) * w * kernel * kernel
    return flops


def flop_report(n_tasks: int, vit: ViTConfig, M: int, d_prime: int = 2, kernel: int | None = None) -> dict:
    """Standalone vs shared-prefix inference cost for ``n_tasks`` DTL tasks.

    Counts backbone blocks plus side-network work; patch embedding, final norm
    and heads run per task either way and are left out.
    """
    N = vit.N
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    if not 1 <= M <= N + 1:
        raise ValueError(f"M={M} outside [1, {N + 1}]")
    shared_blocks = range(1, M)  # 1..M-1
    blocks = sum(block_flops(vit, i) for i in range(1, N + 1))
    prefix = sum(block_flops(vit, i) for i in shared_blocks)
    side = sum(csn_step_flops(vit, i, d_prime) for i in range(1, N + 1))
    side += sum(inject_flops(vit, i, kernel) for i in range(M, N + 1))
    per_task = blocks + side
    standalone = n_tasks * per_task
    shared = prefix + n_tasks * (per_task - prefix)
    block_exec_standalone = n_tasks * N
    block_exec_shared = (M - 1) + n_tasks * (N - M + 1)
    return {
        "tasks": n_tasks,
        "M": M,
        "N": N,
        "standalone_flops": standalone,
        "shared_flops": shared,
        "saving_fraction": 1.0 - shared / standalone,
        "asymptotic_saving": prefix / per_task,
        "standalone_block_executions": block_exec_standalone,
        "shared_block_executions": block_exec_shared,
        "block_saving_fraction": 1.0 - block_exec_shared / block_exec_standalone,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=False) + "\n"


def wall_clock(tasks: Sequence[TaskBundle], image: Tensor, repeats: int = 3, threads: int | None = None) -> dict:
    """Best-of-``repeats`` timings; noisy at desk scale, use large repeat counts."""
    best_alone = best_shared = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for t in tasks:
            standalone_infer(t, image)
        t1 = time.perf_counter()
        shared_prefix_infer(tasks, image, threads)
        t2 = time.perf_counter()
        best_alone, best_shared = min(best_alone, t1 - t0), min(best_shared, t2 - t1)
    return {
        "standalone_seconds": best_alone,
        "shared_seconds": best_shared,
        "measured_saving": 1.0 - best_shared / best_alone,
        "repeats": repeats,
    }
