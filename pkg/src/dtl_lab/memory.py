"""Simulated training-memory reports built from the retention ledger.

Cached activations are the buffers that backward rules saved during one
recorded forward pass, each counted once and attributed to the scope of the
node that produced it (``block.3``, ``csn.3``, ``embed``, ``head``...).
Parameters are accounted separately; AdamW keeps two moments per trainable
value.  Allocator overhead and in-flight gradients are not modelled, so the
numbers are a lower bound meant for ratios, not absolute footprints.
"""

from __future__ import annotations

import csv
import io
import json
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .adapters import DTL, AdaptedModel, AdapterSpec, DTLPlus, Full, attach
from .tensor import Graph, Tensor
from .vit import ViT

CSV_COLUMNS = ("spec", "M", "batch", "cached_bytes", "param_bytes", "opt_bytes", "total", "ratio_vs_full")


@dataclass
class MemoryReport:
    spec: str
    M: int | None
    batch_shape: tuple[int, ...]
    cached_activation_bytes: int
    per_block: dict[str, int] = field(default_factory=dict)
    per_block_tensors: dict[str, int] = field(default_factory=dict)
    param_bytes: int = 0
    trainable_param_bytes: int = 0
    optimizer_state_bytes: int = 0

    @property
    def grand_total(self) -> int:
        return self.cached_activation_bytes + self.param_bytes + self.optimizer_state_bytes

    def block(self, i: int) -> tuple[int, int]:
        """(bytes, tensor count) retained from backbone block ``i``."""
        key = f"block.{i}"
        return self.per_block.get(key, 0), self.per_block_tensors.get(key, 0)

    def row(self, full_cached: int | None = None) -> dict:
        ratio = "" if not full_cached else self.cached_activation_bytes / full_cached
        return {
            "spec": self.spec,
            "M": "" if self.M is None else self.M,
            "batch": self.batch_shape[0] if self.batch_shape else 1,
            "cached_bytes": self.cached_activation_bytes,
            "param_bytes": self.param_bytes,
            "opt_bytes": self.optimizer_state_bytes,
            "total": self.grand_total,
            "ratio_vs_full": ratio,
        }

    def to_dict(self) -> dict:
        out = asdict(self)
        out["batch_shape"] = list(self.batch_shape)
        out["grand_total"] = self.grand_total
        return out


_SCOPE_RE = re.compile(r"^(block|csn|stage|vpt|ssf)\.(\d+|embed|g)")


def region(scope: str) -> str:
    """Collapse a recorded scope to its report key (``block.3``, ``csn.3``, ``embed``...)."""
    m = _SCOPE_RE.match(scope)
    if m:
        return f"{m.group(1)}.{m.group(2)}"
    return scope.split(".", 1)[0] or "other"


def retained_from_ledger(graph: Graph) -> dict[int, tuple[int, str]]:
    """node id -> (bytes, region) for every non-parameter buffer some node saved."""
    kept: dict[int, tuple[int, str]] = {}
    for node in graph.nodes:
        if not node.requires_grad:
            continue
        for sid in node.saved_ids:
            src = graph.nodes[sid]
            if src.op_kind == "param" or sid in kept:
                continue
            kept[sid] = (src.output.nbytes, region(src.scope))
    return kept


def _summarize(kept: dict[int, tuple[int, str]]) -> tuple[int, dict[str, int], dict[str, int]]:
    per: dict[str, int] = defaultdict(int)
    count: dict[str, int] = defaultdict(int)
    for nbytes, reg in kept.values():
        per[reg] += nbytes
        count[reg] += 1
    return sum(per.values()), dict(sorted(per.items())), dict(sorted(count.items()))


def _spec_M(spec: AdapterSpec) -> int | None:
    return spec.M if isinstance(spec, (DTL, DTLPlus)) else None


def measure(model: AdaptedModel, batch_shape: Sequence[int] | None = None) -> MemoryReport:
    """Report for the forward pass most recently recorded on ``model``."""
    graph = model.last_graph
    if graph is None:
        raise RuntimeError("measure: no recorded forward pass on this model")
    total, per, count = _summarize(retained_from_ledger(graph))
    params = model.params().values()
    param_bytes = sum(p.nbytes for p in params)
    trainable = sum(p.nbytes for p in params if p.trainable)
    if batch_shape is None:
        consts = [n.output for n in graph.nodes if n.op_kind == "const" and len(n.output.shape) >= 3]
        batch_shape = consts[0].shape if consts else ()
    return MemoryReport(
        spec=model.spec.label,
        M=_spec_M(model.spec),
        batch_shape=tuple(batch_shape),
        cached_activation_bytes=total,
        per_block=per,
        per_block_tensors=count,
        param_bytes=param_bytes,
        trainable_param_bytes=trainable,
        optimizer_state_bytes=2 * trainable,
    )


def random_batch(model: AdaptedModel, batch: int, seed: int = 0) -> Tensor:
    cfg = model.config
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((batch, 3, cfg.img, cfg.img)).astype(model.dtype))


def profile(model: AdaptedModel, batch: int = 32, seed: int = 0) -> MemoryReport:
    """Record one forward pass (up to the logits) and measure it."""
    x = random_batch(model, batch, seed)
    with Graph():
        model.forward(x)
    return measure(model, x.shape)


def compare(
    specs: Iterable[AdapterSpec], backbone: ViT, batch: int = 32, n_classes: int = 10, seed: int = 0
) -> list[MemoryReport]:
    return [profile(attach(spec, backbone, n_classes, seed), batch, seed) for spec in specs]


def full_reference(backbone: ViT, batch: int = 32, n_classes: int = 10, seed: int = 0) -> MemoryReport:
    return profile(attach(Full(), backbone, n_classes, seed), batch, seed)


def sweep_M(
    backbone: ViT,
    M_values: Iterable[int],
    batch: int = 32,
    plus: bool = False,
    d_prime: int = 2,
    n_classes: int = 10,
    seed: int = 0,
) -> list[MemoryReport]:
    N = backbone.config.N
    reports = []
    for M in M_values:
        if not 1 <= M <= N + 1:
            raise ValueError(f"M={M} outside [1, {N + 1}]")
        spec = DTLPlus(d_prime, M) if plus else DTL(d_prime, M)
        reports.append(profile(attach(spec, backbone, n_classes, seed), batch, seed))
    return reports


def reports_to_csv(reports: Sequence[MemoryReport], full_cached: int | None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row(full_cached))
    return buf.getvalue()


def reports_to_json(reports: Sequence[MemoryReport], full_cached: int | None) -> str:
    rows = []
    for r in reports:
        row = r.row(full_cached)
        row["per_block"] = r.per_block
        row["per_block_tensors"] = r.per_block_tensors
        rows.append(row)
    return json.dumps({"columns": list(CSV_COLUMNS), "rows": rows}, indent=1) + "\n"


def per_block_csv(report: MemoryReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["spec", "region", "cached_bytes", "tensors"])
    for reg, nbytes in report.per_block.items():
        writer.writerow([report.spec, reg, nbytes, report.per_block_tensors[reg]])
    return buf.getvalue()
