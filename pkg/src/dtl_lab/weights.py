"""Weight manifests: a JSON index plus one raw little-endian buffer file.

    {"tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...],
     "data_file": "weights.bin"}

``data_file`` is resolved relative to the manifest.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class ManifestError(ValueError):
    """Manifest/buffer problems; ``problems`` lists every issue found."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def save_weights(arrays: Mapping[str, np.ndarray], manifest_path: str | os.PathLike) -> Path:
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    data_path = manifest_path.with_suffix(".bin")
    entries = []
    offset = 0
    with open(data_path, "wb") as fh:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.dtype not in _NAMES:
                raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
            fh.write(raw)
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": _NAMES[arr.dtype], "offset": offset, "nbytes": len(raw)}
            )
            offset += len(raw)
    manifest = {"tensors": entries, "data_file": data_path.name}
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest_path


def load_weights(
    manifest_path: str | os.PathLike,
    expected: Mapping[str, tuple[tuple[int, ...], np.dtype]] | None = None,
    strict: bool = False,
) -> tuple[dict[str, np.ndarray], list[str]]:
    """Read a manifest back.  Returns ``(arrays, warnings)``.

    With ``expected`` given, missing names and shape/dtype mismatches are
    errors; unknown names are warnings unless ``strict``.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError([f"cannot read manifest {manifest_path}: {exc}"]) from exc
    problems: list[str] = []
    warnings: list[str] = []
    data_path = manifest_path.parent / manifest.get("data_file", "")
    try:
        blob = data_path.read_bytes()
    except OSError as exc:
        raise ManifestError([f"cannot read data file {data_path}: {exc}"]) from exc

    arrays: dict[str, np.ndarray] = {}
    seen: set[str] = set()
    for entry in manifest.get("tensors", []):
        name = entry.get("name")
        if name in seen:
            problems.append(f"duplicate name {name}")
            continue
        seen.add(name)
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            problems.append(f"{name}: unknown dtype {entry.get('dtype')!r}")
            continue
        shape = tuple(int(s) for s in entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            problems.append(f"{name}: nbytes {nbytes} does not match shape {list(shape)}")
            continue
        if offset < 0 or offset + nbytes > len(blob):
            problems.append(f"{name}: buffer truncated (needs bytes {offset}..{offset + nbytes}, file has {len(blob)})")
            continue
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)

    if expected is not None:
        for name, (shape, dtype) in expected.items():
            if name not in arrays:
                if name not in seen:
                    problems.append(f"missing {name}")
                continue
            got = arrays[name]
            if got.shape != tuple(shape):
                problems.append(f"{name}: shape {list(got.shape)} != expected {list(shape)}")
            elif got.dtype != np.dtype(dtype):
                problems.append(f"{name}: dtype {got.dtype.name} != expected {np.dtype(dtype).name}")
        for name in sorted(set(arrays) - set(expected)):
            msg = f"unknown entry {name}"
            (problems if strict else warnings).append(msg)
    if problems:
        raise ManifestError(problems)
    if expected is not None:
        arrays = {k: v for k, v in arrays.items() if k in expected}
    return arrays, warnings
