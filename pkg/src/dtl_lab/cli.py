"""``dtl-lab`` command line: train / eval / memreport / sweep-m / reuse / gradcheck.

Exit codes: 0 success, 1 check failed (gradcheck), 2 configuration error,
3 numeric abort.  Every run writes ``run.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import SPEC_NAMES, attach, named_spec
from .config import ConfigError, RunConfig, load_config
from .data import build_dataset
from .memory import compare, full_reference, per_block_csv, reports_to_csv, reports_to_json, sweep_M
from .tensor import Tensor
from .trainer import evaluate, train
from .vit import ViT
from .weights import ManifestError, load_weights

log = logging.getLogger("dtl_lab")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _versions() -> dict[str, str]:
    import scipy

    return {"dtl_lab": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _write(out: Path, name: str, text: str, written: list[str]) -> Path:
    path = out / name
    path.write_text(text)
    written.append(name)
    return path


def _manifest(out: Path, args, cfg: RunConfig | None, written: list[str], started: float, extra: dict | None = None) -> None:
    manifest = {
        "command": args.command,
        "config_path": str(args.config) if getattr(args, "config", None) else None,
        "config": cfg.snapshot() if cfg else None,
        "seed": getattr(args, "seed", None),
        "versions": _versions(),
        "outputs": sorted(written),
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    (out / "run.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _parse_specs(text: str) -> list[str]:
    names = [s.strip().lower() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in SPEC_NAMES]
    if bad or not names:
        raise UsageError(f"unknown spec name(s) {bad or [text]}; valid names: {', '.join(SPEC_NAMES)}")
    return names


def _backbone(cfg: RunConfig) -> ViT:
    m = cfg.section("model")
    if m["weights"]:
        path = Path(m["weights"])
        if not path.is_absolute() and cfg.path is not None:
            path = cfg.path.parent / path
        try:
            vit, problems = ViT.load_weights(cfg.vit, path)
        except ManifestError as exc:
            raise ConfigError([f"model.weights: {p}" for p in exc.problems]) from None
        for p in problems:
            log.warning("model.weights: %s", p)
        if vit.dtype != cfg.dtype:
            raise ConfigError([f"model.weights: stored as {vit.dtype.name}, model.dtype is {cfg.dtype.name}"])
        return vit
    return ViT.init(cfg.vit, seed=m["seed"], dtype=cfg.dtype)


def _model_and_data(cfg: RunConfig, vit: ViT, seed: int):
    try:
        data = build_dataset(cfg.dataset_spec(), vit)
        model = attach(cfg.spec, vit, n_classes=data.n_classes, seed=seed)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    return model, data


def _seed(args, cfg: RunConfig) -> int:
    return cfg.section("model")["seed"] if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, out: Path, written: list[str]) -> tuple[RunConfig, dict]:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    vit = _backbone(cfg)
    model, data = _model_and_data(cfg, vit, seed)
    tcfg = cfg.train_config(seed)
    ckpt = out / "checkpoint.json"
    hist = train(model, data, tcfg, checkpoint=ckpt, inject_nan_at=args.debug_nan_step, log=log.info)
    written += ["checkpoint.json", "checkpoint.bin"]
    _write(out, "history.csv", hist.to_csv(), written)
    return cfg, {"best_epoch": hist.best_epoch, "best_acc": hist.best_acc, "spec": model.spec.to_dict()}


def cmd_eval(args, out: Path, written: list[str]) -> tuple[RunConfig, dict]:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    vit = _backbone(cfg)
    model, data = _model_and_data(cfg, vit, seed)
    if args.checkpoint:
        trainable = model.trainable_params()
        expected = {n: (p.shape, p.dtype) for n, p in trainable.items()}
        try:
            arrays, problems = load_weights(args.checkpoint, expected)
        except ManifestError as exc:
            raise ConfigError([f"--checkpoint: {p}" for p in exc.problems]) from None
        for p in problems:
            log.warning("checkpoint: %s", p)
        for n, p in trainable.items():
            p.assign(arrays[n])
    acc = evaluate(model, data.test_x, data.test_y)
    result = {"spec": model.spec.label, "test_accuracy": acc, "n_test": int(len(data.test_y))}
    _write(out, "eval.json", json.dumps(result, indent=1) + "\n", written)
    return cfg, result


def cmd_memreport(args, out: Path, written: list[str]) -> tuple[RunConfig, dict]:
    cfg = load_config(args.config, sections=("model",))
    names = _parse_specs(args.specs)
    a = cfg.raw.get("adapter", {"M": 7, "d_prime": 2, "r": 8})
    specs = [named_spec(n, M=a["M"], d_prime=a["d_prime"], r=a["r"]) for n in names]
    vit = _backbone(cfg)
    seed = _seed(args, cfg)
    full = full_reference(vit, args.batch, seed=seed).cached_activation_bytes
    reports = compare(specs, vit, batch=args.batch, seed=seed)
    _write(out, "memory_compare.csv", reports_to_csv(reports, full), written)
    _write(out, "memory_compare.json", reports_to_json(reports, full), written)
    for r in reports:
        _write(out, f"per_block_{_slug(r.spec)}.csv", per_block_csv(r), written)
    return cfg, {"specs": names, "batch": args.batch}


def cmd_sweep_m(args, out: Path, written: list[str]) -> tuple[RunConfig, dict]:
    cfg = load_config(args.config, sections=("model",))
    vit = _backbone(cfg)
    N = vit.config.N
    values = _parse_range(args.m, N)
    a = cfg.raw.get("adapter", {"d_prime": 2})
    seed = _seed(args, cfg)
    full = full_reference(vit, args.batch, seed=seed).cached_activation_bytes
    reports = sweep_M(vit, values, batch=args.batch, plus=args.plus, d_prime=a["d_prime"], seed=seed)
    _write(out, "sweep_m.csv", reports_to_csv(reports, full), written)
    _write(out, "sweep_m.json", reports_to_json(reports, full), written)
    return cfg, {"M_values": values, "plus": args.plus}


def cmd_reuse(args, out: Path, written: list[str]) -> tuple[RunConfig, dict]:
    from .reuse import flop_report, make_bundles, report_json, shared_prefix_infer, standalone_infer, wall_clock

    cfg = load_config(args.config, sections=("model",))
    vit = _backbone(cfg)
    a = cfg.raw.get("adapter", {"M": 7, "d_prime": 2, "name": "dtl"})
    M = args.M if args.M is not None else a["M"]
    plus = a.get("name", "dtl").lower() in ("dtl+", "dtlplus", "dtl+*")
    if args.tasks < 1:
        raise UsageError("--tasks must be >= 1")
    if not 1 <= M <= vit.config.N + 1:
        raise UsageError(f"M={M} outside [1, {vit.config.N + 1}]")
    seed = _seed(args, cfg)
    report = flop_report(args.tasks, vit.config, M, a["d_prime"], kernel=3 if plus else None)
    tasks = make_bundles(vit, args.tasks, M=M, d_prime=a["d_prime"], plus=plus, seed=seed)
    rng = np.random.default_rng([seed, 0xF00D])
    x = Tensor(rng.standard_normal((args.batch, 3, vit.config.img, vit.config.img)).astype(vit.dtype))
    vit.reset_counters()
    alone = {t.task_id: standalone_infer(t, x) for t in tasks}
    report["measured_standalone_block_calls"] = vit.block_calls
    vit.reset_counters()
    shared = shared_prefix_infer(tasks, x)
    report["measured_shared_block_calls"] = vit.block_calls
    report["bitwise_equal"] = all(np.array_equal(alone[k], shared[k]) for k in alone)
    timing = wall_clock(tasks, x, repeats=args.repeats) if args.wall_clock else None
    _write(out, "reuse.json", report_json(report), written)
    extra = {"wall_clock": timing} if timing else {}
    return cfg, extra


def cmd_gradcheck(args, out: Path, written: list[str]) -> tuple[RunConfig | None, dict]:
    from .gradcheck import check_spec, micro_config

    cfg = load_config(args.config, sections=()) if args.config else None
    names = _parse_specs(args.specs)
    vit = micro_config()
    rows = []
    for name in names:
        spec = named_spec(name, M=min(2, vit.N + 1), d_prime=2, r=2)
        per: dict[str, float] = {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            err = check_spec(spec, seed=0 if args.seed is None else args.seed, eps=args.eps, report=per)
        worst = max(per, key=per.get) if per else ""
        rows.append({"spec": name, "max_relative_error": err, "worst_param": worst, "pass": err <= args.threshold})
        log.info("gradcheck %-12s %.3e (%s)", name, err, worst)
    lines = ["spec,max_relative_error,worst_param,pass"] + [
        f"{r['spec']},{r['max_relative_error']!r},{r['worst_param']},{str(r['pass']).lower()}" for r in rows
    ]
    _write(out, "gradcheck.csv", "\n".join(lines) + "\n", written)
    result = {"threshold": args.threshold, "eps": args.eps, "micro_config": asdict(vit), "rows": rows}
    _write(out, "gradcheck.json", json.dumps(result, indent=1) + "\n", written)
    return cfg, {"all_pass": all(r["pass"] for r in rows)}


# ---------------------------------------------------------------------------


def _slug(label: str) -> str:
    return label.replace("+", "plus").replace("*", "star").replace("/", "_")


def _parse_range(text: str | None, N: int) -> list[int]:
    if not text:
        return list(range(1, N + 2))
    values: list[int] = []
    for part in text.split(","):
        if ".." in part:
            lo, hi = part.split("..")
            values.extend(range(int(lo), int(hi) + 1))
        else:
            values.append(int(part))
    bad = [m for m in values if not 1 <= m <= N + 1]
    if bad:
        raise UsageError(f"M values {bad} outside [1, {N + 1}]")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtl-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", type=Path, required=config_required, help="TOML run configuration")
        sp.add_argument("--out", type=Path, required=True, help="output directory (created if missing)")
        sp.add_argument("--seed", type=int, default=None, help="overrides model.seed")

    sp = sub.add_parser("train", help="fine-tune one strategy")
    common(sp)
    sp.add_argument("--debug-nan-step", type=int, default=None, help="poison the input of this step (tests the abort path)")

    sp = sub.add_parser("eval", help="test accuracy of a (checkpointed) model")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, default=None, help="manifest written by `train`")

    sp = sub.add_parser("memreport", help="simulated training memory per strategy")
    common(sp)
    sp.add_argument("--specs", default="full,linear,lora,dtl", help=f"comma list from: {', '.join(SPEC_NAMES)}")
    sp.add_argument("--batch", type=int, default=32)

    sp = sub.add_parser("sweep-m", help="DTL memory as a function of the injection index M")
    common(sp)
    sp.add_argument("--m", default=None, help="e.g. '1..13' or '1,4,7' (default 1..N+1)")
    sp.add_argument("--plus", action="store_true", help="sweep DTL+ instead of DTL")
    sp.add_argument("--batch", type=int, default=32)

    sp = sub.add_parser("reuse", help="shared-prefix multi-task inference report")
    common(sp)
    sp.add_argument("--tasks", type=int, default=19)
    sp.add_argument("--M", type=int, default=None, help="overrides adapter.M")
    sp.add_argument("--batch", type=int, default=4, help="inputs used for the bitwise equivalence check")
    sp.add_argument("--wall-clock", action="store_true", help="also time both modes (noisy)")
    sp.add_argument("--repeats", type=int, default=5)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every strategy on a micro backbone")
    common(sp, config_required=False)
    sp.add_argument("--specs", default=",".join(SPEC_NAMES))
    sp.add_argument("--threshold", type=float, default=1e-4)
    sp.add_argument("--eps", type=float, default=1e-5)
    return p


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "memreport": cmd_memreport,
    "sweep-m": cmd_sweep_m,
    "reuse": cmd_reuse,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    out: Path = args.out
    written: list[str] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg, extra = COMMANDS[args.command](args, out, written)
    except (ConfigError, UsageError) as exc:
        print(f"dtl-lab {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"dtl-lab {args.command}: numeric abort: {exc}", file=sys.stderr)
        _manifest(out, args, None, written, started, {"status": "numeric_abort", "error": str(exc)})
        return EXIT_NUMERIC
    _manifest(out, args, cfg, written, started, dict(extra, status="ok"))
    if args.command == "gradcheck" and not extra["all_pass"]:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
