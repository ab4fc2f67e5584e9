"""Command-line pipeline: search, finalize, cost-report, train-final, eval,
plot, and gradcheck, with file-based handoff between stages.

Every stage reads JSON configs, writes its artifacts into ``--out``, and
records a manifest listing SHA-256 checksums of all inputs and outputs.
Exit codes: 0 success, 2 config error, 3 numerical divergence, 4 check
failure.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import plots, tasks
from .backbone import BackboneSpec, SchemaError, check_keys
from .kernels import SubKernelSet
from .optim import DivergenceError
from .search import (ReplacementConfig, SearchConfig, build_final_network,
                     cost_report, finalize, run_cost_priority,
                     run_performance_priority)
from .supernet import COST, PERF, build_supernet

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECK_FAILED = 4

_ALPHA_KEYS = {"base", "candidates", "mode", "seed", "layers"}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 16), b""):
                h.update(chunk)
    except FileNotFoundError:
        raise SchemaError(f"input file not found: {path}") from None
    return h.hexdigest()


def _write_json(obj: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path, context: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise SchemaError(f"{context} file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON in {context} file {path}: {e}") from None


class Manifest:
    def __init__(self, command: str, out_dir: Path, seed=None):
        self.doc = {
            "command": command,
            "seed": seed,
            "started_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "inputs": {},
            "outputs": {},
        }
        self.out_dir = out_dir

    def add_input(self, path):
        self.doc["inputs"][str(path)] = _sha256(Path(path))

    def add_output(self, path):
        path = Path(path)
        self.doc["outputs"][path.name] = _sha256(path)

    def write(self):
        self.doc["finished_utc"] = datetime.datetime.now(
            datetime.timezone.utc).isoformat()
        _write_json(self.doc, self.out_dir / "manifest.json")


def _load_backbone(path) -> BackboneSpec:
    return BackboneSpec.from_dict(_read_json(path, "backbone"))


def _load_task(path):
    doc = _read_json(path, "task")
    train = tasks.TrainConfig.from_dict(doc.get("train", {}))
    return tasks.SyntheticTaskSpec.from_dict(doc), train


def _load_search(path, args) -> tuple[SearchConfig, SubKernelSet]:
    doc = _read_json(path, "search") if path else {}
    if getattr(args, "mode", None):
        doc["mode"] = {"perf": PERF, "cost": COST}[args.mode]
    if getattr(args, "lam", None) is not None:
        doc["lambda"] = args.lam
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        doc["iterations"] = args.iterations
    return SearchConfig.from_dict(doc)


# -- subcommands ---------------------------------------------------------


def cmd_search(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = _load_backbone(args.backbone)
    task_spec, _ = _load_task(args.task)
    cfg, sub_set = _load_search(args.search, args)
    for layer in spec.replaceable_layers():
        if layer.kernel != sub_set.base:
            raise SchemaError(f"layer {layer.name!r} kernel {layer.kernel} does "
                              f"not match candidate base {sub_set.base}")
    if not spec.replaceable_layers():
        raise SchemaError("backbone has no replaceable layers to search")

    manifest = Manifest("search", out, seed=cfg.seed)
    for p in (args.backbone, args.task, *(pp for pp in [args.search] if pp)):
        manifest.add_input(p)

    train_ds, _ = tasks.generate(task_spec).split()
    net = build_supernet(spec, sub_set, cfg.mode, seed=cfg.seed)
    log_path = out / "log.csv"
    try:
        if cfg.mode == PERF:
            alpha, log = run_performance_priority(net, train_ds, cfg)
        else:
            alpha, log = run_cost_priority(net, train_ds, cfg)
    except DivergenceError as e:
        getattr(e, "partial_log", tasks.TrainLog()).to_csv(log_path)
        print(f"error: {e} (partial log retained)", file=sys.stderr)
        return EXIT_DIVERGED

    alpha_doc = {
        "base": str(sub_set.base),
        "candidates": sub_set.to_strings(),
        "mode": cfg.mode,
        "seed": cfg.seed,
        "layers": {name: [[float(v) for v in row] for row in mat]
                   for name, mat in alpha.items()},
    }
    _write_json(alpha_doc, out / "alpha.json")
    log.to_csv(log_path)
    arrays = dict(net.state_arrays())
    np.savez(out / "supernet.npz",
             _meta=json.dumps({"backbone": spec.to_dict(), "mode": cfg.mode,
                               "candidates": sub_set.to_strings()},
                              sort_keys=True),
             **arrays)
    for name in ("alpha.json", "log.csv", "supernet.npz"):
        manifest.add_output(out / name)
    manifest.write()
    print(f"search done: alpha for {len(alpha)} layers -> {out / 'alpha.json'}")
    return EXIT_OK


def load_alpha_file(path) -> tuple[dict, SubKernelSet]:
    doc = _read_json(path, "alpha")
    check_keys(doc, _ALPHA_KEYS, "alpha file")
    try:
        sub_set = SubKernelSet.from_strings(doc["base"], doc["candidates"])
    except (KeyError, ValueError) as e:
        raise SchemaError(f"bad candidate set in alpha file: {e}") from None
    layers = {}
    for name, mat in doc.get("layers", {}).items():
        arr = np.asarray(mat, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != len(sub_set):
            raise SchemaError(f"alpha matrix for layer {name!r} must be "
                              f"(channels, {len(sub_set)})")
        layers[name] = arr
    if not layers:
        raise SchemaError("alpha file lists no layers")
    return layers, sub_set


def cmd_finalize(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("finalize", out)
    manifest.add_input(args.alpha)
    alpha, sub_set = load_alpha_file(args.alpha)
    config = finalize(alpha, sub_set)
    _write_json(config.to_dict(), out / "config.json")
    manifest.add_output(out / "config.json")
    manifest.write()
    print(f"finalized {sum(len(v) for v in config.entries.values())} channels "
          f"-> {out / 'config.json'}")
    return EXIT_OK


def cmd_cost_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("cost-report", out)
    manifest.add_input(args.backbone)
    manifest.add_input(args.config)
    spec = _load_backbone(args.backbone)
    config = ReplacementConfig.from_dict(_read_json(args.config, "config"))
    report = cost_report(spec, config)
    _write_json(report.to_dict(), out / "report.json")
    report.to_csv(out / "report.csv")
    manifest.add_output(out / "report.json")
    manifest.add_output(out / "report.csv")
    manifest.write()
    print(f"params={report.total_params} flops={report.total_flops} "
          f"classes={report.class_counts} axes={report.axis_counts}")
    return EXIT_OK


def _checkpoint_save(path, network, spec, config, seed):
    arrays = dict(network.state_arrays())
    meta = {"backbone": spec.to_dict(),
            "config": config.to_dict() if config is not None else None,
            "seed": seed}
    np.savez(path, _meta=json.dumps(meta, sort_keys=True), **arrays)


def checkpoint_load(path):
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise SchemaError(f"checkpoint not found: {path}") from None
    meta = json.loads(str(data["_meta"]))
    spec = BackboneSpec.from_dict(meta["backbone"])
    config = (ReplacementConfig.from_dict(meta["config"])
              if meta["config"] is not None else None)
    network = build_final_network(spec, config, seed=meta["seed"]) \
        if config is not None else build_final_network(spec, ReplacementConfig({}),
                                                       seed=meta["seed"])
    network.load_state_arrays({k: data[k] for k in data.files if k != "_meta"})
    network.eval()
    return network, spec, config


def cmd_train_final(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = _load_backbone(args.backbone)
    config = ReplacementConfig.from_dict(_read_json(args.config, "config"))
    config.validate_against(spec)
    task_spec, train_cfg = _load_task(args.task)
    if args.iterations is not None:
        train_cfg = tasks.TrainConfig.from_dict(
            {**train_cfg.to_dict(), "iterations": args.iterations})
    seed = args.seed if args.seed is not None else 0

    manifest = Manifest("train-final", out, seed=seed)
    for p in (args.backbone, args.config, args.task):
        manifest.add_input(p)

    # fresh initialization: nothing is inherited from any search phase
    network = build_final_network(spec, config, seed=seed)
    train_ds, val_ds = tasks.generate(task_spec).split()
    log_path = out / "log.csv"
    try:
        log = tasks.train(network, train_ds, train_cfg, seed=seed)
    except DivergenceError as e:
        getattr(e, "partial_log", tasks.TrainLog()).to_csv(log_path)
        print(f"error: {e} (partial log retained)", file=sys.stderr)
        return EXIT_DIVERGED
    log.to_csv(log_path)
    result = tasks.evaluate(network, val_ds, threads=args.threads)
    metrics = {"task": task_spec.to_dict(), "seed": seed, "split": "val",
               "result": result.to_dict()}
    _write_json(metrics, out / "metrics.json")
    result.to_csv(out / "metrics.csv")
    _checkpoint_save(out / "checkpoint.npz", network, spec, config, seed)
    for name in ("log.csv", "metrics.json", "metrics.csv", "checkpoint.npz"):
        manifest.add_output(out / name)
    manifest.write()
    print(f"train-final done: {result.to_dict()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("eval", out)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.task)
    network, spec, _ = checkpoint_load(args.checkpoint)
    task_spec, _ = _load_task(args.task)
    if task_spec.head != spec.head:
        raise SchemaError(f"task head {task_spec.head!r} does not match "
                          f"checkpoint head {spec.head!r}")
    _, val_ds = tasks.generate(task_spec).split()
    if args.patch is not None:
        patch = tuple(int(p) for p in args.patch.split("x"))
        stride = tuple(int(s) for s in args.stride.split("x")) if args.stride \
            else tuple(max(1, p // 2) for p in patch)
        result = tasks.evaluate(network, val_ds, inference="sliding_window",
                                patch=patch, stride=stride, threads=args.threads)
    else:
        result = tasks.evaluate(network, val_ds, threads=args.threads)
    metrics = {"task": task_spec.to_dict(), "split": "val",
               "result": result.to_dict()}
    _write_json(metrics, out / "metrics.json")
    result.to_csv(out / "metrics.csv")
    manifest.add_output(out / "metrics.json")
    manifest.add_output(out / "metrics.csv")
    manifest.write()
    print(f"eval done: {result.to_dict()}")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("plot", out)
    wrote = []
    if args.report:
        manifest.add_input(args.report)
        report = _read_json(args.report, "report")
        fig = plots.composition_figure(report)
        plots.save_svg(fig, out / "composition.svg")
        wrote.append("composition.svg")
    if args.log:
        manifest.add_input(args.log)
        rows = plots.read_csv_rows(args.log)
        if not rows:
            raise SchemaError(f"training log {args.log} is empty")
        fig = plots.loss_figure(rows)
        plots.save_svg(fig, out / "loss_curve.svg")
        wrote.append("loss_curve.svg")
    if not wrote:
        raise SchemaError("plot needs --report and/or --log")
    for name in wrote:
        manifest.add_output(out / name)
    manifest.write()
    print(f"wrote {', '.join(wrote)} in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gc.run_suite(cases_per_op=args.cases, corrupt=args.corrupt)
    for line in report.lines():
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.txt", "w") as f:
            for line in report.lines():
                f.write(line + "\n")
    if not report.passed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"all {len(report.results)} ops passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernelshrink",
        description="Per-channel sub-kernel search for 3D convolutions")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, threads=True):
        p.add_argument("--out", default="runs/out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if threads:
            p.add_argument("--threads", type=int, default=1,
                           help="worker threads for evaluation inference")

    p = sub.add_parser("search", help="run sub-kernel search, write alpha.json")
    p.add_argument("--backbone", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--search", default=None, help="search config JSON")
    p.add_argument("--mode", choices=["perf", "cost"], default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("finalize", help="argmax path weights into config.json")
    p.add_argument("--alpha", required=True)
    common(p, seed=False, threads=False)
    p.set_defaults(fn=cmd_finalize)

    p = sub.add_parser("cost-report", help="parameter/FLOP accounting")
    p.add_argument("--backbone", required=True)
    p.add_argument("--config", required=True)
    common(p, seed=False, threads=False)
    p.set_defaults(fn=cmd_cost_report)

    p = sub.add_parser("train-final", help="train the finalized network from scratch")
    p.add_argument("--backbone", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--iterations", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_train_final)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--patch", default=None,
                   help="sliding-window patch DxHxW (segmentation only)")
    p.add_argument("--stride", default=None, help="sliding-window stride DxHxW")
    common(p, seed=False)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot", help="render SVG figures from report/log files")
    p.add_argument("--report", default=None)
    p.add_argument("--log", default=None)
    common(p, seed=False, threads=False)
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("gradcheck", help="finite-difference check of all ops")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--corrupt", default=None,
                   help="test hook: corrupt an op's backward rule")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SchemaError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
