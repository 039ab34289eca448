"""Command-line entry point: ``mdlkit <command> [flags]``.

Exit status is 0 on success, 2 on usage errors (bad flags, unknown schemes,
malformed config) and 1 when the work itself fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .analysis import compare_schemes
from .datasets import (LabeledDataset, SyntheticSpec, generate_synthetic, load_dataset, load_image_dir, save_dataset,
                       spec_to_dict)
from .graph import (BACKBONES, SCHEME_VARIANTS, Graph, Scheme, apply_scheme, build_backbone, graph_to_dict, load_graph,
                    replace_head, save_graph)
from .gradsuite import run_suite
from .trainer import TrainConfig, default_learning_rate, evaluate, run_experiment, train, write_sweep

log = logging.getLogger("mdlkit")

CACHE_ENV = "MDLKIT_CACHE"
TABLE_SCHEMES = ("finetune", "final-conv", "parallel-adapters", "spatial-attention", "adaptive-attention")
SCHEME_KEYS = {"placement": (str, type(None)), "batchnorm_trainable": (bool, type(None)), "k": (int,), "r": (int,),
               "adapter_bias": (bool,)}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config files


def _train_field_types() -> dict[str, tuple[type, ...]]:
    types = {}
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        if f.name == "patience":
            types[f.name] = (int, type(None))
        elif f.name == "milestones":
            types[f.name] = (list,)
        elif isinstance(default, float):
            types[f.name] = (int, float)
        else:
            types[f.name] = (type(default),)
    return types


def _check_type(path: str, value, allowed: tuple[type, ...]) -> None:
    # bool is an int subclass; reject it wherever a number is expected
    if isinstance(value, bool) and bool not in allowed:
        raise UsageError(f"{path}: expected {'/'.join(t.__name__ for t in allowed)}, got boolean")
    if not isinstance(value, allowed):
        raise UsageError(f"{path}: expected {'/'.join(t.__name__ for t in allowed)}, got {type(value).__name__}")


def load_config(path) -> dict:
    """Read a JSON config: TrainConfig fields at top level, Scheme overrides under ``scheme``.

    Returns ``{"train": {...}, "scheme": {...}}`` holding only the keys present
    in the file. Unknown keys and wrong types raise UsageError naming the field.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"{path}: cannot read config ({e.strerror})") from None
    if not text.strip():
        return {"train": {}, "scheme": {}}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}:{e.lineno}:{e.colno}: malformed JSON: {e.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    types = _train_field_types()
    out = {"train": {}, "scheme": {}}
    for key, value in doc.items():
        if key == "scheme":
            if not isinstance(value, dict):
                raise UsageError(f"{path}: scheme: expected object")
            for sk, sv in value.items():
                if sk not in SCHEME_KEYS:
                    raise UsageError(f"{path}: scheme.{sk}: unknown field")
                _check_type(f"{path}: scheme.{sk}", sv, SCHEME_KEYS[sk])
                out["scheme"][sk] = sv
        elif key in types:
            _check_type(f"{path}: {key}", value, types[key])
            if key == "milestones" and not all(isinstance(m, int) and not isinstance(m, bool) for m in value):
                raise UsageError(f"{path}: milestones: expected a list of integers")
            out["train"][key] = value
        else:
            raise UsageError(f"{path}: {key}: unknown field")
    return out


def resolve_train_config(args, variant: str | None, file_cfg: dict) -> TrainConfig:
    """Defaults, then the config file, then command-line flags."""
    values = dict(file_cfg.get("train", {}))
    flag_map = {"lr": "learning_rate", "epochs": "epochs", "batch_size": "batch_size", "optimizer": "optimizer",
                "weight_decay": "weight_decay", "momentum": "momentum", "patience": "patience", "seed": "seed"}
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if "learning_rate" not in values and variant is not None:
        values["learning_rate"] = default_learning_rate(variant, values.get("optimizer", "sgd"))
    if values.get("patience", 0) is not None and values.get("patience", 0) < 0:
        values["patience"] = None
    try:
        return TrainConfig(**values)
    except ValueError as e:
        raise UsageError(f"config: {e}") from None


# --------------------------------------------------------------------------
# argument parsing helpers


def parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"input shape must look like 3x72x72, got {text!r}")
    return dims


def parse_schemes(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in SCHEME_VARIANTS]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown scheme {', '.join(map(repr, bad)) or repr(text)}; valid schemes: {', '.join(SCHEME_VARIANTS)}")
    return names


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


SYNTHETIC_KEYS = {"classes": int, "size": int, "hue": float, "texture": int, "noise": float, "n": int, "seed": int,
                  "name": str}


def parse_dataset(text: str) -> dict:
    """``synthetic:key=value,...`` or a directory with one subdirectory per class."""
    if not text.startswith("synthetic:") and text != "synthetic":
        return {"kind": "dir", "path": text}
    spec = {"kind": "synthetic", "classes": 4, "size": 32, "hue": 0.0, "texture": 0, "noise": 0.02, "n": 1024,
            "seed": 0, "name": "synthetic"}
    body = text[len("synthetic:"):] if ":" in text else ""
    for item in filter(None, body.split(",")):
        key, sep, value = item.partition("=")
        if not sep or key not in SYNTHETIC_KEYS:
            raise argparse.ArgumentTypeError(
                f"bad synthetic dataset field {item!r}; known fields: {', '.join(SYNTHETIC_KEYS)}")
        try:
            spec[key] = SYNTHETIC_KEYS[key](value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"synthetic field {key}: cannot parse {value!r}") from None
    return spec


def _synthetic(desc: dict, split: str) -> LabeledDataset:
    try:
        spec = SyntheticSpec(classes=desc["classes"], size=desc["size"], hue_shift=desc["hue"],
                             texture=desc["texture"], noise=desc["noise"], name=desc["name"])
    except ValueError as e:
        raise UsageError(f"synthetic dataset: {e}") from None
    cache = os.environ.get(CACHE_ENV)
    if cache:
        key = json.dumps(dict(spec_to_dict(spec), n=desc["n"], seed=desc["seed"], split=split), sort_keys=True)
        path = Path(cache) / f"synthetic-{hashlib.sha256(key.encode()).hexdigest()[:16]}.bin"
        if path.exists():
            log.info("dataset cache hit %s", path)
            return load_dataset(path)
        ds = generate_synthetic(spec, desc["n"], desc["seed"], split)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, path)
        return ds
    return generate_synthetic(spec, desc["n"], desc["seed"], split)


def load_data(desc: dict, split: str, target_size: int | None = None) -> LabeledDataset:
    if desc["kind"] == "synthetic":
        return _synthetic(desc, split)
    return load_image_dir(desc["path"], target_size or 72, split)


def _derived_split(desc: dict | None, base: dict, offset: int, n_div: int) -> dict | None:
    if desc is not None or base["kind"] != "synthetic":
        return desc
    return dict(base, seed=base["seed"] + offset, n=max(base["classes"], base["n"] // n_div))


def _dataset_record(desc: dict | None, ds: LabeledDataset | None) -> dict | None:
    if desc is None or ds is None:
        return None
    return {"spec": desc, "n": len(ds), "classes": ds.classes, "provenance": ds.provenance}


def _load_start_graph(args, num_classes: int, input_shape) -> Graph:
    if args.graph:
        if not args.weights:
            raise UsageError("--graph needs --weights")
        g = load_graph(args.graph, args.weights)
        if g.head().hyper["out_features"] != num_classes:
            g = replace_head(g, num_classes, seed=args.seed or 0)
        return g
    return build_backbone(args.backbone, num_classes, input_shape, seed=args.seed or 0)


def _scheme_from(name: str, file_cfg: dict, args) -> Scheme:
    overrides = dict(file_cfg.get("scheme", {}))
    for key in ("placement", "k", "r"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    try:
        return Scheme.parse(name, **overrides)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _write_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_analyze(args) -> int:
    file_cfg = load_config(args.config) if args.config else {"train": {}, "scheme": {}}
    schemes = [_scheme_from(s, file_cfg, args) for s in _flat_schemes(args, list(TABLE_SCHEMES))]
    table = compare_schemes(args.backbone, schemes, input_shape=args.input, num_classes=args.classes,
                            seed=args.seed or 0)
    _write(table.to_csv() if args.format == "csv" else table.to_json(), args.output)
    return 0


def cmd_train(args) -> int:
    file_cfg = load_config(args.config) if args.config else {"train": {}, "scheme": {}}
    names = _flat_schemes(args, ["finetune"])
    if len(names) != 1:
        raise UsageError("train takes exactly one scheme")
    scheme = _scheme_from(names[0], file_cfg, args)
    cfg = resolve_train_config(args, scheme.variant, file_cfg)
    val_desc = _derived_split(args.val_dataset, args.dataset, 1000, 2)
    train_ds = load_data(args.dataset, "train", args.image_size)
    val_ds = load_data(val_desc, "val", args.image_size) if val_desc else None
    test_ds = load_data(args.test_dataset, "test", args.image_size) if args.test_dataset else None
    g = _load_start_graph(args, train_ds.classes, train_ds.images.shape[1:])
    g = apply_scheme(g, scheme, seed=cfg.seed)
    trained, hist = train(g, train_ds, val_ds, cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(trained, out / "graph.json", out / "weights.bin")
    hist.checkpoint = "graph.json"
    manifest = {
        "command": "train",
        "version": __version__,
        "backbone": args.backbone if not args.graph else None,
        "start_graph": args.graph,
        "scheme": scheme.to_dict(),
        "train_config": cfg.to_dict(),
        "datasets": {"train": _dataset_record(args.dataset, train_ds), "val": _dataset_record(val_desc, val_ds),
                     "test": _dataset_record(args.test_dataset, test_ds)},
        "history": hist.to_dict(),
        "final": {"val_acc": hist.val_acc[hist.best_epoch] if hist.val_acc else None,
                  "test_acc": evaluate(trained, test_ds) if test_ds is not None else None},
    }
    _write_json(manifest, out / "history.json")
    _write_json({"epoch_seconds": hist.epoch_seconds}, out / "history.timing.json")
    print(json.dumps(manifest["final"], sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    file_cfg = load_config(args.config) if args.config else {"train": {}, "scheme": {}}
    schemes = [_scheme_from(s, file_cfg, args) for s in _flat_schemes(args, ["head-only", "adaptive-attention"])]
    cfgs = {s.variant: resolve_train_config(args, s.variant, file_cfg) for s in schemes}
    base_cfg = resolve_train_config(args, None, file_cfg)
    val_desc = _derived_split(args.val_dataset, args.dataset, 1000, 2)
    test_desc = _derived_split(args.test_dataset, args.dataset, 2000, 1)
    if test_desc is None:
        raise UsageError("experiment needs --test-dataset for directory datasets")
    train_ds = load_data(args.dataset, "train", args.image_size)
    val_ds = load_data(val_desc, "val", args.image_size) if val_desc else None
    test_ds = load_data(test_desc, "test", args.image_size)
    backbone = _load_start_graph(args, train_ds.classes, train_ds.images.shape[1:])
    result = run_experiment(args.kind, backbone, schemes, base_cfg, args.seeds, train_ds, val_ds, test_ds,
                            grid=args.grid, scheme_cfgs=cfgs, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"command": "experiment", "version": __version__,
             "backbone": args.backbone if not args.graph else None, "start_graph": args.graph,
             "schemes": [s.to_dict() for s in schemes],
             "datasets": {"train": _dataset_record(args.dataset, train_ds), "val": _dataset_record(val_desc, val_ds),
                          "test": _dataset_record(test_desc, test_ds)}}
    write_sweep(result, out / f"{args.kind}.dat", out / f"{args.kind}.json", extra)
    sys.stdout.write(result.to_dat())
    return 0


def cmd_gradcheck(args) -> int:
    report = run_suite(seed=args.seed or 0, shapes_per_case=args.shapes)
    for name, err in report.per_op().items():
        print(f"{name:<20s} {err:.3e}")
    print(f"max relative error {report.max_error:.3e} ({len(report.results)} checks, {report.seconds:.1f} s)")
    return 0 if report.passed else 1


def cmd_export_graph(args) -> int:
    g = build_backbone(args.backbone, args.classes, args.input, seed=args.seed or 0)
    names = _flat_schemes(args, [])
    if len(names) > 1:
        raise UsageError("export-graph takes at most one scheme")
    if names:
        g = apply_scheme(g, _scheme_from(names[0], {}, args), seed=args.seed or 0)
    if args.weights:
        if not args.output:
            raise UsageError("--weights needs --output for the graph JSON")
        save_graph(g, args.output, args.weights)
    else:
        _write(json.dumps(graph_to_dict(g), indent=2, sort_keys=True) + "\n", args.output)
    return 0


def _flat_schemes(args, default: list[str]) -> list[str]:
    if not args.schemes:
        return default
    return [s for group in args.schemes for s in group]


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mdlkit", description="Frozen-backbone multi-domain learning workbench.")
    p.add_argument("--version", action="version", version=f"mdlkit {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, backbone_default="resnet26"):
        sp.add_argument("--backbone", default=backbone_default, choices=sorted(BACKBONES))
        sp.add_argument("--scheme", "--schemes", dest="schemes", action="append", type=parse_schemes,
                        help="scheme name or comma-separated list")
        sp.add_argument("--placement", choices=["per-conv", "per-stage"])
        sp.add_argument("--k", type=int, help="attention kernel size")
        sp.add_argument("--r", type=int, help="channel-attention reduction ratio")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="JSON config file; flags take precedence")

    def training(sp):
        sp.add_argument("--dataset", type=parse_dataset, required=True,
                        help="directory of class subfolders, or synthetic:classes=4,hue=150,texture=2,n=1024,seed=3")
        sp.add_argument("--val-dataset", type=parse_dataset)
        sp.add_argument("--test-dataset", type=parse_dataset)
        sp.add_argument("--image-size", type=int, help="resize target for directory datasets (default 72)")
        sp.add_argument("--graph", help="start from a saved graph JSON instead of a fresh backbone")
        sp.add_argument("--weights", help="weights container for --graph")
        sp.add_argument("--optimizer", choices=["sgd", "adam"])
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--weight-decay", type=float)
        sp.add_argument("--momentum", type=float)
        sp.add_argument("--patience", type=int, help="early-stop patience; negative disables")
        sp.add_argument("--out", required=True, help="output directory")

    a = sub.add_parser("analyze", help="parameter, MAC and connection counts per scheme")
    common(a)
    a.add_argument("--input", type=parse_shape, default=None, help="C x H x W, e.g. 3x72x72")
    a.add_argument("--classes", type=int, default=47, help="FC head width")
    a.add_argument("--format", choices=["csv", "json"], default="csv")
    a.add_argument("--output", help="write here instead of stdout")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", help="train one scheme and write history + checkpoint")
    common(t, "micro")
    training(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("experiment", help="data-fraction or label-noise sweep")
    common(e, "micro")
    training(e)
    e.add_argument("--kind", choices=["fraction", "noise"], required=True)
    e.add_argument("--seeds", type=parse_int_list, default=[0, 1, 2])
    e.add_argument("--grid", type=parse_int_list, help="override the x-grid (percent)")
    e.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    e.set_defaults(func=cmd_experiment)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--shapes", type=int, default=5, help="random shapes per op")
    gc.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-graph", help="write a backbone (optionally scheme-applied) as graph JSON")
    common(x)
    x.add_argument("--input", type=parse_shape, default=None)
    x.add_argument("--classes", type=int, default=47)
    x.add_argument("--output", help="graph JSON path (stdout if omitted)")
    x.add_argument("--weights", help="also write weights to this container path")
    x.set_defaults(func=cmd_export_graph)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except (ValueError, OSError, RuntimeError, FloatingPointError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
