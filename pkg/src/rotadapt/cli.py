"""``rotadapt`` command line: build-data, pretrain, train, distill, eval, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric fault.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import (Checkpoint, CheckpointIntegrityError, CheckpointVersionError, load_checkpoint,
                         save_checkpoint)
from .core import ConfigError, DataError, DatasetSplit, InputError, NumericFault, TrainConfig, \
    load_config_file
from .data import (build_kshot_split, build_uncurated_pool, load_dataset_split, load_domain_folder, load_split,
                   read_dataset_info, write_dataset)
from .experiments import trunk_state
from .distill import DistillConfig, distill_train
from .models import ModelSpec, build_model, set_pretrained_provider
from .report import ExperimentReport, display_tag, merge_reports, method_weights, read_fragments, render_table
from .trainer import evaluate, train_stage1

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class RunLog:
    """Append-only log file that can echo to stderr."""

    def __init__(self, path: Path, echo: bool = False):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = path.open("w")
        self.echo = echo

    def __call__(self, line: str) -> None:
        self._fh.write(line + "\n")
        self._fh.flush()
        if self.echo:
            print(line, file=sys.stderr)

    def close(self) -> None:
        self._fh.close()


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _argv_record(args, portable_out: bool = False) -> list[str]:
    argv = list(args.argv)
    if portable_out and "--out" in argv:
        i = argv.index("--out")
        if i + 1 < len(argv):
            argv[i + 1] = "<out>"
    return argv


def _file_config(args) -> dict:
    return load_config_file(args.config) if args.config else {}


def _install_trunk(path: Optional[str]) -> Optional[str]:
    """Use the trunk of checkpoint ``path`` as the pretrained backbone."""
    if not path:
        set_pretrained_provider(None)
        return None
    ck = load_checkpoint(path)
    state = trunk_state(ck)
    if not state:
        raise ConfigError(f"{path} holds no trunk weights")
    arch = ck.model_spec.get("arch")
    set_pretrained_provider(lambda a: state if a == arch else None)
    return str(path)


def _pair_name(info: dict) -> str:
    return info.get("pair") or info.get("name") or "pair"


# ----------------------------------------------------------------- build-data

def _synthetic_pools(args):
    from .synthetic import SyntheticSpec, generate_synthetic_pair

    overrides = {k: v for k, v in _file_config(args).items()}
    overrides.update(seed=args.seed, kshot=args.kshot)
    if args.num_classes is not None:
        overrides["num_classes"] = args.num_classes
    try:
        spec = SyntheticSpec(**{**SyntheticSpec().as_dict(), **overrides})
    except TypeError as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from exc
    except InputError as exc:
        raise ConfigError(str(exc)) from exc
    pair = generate_synthetic_pair(spec)
    s = pair.split
    pools = {"labeled_source": pair.source, "test_source": pair.source_test, "labeled_target": s.labeled_target,
             "val_target": s.val_target, "unlabeled_target": s.unlabeled_target, "test_target": s.test_target}
    if args.uncurated:
        pools["unlabeled_target_uncurated"] = build_uncurated_pool(s.unlabeled_target, pair.distractors,
                                                                   spec.num_classes)
    info = {"name": "synthetic", "pair": "source→target", "image_size": spec.image_size,
            "channels": spec.channels, "num_classes": spec.num_classes, "kshot": spec.kshot,
            "class_names": spec.class_names, "synthetic_spec": spec.as_dict()}
    return pools, info


def _folder_pools(args):
    root = Path(args.root)
    size, ch = args.image_size, args.channels
    source = load_domain_folder(root, args.source_list, size, ch, domain="source")
    target = load_domain_folder(root, args.target_list, size, ch, domain="target")
    if not source.is_labeled or not target.is_labeled:
        raise DataError("source and target split files must carry labels")
    num_classes = int(max(source.labels.max(initial=-1), target.labels.max(initial=-1))) + 1
    lab, val, unl, test = build_kshot_split(target, args.kshot, args.val_per_class,
                                            np.random.default_rng(args.seed))
    pools = {"labeled_source": source, "labeled_target": lab, "val_target": val, "unlabeled_target": unl,
             "test_target": test}
    if args.uncurated:
        if not args.distractor_list:
            raise ConfigError("--uncurated with --root needs --distractor-list")
        extra = load_domain_folder(root, args.distractor_list, size, ch, domain="target")
        pools["unlabeled_target_uncurated"] = build_uncurated_pool(unl, extra, num_classes)
    info = {"name": root.name, "pair": f"{Path(source.ids[0]).parts[0]}→{Path(target.ids[0]).parts[0]}",
            "image_size": size, "channels": ch, "num_classes": num_classes, "kshot": args.kshot}
    return pools, info


def cmd_build_data(args) -> int:
    if bool(args.synthetic) == bool(args.root):
        raise ConfigError("build-data needs exactly one of --synthetic or --root")
    pools, info = _synthetic_pools(args) if args.synthetic else _folder_pools(args)
    out = _out_dir(args)
    info.update(seed=args.seed, argv=_argv_record(args, portable_out=True), version=__version__)
    try:
        write_dataset(out, pools, info)
    except OSError as exc:
        raise ConfigError(f"cannot write dataset under {out}: {exc}") from exc
    counts = " ".join(f"{k}={len(v)}" for k, v in pools.items())
    print(f"wrote {out} {counts}")
    return EXIT_OK


# ----------------------------------------------------------------- pretrain

def cmd_pretrain(args) -> int:
    """Supervised pretraining of a trunk on the neutral synthetic glyph set."""
    from .experiments import DeskSettings, pretrain_checkpoint

    settings = DeskSettings(pretrain_iterations=args.iterations, pretrain_per_class=args.per_class,
                            pretrain_seed=args.seed, width=args.width)
    out = _out_dir(args)
    log = RunLog(out / "pretrain.log", args.verbose)
    try:
        ck = pretrain_checkpoint(settings, log=log, log_every=args.log_every)
    finally:
        log.close()
    ck.extra.update(argv=_argv_record(args), kind="pretrain")
    path = save_checkpoint(ck, out / "trunk")
    print(f"wrote {path} acc={ck.val_accuracy:.6g}")
    return EXIT_OK


# ----------------------------------------------------------------- train

def resolve_train_config(args, info: dict) -> TrainConfig:
    """Config file first, then the method tag's lambda pattern, then explicit flags."""
    flat = _file_config(args)
    overrides = {k: flat.pop(k) for k in ("lambda_ssl", "lambda_ent", "lambda_vat") if k in flat}
    for k in ("lambda_s", "lambda_t"):
        flat.pop(k, None)  # set by --mode
    for k in ("lambda_ssl", "lambda_ent", "lambda_vat"):
        if getattr(args, k) is not None:
            overrides[k] = getattr(args, k)
    weights, pretext = method_weights(args.method, args.mode, args.arch, **overrides)
    flat.update(pretext=pretext, seed=args.seed)
    for key, attr in (("total_iterations", "iterations"), ("eval_every", "eval_every"),
                      ("lr_trunk", "lr_trunk"), ("lr_heads", "lr_heads")):
        if getattr(args, attr) is not None:
            flat[key] = getattr(args, attr)
    if pretext == "jigsaw" and "jigsaw_grid" not in flat:
        size = info["image_size"]
        flat["jigsaw_grid"] = 3 if size % 3 == 0 else 4
    cfg = TrainConfig.from_flat(flat)
    return replace(cfg, weights=weights)


def _model_spec(args, info: dict, pretext_classes: int = 4) -> ModelSpec:
    return ModelSpec(arch=args.backbone, num_classes=info["num_classes"], pretext_classes=pretext_classes,
                     image_size=info["image_size"], channels=info["channels"], width=args.width)


def _check_kshot(args, split: DatasetSplit, info: dict) -> None:
    if args.kshot is None or args.mode == "uda":
        return
    if info.get("kshot") is not None and info["kshot"] != args.kshot:
        raise ConfigError(f"--kshot {args.kshot} but the dataset was built with k={info['kshot']}")
    split.check(info["num_classes"], k=args.kshot)


def _fragment(out: Path, method: str, data: str, info: dict, acc: float, seed: int) -> ExperimentReport:
    rep = ExperimentReport(method=method, data=data, accuracies={_pair_name(info): 100.0 * acc}, seeds=[seed],
                           num_classes=info["num_classes"])
    (out / "report.jsonl").write_text(json.dumps(rep.to_record(), sort_keys=True) + "\n")
    return rep


def cmd_train(args) -> int:
    split, info = load_dataset_split(args.dataset, args.data)
    if args.mode == "uda":
        split = DatasetSplit(split.labeled_source, split.labeled_target.subset([]), split.unlabeled_target,
                             split.val_target, split.test_target)
    _check_kshot(args, split, info)
    cfg = resolve_train_config(args, info)
    pretext_classes = cfg.jigsaw_permutations if cfg.pretext == "jigsaw" else 4
    init = _install_trunk(args.init_trunk)
    model = build_model(_model_spec(args, info, pretext_classes), seed=args.seed, pretrained=init is not None)
    out = _out_dir(args)
    resolved = {"train": cfg.to_flat(), "model": model.spec.as_dict(), "dataset": str(args.dataset),
                "data": args.data, "method": args.method, "mode": args.mode, "arch": args.arch, "init_trunk": init}
    _write_json(out / "run.json", {"argv": _argv_record(args), "resolved": resolved})
    log = RunLog(out / "train.log", args.verbose)
    try:
        ck = train_stage1(cfg, split, model, log=log, log_every=args.log_every)
    except NumericFault as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "last_good")
        raise
    finally:
        log.close()
    acc = evaluate(ck.build(), split.test_target)
    method = display_tag(args.method)
    ck.extra.update(argv=_argv_record(args), config=resolved, method=method, data=args.data, test_accuracy=acc)
    save_checkpoint(ck, out / "best")
    _fragment(out, method, args.data, info, acc, args.seed)
    print(f"acc={acc:.6g}")
    return EXIT_OK


# ----------------------------------------------------------------- distill

def _teacher_method(teachers: Sequence[Checkpoint]) -> str:
    tags = {t.extra.get("method", "?") for t in teachers}
    return tags.pop() if len(tags) == 1 else "+".join(sorted(tags))


def cmd_distill(args) -> int:
    missing = [p for p in args.teachers if not Path(p).is_file()]
    if missing:
        raise ConfigError(f"teacher checkpoint(s) not found: {', '.join(missing)}")
    teacher_ckpts = [load_checkpoint(p) for p in args.teachers]
    teachers = [t.build() for t in teacher_ckpts]
    split, info = load_dataset_split(args.dataset, args.data)
    flat = _file_config(args)
    flat.update(seed=args.seed, pool=args.data)
    for key in ("epochs", "lr", "drop_every", "batch_size"):
        if getattr(args, key) is not None:
            flat[key] = getattr(args, key)
    if args.select_best:
        flat["select_best"] = True
    try:
        cfg = DistillConfig(**flat)
    except TypeError as exc:
        raise ConfigError(f"bad distillation config: {exc}") from exc
    init = _install_trunk(args.init_trunk)
    spec = ModelSpec(**{**teacher_ckpts[0].model_spec, "pretext_classes": 4})
    student = build_model(spec, seed=args.seed, pretrained=init is not None)
    out = _out_dir(args)
    resolved = {"distill": vars(cfg), "model": spec.as_dict(), "teachers": [str(p) for p in args.teachers],
                "dataset": str(args.dataset), "init_trunk": init}
    _write_json(out / "run.json", {"argv": _argv_record(args), "resolved": resolved})
    log = RunLog(out / "distill.log", args.verbose)
    try:
        ck = distill_train(cfg, split.unlabeled_target, student, teachers, val_pool=split.val_target, log=log)
    finally:
        log.close()
    acc = evaluate(ck.build(), split.test_target)
    method = display_tag(_teacher_method(teacher_ckpts), distilled=True)
    ck.extra.update(argv=_argv_record(args), config=resolved, method=method, data=args.data, test_accuracy=acc)
    save_checkpoint(ck, out / "student")
    _fragment(out, method, args.data, info, acc, args.seed)
    print(f"acc={acc:.6g}")
    return EXIT_OK


# ----------------------------------------------------------------- eval / report

def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    info = read_dataset_info(args.dataset)
    pool = load_split(args.dataset, args.split, info)
    width = ck.model_spec.get("num_classes")
    if width != info["num_classes"]:
        raise DataError(f"checkpoint predicts {width} classes, split {args.split!r} has {info['num_classes']}")
    acc = evaluate(ck.build(), pool)
    print(f"acc={acc:.6g}")
    if args.report:
        method = args.method or ck.extra.get("method", "?")
        rep = ExperimentReport(method=method, data=args.data or ck.extra.get("data", "standard"),
                               accuracies={_pair_name(info): 100.0 * acc}, seeds=[ck.seed],
                               num_classes=info["num_classes"])
        rec = dict(rep.to_record(), argv=_argv_record(args), split=args.split)
        with open(args.report, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    paths = []
    for p in map(Path, args.fragments):
        paths.extend(sorted(p.rglob("*.jsonl")) if p.is_dir() else [p])
    if not paths:
        raise ConfigError("no report fragments given")
    try:
        rows = merge_reports(read_fragments(paths))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"unreadable report fragment: {exc}") from exc
    except InputError as exc:
        raise DataError(str(exc)) from exc
    text, records = render_table(rows)
    print(text, end="")
    if args.out:
        out = _out_dir(args)
        (out / "table.txt").write_text(text)
        with open(out / "report.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotadapt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat JSON file of config keys")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("-v", "--verbose", action="store_true", help="echo log lines to stderr")

    b = sub.add_parser("build-data", help="write split files (synthetic pair or a folder of images)")
    common(b)
    b.add_argument("--synthetic", action="store_true")
    b.add_argument("--root", help="image folder; paths in the list files are relative to it")
    b.add_argument("--source-list")
    b.add_argument("--target-list")
    b.add_argument("--distractor-list")
    b.add_argument("--kshot", type=int, default=3)
    b.add_argument("--val-per-class", type=int, default=3)
    b.add_argument("--image-size", type=int, default=32)
    b.add_argument("--channels", type=int, default=3, choices=(1, 3))
    b.add_argument("--num-classes", type=int)
    b.add_argument("--uncurated", action="store_true", help="also write the un-curated unlabeled pool")
    b.set_defaults(func=cmd_build_data)

    pt = sub.add_parser("pretrain", help="pretrain a trunk on the neutral synthetic glyphs")
    common(pt)
    pt.add_argument("--iterations", type=int, default=2000)
    pt.add_argument("--per-class", type=int, default=200)
    pt.add_argument("--width", type=int, default=16)
    pt.add_argument("--log-every", type=int, default=50)
    pt.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="stage 1: supervised + self-supervised training")
    common(t)
    t.add_argument("--dataset", required=True, help="directory written by build-data")
    t.add_argument("--method", default="rot")
    t.add_argument("--mode", default="ssda", choices=("ssda", "uda"))
    t.add_argument("--arch", default="small", choices=("small", "large"), help="lambda preset")
    t.add_argument("--backbone", default="small", help="model registry entry")
    t.add_argument("--width", type=int, default=16)
    t.add_argument("--data", default="standard", choices=("standard", "uncurated"))
    t.add_argument("--kshot", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--lr-trunk", type=float)
    t.add_argument("--lr-heads", type=float)
    t.add_argument("--lambda-ssl", type=float)
    t.add_argument("--lambda-ent", type=float)
    t.add_argument("--lambda-vat", type=float)
    t.add_argument("--init-trunk", help="checkpoint whose trunk initialises the model")
    t.add_argument("--log-every", type=int, default=1)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", help="stage 2: distill teacher(s) into a student")
    common(d)
    d.add_argument("--dataset", required=True)
    d.add_argument("--teachers", nargs="+", required=True)
    d.add_argument("--data", default="standard", choices=("standard", "uncurated"))
    d.add_argument("--epochs", type=int)
    d.add_argument("--lr", type=float)
    d.add_argument("--drop-every", type=int)
    d.add_argument("--batch-size", type=int)
    d.add_argument("--select-best", action="store_true")
    d.add_argument("--init-trunk")
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a labeled split")
    common(e, out_required=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test_target")
    e.add_argument("--report", help="append a report record to this JSONL file")
    e.add_argument("--method")
    e.add_argument("--data", choices=("standard", "uncurated"))
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate report fragments into a table")
    common(r, out_required=False)
    r.add_argument("fragments", nargs="+", help="JSONL files or directories searched recursively")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointIntegrityError, CheckpointVersionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
