"""Single entry point for the whole pipeline.

Subcommands: gen-data, train-classifier, pretrain, finetune, evaluate,
predict, ablate. Configuration merges three layers with one rule: hard
defaults < JSON config file (flat dotted keys) < explicit CLI flags.
Every run writes its fully resolved configuration next to its artifacts,
and all randomness flows from one --seed through named substreams.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as data_mod
from . import evaluation, train
from .blocks import BlockConfig, PromptClassifier
from .errors import ConfigurationError, MedIQAError
from .model import MedIQAModel, load_checkpoint
from .prompt import auto_generate
from .salient import normalize_resize

log = logging.getLogger("mediqa")

DEFAULTS = {
    "seed": 0,
    "prompts": "manifest",
    "model.img_size": 64,
    "model.patch_size": 8,
    "model.embed_dim": 32,
    "model.num_heads": 4,
    "model.depth": 2,
    "model.window_size": 4,
    "model.mlp_ratio": 2.0,
    "model.sstb_scale": 0.8,
    "model.k_params": 1,
    "classifier.img_size": 32,
    "classifier.patch_size": 8,
    "classifier.embed_dim": 16,
    "classifier.num_heads": 2,
    "classifier.depth": 2,
    "train.learning_rate": 1e-5,
    "train.batch_size": 1,
    "train.epochs": 50,
    "train.grad_clip": 10.0,
    "train.freeze_encoder": False,
    "data.count": 100,
    "data.levels": "0,0.25,0.5,0.75,1",
    "data.dim": "2D",
    "data.size": 64,
    "data.depth": 21,
    "data.modalities": "CT,MR,fundus",
    "data.label_kind": "expert",
    "salient.fg_threshold": 0.05,
    "salient.min_fg_ratio": 0.01,
}

_FLAG_KEYS = {
    "seed": "seed", "prompts": "prompts",
    "epochs": "train.epochs", "lr": "train.learning_rate",
    "batch_size": "train.batch_size",
    "count": "data.count", "levels": "data.levels", "dim": "data.dim",
    "size": "data.size", "depth": "data.depth",
    "modalities": "data.modalities", "label_kind": "data.label_kind",
    "img_size": "model.img_size", "patch_size": "model.patch_size",
    "embed_dim": "model.embed_dim", "window_size": "model.window_size",
}


def _configure_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(
        os.environ.get("MEDIQA_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def resolve_config(args) -> dict:
    """One merge rule: defaults, then config file, then explicit CLI flags."""
    resolved = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        loaded = json.loads(Path(config_path).read_text())
        for key, value in loaded.items():
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {key!r}")
            resolved[key] = value
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _section(resolved: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in resolved.items() if k.startswith(prefix + ".")}


def _block_config(resolved: dict, seed: int) -> BlockConfig:
    return BlockConfig(seed=seed, **_section(resolved, "model")).validate()


def _classifier_config(resolved: dict, seed: int) -> BlockConfig:
    # the classifier never windows its attention; window 1 divides any grid
    return BlockConfig(seed=seed, window_size=1,
                       **_section(resolved, "classifier")).validate()


def _train_config(resolved: dict, args, stage: str) -> train.TrainConfig:
    section = _section(resolved, "train")
    cfg = train.TrainConfig(seed=int(resolved["seed"]), stage=stage,
                            prompts=resolved["prompts"], **section)
    for flag in ("pt", "pm", "ss"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value == "on")
    return cfg.validate()


def _salient_kw(resolved: dict) -> dict:
    return {"fg_threshold": float(resolved["salient.fg_threshold"]),
            "min_fg_ratio": float(resolved["salient.min_fg_ratio"])}


def _log_resolved(resolved: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(resolved, sort_keys=True, indent=2)
    (out_dir / "resolved_config.json").write_text(payload + "\n")
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))


def _parse_levels(text):
    if text in ("ramp", ""):
        return None
    return tuple(float(x) for x in str(text).split(","))


def _load_classifier_if_needed(resolved, args):
    path = getattr(args, "classifier", None)
    if path:
        model = load_checkpoint(path)
        if not isinstance(model, PromptClassifier):
            raise ConfigurationError(f"{path} is not a classifier checkpoint")
        return model
    return None


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    resolved = resolve_config(args)
    _log_resolved(resolved, args.out)
    manifest = data_mod.generate_synthetic(
        out_dir=args.out,
        count=int(resolved["data.count"]),
        modalities=tuple(str(resolved["data.modalities"]).split(",")),
        levels=_parse_levels(resolved["data.levels"]),
        dim=str(resolved["data.dim"]),
        size=int(resolved["data.size"]),
        depth=int(resolved["data.depth"]),
        seed=int(resolved["seed"]),
        label_kind=str(resolved["data.label_kind"]),
    )
    print(f"manifest {manifest}")
    return 0


def cmd_train_classifier(args) -> int:
    resolved = resolve_config(args)
    _log_resolved(resolved, args.out)
    seed = int(resolved["seed"])
    classifier = PromptClassifier(_classifier_config(resolved, seed))
    cfg = _train_config(resolved, args, stage="classifier")
    records = data_mod.load_manifest(args.data)
    root = Path(args.data).parent
    result = train.train_classifier(classifier, records, root, cfg, args.out)
    best = load_checkpoint(result.checkpoint_path)
    test_recs = [r for r in records if r.split == "test"]
    accuracy = train.classifier_accuracy(best, test_recs or records, root)
    print(f"checkpoint {result.checkpoint_path}")
    print(f"modality_accuracy {accuracy:.4f}")
    return 0


def cmd_pretrain(args) -> int:
    resolved = resolve_config(args)
    _log_resolved(resolved, args.out)
    seed = int(resolved["seed"])
    model = MedIQAModel(_block_config(resolved, seed))
    cfg = _train_config(resolved, args, stage="pretrain")
    records = data_mod.load_manifest(args.data)
    root = Path(args.data).parent
    classifier = _load_classifier_if_needed(resolved, args)
    result = train.pretrain(model, records, root, cfg, args.out, classifier,
                            **_salient_kw(resolved))
    print(f"checkpoint {result.checkpoint_path}")
    print(f"best_val_mse {result.best_val:.6f} epoch {result.best_epoch}")
    return 0


def cmd_finetune(args) -> int:
    resolved = resolve_config(args)
    _log_resolved(resolved, args.out)
    seed = int(resolved["seed"])
    cfg = _train_config(resolved, args, stage="finetune")
    _block_config(resolved, seed)   # config invariants fail before any compute
    records = data_mod.load_manifest(args.data)
    root = Path(args.data).parent
    if args.init:
        model = load_checkpoint(args.init, reset_heads=args.reset_heads,
                                seed=seed)
        if not isinstance(model, MedIQAModel):
            raise ConfigurationError(f"{args.init} is not a scoring model")
    else:
        if cfg.pt:
            raise ConfigurationError(
                "PT is on but no --init checkpoint was given; pass --init "
                "or --pt off")
        model = MedIQAModel(_block_config(resolved, seed))
    classifier = _load_classifier_if_needed(resolved, args)
    result = train.finetune(model, records, root, cfg, args.out, classifier,
                            **_salient_kw(resolved))
    print(f"checkpoint {result.checkpoint_path}")
    print(f"best_val_mse {result.best_val:.6f} epoch {result.best_epoch}")
    return 0


def cmd_evaluate(args) -> int:
    resolved = resolve_config(args)
    _log_resolved(resolved, args.out)
    records = data_mod.load_manifest(args.data)
    root = Path(args.data).parent
    model = load_checkpoint(args.ckpt)
    classifier = _load_classifier_if_needed(resolved, args)
    flags = {"pt": args.pt != "off", "pm": args.pm != "off",
             "ss": args.ss != "off"}
    report = evaluation.evaluate_model(
        model, records, root, split=args.split,
        prompts_mode=resolved["prompts"], classifier=classifier,
        flags=flags, use_salient=flags["ss"], **_salient_kw(resolved))
    out_path = Path(args.out) / "report.csv"
    evaluation.write_reports(out_path, [report])
    if args.svg:
        subset = [r for r in records if r.split == args.split]
        preds, labels = evaluation.predict_records(
            model, subset, root, resolved["prompts"], classifier, flags["ss"],
            **_salient_kw(resolved))
        evaluation.scatter_svg(Path(args.out) / "scatter.svg", preds, labels)
    print(f"report {out_path}")
    print(f"srcc {report.srcc:.4f} plcc {report.plcc:.4f} rmse {report.rmse:.4f} "
          f"n {report.n}")
    return 0


def cmd_predict(args) -> int:
    resolved = resolve_config(args)
    model = load_checkpoint(args.ckpt)
    if not isinstance(model, MedIQAModel):
        raise ConfigurationError(f"{args.ckpt} is not a scoring model")
    classifier = _load_classifier_if_needed(resolved, args)
    volume = data_mod.load_volume(args.path)
    prompts_mode = resolved["prompts"]
    prompt = None
    if prompts_mode != "off":
        sample = volume if volume.depth > 1 else volume.slice_at(0)
        hints = None
        if args.hints:
            fields = dict(part.split("=") for part in args.hints.split(","))
            hints = fields
        prompt = auto_generate(sample, classifier=classifier, hints=hints,
                               mode=prompts_mode)
    use_salient = args.ss != "off"
    if volume.depth > 1:
        result = model.score_3d(volume, prompt, use_salient=use_salient,
                                **_salient_kw(resolved))
        print(f"Q {result.overall:.6f}")
        for z, q, w in zip(result.slice_indices, result.scores, result.weights):
            print(f"{z} {q:.6f} {w:.6f}")
    else:
        image = normalize_resize(volume.slice_at(0), model.cfg.img_size)
        result = model.score_2d(image, prompt)
        print(f"q {result.overall:.6f}")
    return 0


ABLATION_GRID = (
    {"pt": False, "pm": False, "ss": False},
    {"pt": True, "pm": False, "ss": False},
    {"pt": True, "pm": True, "ss": False},
    {"pt": True, "pm": True, "ss": True},
)


def cmd_ablate(args) -> int:
    """Run the module-toggle grid and emit one report row per configuration."""
    resolved = resolve_config(args)
    _log_resolved(resolved, args.out)
    seed = int(resolved["seed"])
    if any(flags["pt"] for flags in ABLATION_GRID) and not args.pretrain_data:
        raise ConfigurationError(
            "the ablation grid includes PT rows; pass --pretrain-data")
    out_dir = Path(args.out)
    records = data_mod.load_manifest(args.data)
    root = Path(args.data).parent
    classifier = _load_classifier_if_needed(resolved, args)

    pre_ckpt = None
    if args.pretrain_data:
        pre_records = data_mod.load_manifest(args.pretrain_data)
        pre_root = Path(args.pretrain_data).parent
        pre_cfg = _train_config(resolved, args, stage="pretrain")
        pre_model = MedIQAModel(_block_config(resolved, seed))
        pre_result = train.pretrain(pre_model, pre_records, pre_root, pre_cfg,
                                    out_dir / "pretrain", classifier,
                                    **_salient_kw(resolved))
        pre_ckpt = pre_result.checkpoint_path

    reports = []
    for row, flags in enumerate(ABLATION_GRID, start=1):
        if flags["pt"] and pre_ckpt is None:
            raise ConfigurationError(
                "ablation rows with PT on need --pretrain-data")
        cfg = _train_config(resolved, args, stage="finetune")
        cfg.pt, cfg.pm, cfg.ss = flags["pt"], flags["pm"], flags["ss"]
        if flags["pt"]:
            model = load_checkpoint(pre_ckpt, reset_heads=True, seed=seed)
        else:
            model = MedIQAModel(_block_config(resolved, seed))
        result = train.finetune(model, records, root, cfg,
                                out_dir / f"row{row}", classifier,
                                **_salient_kw(resolved))
        best = load_checkpoint(result.checkpoint_path)
        prompts_mode = "off" if not flags["pm"] else resolved["prompts"]
        report = evaluation.evaluate_model(
            best, records, root, split="test", prompts_mode=prompts_mode,
            classifier=classifier, flags=flags, use_salient=flags["ss"],
            **_salient_kw(resolved))
        reports.append(report)
        log.info("ablation row %d flags=%s srcc=%.4f", row, flags, report.srcc)
    out_path = out_dir / "ablation.csv"
    evaluation.write_reports(out_path, reports)
    print(f"report {out_path}")
    return 0


# -- parser ---------------------------------------------------------------------------


def _add_common(sub, out_required: bool = True):
    sub.add_argument("--config", default=None, help="JSON config file with "
                     "flat dotted keys; CLI flags override file values")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", required=out_required, help="output directory")
    sub.add_argument("--prompts", choices=("auto", "manifest", "off"),
                     default=None)
    sub.add_argument("--pt", choices=("on", "off"), default=None)
    sub.add_argument("--pm", choices=("on", "off"), default=None)
    sub.add_argument("--ss", choices=("on", "off"), default=None)
    sub.add_argument("--classifier", default=None,
                     help="classifier checkpoint for --prompts auto")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mediqa",
        description="prompt-driven no-reference medical image quality "
                    "assessment, desk scale")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--levels", default=None,
                   help="comma-separated quality levels, or 'ramp'")
    p.add_argument("--dim", choices=("2D", "3D"), default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--modalities", default=None)
    p.add_argument("--label-kind", dest="label_kind",
                   choices=("expert", "physical"), default=None)
    p.set_defaults(func=cmd_gen_data)

    p = commands.add_parser("train-classifier", help="train the prompt classifier")
    _add_common(p)
    p.add_argument("--data", required=True, help="manifest CSV")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train_classifier)

    p = commands.add_parser("pretrain", help="physical-parameter pretraining")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = commands.add_parser("finetune", help="expert-score fine-tuning")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None, help="starting checkpoint")
    p.add_argument("--reset-heads", action="store_true",
                   help="freshly initialize quality heads when loading --init")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = commands.add_parser("evaluate", help="metrics on one split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--svg", action="store_true",
                   help="emit a score-vs-label scatter plot")
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser("predict", help="score one volume or image")
    _add_common(p, out_required=False)
    p.add_argument("path", help="raw volume file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--hints", default=None,
                   help="prompt hints, e.g. modality=CT,region=chest,type=none")
    p.set_defaults(func=cmd_predict)

    p = commands.add_parser("ablate", help="run the PT/PM/SS toggle grid")
    _add_common(p)
    p.add_argument("--data", required=True, help="fine-tuning manifest")
    p.add_argument("--pretrain-data", dest="pretrain_data", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except MedIQAError as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
