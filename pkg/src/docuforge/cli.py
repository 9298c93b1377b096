"""Command line entry point: ``docuforge {synth,train,clean,eval,report}``.

Every subcommand reads an optional JSON config, applies flag and ``--set``
overrides on top of built-in defaults, writes the resolved config to
``<out>/config.resolved.json`` and then works inside ``<out>``.

Exit status: 0 success, 1 runtime failure, 2 bad invocation or config,
3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .degrade import DEFAULT_SYNTH, IMAGE_SUFFIXES, build_dataset, merge_config, read_manifest, synth_corpus
from .errors import DivergenceDetected, InvalidArgument

log = logging.getLogger("docuforge")

DEFAULTS = {
    "synth": {
        "task": "fade",
        "seed": 0,
        "corpus": None,
        "corpus_pages": 24,
        "page_size": [96, 96],
        "dataset": DEFAULT_SYNTH,
    },
    "train": {"data": None, "resume": None, "max_iterations": None, "train": {}},
    "clean": {"checkpoint": None, "input": None},
    "eval": {"data": None, "task": None, "model": None, "checkpoint": None, "split": "test", "mode": "standard"},
    "report": {"reports": [], "reports_dir": None},
}


class ConfigError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg: dict, key: str, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[args.command]))
    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = merge_config(cfg, user)
    flag_home = "train." if args.command == "train" else ""
    for flag in ("task", "model", "seed"):
        value = getattr(args, flag)
        if value is not None:
            _set_dotted(cfg, flag_home + flag, value)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_dotted(cfg, key.strip(), _parse_value(value))
    return cfg


def write_snapshot(out: Path, command: str, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    snap = {"subcommand": command, "config": cfg, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out / "config.resolved.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------------


def cmd_synth(cfg: dict, out: Path) -> int:
    task, seed = cfg["task"], int(cfg["seed"])
    corpus = cfg["corpus"]
    if corpus is None:
        h, w = cfg["page_size"]
        corpus = out / "corpus"
        synth_corpus(corpus, int(cfg["corpus_pages"]), int(h), int(w), seed)
    manifests = build_dataset(corpus, task, cfg["dataset"], seed, out)
    for split, m in manifests.items():
        log.info("%s/%s: %d records -> %s", task, split, len(m.records), m.path)
    return 0


def _train_config(cfg: dict):
    from .train import TrainConfig

    try:
        return TrainConfig.from_dict(cfg["train"])
    except (InvalidArgument, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(cfg: dict, out: Path) -> int:
    from .train import load_checkpoint, train_cgan, train_cyclegan

    tcfg = _train_config(cfg)
    if not cfg["data"]:
        raise ConfigError("train needs 'data' (a synth output directory)")
    manifest = read_manifest(Path(cfg["data"]) / tcfg.task / "train" / "manifest.jsonl")
    resume = load_checkpoint(cfg["resume"]) if cfg["resume"] else None
    fn = train_cyclegan if tcfg.model == "cyclegan" else train_cgan
    ckpt = fn(manifest, tcfg, run_dir=out, resume=resume, max_iterations=cfg["max_iterations"])
    ckpt.save(out / "final")
    log.info("trained %s for %d iterations -> %s", tcfg.model, ckpt.iteration, out / "final")
    return 0


def cmd_clean(cfg: dict, out: Path) -> int:
    from .image import load_image, save_image
    from .train import clean_image, load_checkpoint

    if not cfg["checkpoint"] or not cfg["input"]:
        raise ConfigError("clean needs 'checkpoint' and 'input'")
    ckpt = load_checkpoint(cfg["checkpoint"])
    src = Path(cfg["input"])
    files = [src] if src.is_file() else sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    dest = out / "cleaned"
    dest.mkdir(parents=True, exist_ok=True)
    for p in files:
        save_image(clean_image(load_image(p), ckpt), dest / (p.stem + ".png"))
    log.info("cleaned %d images -> %s", len(files), dest)
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    from .report import compare, evaluate
    from .train import load_checkpoint

    ckpt = None
    if cfg["model"] != "none" and cfg["checkpoint"]:
        ckpt = load_checkpoint(cfg["checkpoint"])
    task = cfg["task"] or (ckpt.config.task if ckpt else None)
    if not cfg["data"] or not task:
        raise ConfigError("eval needs 'data' and a task (or a checkpoint to take it from)")
    manifest = read_manifest(Path(cfg["data"]) / task / cfg["split"] / "manifest.jsonl")
    reports = [evaluate(manifest, None, cfg["mode"])]
    if ckpt is not None:
        reports.append(evaluate(manifest, ckpt, cfg["mode"]))
    for r in reports:
        r.save(out / f"report_{r.model}.json")
    print(compare(reports).to_text(), end="")
    return 0


def cmd_report(cfg: dict, out: Path) -> int:
    from .report import EvalReport, compare, per_kernel_plot

    paths = [Path(p) for p in cfg["reports"]]
    if cfg["reports_dir"]:
        paths += sorted(Path(cfg["reports_dir"]).glob("report_*.json"))
    if not paths:
        raise ConfigError("report needs 'reports' or 'reports_dir'")
    reports = [EvalReport.load(p) for p in paths]
    table = compare(reports)
    table.to_csv(out / "comparison.csv")
    text = table.to_text()
    (out / "comparison.txt").write_text(text)
    table.plot(out / "comparison.svg")
    blur = [r for r in reports if r.task == "blur"]
    if blur and len({g for r in blur for g in r.per_group_mean}) >= 2:
        per_kernel_plot(blur, out)
    print(text, end="")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "clean": cmd_clean, "eval": cmd_eval, "report": cmd_report}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docuforge",
        description="Synthesize degraded documents, train CycleGAN / conditional GAN cleaners, evaluate PSNR.",
        epilog="Environment: DOCUFORGE_THREADS caps worker threads (dataset synthesis and torch).",
    )
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,clean,eval,report}")
    sub.required = True
    helps = {
        "synth": "degrade a clean corpus (or a generated one) into train/test splits",
        "train": "train a cyclegan or cgan model on a synthesized dataset",
        "clean": "clean every image in a directory with a trained checkpoint",
        "eval": "PSNR of a checkpoint (and the noisy baseline) on a test split",
        "report": "comparison table, CSV and SVG plots from report files",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="RNG seed")
        p.add_argument("--task", choices=("background", "blur", "watermark", "fade"))
        p.add_argument("--model", help="cyclegan | cgan (train); none to score only the noisy baseline (eval)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry; dotted keys reach nested entries (repeatable)")
    return parser


def _configure_threads():
    n = os.environ.get("DOCUFORGE_THREADS")
    if n:
        import torch

        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            pass


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = make_parser()
    args = parser.parse_args(argv)
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        write_snapshot(out, args.command, cfg)
        _configure_threads()
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"docuforge: config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceDetected as exc:
        print(f"docuforge: training diverged: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        print(f"docuforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
