"""Operator surface: dataset generation, synthesis training, bulk synthesis,
task training/fine-tuning, evaluation, and report/figure emission.

Every command writes a run manifest next to its artifacts with the resolved
configuration and a content hash of its inputs. Exit codes: 0 success,
1 usage/configuration, 2 data/IO, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dcl_trainer, scenegen, tasks
from .depth_core import FormatError, RangeError, backproject, read_depth
from .metrics import EvaluationError, MetricReport, write_metric_csv
from .nn_core import ConfigError, ModelConfig, NumericError, UsageError
from .scenegen import (DomainConfig, NoiseModel, build_dataset, load_manifest,
                       noisify_manifest, real_domain_config, synth_domain_config)
from .tasks import SplitError, TaskConfig


class UsageExit(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise UsageExit(message)


def _data_path(p) -> Path:
    path = Path(p)
    root = os.environ.get("DCL_DATA_DIR")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def compute_input_hash(config: dict, inputs: dict) -> str:
    blob = json.dumps({"config": config, "inputs": inputs}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_run_manifest(out_dir: Path, command: str, config: dict, seed,
                       input_files, artifacts) -> None:
    """Atomically record what produced the artifacts in this directory."""
    inputs = {str(p): _sha256_file(Path(p)) for p in input_files}
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "input_hash": compute_input_hash(config, inputs),
        "artifacts": sorted(str(a) for a in artifacts),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "run_manifest.json"
    tmp = target.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, target)


def _load_json_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"bad JSON config {path}: {err}") from err


def _noise_model(args) -> NoiseModel:
    nm = NoiseModel()
    if getattr(args, "noise_config", None):
        overrides = _load_json_config(_data_path(args.noise_config))
        known = set(NoiseModel().to_dict())
        bad = set(overrides) - known
        if bad:
            raise ConfigError(f"unknown noise-model keys: {sorted(bad)}")
        nm = NoiseModel.from_dict({**nm.to_dict(), **overrides})
    nm.validate()
    return nm


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    base = synth_domain_config() if args.domain == "synth" else real_domain_config()
    cfg = base
    if args.res:
        cfg = replace(cfg, res=(args.res, args.res))
    if args.d_max:
        cfg = replace(cfg, d_max=args.d_max,
                      background_range=tuple(min(b, args.d_max * 0.9)
                                             for b in cfg.background_range))
    nm = _noise_model(args)
    out = Path(args.out)
    manifest = build_dataset(cfg, nm, args.count, args.seed, out,
                             split=args.split)
    config = {"domain": args.domain, "count": args.count, "split": args.split,
              "res": list(cfg.res), "d_max": cfg.d_max,
              "noise_model": nm.to_dict() if args.domain == "real" else None}
    write_run_manifest(out, "gen-data", config, args.seed, [],
                       [manifest.name])
    return 0


def cmd_train_dcl(args) -> int:
    ablate = set(args.ablate or ())
    model = ModelConfig(res=args.res, base_width=args.base_width,
                        res_blocks=args.res_blocks,
                        use_rgb=bool(args.use_rgb))
    cfg = dcl_trainer.TrainConfig(
        alpha=args.alpha, beta=args.beta, tau=args.tau, lr=args.lr,
        batch_size=args.batch, steps=args.steps, seed=args.seed,
        use_rgb=bool(args.use_rgb), use_adv="adv" not in ablate,
        use_dc="dc" not in ablate, use_idt="idt" not in ablate,
        gan_mode=args.gan_mode, checkpoint_every=args.checkpoint_every,
        model=model)
    synth = _data_path(args.synth)
    real = _data_path(args.real)
    out = Path(args.out)
    ckpt, _ = dcl_trainer.train(synth, real, cfg, out)
    write_run_manifest(out, "train-dcl", cfg.to_dict(), args.seed,
                       [synth, real], [ckpt.name, "train_log.jsonl"])
    return 0


def cmd_synthesize(args) -> int:
    manifest = _data_path(args.manifest)
    out = Path(args.out)
    if args.simulation:
        nm = _noise_model(args)
        out_manifest = noisify_manifest(manifest, nm, args.seed, out)
        config = {"method": "simulation", "noise_model": nm.to_dict()}
        inputs = [manifest]
    else:
        if not args.checkpoint:
            raise ConfigError("synthesize requires --checkpoint or --simulation")
        ckpt = _data_path(args.checkpoint)
        out_manifest = dcl_trainer.synthesize_dataset(ckpt, manifest, out)
        config = {"method": "dcl", "checkpoint": str(ckpt)}
        inputs = [manifest, ckpt]
    write_run_manifest(out, "synthesize", config, args.seed, inputs,
                       [out_manifest.name])
    return 0


def cmd_train_task(args) -> int:
    cfg = TaskConfig(kind=args.kind, steps=args.steps, batch=args.batch,
                     lr=args.lr, seed=args.seed)
    manifest = _data_path(args.manifest)
    model = tasks.train_task(args.kind, manifest, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tasks.save_task_model(out, model)
    write_run_manifest(out.parent, "train-task", cfg.to_dict(), args.seed,
                       [manifest], [out.name])
    return 0


def cmd_finetune(args) -> int:
    model_path = _data_path(args.model)
    manifest = _data_path(args.manifest)
    model = tasks.load_task_model(model_path)
    cfg = TaskConfig(kind=model.kind, steps=args.steps, batch=args.batch,
                     lr=args.lr, seed=args.seed)
    model = tasks.finetune(model, manifest, args.fraction, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tasks.save_task_model(out, model)
    config = dict(cfg.to_dict(), fraction=args.fraction)
    write_run_manifest(out.parent, "finetune", config, args.seed,
                       [model_path, manifest], [out.name])
    return 0


def cmd_eval(args) -> int:
    model_path = _data_path(args.model)
    manifest = _data_path(args.manifest)
    model = tasks.load_task_model(model_path)
    report = tasks.evaluate_task(model, manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_text(report.to_json())
    os.replace(tmp, out)
    write_run_manifest(out.parent, "eval", {"model": str(model_path)}, None,
                       [model_path, manifest], [out.name])
    return 0


def _method_label(report: MetricReport, used: set) -> str:
    prov = report.provenance
    label = str(prov.get("method", "unknown"))
    if prov.get("finetune_fraction"):
        label += f"+ft{prov['finetune_fraction']:g}"
    if prov.get("task"):
        label = f"{prov['task']}/{label}"
    base = label
    i = 2
    while label in used:
        label = f"{base}#{i}"
        i += 1
    used.add(label)
    return label


def _render_plots(plots_dir: Path, args) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sources = [("clean", args.clean), ("synthesized", args.synthesized),
               ("real", args.real)]
    sources = [(name, load_manifest(_data_path(p))) for name, p in sources if p]
    if not sources:
        return []
    plots_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    count = min(args.count, *(m["count"] for _, m in sources))
    for i in range(count):
        fig, axes = plt.subplots(1, len(sources), figsize=(3 * len(sources), 3))
        axes = np.atleast_1d(axes)
        for ax, (name, manifest) in zip(axes, sources):
            dm, _ = read_depth(Path(manifest["_dir"])
                               / manifest["entries"][i]["depth"])
            shown = np.ma.masked_equal(dm.values, 0.0)
            ax.imshow(shown, vmin=0, vmax=dm.d_max, cmap="viridis")
            ax.set_title(name)
            ax.axis("off")
        fig.tight_layout()
        panel = plots_dir / f"panel_{i:04d}.png"
        fig.savefig(panel)
        plt.close(fig)
        artifacts.append(panel.name)

        fig, axes = plt.subplots(1, len(sources), figsize=(3 * len(sources), 3))
        axes = np.atleast_1d(axes)
        for ax, (name, manifest) in zip(axes, sources):
            dm, K = read_depth(Path(manifest["_dir"])
                               / manifest["entries"][i]["depth"])
            cloud = backproject(dm, K)
            if cloud.points.size:
                ax.scatter(cloud.points[:, 2], -cloud.points[:, 1], s=0.2,
                           c=cloud.points[:, 0], cmap="coolwarm")
            ax.set_title(f"{name} side view")
            ax.set_xlabel("z (m)")
        fig.tight_layout()
        cloud_path = plots_dir / f"cloud_{i:04d}.png"
        fig.savefig(cloud_path)
        plt.close(fig)
        artifacts.append(cloud_path.name)
    return artifacts


def cmd_report(args) -> int:
    if not args.inputs:
        raise ConfigError("report needs at least one input metric file")
    rows = []
    used = set()
    for path in args.inputs:
        report = MetricReport.from_json(Path(_data_path(path)).read_text())
        rows.append((_method_label(report, used), report))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        write_metric_csv(rows, out)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    artifacts = [out.name]
    if args.plots:
        artifacts += _render_plots(Path(args.plots), args)
    write_run_manifest(out.parent, "report", {"inputs": [str(p) for p in args.inputs]},
                       None, [_data_path(p) for p in args.inputs], artifacts)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> Parser:
    parser = Parser(prog="dclsynth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural dataset")
    p.add_argument("--domain", choices=("synth", "real"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--d-max", type=float, default=None)
    p.add_argument("--split", choices=scenegen.SPLIT_NAMES, default="train")
    p.add_argument("--noise-config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-dcl", help="train the depth synthesis network")
    p.add_argument("--synth", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=1.5)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--base-width", type=int, default=32)
    p.add_argument("--res-blocks", type=int, default=6)
    p.add_argument("--gan-mode", choices=("logistic", "lsgan"), default="logistic")
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--use-rgb", action="store_true")
    p.add_argument("--ablate", action="append", choices=("adv", "dc", "idt"))
    p.set_defaults(func=cmd_train_dcl)

    p = sub.add_parser("synthesize", help="bulk-transform a clean dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--simulation", action="store_true",
                   help="use the parametric noise model instead of a checkpoint")
    p.add_argument("--noise-config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train-task", help="train a downstream task network")
    p.add_argument("--kind", choices=tasks.TASK_KINDS, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=800)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_task)

    p = sub.add_parser("finetune", help="fine-tune a task model on real labels")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a task model on a validation set")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="emit metric tables and figure panels")
    p.add_argument("--inputs", nargs="*", default=[])
    p.add_argument("--out", required=True)
    p.add_argument("--plots", default=None)
    p.add_argument("--clean", default=None)
    p.add_argument("--synthesized", default=None)
    p.add_argument("--real", default=None)
    p.add_argument("--count", type=int, default=4)
    p.set_defaults(func=cmd_report)

    for name, sp in sub.choices.items():
        sp.add_argument("--config", default=None,
                        help="JSON file with default values for any flag")
    return parser


def _apply_config_file(parser, argv, args):
    """Flag precedence over config-file values over built-in defaults."""
    if not getattr(args, "config", None):
        return args
    overrides = _load_json_config(_data_path(args.config))
    explicit = set()
    for tok in argv:
        if tok.startswith("--"):
            explicit.add(tok[2:].split("=", 1)[0].replace("-", "_"))
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigError(f"unknown config key {key!r}")
        if attr not in explicit:
            setattr(args, attr, value)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(parser, argv, args)
        return args.func(args)
    except UsageExit:
        return 1
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3
    except (FormatError, RangeError, EvaluationError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except (ConfigError, UsageError, SplitError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
