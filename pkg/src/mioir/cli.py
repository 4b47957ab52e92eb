"""``mioir`` command line: synth, train, eval, classifier, prompt-analyze, prompt-interp.

Settings resolve as defaults < config file section < command-line flags, and
the resolved values are written next to every output. Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from mioir import __version__
from mioir.dataio import DatasetManifest, build_dataset, load_png, save_png, write_synthetic_gt
from mioir.degrade import DEPTH_KINDS, ParamRanges, RainConfig, load_degrade_config
from mioir.evaluation import (
    dumps_report,
    eval_model,
    identity_row,
    improvement_table,
    prompt_cluster_report,
    restore_image,
)
from mioir.model import BackboneConfig, Classifier, ClassifierConfig, RestorationNet, interpolate_prompts
from mioir.tasks import TASKS, parse_tasks
from mioir.train import (
    ClassifierTrainConfig,
    TrainPlan,
    classifier_accuracy,
    load_model,
    run_training,
    save_checkpoint,
    train_classifier,
    validate_sequence,
)

log = logging.getLogger("mioir")

SEED_ENV = "MIOIR_SEED"
GROUP_ALIASES = {"in": "in_dis", "out": "out_dis", "in_dis": "in_dis", "out_dis": "out_dis"}
PROMPT_ALIASES = {"none": "none", "explicit": "explicit", "ep": "explicit", "adaptive": "adaptive", "ap": "adaptive"}
STRATEGY_ALIASES = {"mixed": "mixed", "m": "mixed", "sequential": "sequential", "s": "sequential"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def run_tag(strategy: str, prompt: str, backbone: str = "mini") -> str:
    """Run tag such as ``mini-S+EP`` or ``mini-M``."""
    tag = f"{backbone}-{'S' if strategy == 'sequential' else 'M'}"
    if prompt == "explicit":
        tag += "+EP"
    elif prompt == "adaptive":
        tag += "+AP"
    return tag


# ---------------------------------------------------------------------------
# config resolution


def _read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is not None and not cp.read(path):
        raise UsageError(f"cannot read config file {path}")
    return cp


def resolve(args, section: str, defaults: dict) -> dict:
    """Merge defaults, the config file's ``[section]`` and explicit flags."""
    cp = _read_config(args.config)
    out = dict(defaults)
    if cp.has_section(section):
        for k, raw in cp.items(section):
            key = k.replace("-", "_")
            if key not in defaults:
                raise UsageError(f"[{section}] unknown key {k!r}")
            out[key] = _coerce(raw, defaults[key])
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    return out


def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, (list, tuple)):
        return [x.strip() for x in raw.split(",") if x.strip()]
    return raw.strip()


def default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


def _path(args, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


def _write_resolved(out_dir: Path, command: str, cfg: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    body = {"command": command, "version": __version__, "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}}
    path = out_dir / f"{command}.resolved.json"
    path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gt(args) -> int:
    cfg = resolve(args, "gt", {"out": "gt", "count": 20, "size": 64, "seed": default_seed()})
    out = _path(args, cfg["out"])
    paths = write_synthetic_gt(out, cfg["count"], cfg["size"], cfg["seed"])
    _write_resolved(out, "gt", cfg)
    print(f"wrote {len(paths)} ground-truth images to {out}")
    return 0


def _param_histograms(manifest: DatasetManifest, bins: int = 5) -> list[str]:
    lines = []
    for t in manifest.tasks:
        recs = [r for r in manifest.records if r.task is t]
        for name, value in recs[0].params.to_dict().items():
            if name == "task":
                continue
            vals = np.array([r.params.to_dict()[name] for r in recs], dtype=float)
            if np.ptp(vals) == 0:
                lines.append(f"  {t.value} {name}: all {vals[0]:g} (n={len(vals)})")
                continue
            counts, edges = np.histogram(vals, bins=bins)
            cells = " ".join(f"[{edges[i]:.4g},{edges[i + 1]:.4g}):{c}" for i, c in enumerate(counts))
            lines.append(f"  {t.value} {name}: {cells}")
    return lines


def cmd_synth(args) -> int:
    cfg = resolve(
        args,
        "synth",
        {"gt_dir": "gt", "out_dir": "data", "group": "in", "tasks": "SBNJRHL", "seed": default_seed(), "depth": "smooth-random", "jobs": 1, "degrade_config": ""},
    )
    group = GROUP_ALIASES.get(str(cfg["group"]).lower())
    if group is None:
        raise UsageError(f"--group must be one of in, out (got {cfg['group']!r})")
    try:
        tasks = parse_tasks(cfg["tasks"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    if cfg["depth"] not in DEPTH_KINDS:
        raise UsageError(f"--depth must be one of {DEPTH_KINDS}")
    ranges, rain = ParamRanges(), RainConfig()
    if cfg["degrade_config"]:
        ranges, rain = load_degrade_config(_path(args, cfg["degrade_config"]))
    out = _path(args, cfg["out_dir"])
    manifest = build_dataset(_path(args, cfg["gt_dir"]), tasks, group, ranges, cfg["seed"], out, jobs=cfg["jobs"], depth_kind=cfg["depth"], rain=rain)
    mpath = out / group / "manifest.jsonl"
    _write_resolved(out / group, "synth", cfg)
    digest = hashlib.sha256(mpath.read_bytes()).hexdigest()
    print(f"{len(manifest.records)} records -> {mpath}")
    print(f"manifest sha256 {digest}")
    for line in _param_histograms(manifest):
        print(line)
    return 0


def cmd_train(args) -> int:
    cfg = resolve(
        args,
        "train",
        {
            "data": "data/in_dis/manifest.jsonl",
            "strategy": "sequential",
            "prompt": "none",
            "sequence": "SBNJRHL",
            "seed": default_seed(),
            "periods": 10,
            "iters": 500,
            "batch": 8,
            "patch": 32,
            "lr_max": 2e-4,
            "lr_min": 1e-7,
            "channels": 16,
            "blocks": 4,
            "prompt_dim": 32,
            "out": "",
            "reset_adam": False,
        },
    )
    strategy = STRATEGY_ALIASES.get(str(cfg["strategy"]).lower())
    prompt = PROMPT_ALIASES.get(str(cfg["prompt"]).lower())
    if strategy is None:
        raise UsageError("--strategy must be mixed or sequential")
    if prompt is None:
        raise UsageError("--prompt must be none, explicit or adaptive")
    manifest = DatasetManifest.load(_path(args, cfg["data"]))
    try:
        report = validate_sequence(cfg["sequence"], manifest.tasks)
    except ValueError as e:
        raise UsageError(str(e)) from None
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    tag = run_tag(strategy, prompt)
    out = _path(args, cfg["out"] or f"runs/{tag}")
    plan = TrainPlan(
        strategy=strategy,
        sequence=report.sequence,
        periods=cfg["periods"],
        iters_per_period=cfg["iters"],
        batch_size=cfg["batch"],
        patch=cfg["patch"],
        lr_max=cfg["lr_max"],
        lr_min=cfg["lr_min"],
        seed=cfg["seed"],
        reset_adam_each_period=cfg["reset_adam"],
    )
    net = RestorationNet(BackboneConfig(cfg["channels"], cfg["blocks"], cfg["patch"], prompt, cfg["prompt_dim"]), seed=cfg["seed"])
    _write_resolved(out, "train", {**cfg, "tag": tag, "strategy": strategy, "prompt": prompt})
    (out / "train_log.jsonl").unlink(missing_ok=True)
    state = run_training(plan, manifest, net, out_dir=out, log_every=max(1, plan.iters_per_period))
    final = save_checkpoint(state, out / "final.ckpt")
    print(f"{tag}: {state.iteration} steps, final loss {state.history[-1]['loss']:.5f} -> {final}")
    return 0


def _parse_checkpoints(items) -> list[tuple[str, str]]:
    out = []
    for it in items:
        if "=" in it:
            tag, path = it.split("=", 1)
        else:
            tag, path = Path(it).parent.name or Path(it).stem, it
        out.append((tag, path))
    return out


def cmd_eval(args) -> int:
    cfg = resolve(args, "eval", {"data": "data/in_dis/manifest.jsonl", "checkpoint": [], "baseline": "", "classifier": "", "manual_tasks": False, "out": "reports", "include_input": False})
    if not cfg["checkpoint"]:
        raise UsageError("give at least one --checkpoint [TAG=]PATH")
    group = DatasetManifest.load(_path(args, cfg["data"]))
    clf = Classifier.load(_path(args, cfg["classifier"])) if cfg["classifier"] else None
    rows = []
    if cfg["include_input"]:
        rows.append(identity_row(group))
    for tag, path in _parse_checkpoints(cfg["checkpoint"]):
        model = load_model(_path(args, path))
        if model.config.prompt_mode == "explicit" and clf is None and not cfg["manual_tasks"]:
            raise UsageError(f"{tag}: explicit-prompt model needs --classifier or --manual-tasks")
        rows.append(eval_model(model, group, classifier=clf, manual_tasks=cfg["manual_tasks"], tag=tag))
    from mioir.evaluation import ReportTable

    table = improvement_table(rows, cfg["baseline"], group.group) if cfg["baseline"] else ReportTable(group.group, rows)
    out = _path(args, cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_{group.group}.json").write_text(dumps_report(table.to_dict()))
    md = table.to_markdown()
    (out / f"eval_{group.group}.md").write_text(md)
    _write_resolved(out, "eval", cfg)
    print(md, end="")
    return 0


def cmd_classifier(args) -> int:
    cfg = resolve(
        args,
        "classifier",
        {"data": "data/in_dis/manifest.jsonl", "eval_data": "", "checkpoint": "", "steps": 4000, "batch": 16, "patch": 64, "lr_max": 3e-3, "seed": default_seed(), "out": "runs/classifier"},
    )
    manifest = DatasetManifest.load(_path(args, cfg["data"]))
    if args.action == "train":
        out = _path(args, cfg["out"])
        tc = ClassifierTrainConfig(steps=cfg["steps"], batch_size=cfg["batch"], patch=cfg["patch"], lr_max=cfg["lr_max"], seed=cfg["seed"], model=ClassifierConfig(patch=cfg["patch"]))
        eval_set = DatasetManifest.load(_path(args, cfg["eval_data"])) if cfg["eval_data"] else None
        _write_resolved(out, "classifier", cfg)
        _, acc = train_classifier(manifest, tc, eval_manifest=eval_set, out_path=out / "classifier.ckpt")
        print(f"held-out accuracy {acc:.4f} -> {out / 'classifier.ckpt'}")
        return 0
    if cfg["checkpoint"]:
        clf = Classifier.load(_path(args, cfg["checkpoint"]))
    else:
        print("note: no --checkpoint given; evaluating an untrained classifier", file=sys.stderr)
        clf = Classifier(ClassifierConfig(), seed=cfg["seed"])
    acc = classifier_accuracy(clf, manifest)
    print(f"accuracy {acc:.4f} on {len(manifest.records)} samples")
    return 0


def cmd_prompt_analyze(args) -> int:
    cfg = resolve(args, "prompt-analyze", {"checkpoint": "", "data": "data/in_dis/manifest.jsonl", "n_per_task": 100, "seed": default_seed(), "out": "reports"})
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    model = load_model(_path(args, cfg["checkpoint"]))
    if model.config.prompt_mode == "none":
        raise UsageError("prompt analysis needs a model trained with prompts")
    group = DatasetManifest.load(_path(args, cfg["data"]))
    out = _path(args, cfg["out"])
    stem = Path(cfg["checkpoint"]).parent.name or "model"
    report = prompt_cluster_report(model, group, cfg["n_per_task"], cfg["seed"], plot_path=out / f"prompt_clusters_{stem}.png")
    out.mkdir(parents=True, exist_ok=True)
    (out / f"prompt_clusters_{stem}.json").write_text(dumps_report(report))
    _write_resolved(out, "prompt-analyze", cfg)
    print(f"{report['n_points']} points, CHI {report['chi']:.4g}, label-permuted CHI {report['chi_permuted']:.4g}")
    return 0


def contact_sheet(images, pad: int = 2) -> np.ndarray:
    h, w = images[0].shape[:2]
    sheet = np.ones((h, len(images) * (w + pad) - pad, 3))
    for i, im in enumerate(images):
        sheet[:, i * (w + pad) : i * (w + pad) + w] = im
    return sheet


def prompt_interp_sweep(model: RestorationNet, image: np.ndarray, task_a, task_b, alphas) -> list[tuple[float, np.ndarray]]:
    """Restored images for each ``alpha``, sorted by ``alpha``."""
    if model.config.prompt_mode != "explicit":
        raise ValueError("prompt interpolation needs an explicit-prompt model")
    out = []
    for a in sorted(alphas):
        prompt = interpolate_prompts(task_a, task_b, a, model.config.patch)
        out.append((a, restore_image(model, image, prompt=prompt)))
    return out


def cmd_prompt_interp(args) -> int:
    cfg = resolve(args, "prompt-interp", {"checkpoint": "", "task_a": "L", "task_b": "R", "alphas": "0,0.25,0.5,0.75,1", "input": "", "out": "interp"})
    if not cfg["checkpoint"] or not cfg["input"]:
        raise UsageError("--checkpoint and --input are required")
    try:
        ta, tb = parse_tasks(cfg["task_a"])[0], parse_tasks(cfg["task_b"])[0]
        alphas = [float(a) for a in str(cfg["alphas"]).split(",")]
    except ValueError as e:
        raise UsageError(str(e)) from None
    if any(not 0 <= a <= 1 for a in alphas):
        raise UsageError("alphas must lie in [0, 1]")
    model = load_model(_path(args, cfg["checkpoint"]))
    image = load_png(_path(args, cfg["input"]))
    sweep = prompt_interp_sweep(model, image, ta, tb, alphas)
    out = _path(args, cfg["out"])
    for a, im in sweep:
        save_png(im, out / f"alpha_{a:.3f}.png")
    save_png(contact_sheet([image] + [im for _, im in sweep]), out / "contact_sheet.png")
    (out / "sweep.json").write_text(json.dumps({"task_a": ta.value, "task_b": tb.value, "alphas": [a for a, _ in sweep]}, indent=2) + "\n")
    _write_resolved(out, "prompt-interp", cfg)
    print(f"{len(sweep)} images and contact sheet -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mioir", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--workdir", default=".", help="base directory for relative paths")
    p.add_argument("--config", default=None, help="INI file; one section per command")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gt", help="write procedural ground-truth images")
    s.add_argument("--out")
    s.add_argument("--count", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gt)

    s = sub.add_parser("synth", help="degrade GT images into a dataset")
    s.add_argument("--gt-dir", dest="gt_dir")
    s.add_argument("--out", dest="out_dir")
    s.add_argument("--group", help="in or out")
    s.add_argument("--tasks", help="task letters, e.g. SBNJRHL")
    s.add_argument("--seed", type=int)
    s.add_argument("--depth", help=f"one of {', '.join(DEPTH_KINDS)}")
    s.add_argument("--jobs", type=int)
    s.add_argument("--degrade-config", dest="degrade_config")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a restoration model")
    s.add_argument("--data")
    s.add_argument("--strategy")
    s.add_argument("--prompt")
    s.add_argument("--sequence")
    s.add_argument("--seed", type=int)
    s.add_argument("--periods", type=int)
    s.add_argument("--iters", type=int, help="iterations per period")
    s.add_argument("--batch", type=int)
    s.add_argument("--patch", type=int)
    s.add_argument("--lr-max", dest="lr_max", type=float)
    s.add_argument("--lr-min", dest="lr_min", type=float)
    s.add_argument("--channels", type=int)
    s.add_argument("--blocks", type=int)
    s.add_argument("--prompt-dim", dest="prompt_dim", type=int)
    s.add_argument("--reset-adam", dest="reset_adam", action="store_const", const=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="PSNR table over a test group")
    s.add_argument("--data")
    s.add_argument("--checkpoint", action="append", help="[TAG=]PATH, repeatable")
    s.add_argument("--baseline")
    s.add_argument("--classifier")
    s.add_argument("--manual-tasks", dest="manual_tasks", action="store_const", const=True)
    s.add_argument("--include-input", dest="include_input", action="store_const", const=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("classifier", help="train or evaluate the degradation classifier")
    s.add_argument("action", choices=["train", "eval"])
    s.add_argument("--data")
    s.add_argument("--eval-data", dest="eval_data")
    s.add_argument("--checkpoint")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--patch", type=int)
    s.add_argument("--lr-max", dest="lr_max", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_classifier)

    s = sub.add_parser("prompt-analyze", help="CHI and 2-D view of prompt features")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--n-per-task", dest="n_per_task", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_prompt_analyze)

    s = sub.add_parser("prompt-interp", help="restore with blended explicit prompts")
    s.add_argument("--checkpoint")
    s.add_argument("--task-a", dest="task_a")
    s.add_argument("--task-b", dest="task_b")
    s.add_argument("--alphas")
    s.add_argument("--input")
    s.add_argument("--out")
    s.set_defaults(func=cmd_prompt_interp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mioir: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report and map to the runtime-failure exit code
        print(f"mioir: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
