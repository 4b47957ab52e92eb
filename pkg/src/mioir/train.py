"""Mixed and sequential training runs, plus classifier training."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mioir import checkpoint
from mioir import nncore as nn
from mioir.dataio import DatasetManifest, sample_batch
from mioir.degrade import make_rng
from mioir.model import BackboneConfig, Classifier, ClassifierConfig, RestorationNet, argmax_task
from mioir.tasks import TASKS, TaskId, parse_tasks

log = logging.getLogger(__name__)

STRATEGIES = ("mixed", "sequential")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint_path=None):
        super().__init__(msg)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainPlan:
    strategy: str = "sequential"
    sequence: str = "SBNJRHL"
    periods: int = 10
    iters_per_period: int = 500
    batch_size: int = 8
    patch: int = 32
    lr_max: float = 2e-4
    lr_min: float = 1e-7
    seed: int = 0
    reset_adam_each_period: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        self.sequence = "".join(t.value for t in parse_tasks(self.sequence))
        if self.iters_per_period < 1:
            raise ValueError("iters_per_period must be >= 1")
        if self.periods < 1:
            raise ValueError("periods must be >= 1")
        if self.strategy == "sequential" and self.periods < len(self.sequence):
            raise ValueError(f"sequential plan over {len(self.sequence)} tasks needs >= {len(self.sequence)} periods, got {self.periods}")

    @property
    def tasks(self) -> list[TaskId]:
        return parse_tasks(self.sequence)

    @property
    def total_iters(self) -> int:
        return self.periods * self.iters_per_period

    @property
    def schedule(self) -> nn.CosineSchedule:
        return nn.CosineSchedule(self.lr_max, self.lr_min, self.iters_per_period, restart=True)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def tasks_for_period(plan: TrainPlan, k: int) -> list[TaskId]:
    """Active tasks in period ``k`` (1-based)."""
    if not 1 <= k <= plan.periods:
        raise ValueError(f"period {k} outside 1..{plan.periods}")
    seq = plan.tasks
    if plan.strategy == "mixed":
        return seq
    return seq[: min(k, len(seq))]


@dataclass
class SequenceReport:
    sequence: str
    categories: list[str]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.warnings


def validate_sequence(seq, tasks=TASKS) -> SequenceReport:
    """Check ``seq`` is a permutation of ``tasks``; warn when luminance tasks come early.

    Detail-enhancement tasks are best learnt before the global luminance ones.
    A luminance task within the first ``min(2, #detail tasks)`` positions
    produces a warning, not an error.
    """
    letters = seq if isinstance(seq, str) else "".join(TaskId(t).value for t in seq)
    letters = letters.replace(",", "").replace(" ", "")
    expected = sorted(TaskId(t).value for t in tasks)
    if sorted(letters.upper()) != expected:
        raise ValueError(f"sequence {seq!r} is not a permutation of {''.join(expected)}")
    order = parse_tasks(letters)
    n_detail = sum(t.category == "detail" for t in order)
    head = order[: min(2, n_detail)]
    warnings = [
        f"luminance task {t.value} ({t.long_name}) at position {i + 1}; learning detail tasks first usually works better"
        for i, t in enumerate(head)
        if t.category == "luminance"
    ]
    return SequenceReport("".join(t.value for t in order), [t.category for t in order], warnings)


# ---------------------------------------------------------------------------
# run state and checkpoints


@dataclass
class RunState:
    plan: TrainPlan
    model: RestorationNet
    adam: nn.AdamState = field(default_factory=nn.AdamState)
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def period(self) -> int:
        return min(self.iteration // self.plan.iters_per_period + 1, self.plan.periods)

    @property
    def done(self) -> bool:
        return self.iteration >= self.plan.total_iters


def save_checkpoint(state: RunState, path) -> Path:
    tensors = {f"param/{k}": v for k, v in state.model.state_arrays().items()}
    for k in state.model.params:
        if k in state.adam.m:
            tensors[f"adam.m/{k}"] = state.adam.m[k]
            tensors[f"adam.v/{k}"] = state.adam.v[k]
    meta = {
        "kind": "run",
        "plan": state.plan.to_dict(),
        "model_config": state.model.config.to_dict(),
        "adam": {"step": state.adam.step, "beta1": state.adam.beta1, "beta2": state.adam.beta2, "eps": state.adam.eps},
        "iteration": state.iteration,
        # batches are drawn from make_rng(seed, "batch", period, iteration), so
        # the iteration counter is the whole RNG state
        "rng": {"seed": state.plan.seed, "scheme": "per-iteration"},
        "history": state.history,
    }
    return checkpoint.write(path, tensors, meta)


def load_checkpoint(path) -> RunState:
    arrays, meta = checkpoint.read(path)
    if meta.get("kind") != "run":
        raise checkpoint.CheckpointError(f"{path}: not a run checkpoint (kind={meta.get('kind')!r})")
    plan = TrainPlan(**meta["plan"])
    model = RestorationNet(BackboneConfig(**meta["model_config"]))
    model.load_arrays({k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")})
    a = meta["adam"]
    adam = nn.AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
    for k, v in arrays.items():
        if k.startswith("adam.m/"):
            adam.m[k[len("adam.m/") :]] = v.copy()
        elif k.startswith("adam.v/"):
            adam.v[k[len("adam.v/") :]] = v.copy()
    return RunState(plan, model, adam, int(meta["iteration"]), list(meta["history"]))


def load_model(path) -> RestorationNet:
    """Restoration model from either a run or a bare model checkpoint."""
    arrays, meta = checkpoint.read(path)
    if meta.get("kind") == "run":
        arrays = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    return RestorationNet.from_arrays(arrays, meta)


# ---------------------------------------------------------------------------
# restoration training


def train_step(model: RestorationNet, adam: nn.AdamState, lq, gt, tasks, lr: float) -> float:
    model.zero_grad()
    hint = tasks if model.config.prompt_mode == "explicit" else None
    out = model(lq, hint)
    loss = nn.l1_loss(out, nn.Tensor(gt.astype(out.data.dtype, copy=False)))
    value = float(loss.data)
    if not math.isfinite(value):
        return value
    loss.backward()
    nn.adam_step(model.params, model.grads(), adam, lr)
    return value


def run_training(
    plan: TrainPlan,
    manifest: DatasetManifest,
    model: RestorationNet | None = None,
    *,
    out_dir=None,
    state: RunState | None = None,
    stop_at: int | None = None,
    log_every: int = 0,
) -> RunState:
    """Train ``model`` under ``plan``; resume from ``state`` when given.

    Writes ``period_XX.ckpt`` at each period boundary and appends one JSON
    line per step to ``train_log.jsonl`` when ``out_dir`` is set. ``stop_at``
    halts after that global iteration count (for split runs).
    """
    if state is None:
        if model is None:
            raise ValueError("need a model or a run state")
        state = RunState(plan, model)
    plan = state.plan
    missing = [t.value for t in plan.tasks if not manifest.by_task(t)]
    if missing:
        raise ValueError(f"manifest lacks tasks {''.join(missing)} required by the plan")
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a")
    schedule = plan.schedule
    end = plan.total_iters if stop_at is None else min(stop_at, plan.total_iters)
    try:
        while state.iteration < end:
            g = state.iteration
            k = g // plan.iters_per_period + 1
            local = g % plan.iters_per_period
            if local == 0 and k > 1 and plan.reset_adam_each_period:
                state.adam.reset()
            active = tasks_for_period(plan, k)
            rng = make_rng(plan.seed, "batch", k, g)
            batch = sample_batch(manifest, active, plan.batch_size, plan.patch, rng)
            lr = nn.lr_at(schedule, local)
            loss = train_step(state.model, state.adam, batch.lq, batch.gt, batch.tasks, lr)
            if not math.isfinite(loss):
                diag = None
                if out_dir is not None:
                    diag = save_checkpoint(state, out_dir / "diverged.ckpt")
                raise TrainingDiverged(f"non-finite loss {loss} at iteration {g} (period {k})", diag)
            rec = {"iteration": g, "period": k, "active": "".join(t.value for t in active), "n_active": len(active), "loss": loss, "lr": lr}
            state.history.append(rec)
            state.iteration = g + 1
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
            if log_every and state.iteration % log_every == 0:
                log.info("iter %d period %d loss %.5f lr %.3g", g, k, loss, lr)
            if state.iteration % plan.iters_per_period == 0 and out_dir is not None:
                save_checkpoint(state, out_dir / f"period_{k:02d}.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


# ---------------------------------------------------------------------------
# classifier


@dataclass
class ClassifierTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    patch: int = 32
    lr_max: float = 2e-3
    lr_min: float = 1e-5
    seed: int = 0
    model: ClassifierConfig = field(default_factory=ClassifierConfig)


def classifier_accuracy(classifier: Classifier, manifest: DatasetManifest, indices=None, chunk: int = 32) -> float:
    """Fraction of records whose full LQ image is classified as its task."""
    idx = list(range(len(manifest.records))) if indices is None else list(indices)
    if not idx:
        raise ValueError("no samples to evaluate")
    correct = 0
    by_shape: dict[tuple, list[int]] = {}
    for i in idx:
        by_shape.setdefault(manifest.pair(i)[0].shape, []).append(i)
    for group in by_shape.values():
        for s in range(0, len(group), chunk):
            part = group[s : s + chunk]
            logits = classifier(np.stack([manifest.pair(i)[0] for i in part])).data
            pred = argmax_task(logits)
            correct += sum(p is manifest.records[i].task for p, i in zip(pred, part))
    return correct / len(idx)


def split_by_gt(manifest: DatasetManifest, holdout: float = 0.2, seed: int = 0) -> tuple[list[int], list[int]]:
    """Train/held-out record indices with disjoint GT images."""
    names = sorted({r.gt_path for r in manifest.records})
    rng = make_rng(seed, "split")
    order = rng.permutation(len(names))
    n_hold = max(1, int(round(holdout * len(names))))
    held = {names[i] for i in order[:n_hold]}
    train = [i for i, r in enumerate(manifest.records) if r.gt_path not in held]
    test = [i for i, r in enumerate(manifest.records) if r.gt_path in held]
    return train, test


def train_classifier(
    manifest: DatasetManifest,
    config: ClassifierTrainConfig | None = None,
    *,
    eval_manifest: DatasetManifest | None = None,
    holdout: float = 0.2,
    out_path=None,
) -> tuple[Classifier, float]:
    """Cross-entropy training on (LQ patch, task) pairs drawn uniformly over tasks.

    Accuracy is measured on ``eval_manifest`` when given, otherwise on
    records whose GT image was held out of training.
    """
    cfg = config or ClassifierTrainConfig()
    missing = [t.value for t in TASKS if not manifest.by_task(t)]
    if missing:
        raise ValueError(f"classifier training needs all 7 tasks; missing {''.join(missing)}")
    if eval_manifest is None:
        train_idx, test_idx = split_by_gt(manifest, holdout, cfg.seed)
        train_set, eval_set, eval_idx = manifest.subset(train_idx), manifest, test_idx
    else:
        train_set, eval_set, eval_idx = manifest, eval_manifest, None
    clf = Classifier(cfg.model, seed=cfg.seed)
    adam = nn.AdamState()
    schedule = nn.CosineSchedule(cfg.lr_max, cfg.lr_min, cfg.steps, restart=False)
    for step in range(cfg.steps):
        batch = sample_batch(train_set, TASKS, cfg.batch_size, cfg.patch, make_rng(cfg.seed, "clf-batch", step))
        clf.zero_grad()
        loss = nn.softmax_cross_entropy(clf(batch.lq), batch.labels)
        if not math.isfinite(float(loss.data)):
            raise TrainingDiverged(f"classifier loss became non-finite at step {step}")
        loss.backward()
        nn.adam_step(clf.params, clf.grads(), adam, nn.lr_at(schedule, step))
    acc = classifier_accuracy(clf, eval_set, eval_idx)
    if out_path is not None:
        clf.save(out_path, {"accuracy": acc, "train": {k: v for k, v in dataclasses.asdict(cfg).items() if k != "model"}})
    return clf, acc
