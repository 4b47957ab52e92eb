"""PSNR evaluation, improvement tables and prompt-feature clustering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mioir.dataio import DatasetManifest
from mioir.degrade import make_rng
from mioir.model import Classifier, RestorationNet, argmax_task
from mioir.tasks import TASKS, TaskId

INF = float("inf")


def psnr(a, b) -> float:
    """PSNR in dB over all RGB values in ``[0, 1]``; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return INF
    return float(10.0 * np.log10(1.0 / mse))


def fmt_float(v: float, digits: int = 2) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.{digits}f}"


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def dumps_report(obj) -> str:
    """Deterministic JSON with infinities written as the string ``"inf"``."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# restoration


def _tile_starts(n: int, patch: int, overlap: int) -> list[int]:
    if n <= patch:
        return [0]
    step = patch - overlap
    starts = list(range(0, n - patch, step))
    starts.append(n - patch)
    return sorted(set(starts))


def _ramp(n: int, patch: int, starts: list[int], overlap: int) -> list[np.ndarray]:
    """1-D blending weights per tile: linear ramps where tiles overlap."""
    out = []
    for k, s in enumerate(starts):
        w = np.ones(min(patch, n))
        if k > 0:
            ov = starts[k - 1] + patch - s
            if ov > 0:
                w[:ov] = np.minimum(w[:ov], (np.arange(ov) + 1) / (ov + 1))
        if k + 1 < len(starts):
            ov = s + patch - starts[k + 1]
            if ov > 0:
                w[-ov:] = np.minimum(w[-ov:], (ov - np.arange(ov)) / (ov + 1))
        out.append(w)
    return out


def restore_image(model: RestorationNet, lq: np.ndarray, task_hint=None, *, prompt=None, patch: int | None = None, overlap: int = 8) -> np.ndarray:
    """Restore one ``(H, W, 3)`` image, tiling with blended seams when larger than the patch."""
    patch = patch or model.config.patch
    overlap = min(overlap, patch // 2)
    h, w = lq.shape[:2]
    hint = None if task_hint is None else [task_hint]
    if h <= patch and w <= patch:
        return model(lq[None], hint, prompt=prompt, clip=True).data[0].astype(np.float64)
    rs, cs = _tile_starts(h, patch, overlap), _tile_starts(w, patch, overlap)
    wr, wc = _ramp(h, patch, rs, overlap), _ramp(w, patch, cs, overlap)
    acc = np.zeros((h, w, 3))
    norm = np.zeros((h, w, 1))
    for r, wrow in zip(rs, wr):
        for c, wcol in zip(cs, wc):
            tile = lq[r : r + patch, c : c + patch]
            out = model(tile[None], hint, prompt=prompt, clip=True).data[0]
            wt = (wrow[:, None] * wcol[None, :])[:, :, None]
            acc[r : r + patch, c : c + patch] += wt * out
            norm[r : r + patch, c : c + patch] += wt
    return np.clip(acc / norm, 0.0, 1.0)


# ---------------------------------------------------------------------------
# report tables


@dataclass
class ReportRow:
    tag: str
    psnr: dict[str, float]
    note: str = ""

    @property
    def avg(self) -> float:
        return float(np.mean([self.psnr[k] for k in self.psnr]))

    def to_dict(self) -> dict:
        return {"tag": self.tag, "psnr": dict(self.psnr), "avg": self.avg, "note": self.note}


@dataclass
class ReportTable:
    group: str
    rows: list[ReportRow]
    baseline: str | None = None
    improvements: dict[str, float] = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        cols = []
        for r in self.rows:
            for k in r.psnr:
                if k not in cols:
                    cols.append(k)
        return [t.value for t in TASKS if t.value in cols]

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "baseline": self.baseline,
            "columns": self.columns,
            "rows": [{**r.to_dict(), "ipv": self.ipv_text(r.tag)} for r in self.rows],
        }

    def ipv_text(self, tag: str) -> str:
        if self.baseline is None:
            return ""
        if tag == self.baseline:
            return "baseline"
        return f"{self.improvements[tag]:+.2f}"

    def to_markdown(self) -> str:
        cols = self.columns
        head = ["Model"] + [TaskId(c).long_name for c in cols] + ["Avg."] + (["Ipv."] if self.baseline else [])
        lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] * len(head)) + "|"]
        for r in self.rows:
            cells = [r.tag] + [fmt_float(r.psnr[c]) for c in cols] + [fmt_float(r.avg)]
            if self.baseline:
                cells.append(self.ipv_text(r.tag))
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def improvement_table(rows: list[ReportRow], baseline_tag: str, group: str = "") -> ReportTable:
    """Attach ``row avg - baseline avg`` to every row."""
    base = next((r for r in rows if r.tag == baseline_tag), None)
    if base is None:
        raise ValueError(f"baseline {baseline_tag!r} not among rows {[r.tag for r in rows]}")
    imp = {r.tag: r.avg - base.avg for r in rows}
    return ReportTable(group, list(rows), baseline_tag, imp)


def eval_model(
    model: RestorationNet,
    group: DatasetManifest,
    *,
    classifier: Classifier | None = None,
    manual_tasks: bool = False,
    tag: str = "model",
    overlap: int = 8,
) -> ReportRow:
    """Mean PSNR per task over every record of ``group``.

    Explicit-prompt models pick their prompt from ``classifier`` or, with
    ``manual_tasks``, from the record's true task.
    """
    mode = model.config.prompt_mode
    if mode == "explicit" and classifier is None and not manual_tasks:
        raise ValueError("explicit-prompt evaluation needs a classifier or manual task flags")
    scores: dict[str, list[float]] = {}
    for i, rec in enumerate(group.records):
        lq, gt = group.pair(i)
        hint = None
        if mode == "explicit":
            hint = rec.task if manual_tasks else argmax_task(classifier(lq[None]).data)[0]
        out = restore_image(model, lq, hint, overlap=overlap)
        scores.setdefault(rec.task.value, []).append(psnr(out, gt))
    ordered = {t.value: float(np.mean(scores[t.value])) for t in TASKS if t.value in scores}
    return ReportRow(tag, ordered)


def identity_row(group: DatasetManifest, tag: str = "input") -> ReportRow:
    """Per-task PSNR of the degraded inputs themselves."""
    scores: dict[str, list[float]] = {}
    for i, rec in enumerate(group.records):
        lq, gt = group.pair(i)
        scores.setdefault(rec.task.value, []).append(psnr(lq, gt))
    return ReportRow(tag, {t.value: float(np.mean(scores[t.value])) for t in TASKS if t.value in scores})


# ---------------------------------------------------------------------------
# clustering diagnostics


def calinski_harabasz(features, labels) -> float:
    """Between- over within-cluster dispersion, each divided by its degrees of freedom.

    Returns ``inf`` when every cluster collapses to a point but the
    centroids differ.
    """
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != labels.shape[0]:
        raise ValueError(f"features {X.shape} and labels {labels.shape} disagree")
    uniq, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    k, n = len(uniq), X.shape[0]
    if k < 2:
        raise ValueError("calinski_harabasz needs at least two labels")
    if n <= k:
        raise ValueError("calinski_harabasz needs more samples than labels")
    mu = X.mean(axis=0)
    centroids = np.zeros((k, X.shape[1]))
    np.add.at(centroids, inv, X)
    centroids /= counts[:, None]
    between = float(np.sum(counts * np.sum((centroids - mu) ** 2, axis=1)))
    within = float(np.sum((X - centroids[inv]) ** 2))
    if within == 0.0:
        return INF if between > 0 else 0.0
    return (between / (k - 1)) / (within / (n - k))


def project_2d(features) -> np.ndarray:
    """Top-two principal-component coordinates.

    Each axis is signed so that its largest-magnitude coordinate is positive;
    a rank-one input gets a zero second axis.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError(f"project_2d needs at least 3 samples, got {X.shape}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    out = np.zeros((X.shape[0], 2))
    tol = max(vals[0], 0.0) * 1e-12
    for j in range(min(2, X.shape[1])):
        if vals[j] <= tol:
            continue
        col = Xc @ vecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            col = -col
        out[:, j] = col
    return out


def collect_prompt_features(model: RestorationNet, group: DatasetManifest, n_per_task: int, seed: int = 0):
    """Pooled extractor features for ``n_per_task`` patches of every task in ``group``."""
    cfg = model.config
    if cfg.prompt_mode == "none":
        raise ValueError("model has no prompts (prompt mode 'none')")
    feats, labels = [], []
    rng = make_rng(seed, "cluster")
    for t in group.tasks:
        idx = group.by_task(t)
        if not idx:
            continue
        patches = []
        for j in range(n_per_task):
            lq, _ = group.pair(idx[j % len(idx)])
            h, w = lq.shape[:2]
            p = min(cfg.patch, h, w)
            r = int(rng.integers(h - p + 1))
            c = int(rng.integers(w - p + 1))
            patches.append(lq[r : r + p, c : c + p])
        if cfg.prompt_mode == "explicit":
            prompts = model.prompt_images([t] * n_per_task)
        else:
            prompts = np.stack(patches)
        feats.append(model.extract_features(prompts).data.astype(np.float64))
        labels += [t.value] * n_per_task
    return np.concatenate(feats), np.array(labels)


def prompt_cluster_report(model: RestorationNet, group: DatasetManifest, n_per_task: int = 100, seed: int = 0, plot_path=None) -> dict:
    """CHI of prompt features against task labels, a label-permutation baseline and 2-D coordinates."""
    X, labels = collect_prompt_features(model, group, n_per_task, seed)
    chi = calinski_harabasz(X, labels)
    perm = make_rng(seed, "permute").permutation(len(labels))
    chi_perm = calinski_harabasz(X, labels[perm])
    coords = project_2d(X)
    report = {
        "mode": model.config.prompt_mode,
        "n_points": int(len(labels)),
        "n_per_task": n_per_task,
        "chi": chi,
        "chi_permuted": chi_perm,
        "labels": labels.tolist(),
        "coords": coords.round(8).tolist(),
    }
    if plot_path is not None:
        scatter_plot(coords, labels, plot_path, title=f"{model.config.prompt_mode} prompt features, CHI={fmt_float(chi)}")
    return report


def scatter_plot(coords, labels, path, title: str = ""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    for t in TASKS:
        sel = labels == t.value
        if sel.any():
            ax.scatter(coords[sel, 0], coords[sel, 1], s=8, label=t.value)
    ax.legend(loc="best", fontsize=8)
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
