"""Image I/O, degraded-dataset materialization and patch batches."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from mioir.degrade import GROUPS, DegradeParams, ParamRanges, RainConfig, degrade, make_rng, to_uint8
from mioir.tasks import TaskId, parse_tasks

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "mioir.manifest"
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


# ---------------------------------------------------------------------------
# PNG


def load_png(path) -> np.ndarray:
    """Decode an image as ``(H, W, 3)`` floats ``byte / 255``."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise OSError(f"cannot decode image {path}: {e}") from e
    return arr / 255.0


def save_png(image: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed encoder settings so identical pixels give identical bytes
    Image.fromarray(to_uint8(np.asarray(image)), "RGB").save(path, format="PNG", optimize=False, compress_level=6)
    return path


# ---------------------------------------------------------------------------
# procedural ground truth


def synth_gt_image(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """A textured, edge-rich synthetic scene to stand in for natural GT photos."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0 + (c1 - c0) * ramp[:, :, None]
    # low-frequency colour field
    grid = rng.uniform(-0.15, 0.15, size=(5, 5, 3))
    ri = np.linspace(0, 4, h)
    ci = np.linspace(0, 4, w)
    r0 = np.minimum(ri.astype(int), 3)
    c0i = np.minimum(ci.astype(int), 3)
    fr = (ri - r0)[:, None, None]
    fc = (ci - c0i)[None, :, None]
    img += (1 - fr) * ((1 - fc) * grid[r0][:, c0i] + fc * grid[r0][:, c0i + 1]) + fr * (
        (1 - fc) * grid[r0 + 1][:, c0i] + fc * grid[r0 + 1][:, c0i + 1]
    )
    for _ in range(rng.integers(4, 10)):
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0, h / max(h, w)), rng.uniform(0, w / max(h, w))
        ry, rx = rng.uniform(0.05, 0.35, 2)
        if kind == 0:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        elif kind == 1:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            a = rng.uniform(0, np.pi)
            u = np.cos(a) * (xx - cx) + np.sin(a) * (yy - cy)
            mask = (np.abs(u) <= rx * 0.4) & (np.abs(yy - cy) <= ry * 1.5)
        colour = rng.uniform(0.05, 0.95, 3)
        fill = np.broadcast_to(colour, img.shape).copy()
        if rng.random() < 0.6:
            freq = rng.uniform(6, 40)
            phi = rng.uniform(0, np.pi)
            stripes = np.sin(2 * np.pi * freq * (np.cos(phi) * xx + np.sin(phi) * yy))
            fill += rng.uniform(0.05, 0.25) * stripes[:, :, None]
        img = np.where(mask[:, :, None], fill, img)
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def write_synthetic_gt(out_dir, count: int, size: int = 64, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for i in range(count):
        rng = make_rng(seed, "gt", i)
        paths.append(save_png(synth_gt_image(size, size, rng), out_dir / f"gt_{i:04d}.png"))
    return paths


# ---------------------------------------------------------------------------
# manifests


@dataclass
class SampleRecord:
    gt_path: str
    lq_path: str
    task: TaskId
    group: str
    params: DegradeParams
    seed: int

    def to_dict(self) -> dict:
        return {
            "gt_path": self.gt_path,
            "lq_path": self.lq_path,
            "task": self.task.value,
            "group": self.group,
            "params": self.params.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(
            gt_path=d["gt_path"],
            lq_path=d["lq_path"],
            task=TaskId(d["task"]),
            group=d["group"],
            params=DegradeParams.from_dict(d["params"]),
            seed=int(d["seed"]),
        )


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    tasks: list[TaskId]
    group: str
    seed: int
    creation: dict = field(default_factory=dict)
    root: Path = field(default=Path("."), repr=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def header(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "version": MANIFEST_VERSION,
            "group": self.group,
            "seed": self.seed,
            "tasks": "".join(t.value for t in self.tasks),
            "creation": self.creation,
        }

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty manifest")
        head = json.loads(lines[0])
        if head.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"{path}: not a dataset manifest")
        if head.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: manifest version {head.get('version')} unsupported")
        recs = [SampleRecord.from_dict(json.loads(ln)) for ln in lines[1:]]
        return cls(recs, parse_tasks(head["tasks"]), head["group"], int(head["seed"]), head.get("creation", {}), path.parent)

    def by_task(self, task) -> list[int]:
        task = TaskId(task)
        return [i for i, r in enumerate(self.records) if r.task is task]

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.root / q

    def pair(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """``(lq, gt)`` float32 arrays for record ``i`` (cached)."""
        hit = self._cache.get(i)
        if hit is None:
            r = self.records[i]
            lq = load_png(self.resolve(r.lq_path)).astype(np.float32)
            gt = load_png(self.resolve(r.gt_path)).astype(np.float32)
            if lq.shape != gt.shape:
                raise ValueError(f"record {i}: LQ {lq.shape} and GT {gt.shape} differ in size")
            hit = self._cache[i] = (lq, gt)
        return hit

    def subset(self, indices) -> "DatasetManifest":
        recs = [self.records[i] for i in indices]
        tasks = [t for t in self.tasks if any(r.task is t for r in recs)]
        return DatasetManifest(recs, tasks, self.group, self.seed, self.creation, self.root)


def record_seed(seed: int, name: str, task: TaskId, group: str) -> int:
    h = hashlib.blake2b(f"{seed}\x1f{name}\x1f{task.value}\x1f{group}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def list_images(gt_dir) -> list[Path]:
    gt_dir = Path(gt_dir)
    if not gt_dir.is_dir():
        raise FileNotFoundError(f"GT directory {gt_dir} does not exist")
    return sorted(p for p in gt_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _build_one(job):
    gt_path, gt_rel, task, group, ranges, seed, lq_path, lq_rel, depth_kind, rain = job
    y = load_png(gt_path)
    rseed = record_seed(seed, Path(gt_path).name, task, group)
    x, used = degrade(y, task, group, ranges, make_rng(rseed), depth_kind=depth_kind, rain=rain)
    save_png(x, lq_path)
    return SampleRecord(gt_rel, lq_rel, task, group, used, rseed)


def build_dataset(
    gt_dir,
    tasks,
    group: str,
    ranges: ParamRanges | None,
    seed: int,
    out_dir,
    *,
    jobs: int = 1,
    depth_kind: str = "smooth-random",
    rain: RainConfig | None = None,
) -> DatasetManifest:
    """Degrade every GT image once per task; write PNGs and ``<group>/manifest.jsonl``."""
    if group not in GROUPS:
        raise ValueError(f"group must be one of {GROUPS}, got {group!r}")
    tasks = parse_tasks(tasks)
    ranges = ranges or ParamRanges()
    out_dir = Path(out_dir)
    group_dir = out_dir / group
    good = []
    for p in list_images(gt_dir):
        try:
            with Image.open(p) as im:
                im.verify()
            good.append(p)
        except Exception as e:  # noqa: BLE001 - any decode failure means skip
            log.warning("skipping unreadable image %s: %s", p, e)
    if not good:
        raise ValueError(f"no decodable images in {gt_dir}")
    jobs_list = []
    for p in good:
        for t in tasks:
            lq = group_dir / t.value / (p.stem + ".png")
            jobs_list.append(
                (str(p), os.path.relpath(p, group_dir), t, group, ranges, seed, str(lq), os.path.relpath(lq, group_dir), depth_kind, rain)
            )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_build_one, jobs_list, chunksize=8))
    else:
        records = [_build_one(j) for j in jobs_list]
    creation = {
        "ranges": ranges.to_dict(),
        "rain": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(rain or RainConfig()).items()},
        "depth_kind": depth_kind,
        "gt_count": len(good),
    }
    manifest = DatasetManifest(records, tasks, group, int(seed), creation, group_dir)
    manifest.save(group_dir / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# batches


@dataclass
class PatchBatch:
    lq: np.ndarray  # (B, h, w, 3)
    gt: np.ndarray  # (B, h, w, 3)
    labels: np.ndarray  # (B,) task indices
    records: np.ndarray  # (B,) manifest record indices
    coords: np.ndarray  # (B, 2) top-left (row, col)

    @property
    def tasks(self) -> list[TaskId]:
        return [TaskId.from_index(int(i)) for i in self.labels]


def sample_batch(manifest: DatasetManifest, active_tasks, batch_size: int, patch: int, rng: np.random.Generator) -> PatchBatch:
    """Task uniform over ``active_tasks``, then a uniform record, then a uniform aligned crop."""
    active = parse_tasks(active_tasks)
    pools = {}
    for t in active:
        idx = manifest.by_task(t)
        if not idx:
            raise ValueError(f"manifest has no records for active task {t.value}")
        pools[t] = idx
    lq = np.empty((batch_size, patch, patch, 3), np.float32)
    gt = np.empty_like(lq)
    labels = np.empty(batch_size, np.int64)
    recs = np.empty(batch_size, np.int64)
    coords = np.empty((batch_size, 2), np.int64)
    for k in range(batch_size):
        t = active[int(rng.integers(len(active)))]
        i = pools[t][int(rng.integers(len(pools[t])))]
        x, y = manifest.pair(i)
        h, w = x.shape[:2]
        if h < patch or w < patch:
            raise ValueError(f"record {i} ({h}x{w}) smaller than patch {patch}")
        r = int(rng.integers(h - patch + 1))
        c = int(rng.integers(w - patch + 1))
        lq[k] = x[r : r + patch, c : c + patch]
        gt[k] = y[r : r + patch, c : c + patch]
        labels[k] = t.index
        recs[k] = i
        coords[k] = (r, c)
    return PatchBatch(lq, gt, labels, recs, coords)
