import hashlib
import json
import logging

import numpy as np
import pytest

from mioir.dataio import (
    DatasetManifest,
    build_dataset,
    load_png,
    sample_batch,
    save_png,
    write_synthetic_gt,
)
from mioir.degrade import make_rng
from mioir.tasks import TASKS, TaskId


@pytest.fixture(scope="module")
def gt_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("gt")
    write_synthetic_gt(d, 3, size=40, seed=5)
    return d


@pytest.fixture(scope="module")
def dataset(gt_dir, tmp_path_factory):
    return build_dataset(gt_dir, "SBNJRHL", "in_dis", None, 1, tmp_path_factory.mktemp("data"))


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# --- PNG -----------------------------------------------------------------


def test_png_roundtrip_quantization(tmp_path):
    img = np.random.default_rng(0).random((9, 11, 3))
    back = load_png(save_png(img, tmp_path / "a.png"))
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 510 + 1e-12


def test_png_byte_value(tmp_path):
    img = np.full((8, 8, 3), 128 / 255)
    assert load_png(save_png(img, tmp_path / "b.png"))[0, 0, 0] == 128 / 255


def test_png_round_half_up(tmp_path):
    img = np.full((8, 8, 3), 100.5 / 255)
    assert load_png(save_png(img, tmp_path / "h.png"))[0, 0, 0] == 101 / 255


def test_png_double_roundtrip_idempotent(tmp_path):
    img = np.random.default_rng(1).random((16, 16, 3))
    once = load_png(save_png(img, tmp_path / "1.png"))
    twice = load_png(save_png(once, tmp_path / "2.png"))
    np.testing.assert_array_equal(once, twice)


def test_png_decode_error_names_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(OSError, match="broken.png"):
        load_png(bad)


# --- dataset build -------------------------------------------------------------


def test_record_cardinality(dataset):
    assert len(dataset.records) == 3 * 7
    for t in TASKS:
        assert len(dataset.by_task(t)) == 3


def test_layout_and_shapes(dataset):
    root = dataset.root
    assert root.name == "in_dis"
    assert (root / "manifest.jsonl").exists()
    for t in TASKS:
        assert len(list((root / t.value).glob("*.png"))) == 3
    for i in range(len(dataset.records)):
        lq, gt = dataset.pair(i)
        assert lq.shape == gt.shape == (40, 40, 3) and lq.dtype == np.float32


def test_rebuild_is_byte_identical(gt_dir, tmp_path, dataset):
    again = build_dataset(gt_dir, "SBNJRHL", "in_dis", None, 1, tmp_path)
    assert tree_digest(again.root) == tree_digest(dataset.root)
    assert (again.root / "manifest.jsonl").read_bytes() == (dataset.root / "manifest.jsonl").read_bytes()


def test_parallel_build_matches_serial(gt_dir, tmp_path, dataset):
    par = build_dataset(gt_dir, "SBNJRHL", "in_dis", None, 1, tmp_path, jobs=2)
    assert tree_digest(par.root) == tree_digest(dataset.root)


def test_task_subset_order_independent(gt_dir, tmp_path, dataset):
    # per-record seeds hash (seed, name, task, group), so a subset build reproduces the same files
    sub = build_dataset(gt_dir, "LN", "in_dis", None, 1, tmp_path)
    for t in ("L", "N"):
        for p in sorted((sub.root / t).glob("*.png")):
            assert p.read_bytes() == (dataset.root / t / p.name).read_bytes()


def test_out_dis_sr_scale_8(gt_dir, tmp_path):
    m = build_dataset(gt_dir, "S", "out_dis", None, 0, tmp_path)
    assert {r.params.sr_scale for r in m.records} == {8}


def test_manifest_roundtrip(dataset):
    m = DatasetManifest.load(dataset.root / "manifest.jsonl")
    assert m.records == dataset.records
    assert m.tasks == dataset.tasks and m.group == "in_dis" and m.seed == 1
    lines = (dataset.root / "manifest.jsonl").read_text().splitlines()
    head = json.loads(lines[0])
    assert head["schema"] == "mioir.manifest" and head["version"] == 1
    assert len(lines) == 22


def test_manifest_rejects_foreign_file(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"schema": "other"}\n')
    with pytest.raises(ValueError):
        DatasetManifest.load(p)


def test_unreadable_gt_skipped(gt_dir, tmp_path, caplog):
    src = tmp_path / "gt"
    src.mkdir()
    for p in gt_dir.glob("*.png"):
        (src / p.name).write_bytes(p.read_bytes())
    (src / "zz_broken.png").write_bytes(b"garbage")
    with caplog.at_level(logging.WARNING):
        m = build_dataset(src, "N", "in_dis", None, 0, tmp_path / "out")
    assert len(m.records) == 3
    assert "zz_broken.png" in caplog.text


def test_empty_dir_is_error(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        build_dataset(tmp_path / "empty", "N", "in_dis", None, 0, tmp_path / "out")


# --- batches ---------------------------------------------------------------------


def test_batch_single_task(dataset):
    b = sample_batch(dataset, "N", 4, 16, make_rng(0))
    assert b.tasks == [TaskId.N] * 4
    assert b.lq.shape == b.gt.shape == (4, 16, 16, 3)


def test_batch_crop_alignment(dataset):
    b = sample_batch(dataset, "SBNJRHL", 8, 16, make_rng(3))
    for k in range(8):
        lq, gt = dataset.pair(int(b.records[k]))
        r, c = b.coords[k]
        np.testing.assert_array_equal(b.lq[k], lq[r : r + 16, c : c + 16])
        np.testing.assert_array_equal(b.gt[k], gt[r : r + 16, c : c + 16])
        assert dataset.records[int(b.records[k])].task.index == b.labels[k]


def test_batch_task_frequencies(dataset):
    b = sample_batch(dataset, "SBNJRHL", 10_000, 8, make_rng(11))
    counts = np.bincount(b.labels, minlength=7)
    p = 1 / 7
    sd = np.sqrt(10_000 * p * (1 - p))
    assert np.all(np.abs(counts - 10_000 * p) <= 3 * sd)


def test_batch_missing_task(dataset):
    sub = dataset.subset(dataset.by_task("N"))
    with pytest.raises(ValueError):
        sample_batch(sub, "NL", 2, 8, make_rng(0))


def test_batch_patch_too_large(dataset):
    with pytest.raises(ValueError):
        sample_batch(dataset, "N", 1, 64, make_rng(0))
