import numpy as np
import pytest

from mioir.dataio import build_dataset, write_synthetic_gt
from mioir.evaluation import (
    ReportRow,
    calinski_harabasz,
    dumps_report,
    eval_model,
    identity_row,
    improvement_table,
    project_2d,
    prompt_cluster_report,
    psnr,
    restore_image,
)
from mioir.model import BackboneConfig, Classifier, ClassifierConfig, RestorationNet
from mioir.tasks import TASKS

TINY = dict(channels=4, blocks=2, patch=16, prompt_dim=4, extractor_channels=(4, 4))


@pytest.fixture(scope="module")
def group(tmp_path_factory):
    gt = tmp_path_factory.mktemp("gt")
    write_synthetic_gt(gt, 2, size=40, seed=9)
    return build_dataset(gt, "SBNJRHL", "in_dis", None, 0, tmp_path_factory.mktemp("ds"))


def identity_net(mode="none"):
    net = RestorationNet(BackboneConfig(**{**TINY, "prompt_mode": mode}), seed=0)
    net.params["tail.w"].data[:] = 0
    return net


# --- psnr ----------------------------------------------------------------------------


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).random((4, 4, 3))
    assert psnr(a, a) == float("inf")


def test_psnr_constant_offset_20db():
    a = np.full((8, 8, 3), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_zero_vs_one():
    assert psnr(np.zeros((2, 2, 3)), np.ones((2, 2, 3))) == 0.0


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_psnr_symmetric_and_monotone():
    rng = np.random.default_rng(1)
    a = rng.random((16, 16, 3))
    u = rng.uniform(-1, 1, a.shape)
    vals = [psnr(a, a + amp * u) for amp in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(x > y for x, y in zip(vals, vals[1:]))
    b = a + 0.05 * u
    assert psnr(a, b) == psnr(b, a)


# --- tables ----------------------------------------------------------------------------


def row(tag, avg):
    return ReportRow(tag, {t.value: avg for t in TASKS})


def test_improvement_matches_table_example():
    tab = improvement_table([row("base-M", 29.52), row("base-S", 29.81)], "base-M")
    assert tab.ipv_text("base-S") == "+0.29"
    assert tab.improvements["base-M"] == 0.0
    assert tab.ipv_text("base-M") == "baseline"


def test_negative_improvement_sign():
    tab = improvement_table([row("a", 30.0), row("b", 29.5)], "a")
    assert tab.ipv_text("b") == "-0.50"


def test_unknown_baseline():
    with pytest.raises(ValueError):
        improvement_table([row("a", 1.0)], "zzz")


def test_row_average_is_mean():
    r = ReportRow("x", {t.value: float(i) for i, t in enumerate(TASKS)})
    assert r.avg == 3.0


def test_markdown_layout():
    md = improvement_table([row("m-M", 20.0), row("m-S", 21.0)], "m-M").to_markdown()
    lines = md.splitlines()
    assert lines[0].count("|") == 11  # Model, 7 tasks, Avg., Ipv.
    assert "Avg." in lines[0] and "Ipv." in lines[0]
    assert lines[2].endswith("| baseline |") and lines[3].endswith("| +1.00 |")


def test_inf_serialized_as_string():
    assert '"inf"' in dumps_report({"chi": float("inf")})


# --- restoration and eval ----------------------------------------------------------------


def test_identity_model_equals_input_psnr(group):
    net = identity_net()
    got = eval_model(net, group, tag="id")
    ref = identity_row(group)
    assert list(got.psnr) == [t.value for t in TASKS]
    for t in TASKS:
        lq_scores = [psnr(*group.pair(i)) for i in group.by_task(t)]
        assert ref.psnr[t.value] == pytest.approx(np.mean(lq_scores), abs=1e-12)
        assert got.psnr[t.value] == pytest.approx(ref.psnr[t.value], abs=1e-4)


def test_tiling_reassembles_identity():
    lq = np.random.default_rng(0).random((37, 29, 3)).astype(np.float32)
    out = restore_image(identity_net(), lq)
    np.testing.assert_allclose(out, lq, atol=1e-6)


def test_eval_deterministic(group):
    net = RestorationNet(BackboneConfig(**TINY), seed=2)
    a = dumps_report(eval_model(net, group, tag="x").to_dict())
    b = dumps_report(eval_model(net, group, tag="x").to_dict())
    assert a == b


def test_explicit_needs_classifier(group):
    net = identity_net("explicit")
    with pytest.raises(ValueError):
        eval_model(net, group)
    eval_model(net, group, manual_tasks=True)
    eval_model(net, group, classifier=Classifier(ClassifierConfig(channels=(4, 4, 4))))


# --- CHI -------------------------------------------------------------------------------------


def chi_direct(X, labels):
    """Scalar-loop CHI used as an independent oracle."""
    X = [list(map(float, r)) for r in X]
    labels = list(labels)
    n, d = len(X), len(X[0])
    names = sorted(set(labels))
    k = len(names)
    mu = [sum(r[j] for r in X) / n for j in range(d)]
    B = W = 0.0
    for name in names:
        members = [X[i] for i in range(n) if labels[i] == name]
        c = [sum(r[j] for r in members) / len(members) for j in range(d)]
        B += len(members) * sum((c[j] - mu[j]) ** 2 for j in range(d))
        W += sum((r[j] - c[j]) ** 2 for r in members for j in range(d))
    return (B / (k - 1)) / (W / (n - k))


def test_chi_collapsed_clusters_inf():
    X = np.array([[0.0] * 3] * 4 + [[10.0] * 3] * 4)
    assert calinski_harabasz(X, ["a"] * 4 + ["b"] * 4) == float("inf")


def test_chi_1d_hand_example():
    # centroids 0.5 and 10.5, mean 5.5: B = 4*25 = 100, W = 4*0.25 = 1, so (100/1)/(1/2) = 200
    X = np.array([[0.0], [1.0], [10.0], [11.0]])
    assert calinski_harabasz(X, list("AABB")) == pytest.approx(200.0, rel=1e-12)
    assert chi_direct(X, "AABB") == pytest.approx(200.0, rel=1e-12)


def test_chi_matches_direct_formula():
    rng = np.random.default_rng(3)
    for _ in range(10):
        k = int(rng.integers(2, 6))
        X = rng.standard_normal((40, 5))
        labels = rng.integers(0, k, 40)
        labels[:k] = np.arange(k)
        assert calinski_harabasz(X, labels) == pytest.approx(chi_direct(X, labels), rel=1e-9)


def test_chi_permutation_drops():
    rng = np.random.default_rng(4)
    labels = np.repeat(np.arange(4), 30)
    X = rng.standard_normal((120, 3)) + 5 * labels[:, None]
    assert calinski_harabasz(X, rng.permutation(labels)) < calinski_harabasz(X, labels)


def test_chi_translation_and_scale_invariant():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((30, 4))
    lab = np.repeat([0, 1, 2], 10)
    base = calinski_harabasz(X, lab)
    assert calinski_harabasz(X + 7.5, lab) == pytest.approx(base, rel=1e-9)
    assert calinski_harabasz(3.2 * X, lab) == pytest.approx(base, rel=1e-9)


def test_chi_single_label_rejected():
    with pytest.raises(ValueError):
        calinski_harabasz(np.zeros((4, 2)), [0] * 4)


# --- projection --------------------------------------------------------------------------------


def test_pca_line_has_zero_second_axis():
    t = np.linspace(-1, 1, 20)
    X = np.outer(t, [1.0, 2.0, -0.5]) + [3.0, 0.0, 1.0]
    out = project_2d(X)
    assert np.abs(out[:, 1]).max() < 1e-9
    assert np.abs(out[:, 0]).max() > 1


def test_pca_rotation_preserves_distances():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((15, 2)) @ np.diag([3.0, 1.0])
    Q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    a, b = project_2d(X), project_2d(X @ Q)
    da = np.linalg.norm(a[:, None] - a[None], axis=-1)
    db = np.linalg.norm(b[:, None] - b[None], axis=-1)
    np.testing.assert_allclose(da, db, atol=1e-9)


def test_pca_against_svd_oracle():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((12, 4)) @ np.diag([4.0, 2.0, 1.0, 0.5])
    Xc = X - X.mean(0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    ref = Xc @ vt[:2].T
    for j in range(2):
        if ref[np.argmax(np.abs(ref[:, j])), j] < 0:
            ref[:, j] *= -1
    np.testing.assert_allclose(project_2d(X), ref, atol=1e-9)


def test_pca_needs_three_points():
    with pytest.raises(ValueError):
        project_2d(np.zeros((2, 3)))


# --- cluster report ----------------------------------------------------------------------------


def test_cluster_report_700_points(group, tmp_path):
    net = RestorationNet(BackboneConfig(**{**TINY, "prompt_mode": "adaptive"}), seed=0)
    rep = prompt_cluster_report(net, group, n_per_task=100, plot_path=tmp_path / "s.png")
    assert rep["n_points"] == 700 and len(rep["coords"]) == 700 and len(rep["labels"]) == 700
    assert (tmp_path / "s.png").stat().st_size > 0


def test_explicit_features_collapse(group):
    net = RestorationNet(BackboneConfig(**{**TINY, "prompt_mode": "explicit"}), seed=0)
    rep = prompt_cluster_report(net, group, n_per_task=5)
    assert rep["chi"] == float("inf")


def test_cluster_report_needs_prompts(group):
    with pytest.raises(ValueError):
        prompt_cluster_report(RestorationNet(BackboneConfig(**TINY)), group, 2)


def test_tiling_with_overlap_not_smaller_than_patch():
    net = identity_net()
    lq = np.random.default_rng(1).random((20, 20, 3)).astype(np.float32)
    np.testing.assert_allclose(restore_image(net, lq, patch=8, overlap=8), lq, atol=1e-6)
