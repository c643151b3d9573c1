"""Readout fitting, report scoring, sweeps, and the comparison table."""

import numpy as np
import pytest
import torch

from eqmark import evalharness as ev
from eqmark import training as tr
from eqmark.data import DatasetSpec, generate_synthetic
from eqmark.errors import ConfigurationError, NumericError
from eqmark.geometry import DomainSpec
from eqmark.netarch import ModelConfig

DOM = DomainSpec(64, 64)

MODEL = ModelConfig(d=8, k=3, in_channels=3, width_mult=0.125, t_width=6)


@pytest.fixture(scope="module")
def data():
    spec = DatasetSpec(height=64, width=64, n_train=8, n_val=20, n_test=6,
                       seed=21)
    return generate_synthetic(spec)


def oracle_predictor(*splits):
    """Callable that returns the ground-truth landmarks for known images."""
    table = {}
    for split in splits:
        for ex in split:
            table[ex.image.tobytes()] = ex.landmarks
    return lambda imgs: np.stack([table[np.asarray(im).tobytes()]
                                  for im in imgs])


def quadrant_landmarks(imgs):
    """Deterministic 4-point pseudo-detector: quadrant intensity centroids."""
    out = []
    for im in imgs:
        g = np.asarray(im).mean(axis=2)
        h, w = g.shape
        pts = []
        for rs in (slice(0, h // 2), slice(h // 2, h)):
            for cs in (slice(0, w // 2), slice(w // 2, w)):
                patch = g[rs, cs]
                rr = np.arange(rs.start, rs.stop, dtype=np.float64)
                cc = np.arange(cs.start, cs.stop, dtype=np.float64)
                total = patch.sum()
                pts.append((patch.sum(axis=1) @ rr / total,
                            patch.sum(axis=0) @ cc / total))
        out.append(pts)
    return np.asarray(out, dtype=np.float64)


def random_coords(n, k, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(5, 58, size=(n, k, 2))


def test_identity_recovery_at_alpha_zero():
    unsup = random_coords(50, 3, seed=0)
    fit = ev.fit_readout(unsup, unsup, alpha=0.0, domain=DOM)
    assert np.allclose(fit.weights, np.eye(6), atol=1e-8)
    assert fit.n_train == 50 and fit.k == 3 and fit.j == 3


def test_exact_linear_map_recovery():
    rng = np.random.default_rng(3)
    unsup = random_coords(60, 3, seed=1)
    m = rng.normal(scale=0.5, size=(6, 4))
    gt = (unsup.reshape(60, 6) @ m).reshape(60, 2, 2)
    fit = ev.fit_readout(unsup, gt, alpha=0.0, domain=DOM)
    assert np.allclose(fit.predict(unsup), gt, atol=1e-6)
    # weights act on normalized coords; undo the scaling to compare with m
    sx = np.tile([DOM.height - 1.0, DOM.width - 1.0], 3)
    sy = np.tile([DOM.height - 1.0, DOM.width - 1.0], 2)
    recovered = (np.diag(sx) @ fit.weights) @ np.diag(1.0 / sy)
    assert np.allclose(recovered, m, atol=1e-6)


def test_large_alpha_shrinks_to_zero():
    unsup = random_coords(40, 3, seed=2)
    gt = random_coords(40, 2, seed=3)
    fit = ev.fit_readout(unsup, gt, alpha=1e12, domain=DOM)
    assert np.max(np.abs(fit.weights)) < 1e-6


def test_singular_system_advises_positive_alpha():
    unsup = random_coords(2, 3, seed=4)  # rank 2 < 6 columns
    gt = random_coords(2, 3, seed=5)
    with pytest.raises(NumericError, match="alpha > 0"):
        ev.fit_readout(unsup, gt, alpha=0.0, domain=DOM)


def test_normal_equation_residual_is_tiny():
    unsup = random_coords(80, 4, seed=6)
    gt = random_coords(80, 3, seed=7)
    alpha = 0.1
    fit = ev.fit_readout(unsup, gt, alpha=alpha, domain=DOM)
    x = (unsup / np.array([63.0, 63.0])).reshape(80, 8)
    y = (gt / np.array([63.0, 63.0])).reshape(80, 6)
    gram = x.T @ x + alpha * np.eye(8)
    resid = np.linalg.norm(gram @ fit.weights - x.T @ y)
    assert resid / np.linalg.norm(x.T @ y) < 1e-8


def test_perfect_oracle_scores_perfectly(data):
    oracle = oracle_predictor(data["val"], data["test"])
    fit = ev.fit_readout_on_dataset(oracle, data["val"], alpha=0.0)
    report = ev.evaluate_readout(fit, oracle, data["test"], metric="pck",
                                 threshold=6.0)
    assert report.mean == 100.0
    assert report.n_fit == 20 and report.n_eval == 6
    report2 = ev.evaluate_readout(fit, oracle, data["test"], metric="iod-mse")
    assert report2.mean < 1e-6


def test_landmark_count_mismatches_raise(data):
    oracle = oracle_predictor(data["val"], data["test"])
    fit = ev.fit_readout_on_dataset(oracle, data["val"], alpha=0.1)
    few = lambda imgs: oracle(imgs)[:, :4]
    with pytest.raises(ConfigurationError):
        ev.evaluate_readout(fit, few, data["test"])
    from eqmark.metrics import AnnotatedExample
    clipped = [AnnotatedExample(ex.image, ex.landmarks[:5])
               for ex in data["test"]]
    with pytest.raises(ConfigurationError):
        ev.evaluate_readout(fit, oracle, clipped)


def test_constant_predictions_match_scalar_iod_oracle(data):
    test = data["test"]
    const = np.array([20.0, 30.0])
    preds = np.tile(const, (len(test), 7, 1))
    got = ev.score_predictions(preds, test, metric="iod-mse")
    total = 0.0
    count = 0
    for ex in test:
        iod = float(np.hypot(*(ex.landmarks[1] - ex.landmarks[2])))
        for j in range(7):
            total += float(np.hypot(*(const - ex.landmarks[j]))) / iod
            count += 1
    assert abs(got - 100.0 * total / count) < 1e-10


def test_sweep_reproducible_and_full_pool_has_zero_std(data):
    sizes = [3, 10, 20]
    rows1 = ev.sample_efficiency_sweep(quadrant_landmarks, data["val"],
                                       data["test"], sizes, repeats=3, seed=4)
    rows2 = ev.sample_efficiency_sweep(quadrant_landmarks, data["val"],
                                       data["test"], sizes, repeats=3, seed=4)
    assert rows1 == rows2
    assert [r["size"] for r in rows1] == sizes
    assert rows1[-1]["std"] == 0.0
    assert len(set(rows1[-1]["values"])) == 1
    assert rows1[0]["std"] >= 0.0


def test_sweep_rejects_oversized_subset(data):
    with pytest.raises(ConfigurationError):
        ev.sample_efficiency_sweep(quadrant_landmarks, data["val"],
                                   data["test"], [21], repeats=1, seed=0)


def test_sweep_seed_changes_subsets(data):
    a = ev.sample_efficiency_sweep(quadrant_landmarks, data["val"],
                                   data["test"], [5], repeats=2, seed=1)
    b = ev.sample_efficiency_sweep(quadrant_landmarks, data["val"],
                                   data["test"], [5], repeats=2, seed=2)
    assert a[0]["values"] != b[0]["values"]


def test_ablation_identical_checkpoints_identical_rows(data, tmp_path):
    cfg = tr.TrainConfig(step="end2end", model=MODEL, epochs=0, lr=1e-3,
                         batch_size=4, seed=5, strict_determinism=True)
    tr.train_end_to_end(cfg, data["train"], out_path=tmp_path / "a.npz")
    tr.train_end_to_end(cfg, data["train"], out_path=tmp_path / "b.npz")
    report = ev.ablation_report(
        {"two-step": str(tmp_path / "a.npz"), "end-to-end": str(tmp_path / "b.npz")},
        data["val"], data["test"], alpha=0.1, threshold=6.0)
    r0, r1 = report["rows"]
    assert {k: v for k, v in r0.items() if k != "label"} \
        == {k: v for k, v in r1.items() if k != "label"}
    assert set(report["curves"]) == {"two-step", "end-to-end"}
    curve = report["curves"]["two-step"]
    assert np.all(np.diff(curve.values) >= 0)
    text = ev.ablation_table_text(report)
    assert "two-step" in text and "end-to-end" in text


def test_ablation_architecture_mismatch(data, tmp_path):
    cfg_a = tr.TrainConfig(step="end2end", model=MODEL, epochs=0,
                           batch_size=4, seed=5)
    other = ModelConfig(d=16, k=3, in_channels=3, width_mult=0.125, t_width=6)
    cfg_b = tr.TrainConfig(step="end2end", model=other, epochs=0,
                           batch_size=4, seed=5)
    tr.train_end_to_end(cfg_a, data["train"], out_path=tmp_path / "a.npz")
    tr.train_end_to_end(cfg_b, data["train"], out_path=tmp_path / "b.npz")
    with pytest.raises(ConfigurationError):
        ev.ablation_report({"a": str(tmp_path / "a.npz"),
                            "b": str(tmp_path / "b.npz")},
                           data["val"], data["test"])


def test_fit_on_dataset_subset_indices(data):
    oracle = oracle_predictor(data["val"])
    fit = ev.fit_readout_on_dataset(oracle, data["val"], alpha=0.1,
                                    indices=[0, 2, 4, 6, 8, 10, 12, 14],
                                    train_id="byhand")
    assert fit.n_train == 8 and fit.train_id == "byhand"
