"""Training loop contracts: descent, determinism, freeze, schedules, logs."""

import json

import numpy as np
import pytest
import torch

from eqmark import geometry as geo
from eqmark import training as tr
from eqmark.data import AugConfig, DatasetSpec, generate_synthetic
from eqmark.errors import ConfigurationError, TrainingError
from eqmark.metrics import AnnotatedExample
from eqmark.netarch import (ModelConfig, build_feature_extractor,
                            build_landmark_head, load_checkpoint,
                            state_to_params)

MODEL = ModelConfig(d=8, k=3, in_channels=3, width_mult=0.125, t_width=6)

IDENTITY_AUG = AugConfig()  # every range collapses to the identity


@pytest.fixture(scope="module")
def tiny():
    spec = DatasetSpec(height=64, width=64, n_train=8, n_val=4, n_test=2,
                       seed=11)
    return generate_synthetic(spec)


def pretrain_cfg(**kw):
    base = dict(step="pretrain", model=MODEL, epochs=1, lr=1e-3,
                batch_size=2, n_locations=8, seed=3, strict_determinism=True)
    base.update(kw)
    return tr.TrainConfig(**base)


def landmark_cfg(**kw):
    base = dict(step="landmark", model=MODEL, epochs=1, lr=1e-3,
                batch_size=4, seed=3, strict_determinism=True)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(step="warmup")
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(lr=-1e-4)
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(lr_decay=0.0)
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(lr_decay=1.5)
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(tau=0.0)
    with pytest.raises(ConfigurationError):
        tr.TrainConfig(batch_size=0)


def test_config_round_trip():
    cfg = tr.TrainConfig(step="landmark", model=MODEL, epochs=5, lr=1e-3,
                         seed=9)
    again = tr.TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert tr.config_hash(again) == tr.config_hash(cfg)


def test_pretrain_descends_from_initial_batch(tiny):
    f_net, report = tr.pretrain_features(pretrain_cfg(), tiny["train"])
    final = report.epochs[-1]["loss_total"]
    assert np.isfinite(final)
    assert final < report.extra["initial_batch_loss"]


def test_pretrain_lr_zero_leaves_params_bitwise(tiny):
    cfg = pretrain_cfg(lr=0.0)
    torch.manual_seed(cfg.seed)
    reference = state_to_params(build_feature_extractor(MODEL))
    f_net, _ = tr.pretrain_features(cfg, tiny["train"])
    trained = state_to_params(f_net)
    assert set(trained) == set(reference)
    for name in reference:
        assert np.array_equal(trained[name], reference[name]), name


def test_pretrain_same_seed_same_loss(tiny):
    _, r1 = tr.pretrain_features(pretrain_cfg(), tiny["train"])
    _, r2 = tr.pretrain_features(pretrain_cfg(), tiny["train"])
    assert r1.epochs[-1]["loss_total"] == r2.epochs[-1]["loss_total"]


def test_lr_schedule_and_log_lines(tiny, tmp_path):
    log = tmp_path / "log.jsonl"
    cfg = pretrain_cfg(epochs=3, lr=2e-3, lr_decay=0.9)
    _, report = tr.pretrain_features(cfg, tiny["train"], log_path=log)
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(rows) == 3 and len(report.epochs) == 3
    for e, row in enumerate(rows):
        assert row["epoch"] == e
        assert abs(row["lr"] - 2e-3 * 0.9 ** e) <= 1e-12
        assert {"loss_total", "loss_contrast", "wall_time"} <= set(row)


def test_divergence_guard_names_batch_seed():
    bad = [AnnotatedExample(np.full((64, 64, 3), np.nan),
                            np.full((7, 2), 32.0))]
    with pytest.raises(TrainingError, match="batch seed"):
        tr.pretrain_features(pretrain_cfg(batch_size=1), bad)


def test_torch_transport_matches_numpy_forward():
    dom = geo.DomainSpec(64, 64)
    g = geo.compose(
        geo.make_affine(rotation=0.25, scale=(1.05, 0.95), shear=0.05,
                        translation=(2.0, -1.5), center=(32.0, 32.0)),
        geo.make_elastic(dom, magnitude=3.0, smoothness=16.0, seed=7))
    pts = np.stack(np.meshgrid(np.linspace(8, 56, 5),
                               np.linspace(8, 56, 5)), axis=-1).reshape(-1, 2)
    pts_t = torch.tensor(pts, dtype=torch.float32, requires_grad=True)
    out_t = tr.torch_transport(g, pts_t)
    expected = g.forward(pts)
    assert np.allclose(out_t.detach().numpy(), expected, atol=5e-3)
    out_t.sum().backward()
    assert pts_t.grad is not None and np.all(np.isfinite(pts_t.grad.numpy()))


def test_torch_transport_inverse_of_elastic():
    dom = geo.DomainSpec(64, 64)
    el = geo.make_elastic(dom, magnitude=3.0, smoothness=16.0, seed=9)
    ginv = geo.InvertedMap(el)
    pts = np.array([[10.0, 20.0], [40.0, 33.0], [55.0, 8.0]])
    out = tr.torch_transport(ginv, torch.tensor(pts, dtype=torch.float32))
    assert np.allclose(out.numpy(), ginv.forward(pts), atol=5e-3)


def test_identity_deformation_gives_zero_eqv(tiny):
    cfg = landmark_cfg(aug=IDENTITY_AUG)
    torch.manual_seed(0)
    f_net = build_feature_extractor(MODEL)
    _, _, report = tr.train_landmarks(cfg, tiny["train"], f_net)
    assert report.epochs
    for row in report.epochs:
        assert row["loss_eqv"] == 0.0


def test_freeze_contract_and_mismatch(tiny, tmp_path):
    ck = tmp_path / "features.npz"
    f_net, _ = tr.pretrain_features(pretrain_cfg(), tiny["train"],
                                    out_path=ck)
    before = tr.params_digest(f_net)
    f2, t2, _ = tr.train_landmarks(landmark_cfg(), tiny["train"], str(ck))
    assert tr.params_digest(f2) == before
    wrong = landmark_cfg(model=ModelConfig(d=16, k=3, in_channels=3,
                                           width_mult=0.125, t_width=6))
    with pytest.raises(ConfigurationError):
        tr.train_landmarks(wrong, tiny["train"], str(ck))
    with pytest.raises(ConfigurationError):
        tr.load_landmark_model(str(ck))  # wrong checkpoint kind
    # k and t_width shape only the head; the checkpoint stays loadable
    head_only = landmark_cfg(model=ModelConfig(d=8, k=4, in_channels=3,
                                               width_mult=0.125, t_width=10),
                             epochs=0)
    _, t_new, _ = tr.train_landmarks(head_only, tiny["train"], str(ck))
    assert t_new is not None


def test_logged_total_is_sum_of_components(tiny, tmp_path):
    log = tmp_path / "lm.jsonl"
    torch.manual_seed(0)
    f_net = build_feature_extractor(MODEL)
    tr.train_landmarks(landmark_cfg(epochs=2), tiny["train"], f_net,
                       log_path=log)
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(rows) == 2
    for row in rows:
        parts = row["loss_eqv"] + row["loss_div"] + row["loss_var"]
        assert abs(row["loss_total"] - parts) <= 1e-6


def test_arms_share_architecture_and_lr_zero_outputs(tiny):
    images = [ex.image for ex in tiny["val"]]
    f1, r1 = tr.pretrain_features(pretrain_cfg(lr=0.0), tiny["train"])
    fa, ta, _ = tr.train_landmarks(landmark_cfg(lr=0.0), tiny["train"], f1)
    fb, tb, _ = tr.train_end_to_end(
        tr.TrainConfig(step="end2end", model=MODEL, epochs=1, lr=0.0,
                       batch_size=4, seed=3, strict_determinism=True),
        tiny["train"])
    count = lambda *ms: sum(p.numel() for m in ms for p in m.parameters())
    assert count(fa, ta) == count(fb, tb)
    pa = tr.predict_landmarks(fa, ta, images)
    pb = tr.predict_landmarks(fb, tb, images)
    assert np.array_equal(pa, pb)


def test_epochs_zero_gives_init_checkpoint(tiny, tmp_path):
    ck = tmp_path / "e2e.npz"
    cfg = tr.TrainConfig(step="end2end", model=MODEL, epochs=0, lr=1e-3,
                         batch_size=4, seed=5, strict_determinism=True)
    f_net, t_net, report = tr.train_end_to_end(cfg, tiny["train"],
                                               out_path=ck)
    assert report.epochs == []
    torch.manual_seed(cfg.seed)
    ref_f = state_to_params(build_feature_extractor(MODEL))
    got = state_to_params(f_net)
    assert all(np.array_equal(got[k], ref_f[k]) for k in ref_f)
    manifest, params = load_checkpoint(ck)
    assert manifest["kind"] == "landmark"


def test_checkpoint_round_trip_outputs(tiny, tmp_path):
    ck = tmp_path / "lm.npz"
    torch.manual_seed(0)
    f_net = build_feature_extractor(MODEL)
    fa, ta, _ = tr.train_landmarks(landmark_cfg(), tiny["train"], f_net,
                                   out_path=ck)
    fb, tb, manifest = tr.load_landmark_model(ck)
    assert manifest["meta"]["mode"] == "landmark"
    images = [ex.image for ex in tiny["val"]]
    assert np.array_equal(tr.predict_landmarks(fa, ta, images),
                          tr.predict_landmarks(fb, tb, images))


def test_validation_equivariance_smoke(tiny):
    torch.manual_seed(2)
    f_net = build_feature_extractor(MODEL)
    t_net = build_landmark_head(MODEL)
    val = tr.validation_equivariance(f_net, t_net, tiny["val"],
                                     AugConfig(rotation=0.3), seed=4)
    assert np.isfinite(val) and val >= 0.0


def test_predict_landmarks_shape_and_dtype(tiny):
    torch.manual_seed(2)
    f_net = build_feature_extractor(MODEL)
    t_net = build_landmark_head(MODEL)
    preds = tr.predict_landmarks(f_net, t_net,
                                 [ex.image for ex in tiny["test"]])
    assert preds.shape == (2, MODEL.k, 2) and preds.dtype == np.float64
    h = tiny["test"][0].image.shape[0]
    assert preds.min() >= 0.0 and preds.max() <= h - 1
