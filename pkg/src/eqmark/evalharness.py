"""Supervised linear readout on top of unsupervised landmarks, plus the
quantitative reports built from it: single evaluations, sample-efficiency
sweeps, and the two-step versus end-to-end comparison table.

The readout is a ridge regressor without intercept, fit on coordinates
normalized to [0, 1] per axis and unmapped afterwards. Fits are solved from
the normal equations directly; everything downstream is deterministic given
the seed, so identical checkpoints produce identical report rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from eqmark.errors import ConfigurationError, NumericError
from eqmark.geometry import DomainSpec
from eqmark.metrics import curve_from_distances, iod_mse, pck_within
from eqmark.training import load_landmark_model, predict_landmarks

MAX_RIDGE_CONDITION = 1e12


@dataclass
class RegressorFit:
    """Linear map from 2K unsupervised to 2J annotated coordinates."""

    weights: np.ndarray  # (2K, 2J)
    alpha: float
    k: int
    j: int
    domain: DomainSpec
    train_id: str = ""
    n_train: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (2 * self.k, 2 * self.j):
            raise ConfigurationError(
                f"weight shape {self.weights.shape} does not match "
                f"K={self.k}, J={self.j}")
        if not np.isfinite(self.weights).all():
            raise NumericError("non-finite readout weights")

    def predict(self, unsup):
        """Map (N, K, 2) unsupervised landmarks to (N, J, 2) predictions."""
        x = _normalize(unsup, self.k, self.domain)
        y = x @ self.weights
        return _denormalize(y, self.j, self.domain)


@dataclass
class EvalReport:
    metric: str
    mean: float
    std: float
    n_fit: int
    n_eval: int
    config_hash: str = ""
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"metric": self.metric, "mean": self.mean, "std": self.std,
                "n_fit": self.n_fit, "n_eval": self.n_eval,
                "config_hash": self.config_hash, "details": self.details}


def _normalize(coords, k, domain):
    arr = np.asarray(coords, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1] != k or arr.shape[2] != 2:
        raise ConfigurationError(
            f"expected (N, {k}, 2) coordinates, got {arr.shape}")
    scale = np.array([domain.height - 1.0, domain.width - 1.0])
    return (arr / scale).reshape(arr.shape[0], 2 * k)


def _denormalize(flat, j, domain):
    arr = np.asarray(flat, dtype=np.float64).reshape(-1, j, 2)
    scale = np.array([domain.height - 1.0, domain.width - 1.0])
    return arr * scale


def fit_readout(unsup, gt, alpha=0.1, domain=None, train_id=""):
    """Ridge normal equations (XtX + alpha I) W = XtY, no intercept.

    unsup is (N, K, 2), gt is (N, J, 2), both in pixel coordinates; the
    system is solved on [0, 1]-normalized coordinates.
    """
    u = np.asarray(unsup, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if u.ndim != 3 or g.ndim != 3 or u.shape[0] != g.shape[0]:
        raise ConfigurationError(
            f"need matching (N, K, 2) and (N, J, 2): {u.shape} vs {g.shape}")
    if u.shape[0] < 1:
        raise ConfigurationError("need at least one fitting example")
    if alpha < 0:
        raise ConfigurationError(f"ridge strength must be nonnegative: {alpha}")
    k, j = u.shape[1], g.shape[1]
    if domain is None:
        raise ConfigurationError("fit_readout needs the coordinate domain")
    x = _normalize(u, k, domain)
    y = _normalize(g, j, domain)
    gram = x.T @ x + alpha * np.eye(2 * k)
    if alpha == 0:
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > MAX_RIDGE_CONDITION:
            raise NumericError(
                "singular readout system at alpha=0; refit with alpha > 0")
    weights = np.linalg.solve(gram, x.T @ y)
    return RegressorFit(weights, float(alpha), k, j, domain, train_id,
                        n_train=u.shape[0])


def _resolve_model(model):
    """Accept (f_net, t_net), a checkpoint path, or a predict callable."""
    if callable(model) and not isinstance(model, tuple):
        return model, None
    if isinstance(model, tuple):
        f_net, t_net = model
        return (lambda imgs: predict_landmarks(f_net, t_net, imgs)), None
    f_net, t_net, manifest = load_landmark_model(model)
    return (lambda imgs: predict_landmarks(f_net, t_net, imgs)), manifest


def _gather(dataset):
    images = [ex.image for ex in dataset]
    gts = np.stack([ex.landmarks for ex in dataset])
    vis = np.stack([ex.visibility for ex in dataset])
    return images, gts, vis


def score_predictions(preds, dataset, metric="pck", threshold=6.0,
                      eye_indices=(1, 2)):
    """Score regressed landmark predictions against a dataset's annotations.

    pck is reported in percent; iod-mse as mean normalized error * 100.
    """
    _, gts, vis = _gather(dataset)
    if preds.shape != gts.shape:
        raise ConfigurationError(
            f"prediction shape {preds.shape} does not match "
            f"annotations {gts.shape}")
    if metric == "pck":
        return 100.0 * pck_within(preds, gts, threshold, visibility=vis)
    if metric == "iod-mse":
        return iod_mse(preds, gts, eye_indices)
    raise ConfigurationError(f"unknown metric {metric!r}; use pck or iod-mse")


def fit_readout_on_dataset(model, dataset, alpha=0.1, indices=None,
                           train_id=""):
    """Predict unsupervised landmarks on a fit split and solve the readout."""
    predict, _ = _resolve_model(model)
    images, gts, _ = _gather(dataset)
    if indices is not None:
        images = [images[i] for i in indices]
        gts = gts[np.asarray(indices)]
    unsup = predict(images)
    h, w = images[0].shape[0], images[0].shape[1]
    domain = DomainSpec(h, w, images[0].shape[2] if images[0].ndim == 3 else 1)
    return fit_readout(unsup, gts, alpha=alpha, domain=domain,
                       train_id=train_id)


def evaluate_readout(fit, model, dataset, metric="pck", threshold=6.0,
                     eye_indices=(1, 2), config_hash=""):
    """Apply a fitted readout to a model's landmarks on a test dataset."""
    predict, manifest = _resolve_model(model)
    images, gts, _ = _gather(dataset)
    if gts.shape[1] != fit.j:
        raise ConfigurationError(
            f"annotation landmark count {gts.shape[1]} does not match "
            f"readout J={fit.j}")
    unsup = predict(images)
    if unsup.shape[1] != fit.k:
        raise ConfigurationError(
            f"model landmark count {unsup.shape[1]} does not match "
            f"readout K={fit.k}")
    preds = fit.predict(unsup)
    value = score_predictions(preds, dataset, metric, threshold, eye_indices)
    return EvalReport(metric, value, 0.0, n_fit=fit.n_train, n_eval=len(dataset),
                      config_hash=config_hash,
                      details={"threshold": threshold,
                               "alpha": fit.alpha,
                               "train_id": fit.train_id})


def prediction_curve(preds, dataset, thresholds):
    """Accuracy curve of regressed predictions over pixel thresholds."""
    _, gts, vis = _gather(dataset)
    dist = np.linalg.norm(preds - gts, axis=2)
    dists = dist[vis.astype(bool)]
    return curve_from_distances(dists, thresholds)


def sample_efficiency_sweep(model, fit_dataset, test_dataset, sizes,
                            repeats=5, seed=0, alpha=0.1, metric="pck",
                            threshold=6.0, eye_indices=(1, 2)):
    """Readout quality as a function of annotated fitting examples.

    Each (size, repeat) subset is drawn without replacement from a seed
    derived from (seed, size, repeat), then sorted, so repeated runs are
    reproducible and the full pool is always the same subset.
    """
    pool = len(fit_dataset)
    if repeats < 1:
        raise ConfigurationError(f"repeats must be >= 1: {repeats}")
    predict, _ = _resolve_model(model)
    fit_images, fit_gts, _ = _gather(fit_dataset)
    unsup_fit = predict(fit_images)
    test_images, _, _ = _gather(test_dataset)
    unsup_test = predict(test_images)
    h, w = fit_images[0].shape[0], fit_images[0].shape[1]
    domain = DomainSpec(h, w)
    rows = []
    for size in sizes:
        if not 1 <= size <= pool:
            raise ConfigurationError(
                f"subset size {size} outside the annotation pool (1..{pool})")
        values = []
        for rep in range(repeats):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, int(size), rep]))
            idx = np.sort(rng.choice(pool, size=int(size), replace=False))
            fit = fit_readout(unsup_fit[idx], fit_gts[idx], alpha=alpha,
                              domain=domain,
                              train_id=f"subset-{size}-{rep}")
            preds = fit.predict(unsup_test)
            values.append(score_predictions(preds, test_dataset, metric,
                                            threshold, eye_indices))
        rows.append({"size": int(size), "repeats": repeats,
                     "mean": float(np.mean(values)),
                     "std": float(np.std(values)),
                     "values": [float(v) for v in values]})
    return rows


def ablation_report(checkpoints, fit_dataset, test_dataset, alpha=0.1,
                    metric="pck", threshold=6.0, eye_indices=(1, 2),
                    curve_thresholds=(1, 2, 3, 4, 5, 6, 8, 10),
                    config_hash=""):
    """Compare training regimes sharing one architecture.

    checkpoints maps a row label to a landmark checkpoint path. Returns
    {"rows": [...], "curves": {label: AccuracyCurve}}; every checkpoint
    must declare the same model configuration.
    """
    if not checkpoints:
        raise ConfigurationError("no checkpoints to compare")
    loaded = {}
    arch = None
    for label, path in checkpoints.items():
        predict, manifest = _resolve_model(path)
        model_cfg = manifest["model_config"] if manifest else None
        if manifest is not None:
            if arch is None:
                arch = model_cfg
            elif model_cfg != arch:
                raise ConfigurationError(
                    f"checkpoint {label!r} has architecture {model_cfg}, "
                    f"expected {arch}")
        loaded[label] = predict
    fit_images, fit_gts, _ = _gather(fit_dataset)
    test_images, _, _ = _gather(test_dataset)
    h, w = fit_images[0].shape[0], fit_images[0].shape[1]
    domain = DomainSpec(h, w)
    rows, curves = [], {}
    for label, predict in loaded.items():
        fit = fit_readout(predict(fit_images), fit_gts, alpha=alpha,
                          domain=domain, train_id=label)
        preds = fit.predict(predict(test_images))
        pck_val = score_predictions(preds, test_dataset, "pck", threshold,
                                    eye_indices)
        iod_val = score_predictions(preds, test_dataset, "iod-mse", threshold,
                                    eye_indices)
        rows.append({"label": label,
                     f"pck@{threshold:g}": pck_val,
                     "iod_mse": iod_val,
                     "n_fit": len(fit_dataset),
                     "n_eval": len(test_dataset)})
        curves[label] = prediction_curve(preds, test_dataset,
                                         curve_thresholds)
    return {"rows": rows, "curves": curves, "metric": metric,
            "config_hash": config_hash}


def ablation_table_text(report):
    """Plain-text table of an ablation report's rows."""
    rows = report["rows"]
    keys = [k for k in rows[0] if k != "label"]
    width = max(len(r["label"]) for r in rows)
    lines = ["  ".join(["arm".ljust(width)] + [f"{k:>12}" for k in keys])]
    for r in rows:
        cells = [f"{r[k]:12.4f}" if isinstance(r[k], float) else f"{r[k]:>12}"
                 for k in keys]
        lines.append("  ".join([r["label"].ljust(width)] + cells))
    return "\n".join(lines) + "\n"
