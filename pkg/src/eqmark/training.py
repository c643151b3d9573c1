"""Training loops: contrastive pretraining, frozen-feature landmark training,
and the end-to-end baseline arm.

All three loops share the same mechanics: AdamW with decoupled weight decay,
a per-epoch learning-rate schedule lr * decay^epoch applied exactly, batches
drawn by seeded pair sampling, and JSON-lines epoch logs whose total always
equals the sum of the logged (weighted) components. Strict-determinism mode
pins torch to one thread so reruns are bitwise reproducible.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from eqmark import geometry as geo
from eqmark.data import (AugConfig, make_pair_sample, step1_default_aug,
                         step2_default_aug)
from eqmark.errors import ConfigurationError, NumericError, TrainingError
from eqmark.losses import (LossWeights, combined_landmark_loss,
                           contrastive_loss, diversity_loss,
                           equivariance_loss, variance_loss)
from eqmark.netarch import (ModelConfig, build_feature_extractor,
                            build_landmark_head, load_checkpoint,
                            load_params_into, sample_features_at,
                            save_checkpoint, spatial_soft_argmax,
                            spatial_softmax, state_to_params)

BATCH_RETRY_LIMIT = 5  # resampled deformations after an all-out-of-domain draw


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training stage."""

    step: str = "pretrain"    # pretrain | landmark | end2end
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 20
    lr: float = 3e-4
    lr_decay: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    tau: float = 0.1
    n_locations: int = 16     # sampled location pairs per image in step 1
    aug: AugConfig = None     # per-step default when omitted
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 0.0
    strict_determinism: bool = False

    def __post_init__(self):
        if self.step not in ("pretrain", "landmark", "end2end"):
            raise ConfigurationError(f"unknown training step {self.step!r}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be nonnegative: {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError(f"lr decay must be in (0, 1]: {self.lr_decay}")
        if self.tau <= 0:
            raise ConfigurationError(f"temperature must be positive: {self.tau}")
        if self.epochs < 0 or self.batch_size < 1 or self.n_locations < 1:
            raise ConfigurationError(
                f"bad loop sizes: epochs={self.epochs} batch={self.batch_size} "
                f"locations={self.n_locations}")
        if self.aug is None:
            default = step1_default_aug() if self.step == "pretrain" \
                else step2_default_aug()
            object.__setattr__(self, "aug", default)

    def to_dict(self):
        d = {k: getattr(self, k) for k in
             ("step", "epochs", "lr", "lr_decay", "weight_decay", "batch_size",
              "tau", "n_locations", "seed", "checkpoint_every", "grad_clip",
              "strict_determinism")}
        d["model"] = self.model.to_dict()
        d["aug"] = self.aug.to_dict()
        d["loss_weights"] = {k: getattr(self.loss_weights, k)
                             for k in ("w_eqv", "w_div", "w_var", "patch_size")}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["aug"] = AugConfig.from_dict(d["aug"]) if d.get("aug") else None
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


@dataclass
class TrainReport:
    epochs: list
    wall_time: float
    checkpoint: str
    config_hash: str
    seed: int
    extra: dict = field(default_factory=dict)


def config_hash(cfg):
    """Stable hash of a config's canonical JSON form."""
    payload = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def params_digest(module):
    """Checksum of a module's parameters, for freeze contracts."""
    h = hashlib.sha256()
    for name, arr in sorted(state_to_params(module).items()):
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def images_to_tensor(images):
    """Stack (H, W, C) float arrays into a float32 (B, C, H, W) tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# differentiable landmark transport through a CoordMap
# ---------------------------------------------------------------------------

def _field_tensor(elastic, dtype):
    cached = getattr(elastic, "_torch_field", None)
    if cached is None or cached.dtype != dtype:
        cached = torch.as_tensor(elastic.field, dtype=dtype)
        elastic._torch_field = cached
    return cached


def _sample_field(fld, pts):
    """Edge-clamped bilinear lookup of a (2, H, W) field at (K, 2) points."""
    h, w = fld.shape[-2], fld.shape[-1]
    r = pts[:, 0].clamp(0, h - 1)
    c = pts[:, 1].clamp(0, w - 1)
    r0 = r.floor().clamp(0, h - 2)
    c0 = c.floor().clamp(0, w - 2)
    fr, fc = r - r0, c - c0
    r0l, c0l = r0.long(), c0.long()
    v00 = fld[:, r0l, c0l]
    v01 = fld[:, r0l, c0l + 1]
    v10 = fld[:, r0l + 1, c0l]
    v11 = fld[:, r0l + 1, c0l + 1]
    out = (v00 * (1 - fr) * (1 - fc) + v01 * (1 - fr) * fc
           + v10 * fr * (1 - fc) + v11 * fr * fc)
    return out.T  # (K, 2)


def torch_transport(g, pts):
    """Differentiable g.forward on a (K, 2) coordinate tensor.

    Mirrors the numpy evaluation: affine parts are exact, elastic parts run
    the same fixed-point iteration on the stored inverse-displacement field.
    """
    if isinstance(g, geo.AffineMap):
        m = torch.as_tensor(g.matrix, dtype=pts.dtype)
        b = torch.as_tensor(g.offset, dtype=pts.dtype)
        return pts @ m.T + b
    if isinstance(g, geo.CompositeMap):
        out = pts
        for child in reversed(g.maps):
            out = torch_transport(child, out)
        return out
    if isinstance(g, geo.ElasticMap):
        fld = _field_tensor(g, pts.dtype)
        cur = pts
        for _ in range(geo.FIXED_POINT_ITERS):
            cur = pts - _sample_field(fld, cur)
        return cur
    if isinstance(g, geo.InvertedMap):
        child = g.child
        if isinstance(child, geo.AffineMap):
            return torch_transport(child.inverted(), pts)
        if isinstance(child, geo.ElasticMap):
            fld = _field_tensor(child, pts.dtype)
            return pts + _sample_field(fld, pts)
        if isinstance(child, geo.CompositeMap):
            out = pts
            for sub in child.maps:
                out = torch_transport(geo.InvertedMap(sub), out)
            return out
        if isinstance(child, geo.InvertedMap):
            return torch_transport(child.child, pts)
    raise ConfigurationError(f"cannot transport through map kind {type(g).__name__}")


# ---------------------------------------------------------------------------
# shared loop plumbing
# ---------------------------------------------------------------------------

def _prepare(cfg):
    if cfg.strict_determinism:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _batch_seed(cfg, epoch, batch_idx, attempt=0):
    return np.random.SeedSequence([cfg.seed, epoch, batch_idx, attempt])


def _log_epoch(log_path, record):
    if log_path is None:
        return
    with open(log_path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _finite_or_raise(loss, seed_seq):
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss; diverged on batch seed {list(seed_seq.entropy)}")


def _sampled_batch(dataset, cfg, epoch, batch_idx, k, attempt=0):
    seq = _batch_seed(cfg, epoch, batch_idx, attempt)
    rng = np.random.default_rng(seq)
    indices = rng.integers(0, len(dataset), size=cfg.batch_size)
    pairs = []
    for slot, idx in enumerate(indices):
        pair_seq = np.random.SeedSequence(
            [cfg.seed, epoch, batch_idx, attempt, slot, int(idx)])
        pairs.append(make_pair_sample(dataset[int(idx)], k, cfg.aug,
                                      pair_seq, index=int(idx)))
    return pairs, seq


def _epoch_mean(rows):
    out = {}
    for key in rows[0]:
        out[key] = float(np.mean([r[key] for r in rows]))
    return out


# ---------------------------------------------------------------------------
# step 1: contrastive pretraining of F
# ---------------------------------------------------------------------------

def pretrain_features(cfg, dataset, out_path=None, log_path=None):
    """Train the feature extractor on paired views; returns (F, report)."""
    if cfg.step != "pretrain":
        raise ConfigurationError(f"pretrain_features needs step=pretrain, got {cfg.step!r}")
    if len(dataset) == 0:
        raise ConfigurationError("empty training dataset")
    _prepare(cfg)
    f_net = build_feature_extractor(cfg.model)
    opt = torch.optim.AdamW(f_net.parameters(), lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    n_batches = max(1, (len(dataset) + cfg.batch_size - 1) // cfg.batch_size)
    t0 = time.time()
    epoch_rows = []
    extra = {}
    for epoch in range(cfg.epochs):
        lr_e = cfg.lr * cfg.lr_decay ** epoch
        _set_lr(opt, lr_e)
        batch_stats = []
        for bi in range(n_batches):
            pairs, seq = _sampled_batch(dataset, cfg, epoch, bi,
                                        cfg.n_locations)
            x = images_to_tensor([p.image for p in pairs])
            xp = images_to_tensor([p.image_prime for p in pairs])
            locs = torch.as_tensor(
                np.stack([p.locations for p in pairs]), dtype=torch.float32)
            locs_p = torch.as_tensor(
                np.stack([p.locations_prime for p in pairs]), dtype=torch.float32)
            feats = f_net(torch.cat([x, xp], dim=0))
            fa = sample_features_at(feats[:len(pairs)], locs)
            fb = sample_features_at(feats[len(pairs):], locs_p)
            loss = contrastive_loss(fa, fb, cfg.tau)
            _finite_or_raise(loss, seq)
            if epoch == 0 and bi == 0:
                extra["initial_batch_loss"] = loss.item()
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(f_net.parameters(), cfg.grad_clip)
            opt.step()
            batch_stats.append({"loss_contrast": loss.item()})
        mean = _epoch_mean(batch_stats)
        record = {"epoch": epoch, "lr": lr_e,
                  "loss_contrast": mean["loss_contrast"],
                  "loss_total": mean["loss_contrast"],
                  "wall_time": time.time() - t0}
        epoch_rows.append(record)
        _log_epoch(log_path, record)
        _maybe_checkpoint(cfg, out_path, epoch, {"f": f_net})
    report = TrainReport(epoch_rows, time.time() - t0,
                         str(out_path) if out_path else "",
                         config_hash(cfg), cfg.seed, extra=extra)
    if out_path is not None:
        save_features_checkpoint(out_path, cfg, f_net)
    return f_net, report


# fields that determine F's architecture; k and t_width only shape T
_FEATURE_ARCH_FIELDS = ("d", "in_channels", "width_mult", "norm")


def _feature_arch(model):
    return {f: getattr(model, f) for f in _FEATURE_ARCH_FIELDS}


def save_features_checkpoint(path, cfg, f_net):
    save_checkpoint(path, "features", cfg.model,
                    state_to_params(f_net, prefix="f."),
                    meta={"train_config": cfg.to_dict(),
                          "config_hash": config_hash(cfg)})


def load_feature_extractor(path):
    manifest, params = load_checkpoint(path)
    if manifest["kind"] != "features":
        raise ConfigurationError(
            f"expected a features checkpoint, got kind={manifest['kind']!r}")
    model_cfg = ModelConfig.from_dict(manifest["model_config"])
    f_net = build_feature_extractor(model_cfg)
    load_params_into(f_net, params, prefix="f.")
    return f_net, manifest


def save_landmark_checkpoint(path, cfg, f_net, t_net, extra_meta=None):
    params = state_to_params(f_net, prefix="f.")
    params.update(state_to_params(t_net, prefix="t."))
    meta = {"train_config": cfg.to_dict(), "config_hash": config_hash(cfg)}
    meta.update(extra_meta or {})
    save_checkpoint(path, "landmark", cfg.model, params, meta=meta)


def load_landmark_model(path):
    manifest, params = load_checkpoint(path)
    if manifest["kind"] != "landmark":
        raise ConfigurationError(
            f"expected a landmark checkpoint, got kind={manifest['kind']!r}")
    model_cfg = ModelConfig.from_dict(manifest["model_config"])
    f_net = build_feature_extractor(model_cfg)
    t_net = build_landmark_head(model_cfg)
    load_params_into(f_net, params, prefix="f.")
    load_params_into(t_net, params, prefix="t.")
    return f_net, t_net, manifest


def _maybe_checkpoint(cfg, out_path, epoch, modules):
    if cfg.checkpoint_every <= 0 or out_path is None:
        return
    if (epoch + 1) % cfg.checkpoint_every:
        return
    base = str(out_path)
    stem = base[:-4] if base.endswith(".npz") else base
    params = {}
    for prefix, module in modules.items():
        params.update(state_to_params(module, prefix=prefix + "."))
    kind = "features" if set(modules) == {"f"} else "landmark"
    save_checkpoint(f"{stem}.epoch{epoch:03d}.npz", kind, cfg.model, params,
                    meta={"epoch": epoch, "config_hash": config_hash(cfg)})


# ---------------------------------------------------------------------------
# step 2 and the end-to-end arm
# ---------------------------------------------------------------------------

def _landmark_batch_loss(f_net, t_net, pairs, cfg, train_features):
    """Combined loss on one batch of deformation pairs."""
    x = images_to_tensor([p.image for p in pairs])
    xp = images_to_tensor([p.image_prime for p in pairs])
    both = torch.cat([x, xp], dim=0)
    if train_features:
        feats = f_net(both)
    else:
        with torch.no_grad():
            feats = f_net(both)
    heat = t_net(feats)
    hx, hxp = heat[:len(pairs)], heat[len(pairs):]
    probs = spatial_softmax(hx)
    y = spatial_soft_argmax(hx)      # (B, K, 2) on the original view
    yp = spatial_soft_argmax(hxp)    # predictions on the deformed view
    h, w = x.shape[-2], x.shape[-1]
    domain = geo.DomainSpec(h, w, x.shape[1])
    targets = []
    valid = []
    for i, pair in enumerate(pairs):
        targets.append(torch_transport(pair.coord_map, y[i]))
        _, ok = geo.transport_landmarks(
            pair.coord_map, y[i].detach().numpy().astype(np.float64), domain)
        valid.append(ok)
    target = torch.stack(targets)
    valid_t = torch.as_tensor(np.stack(valid))
    eqv = equivariance_loss(yp, target, valid_t)
    div = diversity_loss(probs, cfg.loss_weights.patch_size)
    var = variance_loss(probs)
    lw = cfg.loss_weights
    parts = {"loss_eqv": (lw.w_eqv * eqv).item(),
             "loss_div": (lw.w_div * div).item(),
             "loss_var": (lw.w_var * var).item()}
    total = combined_landmark_loss(lw, eqv, div, var)
    return total, parts


def validation_equivariance(f_net, t_net, dataset, aug, seed, batch_size=16):
    """Mean masked equivariance loss over a deterministic validation pass."""
    if len(dataset) == 0:
        raise ConfigurationError("empty validation dataset")
    vals = []
    h, w = dataset[0].image.shape[0], dataset[0].image.shape[1]
    domain = geo.DomainSpec(h, w, 3)
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start:start + batch_size]
            pairs = [make_pair_sample(ex, 1, aug,
                                      np.random.SeedSequence([seed, start + i]))
                     for i, ex in enumerate(chunk)]
            x = images_to_tensor([p.image for p in pairs])
            xp = images_to_tensor([p.image_prime for p in pairs])
            heat = t_net(f_net(torch.cat([x, xp], dim=0)))
            y = spatial_soft_argmax(heat[:len(pairs)])
            yp = spatial_soft_argmax(heat[len(pairs):])
            for i, pair in enumerate(pairs):
                tgt, ok = geo.transport_landmarks(
                    pair.coord_map, y[i].numpy().astype(np.float64), domain)
                if ok.any():
                    vals.append(equivariance_loss(
                        yp[i], torch.as_tensor(tgt, dtype=yp.dtype),
                        torch.as_tensor(ok)).item())
    return float(np.mean(vals))


def _run_landmark_loop(cfg, dataset, f_net, t_net, train_features,
                       out_path=None, log_path=None, val_dataset=None):
    params = list(t_net.parameters())
    if train_features:
        params = list(f_net.parameters()) + params
    else:
        for p in f_net.parameters():
            p.requires_grad_(False)
        f_net.eval()
    frozen_digest = None if train_features else params_digest(f_net)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n_batches = max(1, (len(dataset) + cfg.batch_size - 1) // cfg.batch_size)
    t0 = time.time()
    extra = {}
    if val_dataset:
        extra["val_eqv_initial"] = validation_equivariance(
            f_net, t_net, val_dataset, cfg.aug, cfg.seed)
    epoch_rows = []
    for epoch in range(cfg.epochs):
        lr_e = cfg.lr * cfg.lr_decay ** epoch
        _set_lr(opt, lr_e)
        batch_stats = []
        for bi in range(n_batches):
            for attempt in range(BATCH_RETRY_LIMIT):
                pairs, seq = _sampled_batch(dataset, cfg, epoch, bi, 0,
                                            attempt=attempt)
                try:
                    loss, parts = _landmark_batch_loss(
                        f_net, t_net, pairs, cfg, train_features)
                    break
                except NumericError:
                    continue  # every pair left the domain; redraw deformations
            else:
                raise TrainingError(
                    "no in-domain landmark pairs after "
                    f"{BATCH_RETRY_LIMIT} deformation redraws")
            _finite_or_raise(loss, seq)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            parts["loss_total"] = sum(parts.values())
            batch_stats.append(parts)
        mean = _epoch_mean(batch_stats)
        record = {"epoch": epoch, "lr": lr_e, **mean,
                  "wall_time": time.time() - t0}
        epoch_rows.append(record)
        _log_epoch(log_path, record)
        _maybe_checkpoint(cfg, out_path, epoch, {"f": f_net, "t": t_net})
    if val_dataset:
        extra["val_eqv_final"] = validation_equivariance(
            f_net, t_net, val_dataset, cfg.aug, cfg.seed)
    if frozen_digest is not None and params_digest(f_net) != frozen_digest:
        raise TrainingError("freeze contract violated: F changed during step 2")
    report = TrainReport(epoch_rows, time.time() - t0,
                         str(out_path) if out_path else "",
                         config_hash(cfg), cfg.seed, extra=extra)
    if out_path is not None:
        save_landmark_checkpoint(out_path, cfg, f_net, t_net,
                                 extra_meta={"mode": cfg.step})
    return report


def train_landmarks(cfg, dataset, frozen_features, out_path=None,
                    log_path=None, val_dataset=None):
    """Step 2: train T on top of a frozen pretrained F.

    frozen_features is a features-checkpoint path (or loaded extractor).
    Returns (f_net, t_net, report); F is bit-identical before and after.
    """
    if cfg.step != "landmark":
        raise ConfigurationError(f"train_landmarks needs step=landmark, got {cfg.step!r}")
    if len(dataset) == 0:
        raise ConfigurationError("empty training dataset")
    _prepare(cfg)
    if isinstance(frozen_features, (str, os.PathLike)):
        f_net, manifest = load_feature_extractor(frozen_features)
        ck_cfg = ModelConfig.from_dict(manifest["model_config"])
        ck_arch = _feature_arch(ck_cfg)
        want_arch = _feature_arch(cfg.model)
        if ck_arch != want_arch:
            raise ConfigurationError(
                f"checkpoint feature architecture {ck_arch} does not "
                f"match config {want_arch}")
    else:
        f_net = frozen_features
    # the head draws its init after a fresh seed so arms are comparable
    torch.manual_seed(cfg.seed)
    _consume_feature_init(cfg.model)
    t_net = build_landmark_head(cfg.model)
    report = _run_landmark_loop(cfg, dataset, f_net, t_net,
                                train_features=False, out_path=out_path,
                                log_path=log_path, val_dataset=val_dataset)
    return f_net, t_net, report


def _consume_feature_init(model_cfg):
    """Advance torch's RNG exactly as building F would.

    Keeps T's initialization identical between the two-step and end-to-end
    arms for a given seed, so comparisons isolate the training recipe.
    """
    build_feature_extractor(model_cfg)


def train_end_to_end(cfg, dataset, out_path=None, log_path=None,
                     val_dataset=None):
    """Ablation arm: same architecture and losses, F trainable, no pretraining."""
    if cfg.step != "end2end":
        raise ConfigurationError(f"train_end_to_end needs step=end2end, got {cfg.step!r}")
    if len(dataset) == 0:
        raise ConfigurationError("empty training dataset")
    _prepare(cfg)
    f_net = build_feature_extractor(cfg.model)
    t_net = build_landmark_head(cfg.model)
    report = _run_landmark_loop(cfg, dataset, f_net, t_net,
                                train_features=True, out_path=out_path,
                                log_path=log_path, val_dataset=val_dataset)
    return f_net, t_net, report


def predict_landmarks(f_net, t_net, images, batch_size=16):
    """Soft-argmax landmark coordinates for a list of images: (N, K, 2)."""
    f_net.eval()
    t_net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images_to_tensor(images[start:start + batch_size])
            out.append(spatial_soft_argmax(t_net(f_net(x))).numpy())
    return np.concatenate(out, axis=0).astype(np.float64)
