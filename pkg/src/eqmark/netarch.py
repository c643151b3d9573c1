"""Hourglass feature extractor, landmark head, and differentiable readouts.

Tensors follow torch layout (B, C, H, W); coordinates are (row, col) floats
with pixel (i, j) at coordinate (i, j), matching the geometry module. The
extractor F maps an image to a dense D-channel feature map at the same
resolution; the head T maps features to K unnormalized heatmaps, one per
landmark. Named taps expose the intermediate representations probed by the
matching metric: layer1 is F's output, layers 2 and 3 are T's activations,
layer4 is the heatmap stack.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as tfn

from eqmark.errors import ConfigurationError, DataError, NumericError

CHECKPOINT_VERSION = 1
BASE_WIDTHS = (32, 64, 128, 256)
LAYER_NAMES = ("layer1", "layer2", "layer3", "layer4")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for F and T."""

    d: int = 64            # feature channels out of F
    k: int = 16            # landmarks / heatmaps out of T
    in_channels: int = 3
    width_mult: float = 0.25
    t_width: int = 32      # hidden channels of T's convolutions
    norm: str = "none"     # "none" or "group"

    def __post_init__(self):
        if self.d < 1 or self.k < 1 or self.in_channels < 1 or self.t_width < 1:
            raise ConfigurationError(f"channel counts must be positive: {self}")
        if self.width_mult <= 0:
            raise ConfigurationError(f"width_mult must be positive: {self.width_mult}")
        if self.norm not in ("none", "group"):
            raise ConfigurationError(f"norm must be 'none' or 'group': {self.norm!r}")

    @property
    def widths(self):
        return tuple(max(4, int(round(w * self.width_mult))) for w in BASE_WIDTHS)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _norm_layer(norm, ch):
    if norm == "group":
        groups = next(g for g in range(min(8, ch), 0, -1) if ch % g == 0)
        return nn.GroupNorm(groups, ch)
    return nn.Identity()


def _block(cin, cout, norm):
    """Two 3x3 convolution units separated by rectified-linear activations."""
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        _norm_layer(norm, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        _norm_layer(norm, cout),
        nn.ReLU(inplace=True),
    )


class FeatureExtractor(nn.Module):
    """Hourglass encoder-decoder: image (B,C,H,W) -> features (B,D,H,W).

    Four conv-maxpool encoder blocks each halve the spatial dims; the
    decoder mirrors them with nearest-neighbor upsampling plus convolution,
    concatenating the skip tensor at each scale. H and W must be divisible
    by 16.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        n = cfg.norm
        self.enc1 = _block(cfg.in_channels, w[0], n)
        self.enc2 = _block(w[0], w[1], n)
        self.enc3 = _block(w[1], w[2], n)
        self.enc4 = _block(w[2], w[3], n)
        self.pool = nn.MaxPool2d(2)
        self.dec4 = _block(w[3] + w[3], w[2], n)
        self.dec3 = _block(w[2] + w[2], w[1], n)
        self.dec2 = _block(w[1] + w[1], w[0], n)
        self.dec1 = _block(w[0] + w[0], w[0], n)
        self.out = nn.Conv2d(w[0], cfg.d, 1)

    def forward(self, x):
        if x.ndim != 4:
            raise ConfigurationError(f"expected (B,C,H,W) input, got shape {tuple(x.shape)}")
        h, w = x.shape[-2], x.shape[-1]
        if h % 16 or w % 16:
            raise ConfigurationError(
                f"spatial dims must be divisible by 16, got {h}x{w}"
            )
        up = lambda t: tfn.interpolate(t, scale_factor=2, mode="nearest")
        a = self.enc1(x)
        b = self.enc2(self.pool(a))
        c = self.enc3(self.pool(b))
        d = self.enc4(self.pool(c))
        z = self.pool(d)
        z = self.dec4(torch.cat([up(z), d], dim=1))
        z = self.dec3(torch.cat([up(z), c], dim=1))
        z = self.dec2(torch.cat([up(z), b], dim=1))
        z = self.dec1(torch.cat([up(z), a], dim=1))
        return self.out(z)


class LandmarkHead(nn.Module):
    """Fully convolutional head: features (B,D,H,W) -> heatmaps (B,K,H,W).

    Three 3x3 convolutions at full resolution; no downsampling.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(cfg.d, cfg.t_width, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.t_width, cfg.t_width, 3, padding=1)
        self.conv3 = nn.Conv2d(cfg.t_width, cfg.k, 3, padding=1)

    def forward(self, f):
        a = torch.relu(self.conv1(f))
        a = torch.relu(self.conv2(a))
        return self.conv3(a)

    def taps(self, f):
        a2 = torch.relu(self.conv1(f))
        a3 = torch.relu(self.conv2(a2))
        return {"layer2": a2, "layer3": a3, "layer4": self.conv3(a3)}


def build_feature_extractor(cfg: ModelConfig) -> FeatureExtractor:
    return FeatureExtractor(cfg)


def build_landmark_head(cfg: ModelConfig) -> LandmarkHead:
    return LandmarkHead(cfg)


def compute_taps(extractor, head, x):
    """All four probe representations for a batch of images."""
    f = extractor(x)
    out = {"layer1": f}
    out.update(head.taps(f))
    return out


def spatial_softmax(h):
    """Per-heatmap softmax over the H x W grid, with max-subtraction.

    Accepts (..., H, W); normalizes the last two dims.
    """
    if not torch.is_tensor(h):
        h = torch.as_tensor(h)
    if not torch.isfinite(h).all():
        raise NumericError("spatial_softmax: non-finite heatmap scores")
    shape = h.shape
    flat = h.reshape(*shape[:-2], -1)
    flat = flat - flat.max(dim=-1, keepdim=True).values
    return torch.softmax(flat, dim=-1).reshape(shape)


def _coord_grids(height, width, dtype, device):
    rows = torch.arange(height, dtype=dtype, device=device)
    cols = torch.arange(width, dtype=dtype, device=device)
    return rows, cols


def spatial_soft_argmax(h):
    """Probability-weighted mean coordinate of each heatmap.

    Accepts (..., H, W); returns (..., 2) coordinates in (row, col) order.
    Differentiable in the heatmap scores.
    """
    p = spatial_softmax(h)
    height, width = p.shape[-2], p.shape[-1]
    rows, cols = _coord_grids(height, width, p.dtype, p.device)
    r = (p.sum(dim=-1) * rows).sum(dim=-1)
    c = (p.sum(dim=-2) * cols).sum(dim=-1)
    return torch.stack([r, c], dim=-1)


def sample_features_at(f, coords):
    """Bilinear lookup of feature vectors at (row, col) coordinates.

    f is (D, H, W) or (B, D, H, W); coords is (..., 2) within the validity
    box [0, H] x [0, W] (samples are clamped to the pixel hull). With a
    batched f the leading coords dim must equal B. Differentiable in f.
    """
    if not torch.is_tensor(f):
        f = torch.as_tensor(f)
    pts = coords if torch.is_tensor(coords) else torch.as_tensor(coords)
    pts = pts.to(f.dtype)
    batched = f.ndim == 4
    if f.ndim not in (3, 4):
        raise ConfigurationError(f"feature map must be (D,H,W) or (B,D,H,W), got {tuple(f.shape)}")
    height, width = f.shape[-2], f.shape[-1]
    if pts.shape[-1] != 2:
        raise ValueError(f"coords must be (..., 2), got {tuple(pts.shape)}")
    r, c = pts[..., 0], pts[..., 1]
    if (r.min() < 0 or r.max() > height or c.min() < 0 or c.max() > width):
        raise ValueError("coordinate outside the validity box [0,H]x[0,W]")
    r = r.clamp(0, height - 1)
    c = c.clamp(0, width - 1)
    r0 = r.floor().clamp(0, height - 2)
    c0 = c.floor().clamp(0, width - 2)
    fr, fc = r - r0, c - c0
    r0, c0 = r0.long(), c0.long()

    if batched:
        out = []
        for b in range(f.shape[0]):
            out.append(_bilinear_one(f[b], r0[b], c0[b], fr[b], fc[b]))
        return torch.stack(out, dim=0)
    return _bilinear_one(f, r0, c0, fr, fc)


def _bilinear_one(f, r0, c0, fr, fc):
    v00 = f[:, r0, c0]
    v01 = f[:, r0, c0 + 1]
    v10 = f[:, r0 + 1, c0]
    v11 = f[:, r0 + 1, c0 + 1]
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11
    # move channel dim last: (..., D)
    return out.movedim(0, -1)


# ---------------------------------------------------------------------------
# checkpoints: npz archive with a JSON manifest plus raw parameter arrays
# ---------------------------------------------------------------------------

def save_checkpoint(path, kind, model_config, params, meta=None):
    """Write a named-parameter archive.

    params maps parameter names to numpy arrays (or torch tensors). The
    manifest records the format version, the checkpoint kind, the model
    config, and optional metadata.
    """
    arrays = {}
    names = []
    for name, val in params.items():
        arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
        arrays["param::" + name] = arr
        names.append(name)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "model_config": model_config.to_dict(),
        "params": names,
        "meta": meta or {},
    }
    arrays["__manifest__"] = np.array(json.dumps(manifest, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Read a checkpoint; returns (manifest dict, {name: array})."""
    try:
        npz = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")
    except Exception as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}")
    if "__manifest__" not in npz:
        raise DataError(f"checkpoint {path} has no manifest")
    manifest = json.loads(str(npz["__manifest__"]))
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint {path} has format_version {manifest.get('format_version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    params = {}
    for name in manifest["params"]:
        key = "param::" + name
        if key not in npz:
            raise DataError(f"checkpoint {path} missing parameter {name!r}")
        params[name] = npz[key]
    return manifest, params


def state_to_params(module, prefix=""):
    """Flatten a module's state dict to {name: numpy array}."""
    return {prefix + k: v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def load_params_into(module, params, prefix=""):
    """Load numpy arrays back into a module's state dict."""
    state = {}
    for k in module.state_dict():
        key = prefix + k
        if key not in params:
            raise DataError(f"checkpoint missing parameter {key!r}")
        state[k] = torch.as_tensor(params[key])
    module.load_state_dict(state)
    return module
