"""The four differentiable training objectives.

All functions take torch tensors and return scalar tensors so gradients
flow to their inputs. Coordinates are (row, col) in pixel units; probability
maps are spatial-softmax outputs that sum to one over H x W.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from eqmark.errors import ConfigurationError, NumericError

MIN_FEATURE_NORM = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Weights for the combined landmark objective, plus the patch size."""

    w_eqv: float = 1.0
    w_div: float = 1.0
    w_var: float = 1.0
    patch_size: int = 8

    def __post_init__(self):
        if min(self.w_eqv, self.w_div, self.w_var) < 0:
            raise ConfigurationError(f"loss weights must be nonnegative: {self}")
        if self.patch_size < 1:
            raise ConfigurationError(f"patch_size must be >= 1: {self.patch_size}")


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x)


def equivariance_loss(y_deformed, y_transported, valid=None):
    """Mean squared distance between predicted and transported landmarks.

    Inputs are (..., K, 2) coordinate tensors; ``valid`` is an optional
    (..., K) boolean mask for pairs whose transported target stayed inside
    the domain. The mean runs over all valid pairs. Differentiable in both
    coordinate tensors.
    """
    yd = _as_tensor(y_deformed)
    yt = _as_tensor(y_transported)
    if yd.shape != yt.shape:
        raise ConfigurationError(
            f"landmark sets differ in shape: {tuple(yd.shape)} vs {tuple(yt.shape)}"
        )
    sq = ((yd - yt) ** 2).sum(dim=-1)
    if valid is None:
        return sq.mean()
    mask = _as_tensor(valid).to(dtype=sq.dtype)
    count = mask.sum()
    if count.item() < 1:
        raise NumericError(
            "equivariance loss undefined: no landmark pair stayed in-domain; "
            "resample the deformation"
        )
    return (sq * mask).sum() / count


def diversity_loss(probmaps, patch=8):
    """Overlap penalty at patch granularity.

    probmaps is (K, H, W) or (B, K, H, W). For each patch P the penalty is
    sum_k m_k(P) - max_k m_k(P) where m_k(P) is landmark k's probability
    mass inside P; the per-image losses are summed over patches and averaged
    over the batch. patch=1 is the per-pixel form.
    """
    p = _as_tensor(probmaps)
    squeeze = p.ndim == 3
    if squeeze:
        p = p[None]
    if p.ndim != 4:
        raise ConfigurationError(f"probmaps must be (K,H,W) or (B,K,H,W), got {tuple(p.shape)}")
    b, k, h, w = p.shape
    patch = int(patch)
    if patch < 1 or h % patch or w % patch:
        raise ConfigurationError(f"patch {patch} must divide the {h}x{w} domain")
    masses = p.reshape(b, k, h // patch, patch, w // patch, patch).sum(dim=(3, 5))
    total = masses.sum(dim=1)
    top = masses.max(dim=1).values
    return (total - top).sum(dim=(1, 2)).mean()


def contrastive_loss(f_anchor, f_positive, tau=0.1):
    """Pixel-contrastive objective over B images with K locations each.

    f_anchor holds the features sampled from the first view at the chosen
    locations, f_positive the features of the second view at the transported
    locations; both are (B, K, D). Each (b, k) contributes two terms, one
    anchored at each view; the positive similarity is the shared numerator
    while the denominator pools every other feature of the same view (self
    excluded) plus every feature of the opposite view.
    """
    fa = _as_tensor(f_anchor)
    fb = _as_tensor(f_positive)
    if fa.shape != fb.shape or fa.ndim != 3:
        raise ConfigurationError(
            f"features must be matching (B,K,D) tensors, got {tuple(fa.shape)} vs {tuple(fb.shape)}"
        )
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive: {tau}")
    b, k, d = fa.shape
    n = b * k
    if n < 2:
        raise ConfigurationError(f"need B*K >= 2 contrastive locations, got {n}")
    u = fa.reshape(n, d)
    v = fb.reshape(n, d)
    un = u.norm(dim=1)
    vn = v.norm(dim=1)
    if un.min() < MIN_FEATURE_NORM or vn.min() < MIN_FEATURE_NORM:
        raise NumericError("contrastive loss: zero-norm feature vector")
    u = u / un[:, None]
    v = v / vn[:, None]
    e_uu = torch.exp(u @ u.T / tau)
    e_vv = torch.exp(v @ v.T / tau)
    e_uv = torch.exp(u @ v.T / tau)
    pos = e_uv.diagonal()
    off = 1.0 - torch.eye(n, dtype=u.dtype, device=u.device)
    den_a = (e_uu * off).sum(dim=1) + e_uv.sum(dim=1)
    den_b = (e_vv * off).sum(dim=1) + e_uv.sum(dim=0)
    terms = (torch.log(pos) - torch.log(den_a)) + (torch.log(pos) - torch.log(den_b))
    return -terms.sum() / n


def variance_loss(probmaps):
    """Batch mean of the mean-over-K coordinate covariance trace.

    probmaps is (K, H, W) or (B, K, H, W). For each map the coordinate of a
    pixel is its (row, col) index; the trace of the covariance under the
    map's probability measure is Var[row] + Var[col], in squared pixels.
    """
    p = _as_tensor(probmaps)
    squeeze = p.ndim == 3
    if squeeze:
        p = p[None]
    if p.ndim != 4:
        raise ConfigurationError(f"probmaps must be (K,H,W) or (B,K,H,W), got {tuple(p.shape)}")
    h, w = p.shape[-2], p.shape[-1]
    rows = torch.arange(h, dtype=p.dtype, device=p.device)
    cols = torch.arange(w, dtype=p.dtype, device=p.device)
    pr = p.sum(dim=-1)  # (B, K, H) row marginal
    pc = p.sum(dim=-2)  # (B, K, W) col marginal
    mr = (pr * rows).sum(dim=-1)
    mc = (pc * cols).sum(dim=-1)
    vr = (pr * rows ** 2).sum(dim=-1) - mr ** 2
    vc = (pc * cols ** 2).sum(dim=-1) - mc ** 2
    return (vr + vc).mean(dim=1).mean()


def combined_landmark_loss(weights: LossWeights, eqv, div, var):
    """Weighted sum of the three landmark-training objectives."""
    return weights.w_eqv * eqv + weights.w_div * div + weights.w_var * var
