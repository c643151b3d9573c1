"""Geometric deformations of the image domain and pixel-wise appearance maps.

Coordinates are (row, col) floats. Pixel (i, j) of an H x W array sits at
coordinate (float(i), float(j)), so the sampling hull is [0, H-1] x [0, W-1]
while the validity box Lambda is [0, H] x [0, W]. A deformation g acts on
coordinates; its pushforward acts on images by sampling the input at
g.inverse(output coordinate), one bilinear pass per output pixel.

Elastic maps store the *inverse* displacement field u, i.e.
g.inverse(lam) = lam + u(lam). The forward map is recovered per point by
fixed-point iteration (at most 20 steps), which is cheap because the
forward direction is only ever needed at landmark coordinates or on a
one-off dense grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_ELASTIC_FRACTION = 0.2  # of min(H, W); larger fields stop being bijective
MIN_ELASTIC_SMOOTHNESS = 8.0  # px; rougher fields can fold over themselves
FIXED_POINT_ITERS = 20
# stop tolerance well under the 1e-6 pair-consistency contract, so the
# result does not depend on how points are batched into forward() calls
FIXED_POINT_TOL = 1e-9


@dataclass(frozen=True)
class DomainSpec:
    """Image domain: height, width, channel count."""

    height: int
    width: int
    channels: int = 1

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError(
                f"domain must be at least 8x8, got {self.height}x{self.width}"
            )
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")


def _as_points(pts):
    """Coerce to a float64 array of shape (..., 2)."""
    arr = np.asarray(pts, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise ValueError(f"expected (..., 2) coordinate array, got shape {arr.shape}")
    return arr


class AffineMap:
    """Invertible affine coordinate map: forward(lam) = M @ lam + b."""

    kind = "affine"

    def __init__(self, matrix, offset):
        self.matrix = np.asarray(matrix, dtype=np.float64).reshape(2, 2)
        self.offset = np.asarray(offset, dtype=np.float64).reshape(2)
        if abs(np.linalg.det(self.matrix)) < 1e-12:
            raise ValueError("affine map is singular")

    def forward(self, pts):
        arr = _as_points(pts)
        return arr @ self.matrix.T + self.offset

    def inverse(self, pts):
        arr = _as_points(pts)
        inv = np.linalg.inv(self.matrix)
        return (arr - self.offset) @ inv.T

    def inverted(self):
        inv = np.linalg.inv(self.matrix)
        return AffineMap(inv, -inv @ self.offset)

    def to_dict(self):
        return {
            "kind": "affine",
            "matrix": self.matrix.tolist(),
            "offset": self.offset.tolist(),
        }


def make_affine(rotation=0.0, scale=(1.0, 1.0), shear=0.0, translation=(0.0, 0.0),
                center=(0.0, 0.0)):
    """Build an affine CoordMap from interpretable parameters.

    The linear part is rotation @ shear @ diag(scale), applied about
    ``center`` (pass the domain center (H/2, W/2) to rotate in place), then
    shifted by ``translation``. Scale factors must be positive.
    """
    sr, sc = float(scale[0]), float(scale[1])
    if sr <= 0 or sc <= 0:
        raise ValueError(f"scale factors must be positive, got {scale}")
    ct, st = math.cos(rotation), math.sin(rotation)
    rot = np.array([[ct, -st], [st, ct]])
    shear_m = np.array([[1.0, float(shear)], [0.0, 1.0]])
    lin = rot @ shear_m @ np.diag([sr, sc])
    c = np.asarray(center, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    # forward(lam) = lin @ (lam - c) + c + t
    return AffineMap(lin, c + t - lin @ c)


def identity_map():
    return AffineMap(np.eye(2), np.zeros(2))


def _gaussian_kernel(sigma):
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (xs / sigma) ** 2)
    return w / w.sum()


def _smooth_1d(arr, kernel, axis):
    """Correlate along one axis; truncated taps at the edges are renormalized."""
    arr = np.moveaxis(arr, axis, 0)
    n = arr.shape[0]
    radius = (len(kernel) - 1) // 2
    out = np.zeros_like(arr)
    norm = np.zeros(n)
    for k in range(len(kernel)):
        shift = k - radius
        dst_lo, dst_hi = max(0, -shift), min(n, n - shift)
        if dst_hi <= dst_lo:
            continue
        out[dst_lo:dst_hi] += kernel[k] * arr[dst_lo + shift:dst_hi + shift]
        norm[dst_lo:dst_hi] += kernel[k]
    out /= norm.reshape((n,) + (1,) * (arr.ndim - 1))
    return np.moveaxis(out, 0, axis)


def _bilinear_upsample_grid(ctrl, height, width):
    """Upsample a (2, gh, gw) control field to (2, H, W).

    Control node (i, j) sits at pixel (i*(H-1)/(gh-1), j*(W-1)/(gw-1)).
    """
    _, gh, gw = ctrl.shape
    rows = np.linspace(0.0, gh - 1.0, height)
    cols = np.linspace(0.0, gw - 1.0, width)
    r0 = np.clip(np.floor(rows).astype(int), 0, gh - 2)
    c0 = np.clip(np.floor(cols).astype(int), 0, gw - 2)
    fr = (rows - r0).reshape(1, height, 1)
    fc = (cols - c0).reshape(1, 1, width)
    a = ctrl[:, r0][:, :, c0]
    b = ctrl[:, r0][:, :, c0 + 1]
    c = ctrl[:, r0 + 1][:, :, c0]
    d = ctrl[:, r0 + 1][:, :, c0 + 1]
    return (a * (1 - fr) * (1 - fc) + b * (1 - fr) * fc
            + c * fr * (1 - fc) + d * fr * fc)


def _build_elastic_field(domain, control_grid, magnitude, smoothness, seed):
    gh, gw = control_grid
    rng = np.random.default_rng(seed)
    ctrl = rng.standard_normal((2, gh, gw))
    # sigma in control-grid units so smoothness is expressed in pixels
    spacing = min((domain.height - 1) / (gh - 1), (domain.width - 1) / (gw - 1))
    sigma = smoothness / spacing
    if sigma > 1e-6:
        kernel = _gaussian_kernel(sigma)
        ctrl = _smooth_1d(ctrl, kernel, axis=1)
        ctrl = _smooth_1d(ctrl, kernel, axis=2)
    fld = _bilinear_upsample_grid(ctrl, domain.height, domain.width)
    maxnorm = float(np.sqrt((fld ** 2).sum(axis=0)).max())
    if maxnorm > 0:
        fld = fld * (magnitude / maxnorm)
    else:
        fld = np.zeros_like(fld)
    return fld


class ElasticMap:
    """Smooth random deformation; the stored field is the inverse displacement."""

    kind = "elastic"

    def __init__(self, domain, control_grid=(8, 8), magnitude=4.0,
                 smoothness=16.0, seed=0):
        gh, gw = int(control_grid[0]), int(control_grid[1])
        if gh < 2 or gw < 2:
            raise ValueError(f"control grid must be at least 2x2, got {control_grid}")
        bound = MAX_ELASTIC_FRACTION * min(domain.height, domain.width)
        if magnitude < 0 or magnitude > bound:
            raise ValueError(
                f"magnitude {magnitude} outside [0, {bound:.3g}] for this domain"
            )
        if magnitude > 0 and smoothness < MIN_ELASTIC_SMOOTHNESS:
            raise ValueError(
                f"smoothness must be >= {MIN_ELASTIC_SMOOTHNESS} px, got {smoothness}"
            )
        self.domain = domain
        self.control_grid = (gh, gw)
        self.magnitude = float(magnitude)
        self.smoothness = float(smoothness)
        self.seed = int(seed)
        self.field = _build_elastic_field(domain, (gh, gw), self.magnitude,
                                          self.smoothness, self.seed)

    def _displacement(self, pts):
        u = bilinear_sample(np.moveaxis(self.field, 0, -1), pts, mode="edge")
        return u.reshape(pts.shape)

    def inverse(self, pts):
        arr = _as_points(pts)
        return arr + self._displacement(arr)

    def forward(self, pts):
        arr = _as_points(pts)
        cur = arr.copy()
        for _ in range(FIXED_POINT_ITERS):
            nxt = arr - self._displacement(cur)
            step = np.abs(nxt - cur).max() if nxt.size else 0.0
            cur = nxt
            if step < FIXED_POINT_TOL:
                break
        return cur

    def inverted(self):
        return InvertedMap(self)

    def to_dict(self):
        return {
            "kind": "elastic",
            "height": self.domain.height,
            "width": self.domain.width,
            "control_grid": list(self.control_grid),
            "magnitude": self.magnitude,
            "smoothness": self.smoothness,
            "seed": self.seed,
        }


def make_elastic(domain, control_grid=(8, 8), magnitude=4.0, smoothness=16.0,
                 seed=0):
    """Random smooth deformation, a pure function of its seed."""
    return ElasticMap(domain, control_grid, magnitude, smoothness, seed)


class InvertedMap:
    """View of another map with forward and inverse swapped."""

    kind = "inverted"

    def __init__(self, child):
        self.child = child

    def forward(self, pts):
        return self.child.inverse(pts)

    def inverse(self, pts):
        return self.child.forward(pts)

    def inverted(self):
        return self.child

    def to_dict(self):
        return {"kind": "inverted", "child": self.child.to_dict()}


class CompositeMap:
    """Chain of maps applied innermost-last in the stored order."""

    kind = "composite"

    def __init__(self, maps):
        if not maps:
            raise ValueError("composite needs at least one map")
        self.maps = list(maps)

    def forward(self, pts):
        arr = _as_points(pts)
        for m in reversed(self.maps):
            arr = m.forward(arr)
        return arr

    def inverse(self, pts):
        arr = _as_points(pts)
        for m in self.maps:
            arr = m.inverse(arr)
        return arr

    def inverted(self):
        return CompositeMap([m.inverted() for m in reversed(self.maps)])

    def to_dict(self):
        return {"kind": "composite", "children": [m.to_dict() for m in self.maps]}


def compose(outer, inner):
    """Map with forward(lam) = outer.forward(inner.forward(lam))."""
    return CompositeMap([outer, inner])


def map_from_dict(d):
    """Rebuild a CoordMap from its to_dict record, bit-exactly."""
    kind = d.get("kind")
    if kind == "affine":
        return AffineMap(np.array(d["matrix"]), np.array(d["offset"]))
    if kind == "elastic":
        dom = DomainSpec(d["height"], d["width"])
        return ElasticMap(dom, tuple(d["control_grid"]), d["magnitude"],
                          d["smoothness"], d["seed"])
    if kind == "inverted":
        return InvertedMap(map_from_dict(d["child"]))
    if kind == "composite":
        return CompositeMap([map_from_dict(c) for c in d["children"]])
    raise ValueError(f"unknown map kind {kind!r}")


def bilinear_sample(x, pts, mode="edge", fill=0.0):
    """Bilinear lookup of image x at (row, col) points.

    x has shape (H, W) or (H, W, C); pts has shape (..., 2). Integer
    coordinates return the pixel value exactly. mode "edge" clamps sample
    coordinates to the pixel hull; mode "constant" substitutes ``fill`` for
    every neighbor that falls outside it.
    """
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    p = _as_points(pts)
    flat = p.reshape(-1, 2)
    r, col = flat[:, 0], flat[:, 1]

    if mode == "edge":
        r = np.clip(r, 0.0, h - 1.0)
        col = np.clip(col, 0.0, w - 1.0)
    elif mode != "constant":
        raise ValueError(f"unknown boundary mode {mode!r}")

    r0 = np.floor(r).astype(int)
    c0 = np.floor(col).astype(int)
    fr = r - r0
    fc = col - c0
    out = np.zeros((flat.shape[0], c))
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        ri, ci = r0 + dr, c0 + dc
        inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = np.full((flat.shape[0], c), float(fill))
        vals[inside] = arr[np.clip(ri, 0, h - 1)[inside],
                           np.clip(ci, 0, w - 1)[inside]]
        out += wgt[:, None] * vals
    out = out.reshape(p.shape[:-1] + (c,))
    return out[..., 0] if squeeze else out


def warp_image(g, x, mode="edge", fill=0.0):
    """Pushforward of g on image x: output(lam) = x[g.inverse(lam)]."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"image must be (H, W) or (H, W, C), got shape {arr.shape}")
    h, w = arr.shape[0], arr.shape[1]
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    grid = np.stack([rows, cols], axis=-1)
    src = g.inverse(grid.reshape(-1, 2)).reshape(h, w, 2)
    return bilinear_sample(arr, src, mode=mode, fill=fill)


def dense_forward_grid(g, domain):
    """Forward coordinates of every pixel, as an (H, W, 2) array."""
    h, w = domain.height, domain.width
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    grid = np.stack([rows, cols], axis=-1).reshape(-1, 2)
    return g.forward(grid).reshape(h, w, 2)


def transport_landmarks(g, y, domain):
    """Push landmark coordinates through g.forward.

    Returns (coords, valid): transported (K, 2) float64 coordinates and a
    boolean mask that is False where the result leaves the validity box
    [0, H] x [0, W]. Out-of-domain points keep their raw values; callers
    decide whether to drop them.
    """
    pts = _as_points(y)
    out = g.forward(pts)
    valid = ((out[..., 0] >= 0.0) & (out[..., 0] <= domain.height)
             & (out[..., 1] >= 0.0) & (out[..., 1] <= domain.width))
    return out, valid


_APPEARANCE_KINDS = {
    "noise": ("sigma",),
    "intensity": ("scale", "shift"),
    "contrast": ("factor",),
}


@dataclass(frozen=True)
class AppearanceMap:
    """Pixel-wise photometric transform; never moves any coordinate."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _APPEARANCE_KINDS:
            raise ValueError(f"unknown appearance kind {self.kind!r}")
        missing = [k for k in _APPEARANCE_KINDS[self.kind] if k not in self.params]
        if missing:
            raise ValueError(f"appearance {self.kind!r} missing params {missing}")

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}


def appearance_from_dict(d):
    return AppearanceMap(d["kind"], dict(d["params"]), int(d.get("seed", 0)))


def apply_appearance(r, x):
    """Apply an AppearanceMap; deterministic given the map's seed."""
    arr = np.asarray(x, dtype=np.float64)
    if r.kind == "noise":
        rng = np.random.default_rng(r.seed)
        return arr + float(r.params["sigma"]) * rng.standard_normal(arr.shape)
    if r.kind == "intensity":
        return float(r.params["scale"]) * arr + float(r.params["shift"])
    if r.kind == "contrast":
        # contrast pivots about the per-channel spatial mean, so constants are fixed
        mean = arr.mean(axis=(0, 1), keepdims=True) if arr.ndim == 3 else arr.mean()
        return mean + float(r.params["factor"]) * (arr - mean)
    raise ValueError(f"unknown appearance kind {r.kind!r}")


def inverse_consistency_error(g, domain, n=17, margin=0.1):
    """Max |forward(inverse(lam)) - lam| over an n x n interior grid."""
    h, w = domain.height, domain.width
    rows = np.linspace(margin * h, (1 - margin) * h, n)
    cols = np.linspace(margin * w, (1 - margin) * w, n)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    grid = np.stack([rr, cc], axis=-1).reshape(-1, 2)
    back = g.forward(g.inverse(grid))
    return float(np.abs(back - grid).max())
