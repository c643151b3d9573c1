"""Synthetic dataset generation, dataset I/O, and paired-augmentation sampling.

The synthetic source renders a small articulated figure (elliptical torso,
head disc, two jointed two-segment arms) on a smoothly textured background.
Joint positions come from an explicit kinematic chain over the sampled pose
parameters, so ground-truth landmarks are exact by construction: head,
left/right shoulder, left/right elbow, left/right wrist, in that order.

On disk a dataset is a directory of lossless images plus a text index, one
row per image: ``relative/path.png v x1 y1 x2 y2 ...`` where v is a
visibility bitmask (bit j = landmark j) and x is the column coordinate,
y the row. A header row names the landmark schema.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image as PILImage

from eqmark.errors import ConfigurationError, DataError, SamplingError
from eqmark import geometry as geo
from eqmark.metrics import AnnotatedExample

SYNTH_LANDMARK_NAMES = ("head", "l_shoulder", "r_shoulder", "l_elbow",
                        "r_elbow", "l_wrist", "r_wrist")
# shoulders act as the normalization pair for inter-ocular style metrics
SYNTH_EYE_INDICES = (1, 2)
CAT_HEAD_DROP = (4, 7)  # ear-tip annotations, removed before use
LOCATION_RETRIES = 100


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"
    height: int = 64
    width: int = 64
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    seed: int = 0
    landmark_names: tuple = SYNTH_LANDMARK_NAMES

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ConfigurationError(
                f"resolution must be divisible by 16, got {self.height}x{self.width}"
            )
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigurationError("split sizes must be nonnegative")

    @property
    def domain(self):
        return geo.DomainSpec(self.height, self.width, 3)

    def to_dict(self):
        d = {k: getattr(self, k) for k in
             ("source", "height", "width", "n_train", "n_val", "n_test", "seed")}
        d["landmark_names"] = list(self.landmark_names)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["landmark_names"] = tuple(d.get("landmark_names", SYNTH_LANDMARK_NAMES))
        return cls(**d)


# ---------------------------------------------------------------------------
# synthetic figure
# ---------------------------------------------------------------------------

def _rot(theta):
    ct, st = math.cos(theta), math.sin(theta)
    return np.array([[ct, -st], [st, ct]])


def figure_landmarks(params):
    """Kinematic chain from pose parameters to the 7 joint coordinates."""
    center = np.asarray(params["center"], dtype=np.float64)
    rot = _rot(params["torso_angle"])
    head = center + rot @ np.array([-params["head_offset"], 0.0])
    out = [head]
    shoulders = []
    for side in (0, 1):
        local = np.asarray(params["shoulder_local"][side], dtype=np.float64)
        shoulders.append(center + rot @ local)
    out.extend(shoulders)
    elbows = []
    for side in (0, 1):
        phi = params["upper_angle"][side]
        u = np.array([math.cos(phi), math.sin(phi)])
        elbows.append(shoulders[side] + params["upper_len"][side] * u)
    out.extend(elbows)
    for side in (0, 1):
        phi = params["upper_angle"][side] + params["fore_angle_rel"][side]
        u = np.array([math.cos(phi), math.sin(phi)])
        out.append(elbows[side] + params["fore_len"][side] * u)
    return np.stack(out)


def _sample_pose(rng, h, w):
    s = min(h, w)
    a = s * rng.uniform(0.14, 0.18)
    b = s * rng.uniform(0.085, 0.115)
    hr = s * rng.uniform(0.06, 0.08)
    phi_l = rng.uniform(0.2, 1.3)
    phi_r = -rng.uniform(0.2, 1.3)
    return {
        "center": (h * (0.5 + rng.uniform(-0.05, 0.05)),
                   w * (0.5 + rng.uniform(-0.05, 0.05))),
        "torso_angle": rng.uniform(-0.25, 0.25),
        "torso_axes": (a, b),
        "head_radius": hr,
        "head_offset": a * 0.8 + hr * 0.9,
        "shoulder_local": ((-0.7 * a, 0.95 * b), (-0.7 * a, -0.95 * b)),
        "upper_len": (s * rng.uniform(0.13, 0.18), s * rng.uniform(0.13, 0.18)),
        "upper_angle": (phi_l, phi_r),
        "fore_len": (s * rng.uniform(0.10, 0.15), s * rng.uniform(0.10, 0.15)),
        "fore_angle_rel": (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)),
        "limb_width": s * rng.uniform(0.022, 0.032),
    }


def _smooth_field(rng, h, w, sigma, channels=1):
    raw = rng.standard_normal((channels, h, w))
    ker = geo._gaussian_kernel(sigma)
    raw = geo._smooth_1d(raw, ker, axis=1)
    raw = geo._smooth_1d(raw, ker, axis=2)
    lo = raw.min(axis=(1, 2), keepdims=True)
    hi = raw.max(axis=(1, 2), keepdims=True)
    return (raw - lo) / np.maximum(hi - lo, 1e-9)


def _soft_mask(dist, radius, edge=1.0):
    t = np.clip((radius - dist) / edge + 0.5, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _ellipse_dist(rr, cc, center, axes, theta):
    dr, dc = rr - center[0], cc - center[1]
    ct, st = math.cos(theta), math.sin(theta)
    u = (dr * ct + dc * st) / axes[0]
    v = (-dr * st + dc * ct) / axes[1]
    q = np.sqrt(u * u + v * v)
    # distance-like: (q - 1) scaled to pixel-ish units by the smaller axis
    return (q - 1.0) * min(axes)


def _segment_dist(rr, cc, a, b):
    ab = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    denom = float(ab @ ab)
    dr, dc = rr - a[0], cc - a[1]
    if denom < 1e-12:
        return np.sqrt(dr * dr + dc * dc)
    t = np.clip((dr * ab[0] + dc * ab[1]) / denom, 0.0, 1.0)
    pr = a[0] + t * ab[0]
    pc = a[1] + t * ab[1]
    return np.sqrt((rr - pr) ** 2 + (cc - pc) ** 2)


def synthesize_example(spec, index):
    """Render one figure; returns (AnnotatedExample, pose params)."""
    h, w = spec.height, spec.width
    base_seed = np.random.SeedSequence([spec.seed, index])
    rng = np.random.default_rng(base_seed)
    margin = 0.05
    params = None
    pts = None
    for _ in range(LOCATION_RETRIES):
        cand = _sample_pose(rng, h, w)
        p = figure_landmarks(cand)
        if (p[:, 0] > margin * h).all() and (p[:, 0] < (1 - margin) * h).all() \
                and (p[:, 1] > margin * w).all() and (p[:, 1] < (1 - margin) * w).all():
            params, pts = cand, p
            break
    if params is None:
        raise SamplingError(f"could not place figure {index} inside the domain")

    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    bg = _smooth_field(rng, h, w, sigma=6.0, channels=3)
    img = 0.25 + 0.5 * np.moveaxis(bg, 0, -1)
    fine = _smooth_field(rng, h, w, sigma=1.5, channels=1)[0]
    img += 0.10 * (fine - 0.5)[:, :, None]

    tex = 1.0 + 0.5 * (_smooth_field(rng, h, w, sigma=2.5, channels=1)[0] - 0.5)

    def paint(mask, color):
        nonlocal img
        layer = np.asarray(color)[None, None, :] * tex[:, :, None]
        m = mask[:, :, None]
        img = img * (1 - m) + layer * m

    torso_color = rng.uniform(0.25, 0.95, size=3)
    head_color = rng.uniform(0.25, 0.95, size=3)
    limb_color = rng.uniform(0.25, 0.95, size=3)

    head, sh_l, sh_r, el_l, el_r, wr_l, wr_r = pts
    paint(_soft_mask(_ellipse_dist(rr, cc, params["center"],
                                   params["torso_axes"], params["torso_angle"]),
                     0.0), torso_color)
    paint(_soft_mask(np.sqrt((rr - head[0]) ** 2 + (cc - head[1]) ** 2),
                     params["head_radius"]), head_color)
    lw = params["limb_width"]
    for a, b in ((sh_l, el_l), (el_l, wr_l), (sh_r, el_r), (el_r, wr_r)):
        paint(_soft_mask(_segment_dist(rr, cc, a, b), lw), limb_color)

    img = np.clip(img, 0.0, 1.0)
    return AnnotatedExample(img, pts.copy()), params


def generate_synthetic(spec):
    """All three splits; split membership is a pure function of (seed, index)."""
    if spec.source != "synthetic":
        raise ConfigurationError(f"generate_synthetic needs a synthetic spec, got {spec.source!r}")
    splits = {}
    offset = 0
    for name, n in (("train", spec.n_train), ("val", spec.n_val),
                    ("test", spec.n_test)):
        splits[name] = [synthesize_example(spec, offset + i)[0] for i in range(n)]
        offset += n
    return splits


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _to_uint8(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def save_dataset(splits, root, spec=None):
    """Write images + index per split, and a regeneration manifest."""
    os.makedirs(root, exist_ok=True)
    for split, examples in splits.items():
        img_dir = os.path.join(root, split)
        os.makedirs(img_dir, exist_ok=True)
        lines = []
        names = spec.landmark_names if spec is not None else SYNTH_LANDMARK_NAMES
        lines.append("# landmarks: " + " ".join(names))
        for i, ex in enumerate(examples):
            rel = f"{split}/{i:06d}.png"
            PILImage.fromarray(_to_uint8(ex.image)).save(os.path.join(root, rel))
            v = 0
            for j, vis in enumerate(ex.visibility):
                if vis:
                    v |= 1 << j
            coords = " ".join(f"{c:.17g} {r:.17g}" for r, c in ex.landmarks)
            lines.append(f"{rel} {v} {coords}")
        with open(os.path.join(root, f"index_{split}.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    if spec is not None:
        with open(os.path.join(root, "dataset_manifest.json"), "w") as fh:
            json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _parse_index(path):
    if not os.path.isfile(path):
        raise DataError(f"missing annotation index: {path}")
    names = None
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "landmarks:" in line:
                    names = tuple(line.split("landmarks:")[1].split())
                continue
            parts = line.split()
            if len(parts) < 4 or (len(parts) - 2) % 2:
                raise DataError(f"{path}:{lineno}: malformed annotation row")
            try:
                v = int(parts[1])
                vals = [float(p) for p in parts[2:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed annotation row")
            rows.append((parts[0], v, vals))
    return names, rows


def load_directory_dataset(root, layout="generic", split="train", resolution=None):
    """Load AnnotatedExamples from an index file.

    layout "cat-head-like" expects 9 annotated points and drops the two
    ear tips, exposing 7 landmarks; other layouts pass points through.
    ``resolution`` (H, W) resizes images and rescales annotations by the
    size ratio per axis.
    """
    if layout not in ("generic", "synthetic", "bbc-pose-like", "cat-head-like",
                      "celeba-mafl-like"):
        raise ConfigurationError(f"unknown layout {layout!r}")
    index = os.path.join(root, f"index_{split}.txt")
    if not os.path.isfile(index):
        fallback = os.path.join(root, "index.txt")
        if os.path.isfile(fallback):
            index = fallback
        else:
            raise DataError(f"missing annotation index: {index}")
    _, rows = _parse_index(index)
    examples = []
    for rel, v, vals in rows:
        img_path = os.path.join(root, rel)
        if not os.path.isfile(img_path):
            raise DataError(f"image listed in index but missing: {img_path}")
        pil = PILImage.open(img_path).convert("RGB")
        ow, oh = pil.size
        xy = np.array(vals, dtype=np.float64).reshape(-1, 2)
        pts = xy[:, ::-1].copy()  # file stores x y; internal order is row, col
        vis = np.array([(v >> j) & 1 for j in range(len(pts))], dtype=bool)
        if layout == "cat-head-like":
            if len(pts) != 9:
                raise DataError(
                    f"{index}: cat-head-like layout needs 9 points, got {len(pts)}")
            keep = [j for j in range(9) if j not in CAT_HEAD_DROP]
            pts = pts[keep]
            vis = vis[keep]
        if resolution is not None:
            nh, nw = resolution
            if (nh, nw) != (oh, ow):
                pil = pil.resize((nw, nh), PILImage.BILINEAR)
                pts = pts * np.array([nh / oh, nw / ow])
        img = np.asarray(pil, dtype=np.float64) / 255.0
        examples.append(AnnotatedExample(img, pts, vis))
    return examples


def load_or_generate(spec_or_root, split="train"):
    if isinstance(spec_or_root, DatasetSpec):
        return generate_synthetic(spec_or_root)[split]
    return load_directory_dataset(spec_or_root, split=split)


# ---------------------------------------------------------------------------
# paired augmentation sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugConfig:
    """Deformation and appearance ranges for paired-view sampling.

    Affine/elastic settings describe the geometric map g; the appearance
    entries describe r. Any range can be zeroed to disable that component.
    translation and elastic_magnitude are fractions of the image dims.
    """

    rotation: float = 0.0
    scale: tuple = (1.0, 1.0)
    shear: float = 0.0
    translation: float = 0.0
    elastic_magnitude: float = 0.0
    elastic_smoothness: float = 16.0
    elastic_grid: tuple = (8, 8)
    noise_sigma: float = 0.0
    intensity_scale: tuple = (1.0, 1.0)
    intensity_shift: float = 0.0
    contrast: tuple = (1.0, 1.0)
    margin: float = 0.1

    def to_dict(self):
        d = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("scale", "elastic_grid", "intensity_scale", "contrast"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def step1_default_aug():
    """Pretraining views: affine (incl. zoom/crop via scale+translation),
    elastic, and appearance jitter."""
    return AugConfig(rotation=0.35, scale=(0.9, 1.15), shear=0.08,
                     translation=0.08, elastic_magnitude=0.06,
                     noise_sigma=0.02, intensity_scale=(0.85, 1.15),
                     intensity_shift=0.08, contrast=(0.85, 1.15))


def step2_default_aug():
    """Landmark-training views: random rotation plus elastic deformation."""
    return AugConfig(rotation=0.35, elastic_magnitude=0.06)


def sample_coord_map(aug, domain, rng):
    """Draw g = affine composed with elastic, per the config ranges."""
    h, w = domain.height, domain.width
    center = (h / 2.0, w / 2.0)
    rot = rng.uniform(-aug.rotation, aug.rotation) if aug.rotation else 0.0
    sr = rng.uniform(*aug.scale)
    sc = rng.uniform(*aug.scale)
    shear = rng.uniform(-aug.shear, aug.shear) if aug.shear else 0.0
    t = (rng.uniform(-aug.translation, aug.translation) * h,
         rng.uniform(-aug.translation, aug.translation) * w) \
        if aug.translation else (0.0, 0.0)
    affine = geo.make_affine(rot, (sr, sc), shear, t, center=center)
    if aug.elastic_magnitude > 0:
        mag = aug.elastic_magnitude * min(h, w)
        elastic = geo.make_elastic(geo.DomainSpec(h, w, domain.channels),
                                   aug.elastic_grid, mag,
                                   aug.elastic_smoothness,
                                   seed=int(rng.integers(0, 2 ** 31)))
        return geo.compose(affine, elastic)
    return affine


def sample_appearance(aug, rng):
    """Draw r as an ordered list of appearance maps (possibly empty)."""
    maps = []
    if aug.noise_sigma > 0:
        maps.append(geo.AppearanceMap("noise", {"sigma": aug.noise_sigma},
                                      seed=int(rng.integers(0, 2 ** 31))))
    if aug.intensity_scale != (1.0, 1.0) or aug.intensity_shift:
        maps.append(geo.AppearanceMap("intensity", {
            "scale": rng.uniform(*aug.intensity_scale),
            "shift": rng.uniform(-aug.intensity_shift, aug.intensity_shift)}))
    if aug.contrast != (1.0, 1.0):
        maps.append(geo.AppearanceMap("contrast", {"factor": rng.uniform(*aug.contrast)}))
    return maps


def apply_appearance_seq(maps, img):
    for r in maps:
        img = geo.apply_appearance(r, img)
    return img


@dataclass
class PairSample:
    """One paired view with its deformation and sampled location pairs."""

    image: np.ndarray
    image_prime: np.ndarray
    coord_map: object
    appearance: list
    locations: np.ndarray        # (K, 2) in the first view
    locations_prime: np.ndarray  # (K, 2) = g(locations), all in-domain
    index: int = -1

    def records(self):
        return {"g": self.coord_map.to_dict(),
                "r": [m.to_dict() for m in self.appearance]}


def make_pair_sample(example, k, aug, seed, index=-1, coord_map=None):
    """Build one PairSample; deterministic in (example, k, aug, seed).

    Pass ``coord_map`` to pin the deformation instead of sampling it.
    """
    img = np.asarray(example.image, dtype=np.float64)
    h, w = img.shape[0], img.shape[1]
    domain = geo.DomainSpec(h, w, img.shape[2] if img.ndim == 3 else 1)
    rng = np.random.default_rng(seed)
    g = coord_map if coord_map is not None else sample_coord_map(aug, domain, rng)
    r_maps = sample_appearance(aug, rng)
    warped = geo.warp_image(g, img)
    x_prime = apply_appearance_seq(r_maps, warped)
    locs = np.zeros((k, 2))
    locs_p = np.zeros((k, 2))
    lo = (aug.margin * h, aug.margin * w)
    hi = ((1 - aug.margin) * h, (1 - aug.margin) * w)
    for i in range(k):
        for attempt in range(LOCATION_RETRIES + 1):
            if attempt == LOCATION_RETRIES:
                raise SamplingError(
                    "location sampling exhausted its retry budget; the "
                    "deformation config pushes too many points out of domain")
            lam = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])])
            out, valid = geo.transport_landmarks(g, lam[None], domain)
            if valid[0]:
                locs[i] = lam
                locs_p[i] = out[0]
                break
    return PairSample(img, x_prime, g, r_maps, locs, locs_p, index)


def sample_pair_batch(dataset, b, k, aug, seed):
    """Draw B paired views with K location pairs each; pure in its seed."""
    if b < 1 or k < 1:
        raise ConfigurationError(f"need B >= 1 and K >= 1, got B={b} K={k}")
    if len(dataset) == 0:
        raise ConfigurationError("empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(dataset)]))
    indices = rng.integers(0, len(dataset), size=b)
    out = []
    for slot, idx in enumerate(indices):
        item_seed = np.random.SeedSequence([seed, slot, int(idx)])
        out.append(make_pair_sample(dataset[int(idx)], k, aug,
                                    item_seed, index=int(idx)))
    return out
