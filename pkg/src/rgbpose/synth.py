"""Procedural scenes: parametric category shapes, point-splat rendering, datasets.

Shapes are sampled on fixed per-category parameter grids, so two instances of
a category have point-to-point correspondence and the category prior is a
plain pointwise mean.

Each instance has a ``size`` parameter in [0, 1] that sets both a visible
proportion (aspect ratio) and the metric scale residual
``(s - s_b) / s_b = 0.8 * size - 0.4``.  Without such a link the scale of an
object seen in a tight crop would be unobservable.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, GenerationError
from .geometry import (CATEGORIES, SYMMETRIC, Intrinsics, Pose, from_nocs, project,
                       random_rotation, to_nocs)

FORMAT_NAME = "rgbpose-dataset"
FORMAT_VERSION = 1
MODEL_SUBSAMPLE = 512

DEFAULT_BENCHMARK_SCALES = {
    "bottle": 0.26, "bowl": 0.20, "camera": 0.18, "can": 0.15, "laptop": 0.40, "mug": 0.15,
}

FRONT_TOLERANCE_PX = 3.0
# image = TINT_WEIGHT * NOCS tint + (1 - TINT_WEIGHT) * Lambertian shade
TINT_WEIGHT = 0.85
LIGHT_DIR = np.array([0.3, -0.5, -0.8]) / np.linalg.norm([0.3, -0.5, -0.8])


@dataclass(frozen=True)
class CategorySpec:
    id: int
    name: str
    s_b: float
    symmetric: bool
    size_range: tuple[float, float] = (0.0, 1.0)
    detail_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not self.s_b > 0:
            raise ConfigError(f"{self.name}: benchmark scale must be positive, got {self.s_b}")
        for lo, hi in (self.size_range, self.detail_range):
            if not lo < hi:
                raise ConfigError(f"{self.name}: empty sampling range ({lo}, {hi})")


def default_categories(scales: dict | None = None) -> list[CategorySpec]:
    scales = {**DEFAULT_BENCHMARK_SCALES, **(scales or {})}
    return [CategorySpec(i, n, float(scales[n]), n in SYMMETRIC) for i, n in enumerate(CATEGORIES)]


# -- parametric surfaces ------------------------------------------------------------

def _lathe(profile_r, profile_y, n_phi, cap_bottom=False, cap_top=False, n_cap=8):
    """Surface of revolution about +y; returns points and outward normals."""
    phi = np.linspace(0.0, 2 * np.pi, n_phi, endpoint=False)
    r = np.asarray(profile_r, dtype=float)
    y = np.asarray(profile_y, dtype=float)
    c, s = np.cos(phi), np.sin(phi)
    pts = np.stack([np.outer(r, c), np.repeat(y[:, None], n_phi, 1), np.outer(r, s)], -1).reshape(-1, 3)
    # profile tangent gives the normal direction (dr/dy, -1 rotated)
    dr = np.gradient(r)
    dy = np.gradient(y)
    nr, ny = dy, -dr
    norm = np.hypot(nr, ny) + 1e-12
    nr, ny = nr / norm, ny / norm
    nrm = np.stack([np.outer(nr, c), np.repeat(ny[:, None], n_phi, 1), np.outer(nr, s)], -1).reshape(-1, 3)
    parts, nparts = [pts], [nrm]
    for flag, idx, sign in ((cap_bottom, 0, -1.0), (cap_top, -1, 1.0)):
        if not flag:
            continue
        rr = np.linspace(0.0, r[idx], n_cap, endpoint=False) + r[idx] / (2 * n_cap)
        cp = np.stack([np.outer(rr, c), np.full((n_cap, n_phi), y[idx]), np.outer(rr, s)], -1).reshape(-1, 3)
        parts.append(cp)
        nparts.append(np.tile([0.0, sign, 0.0], (len(cp), 1)))
    return np.concatenate(parts), np.concatenate(nparts)


def _box(center, size, n):
    """Points on the six faces of an axis-aligned box, ``n`` x ``n`` per face."""
    g = (np.arange(n) + 0.5) / n - 0.5
    a, b = np.meshgrid(g, g, indexing="ij")
    a, b = a.reshape(-1), b.reshape(-1)
    pts, nrm = [], []
    for axis in range(3):
        o1, o2 = [k for k in range(3) if k != axis]
        for sign in (-0.5, 0.5):
            p = np.zeros((n * n, 3))
            p[:, axis] = sign
            p[:, o1] = a
            p[:, o2] = b
            nn = np.zeros((n * n, 3))
            nn[:, axis] = np.sign(sign)
            pts.append(p * size + center)
            nrm.append(nn)
    return np.concatenate(pts), np.concatenate(nrm)


def _rot_x(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _raw_shape(name: str, size: float, detail: float, density: int):
    n_phi = 8 * density
    n_y = 4 * density
    n_face = 3 * density
    if name == "can":
        aspect = 1.2 + 1.6 * size  # height / radius
        y = np.linspace(0.0, aspect, n_y)
        return _lathe(np.ones(n_y), y, n_phi, cap_bottom=True, cap_top=True, n_cap=density)
    if name == "bottle":
        body_h = 1.6 + 1.8 * size
        neck_r = 0.3 + 0.25 * detail
        total = body_h + 1.4
        y = np.linspace(0.0, total, n_y)
        shoulder = np.clip((y - body_h) / 0.6, 0.0, 1.0)
        r = 1.0 - (1.0 - neck_r) * (3 * shoulder**2 - 2 * shoulder**3)
        return _lathe(r, y, n_phi, cap_bottom=True, cap_top=True, n_cap=density)
    if name == "bowl":
        depth = 0.35 + 0.5 * size
        base_r = 0.3 + 0.3 * detail
        tt = np.linspace(0.0, 1.0, n_y)
        r = base_r + (1.0 - base_r) * np.sin(tt * np.pi / 2)
        y = depth * (1.0 - np.cos(tt * np.pi / 2))
        outer = _lathe(r, y, n_phi, cap_bottom=True, n_cap=density)
        inner = _lathe(0.92 * r[1:], y[1:] + 0.06, n_phi)
        return np.concatenate([outer[0], inner[0]]), np.concatenate([outer[1], -inner[1]])
    if name == "mug":
        aspect = 0.9 + 1.1 * size
        y = np.linspace(0.0, aspect, n_y)
        body = _lathe(np.ones(n_y), y, n_phi, cap_bottom=True, n_cap=density)
        inner = _lathe(np.full(n_y - 1, 0.9), y[1:], n_phi)
        # handle: half torus on +x, in the x-y plane
        hr = (0.3 + 0.2 * detail) * aspect
        tube = 0.12
        a = np.linspace(-np.pi / 2, np.pi / 2, 4 * density)
        b = np.linspace(0.0, 2 * np.pi, 2 * density, endpoint=False)
        A, B = np.meshgrid(a, b, indexing="ij")
        cx = 1.0 + (hr + tube * np.cos(B)) * np.cos(A) - 0.05
        cy = aspect / 2 + (hr + tube * np.cos(B)) * np.sin(A)
        cz = tube * np.sin(B)
        hp = np.stack([cx, cy, cz], -1).reshape(-1, 3)
        hn = np.stack([np.cos(B) * np.cos(A), np.cos(B) * np.sin(A), np.sin(B)], -1).reshape(-1, 3)
        return (np.concatenate([body[0], inner[0], hp]),
                np.concatenate([body[1], -inner[1], hn]))
    if name == "laptop":
        width = 1.0
        depth = 0.55 + 0.4 * size
        thick = 0.05
        hinge = np.radians(70.0 + 50.0 * detail)
        base = _box(np.array([0.0, thick / 2, 0.0]), np.array([width, thick, depth]), n_face)
        scr_pts, scr_n = _box(np.zeros(3), np.array([width, thick, depth]), n_face)
        # screen lies on the base, hinged at the back edge (z = -depth/2)
        scr_pts = scr_pts + np.array([0.0, thick / 2, depth / 2])
        Rh = _rot_x(-hinge)
        scr_pts = scr_pts @ Rh.T + np.array([0.0, thick, -depth / 2])
        scr_n = scr_n @ Rh.T
        return np.concatenate([base[0], scr_pts]), np.concatenate([base[1], scr_n])
    if name == "camera":
        body_w = 1.0
        body_h = 0.55 + 0.35 * size
        body_d = 0.4
        lens_len = 0.2 + 0.35 * detail
        lens_r = 0.28 * body_h + 0.08
        body = _box(np.zeros(3), np.array([body_w, body_h, body_d]), n_face)
        y = np.linspace(0.0, lens_len, n_y // 2)
        lens_p, lens_n = _lathe(np.full(n_y // 2, lens_r), y, n_phi, cap_top=True, n_cap=density)
        # lathe axis (+y) turned to +z, lens sits on the front face
        Rl = _rot_x(np.pi / 2)
        lens_p = lens_p @ Rl.T + np.array([0.1, 0.0, body_d / 2])
        lens_n = lens_n @ Rl.T
        return np.concatenate([body[0], lens_p]), np.concatenate([body[1], lens_n])
    raise KeyError(name)


def normalize_shape(points: np.ndarray):
    """Center the bounding box at the origin and scale its diagonal to 1."""
    lo, hi = points.min(0), points.max(0)
    diag = np.linalg.norm(hi - lo)
    pts = (points - (lo + hi) / 2.0) / diag
    return pts, (hi - lo) / diag


def make_shape(category: CategorySpec, seed=None, density: int = 24,
               params: tuple[float, float] | None = None):
    """Point-sampled instance in NOCS. Returns ``(points, normals, extents, (size, detail))``.

    ``params`` overrides the seeded draw of ``(size, detail)``.
    """
    if params is None:
        rng = np.random.default_rng(seed)
        size = float(rng.uniform(*category.size_range))
        detail = float(rng.uniform(*category.detail_range))
    else:
        size, detail = map(float, params)
    pts, nrm = _raw_shape(category.name, size, detail, density)
    pts, extents = normalize_shape(pts)
    nrm = nrm / (np.linalg.norm(nrm, axis=1, keepdims=True) + 1e-12)
    return pts, nrm, extents, (size, detail)


def scale_residual(size: float) -> float:
    return 0.8 * float(size) - 0.4


def farthest_point_sample(points: np.ndarray, k: int) -> np.ndarray:
    """Deterministic FPS starting from the point farthest from the centroid."""
    n = len(points)
    if k >= n:
        return points.copy()
    idx = np.empty(k, dtype=np.intp)
    idx[0] = int(np.argmax(((points - points.mean(0)) ** 2).sum(1)))
    dist = ((points - points[idx[0]]) ** 2).sum(1)
    for i in range(1, k):
        idx[i] = int(np.argmax(dist))
        dist = np.minimum(dist, ((points - points[idx[i]]) ** 2).sum(1))
    return points[idx]


def make_prior(category: CategorySpec, instance_params, n_points: int = 1024,
               density: int = 24, min_instances: int = 8) -> np.ndarray:
    """Category mean shape, FPS-subsampled and renormalized to unit diagonal."""
    instance_params = list(instance_params)
    if len(instance_params) < min_instances:
        raise ConfigError(f"{category.name}: prior needs >= {min_instances} instances, "
                          f"got {len(instance_params)}")
    acc = None
    for p in instance_params:
        pts = make_shape(category, params=p, density=density)[0]
        acc = pts if acc is None else acc + pts
    mean_shape, _ = normalize_shape(acc / len(instance_params))
    # subsampling can drop the extreme points, so renormalize afterwards
    sub, _ = normalize_shape(farthest_point_sample(mean_shape, n_points))
    return canonical_order(sub)


def fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - y * y)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Reorder so that row j points roughly along a fixed direction j.

    Every category's prior then uses index j for a similar region of the NOCS
    cube, which lets one assignment head serve all categories.
    """
    c = points - points.mean(axis=0)
    unit = c / (np.linalg.norm(c, axis=1, keepdims=True) + 1e-12)
    dirs = fibonacci_directions(len(points))
    _, cols = linear_sum_assignment(-(dirs @ unit.T))
    return points[cols]


# -- rendering ------------------------------------------------------------------------

def render_scene(model_points: np.ndarray, pose: Pose, K: Intrinsics, H: int, W: int,
                 normals: np.ndarray | None = None):
    """Point-splat z-buffer render. Returns ``(image, mask, nocs_map)``.

    Each surface point lands on the pixel whose center is nearest to its
    projection (pixel ``(i, j)`` has center ``u = j, v = i``).  Among the
    front-surface points of a pixel the one closest to its center wins; the
    stored NOCS value is that camera-frame point mapped back into NOCS.
    Color is a fixed-light Lambertian term blended with a NOCS tint.
    """
    X = from_nocs(model_points, pose)
    if np.any(X[:, 2] <= 0):
        raise GenerationError("object is not entirely in front of the camera")
    uv = project(X, K)
    j = np.rint(uv[:, 0]).astype(np.int64)
    i = np.rint(uv[:, 1]).astype(np.int64)
    ok = (i >= 0) & (i < H) & (j >= 0) & (j < W)
    lin = i[ok] * W + j[ok]
    z = X[ok, 2]
    src = np.nonzero(ok)[0]
    zmin = np.full(H * W, np.inf)
    np.minimum.at(zmin, lin, z)
    # Front-surface candidates: within a few pixel footprints of the nearest
    # depth.  Taking the plain z-minimum would bias every slanted pixel toward
    # its camera-facing edge; the candidate closest to the pixel center is
    # unbiased and still inside the pixel cell.
    front = z <= zmin[lin] + FRONT_TOLERANCE_PX * z / min(K.fx, K.fy)
    lin, src = lin[front], src[front]
    du = uv[src, 0] - j[src]
    dv = uv[src, 1] - i[src]
    order = np.lexsort((src, du * du + dv * dv, lin))
    lin_sorted = lin[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = lin_sorted[1:] != lin_sorted[:-1]
    win = src[order[first]]
    pix = lin_sorted[first]

    nocs_map = np.full((H * W, 3), np.nan)
    nocs_map[pix] = to_nocs(X[win], pose)
    mask = np.zeros(H * W, dtype=bool)
    mask[pix] = True

    image = np.zeros((H * W, 3))
    tint = np.clip(nocs_map[pix] + 0.5, 0.0, 1.0)
    if normals is not None:
        n_cam = normals[win] @ pose.R.T
        shade = 0.35 + 0.65 * np.abs(n_cam @ LIGHT_DIR)
    else:
        shade = np.full(len(win), 0.7)
    image[pix] = TINT_WEIGHT * tint + (1.0 - TINT_WEIGHT) * shade[:, None]
    return image.reshape(H, W, 3), mask.reshape(H, W), nocs_map.reshape(H, W, 3)


# -- datasets -------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_train: int = 600
    n_test: int = 120
    image_size: int = 64
    depth_range: tuple[float, float] = (0.6, 1.2)
    lateral_fraction: float = 0.1
    base_focal: float = 500.0
    crop_margin: float = 1.2
    density: int = 24
    prior_points: int = 128
    prior_instances: int = 16
    scales: dict = field(default_factory=dict)
    noise_std: float = 0.0

    def validate(self) -> None:
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ConfigError(f"depth_range must satisfy 0 < lo <= hi, got {self.depth_range}")
        if self.prior_points < 1 or self.prior_instances < 1 or self.density < 4:
            raise ConfigError("prior_points, prior_instances must be >= 1 and density >= 4")
        if self.crop_margin < 1.0:
            raise ConfigError("crop_margin must be >= 1")

    def categories(self) -> list[CategorySpec]:
        return default_categories(self.scales)


@dataclass
class SceneSample:
    image: np.ndarray
    K: Intrinsics
    mask: np.ndarray
    nocs_map: np.ndarray
    pose: Pose
    extents: np.ndarray
    category: int
    prior: np.ndarray
    model_points: np.ndarray
    s_b: float
    shape_params: tuple[float, float] = (0.0, 0.0)
    index: int = 0
    split: str = "train"

    @property
    def category_name(self) -> str:
        return CATEGORIES[self.category]

    @property
    def delta_s(self) -> float:
        return (self.pose.s - self.s_b) / self.s_b


_SPLIT_CODE = {"train": 0, "test": 1, "prior": 2}


def _rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _SPLIT_CODE[split], int(index)])


def sample_category(index: int) -> int:
    return index % len(CATEGORIES)


def prior_params(cfg: SynthConfig, seed: int, category: CategorySpec) -> list[tuple[float, float]]:
    """Shape parameters of the training instances averaged into the prior."""
    out = []
    for k in range(cfg.prior_instances):
        rng = _rng(seed, "prior", category.id * 100003 + k)
        out.append((float(rng.uniform(*category.size_range)), float(rng.uniform(*category.detail_range))))
    return out


def build_priors(cfg: SynthConfig, seed: int) -> dict[int, np.ndarray]:
    return {c.id: make_prior(c, prior_params(cfg, seed, c), cfg.prior_points, cfg.density,
                             min_instances=min(8, cfg.prior_instances))
            for c in cfg.categories()}


def crop_intrinsics(points_cam: np.ndarray, cfg: SynthConfig) -> Intrinsics:
    """Virtual camera of a square crop around the object, resized to the image size."""
    base = Intrinsics(cfg.base_focal, cfg.base_focal, 320.0, 240.0)
    uv = project(points_cam, base)
    lo, hi = uv.min(0), uv.max(0)
    side = cfg.crop_margin * float(max(hi - lo))
    center = (lo + hi) / 2.0
    x0, y0 = center - side / 2.0
    S = cfg.image_size / side
    return Intrinsics(base.fx * S, base.fy * S, (base.cx - x0) * S - 0.5, (base.cy - y0) * S - 0.5)


def generate_sample(cfg: SynthConfig, seed: int, split: str, index: int,
                    priors: dict[int, np.ndarray] | None = None) -> SceneSample:
    """Deterministic function of ``(seed, split, index)``."""
    cats = cfg.categories()
    cat = cats[sample_category(index)]
    rng = _rng(seed, split, index)
    size = float(rng.uniform(*cat.size_range))
    detail = float(rng.uniform(*cat.detail_range))
    pts, nrm, extents, _ = make_shape(cat, density=cfg.density, params=(size, detail))
    R = random_rotation(rng)
    z = float(rng.uniform(*cfg.depth_range))
    lat = cfg.lateral_fraction * z
    t = np.array([rng.uniform(-lat, lat), rng.uniform(-lat, lat), z])
    s = cat.s_b * (1.0 + scale_residual(size))
    pose = Pose(R, t, s)
    K = crop_intrinsics(from_nocs(pts, pose), cfg)
    H = W = cfg.image_size
    image, mask, nocs_map = render_scene(pts, pose, K, H, W, normals=nrm)
    if cfg.noise_std > 0:
        image = np.clip(image + rng.normal(0.0, cfg.noise_std, image.shape), 0.0, 1.0)
    sub = np.linspace(0, len(pts) - 1, MODEL_SUBSAMPLE).astype(np.intp)
    prior = priors[cat.id] if priors is not None else np.zeros((0, 3))
    return SceneSample(image.astype(np.float32), K, mask, nocs_map.astype(np.float32), pose,
                       extents, cat.id, prior, pts[sub].astype(np.float32), cat.s_b,
                       (size, detail), index, split)


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values, dtype=np.float64).reshape(-1))


def _parse(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split()], dtype=np.float64)


class _Payload:
    def __init__(self):
        self.buf = io.BytesIO()

    def put(self, arr: np.ndarray, dtype: str) -> tuple[int, int]:
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        off = self.buf.tell()
        self.buf.write(data)
        return off, len(data)


def sample_dataset(cfg: SynthConfig, seed: int, out_dir: str | os.PathLike | None = None):
    """Generate train/test splits. Returns ``(manifest_text, payload_bytes)``.

    When ``out_dir`` is given the pair is also written as ``manifest.ini`` and
    ``payload.bin``.
    """
    cfg.validate()
    cats = cfg.categories()
    priors = build_priors(cfg, seed)
    payload = _Payload()
    man = configparser.ConfigParser(interpolation=None)
    man.optionxform = str
    man["dataset"] = {
        "format": FORMAT_NAME, "version": str(FORMAT_VERSION), "seed": str(int(seed)),
        "image_height": str(cfg.image_size), "image_width": str(cfg.image_size),
        "channels": "3", "prior_points": str(cfg.prior_points),
        "model_points": str(MODEL_SUBSAMPLE), "payload": "payload.bin",
        "n_train": str(cfg.n_train), "n_test": str(cfg.n_test),
        "depth_range": _fmt(cfg.depth_range), "lateral_fraction": repr(float(cfg.lateral_fraction)),
        "base_focal": repr(float(cfg.base_focal)), "crop_margin": repr(float(cfg.crop_margin)),
        "density": str(cfg.density), "prior_instances": str(cfg.prior_instances),
        "noise_std": repr(float(cfg.noise_std)),
    }
    for c in cats:
        off, nb = payload.put(priors[c.id], "<f4")
        man[f"category.{c.name}"] = {
            "id": str(c.id), "s_b": repr(c.s_b), "symmetric": str(c.symmetric).lower(),
            "prior_offset": str(off), "prior_bytes": str(nb),
        }
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        for i in range(count):
            smp = generate_sample(cfg, seed, split, i, priors)
            rec = {"split": split, "index": str(i), "category": CATEGORIES[smp.category],
                   "R": _fmt(smp.pose.R), "t": _fmt(smp.pose.t), "s": repr(smp.pose.s),
                   "K": _fmt(smp.K.as_array()), "extents": _fmt(smp.extents),
                   "shape_params": _fmt(smp.shape_params)}
            for key, arr, dt in (("image", smp.image, "<f4"), ("mask", smp.mask, "u1"),
                                 ("nocs", smp.nocs_map, "<f4"), ("model", smp.model_points, "<f4")):
                off, nb = payload.put(arr, dt)
                rec[f"{key}_offset"], rec[f"{key}_bytes"] = str(off), str(nb)
            man[f"sample.{split}.{i:06d}"] = rec
    text_buf = io.StringIO()
    man.write(text_buf)
    text = text_buf.getvalue()
    data = payload.buf.getvalue()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.ini").write_text(text, encoding="utf-8")
        (out / "payload.bin").write_bytes(data)
    return text, data


def synth_config_from_manifest(man: configparser.ConfigParser) -> SynthConfig:
    d = man["dataset"]
    scales = {name.split(".", 1)[1]: float(man[name]["s_b"])
              for name in man.sections() if name.startswith("category.")}
    lo, hi = _parse(d["depth_range"])
    return SynthConfig(n_train=int(d["n_train"]), n_test=int(d["n_test"]),
                       image_size=int(d["image_height"]), depth_range=(lo, hi),
                       lateral_fraction=float(d["lateral_fraction"]), base_focal=float(d["base_focal"]),
                       crop_margin=float(d["crop_margin"]), density=int(d["density"]),
                       prior_points=int(d["prior_points"]), prior_instances=int(d["prior_instances"]),
                       scales=scales, noise_std=float(d["noise_std"]))


class Dataset:
    """Reader for a ``manifest.ini`` + ``payload.bin`` pair."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        man = configparser.ConfigParser(interpolation=None)
        man.optionxform = str
        path = self.root / "manifest.ini"
        if not man.read(path, encoding="utf-8"):
            raise FileNotFoundError(f"no manifest at {path}")
        d = man["dataset"]
        if d.get("format") != FORMAT_NAME or int(d.get("version", -1)) != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported format {d.get('format')} v{d.get('version')}")
        self.manifest = man
        self.seed = int(d["seed"])
        self.H = int(d["image_height"])
        self.W = int(d["image_width"])
        self.n_model = int(d["model_points"])
        self.payload = np.memmap(self.root / d["payload"], dtype=np.uint8, mode="r") \
            if (self.root / d["payload"]).stat().st_size else np.zeros(0, dtype=np.uint8)
        self.categories: list[CategorySpec] = []
        self.priors: dict[int, np.ndarray] = {}
        for name in CATEGORIES:
            sec = man[f"category.{name}"]
            spec = CategorySpec(int(sec["id"]), name, float(sec["s_b"]), sec["symmetric"] == "true")
            self.categories.append(spec)
            self.priors[spec.id] = self._array(sec, "prior", "<f4").reshape(-1, 3).astype(np.float64)
        self._keys = {"train": [], "test": []}
        for sec in man.sections():
            if sec.startswith("sample."):
                self._keys[man[sec]["split"]].append(sec)

    @property
    def prior_points(self) -> int:
        return int(self.manifest["dataset"]["prior_points"])

    def synth_config(self) -> SynthConfig:
        return synth_config_from_manifest(self.manifest)

    def _array(self, sec, key: str, dtype: str) -> np.ndarray:
        off, nb = int(sec[f"{key}_offset"]), int(sec[f"{key}_bytes"])
        if off < 0 or off + nb > len(self.payload):
            raise ConfigError(f"payload range {off}+{nb} out of bounds for {key}")
        return np.frombuffer(self.payload[off:off + nb].tobytes(), dtype=dtype)

    def __len__(self) -> int:
        return sum(len(v) for v in self._keys.values())

    def split_size(self, split: str) -> int:
        return len(self._keys[split])

    def category_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(CATEGORIES, 0)
        for keys in self._keys.values():
            for sec in keys:
                counts[self.manifest[sec]["category"]] += 1
        return counts

    def sample(self, split: str, index: int) -> SceneSample:
        sec = self.manifest[self._keys[split][index]]
        H, W = self.H, self.W
        cat = CATEGORIES.index(sec["category"])
        fx, fy, cx, cy = _parse(sec["K"])
        return SceneSample(
            image=self._array(sec, "image", "<f4").reshape(H, W, 3),
            K=Intrinsics(fx, fy, cx, cy),
            mask=self._array(sec, "mask", "u1").reshape(H, W).astype(bool),
            nocs_map=self._array(sec, "nocs", "<f4").reshape(H, W, 3),
            pose=Pose(_parse(sec["R"]).reshape(3, 3), _parse(sec["t"]), float(sec["s"])),
            extents=_parse(sec["extents"]),
            category=cat,
            prior=self.priors[cat],
            model_points=self._array(sec, "model", "<f4").reshape(-1, 3),
            s_b=self.categories[cat].s_b,
            shape_params=tuple(_parse(sec["shape_params"])),
            index=int(sec["index"]),
            split=split,
        )

    def samples(self, split: str) -> list[SceneSample]:
        return [self.sample(split, i) for i in range(self.split_size(split))]
