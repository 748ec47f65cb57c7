"""Procedural labeled 3D scenes with analytic ground-truth renders.

Scenes are signed-distance shapes with a smoothstep-feathered density band,
so the reference renderer is an exact oracle for the volume-rendering
quadrature used everywhere else. Cameras live on a spherical Fibonacci
lattice with the elevation clamped to +/-60 degrees.
"""

from __future__ import annotations

import math
from configparser import ConfigParser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from promptnerf import binio, raymarch

CATEGORIES = raymarch.CATEGORIES  # ("sphere", "box", "torus", "cylinder", "cone", "capsule")

DEFAULT_RADIUS = 2.5
DEFAULT_FOV = 0.6
DEFAULT_SIGMA_MAX = 40.0
FEATHER = 0.02
ELEVATION_LIMIT = math.radians(60.0)
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass
class SceneSpec:
    scene_id: str
    category: str
    albedo: tuple[float, float, float]
    size: float
    jitter: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    sigma_max: float = DEFAULT_SIGMA_MAX

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if not (0.0 < self.size <= 0.8):
            raise ValueError(f"size {self.size} outside (0, 0.8]")
        if any(not (0.0 <= c <= 1.0) for c in self.albedo):
            raise ValueError(f"albedo {self.albedo} outside [0,1]")
        if np.linalg.norm(self.jitter) > 0.1 + 1e-12:
            raise ValueError(f"|jitter| = {np.linalg.norm(self.jitter):.4f} exceeds 0.1")

    @property
    def category_id(self) -> int:
        return CATEGORIES.index(self.category)


@dataclass
class CameraPose:
    eye: np.ndarray
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov: float = DEFAULT_FOV

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        forward = self.look_at - self.eye
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right = right / np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return forward, right, true_up


@dataclass
class SceneCatalog:
    specs: list[SceneSpec]
    poses: list[CameraPose]          # shared lattice, same for every scene
    views: dict[str, np.ndarray]     # scene_id -> (V, H, W, 3)
    resolution: int
    radius: float
    seed: int
    manifest_path: Path | None = None

    def category_of(self, scene_id: str) -> str:
        for s in self.specs:
            if s.scene_id == scene_id:
                return s.category
        raise KeyError(scene_id)


def density_field(spec: SceneSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Density and albedo of the scene at world points (n, 3)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    local = points - np.asarray(spec.jitter)
    sigma = raymarch.density_numpy(spec.category_id, spec.size, spec.sigma_max, FEATHER, local)
    albedo = np.broadcast_to(np.asarray(spec.albedo, dtype=np.float64), points.shape).copy()
    return sigma, albedo


def sample_cameras(count: int, radius: float = DEFAULT_RADIUS, seed: int = 0,
                   fov: float = DEFAULT_FOV) -> list[CameraPose]:
    """Fibonacci lattice on the view sphere, elevation clamped to +/-60 deg.

    The lattice is fully determined by ``count``; ``seed`` is accepted for
    interface uniformity but does not perturb the poses.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    _ = seed
    smax = math.sin(ELEVATION_LIMIT)
    poses = []
    for k in range(count):
        s = -smax + (2.0 * smax) * (k + 0.5) / count if count > 1 else 0.0
        elev = math.asin(s)
        azim = (k * GOLDEN_ANGLE) % (2.0 * math.pi)
        eye = radius * np.array([
            math.cos(elev) * math.cos(azim),
            math.cos(elev) * math.sin(azim),
            math.sin(elev),
        ])
        poses.append(CameraPose(eye=eye, fov=fov))
    return poses


def camera_rays(pose: CameraPose, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole rays for every pixel, row-major; returns (origins, unit dirs)."""
    forward, right, true_up = pose.basis()
    half = math.tan(pose.fov / 2.0)
    aspect = width / height
    j = (np.arange(width) + 0.5) / width * 2.0 - 1.0    # left -> right
    i = 1.0 - (np.arange(height) + 0.5) / height * 2.0  # top -> bottom
    u, v = np.meshgrid(j * half * aspect, i * half)
    dirs = forward[None, None, :] + u[..., None] * right[None, None, :] \
        + v[..., None] * true_up[None, None, :]
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.tile(pose.eye, (dirs.shape[0], 1))
    return origins, dirs


def near_far(radius: float) -> tuple[float, float]:
    return radius - 1.2, radius + 1.2


def render_reference(spec: SceneSpec, pose: CameraPose, resolution: int,
                     n_samples: int = 128) -> np.ndarray:
    """Ground-truth render: same quadrature as the NeRF renderer, at 4x the
    default sample density, composited over a white background."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    origins, dirs = camera_rays(pose, resolution, resolution)
    radius = float(np.linalg.norm(pose.eye))
    near, far = near_far(radius)
    colors = raymarch.render_rays_analytic(
        spec.category_id, spec.size, np.asarray(spec.jitter, dtype=np.float64),
        np.asarray(spec.albedo, dtype=np.float64), spec.sigma_max, FEATHER,
        origins, dirs, near, far, n_samples)
    return np.clip(colors.reshape(resolution, resolution, 3), 0.0, 1.0)


def _scene_rng(seed: int, category_idx: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, category_idx, index])


def make_spec(category: str, index: int, seed: int) -> SceneSpec:
    """Deterministic random spec for (category, index) under a catalog seed."""
    cat_idx = CATEGORIES.index(category)
    rng = _scene_rng(seed, cat_idx, index)
    albedo = tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3).round(6))
    size = round(float(rng.uniform(0.3, 0.8)), 6)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    jitter = tuple(float(c) for c in (direction * rng.uniform(0.0, 0.1)).round(6))
    return SceneSpec(
        scene_id=f"{category}_{index:03d}",
        category=category,
        albedo=albedo,
        size=size,
        jitter=jitter,
        seed=seed,
    )


def generate_catalog(counts: dict[str, int], views_per_scene: int = 24,
                     resolution: int = 64, seed: int = 0,
                     radius: float = DEFAULT_RADIUS,
                     out_dir: str | Path | None = None) -> SceneCatalog:
    """Build a deterministic catalog; writes manifest + images when out_dir set."""
    for cat, n in counts.items():
        if cat not in CATEGORIES:
            raise ValueError(f"unknown category {cat!r}")
        if n < 1:
            raise ValueError(f"category {cat!r} must have at least 1 scene, got {n}")
    poses = sample_cameras(views_per_scene, radius=radius, seed=seed)
    specs = []
    views = {}
    for cat in sorted(counts):
        for i in range(counts[cat]):
            spec = make_spec(cat, i, seed)
            specs.append(spec)
            stack = np.stack([render_reference(spec, p, resolution) for p in poses])
            views[spec.scene_id] = stack
    catalog = SceneCatalog(specs=specs, poses=poses, views=views,
                           resolution=resolution, radius=radius, seed=seed)
    if out_dir is not None:
        save_catalog(catalog, out_dir)
    return catalog


# ---------------------------------------------------------------------------
# persistence

IMAGE_MAGIC = "P2NI"
IMAGE_VERSION = 1


def save_view_stack(scene_id: str, stack: np.ndarray, path: Path) -> None:
    w = binio.Writer()
    w.magic(IMAGE_MAGIC, IMAGE_VERSION)
    mark = w.tell()
    w.string(scene_id)
    v, h, wd, _ = stack.shape
    w.u32(v)
    w.u32(h)
    w.u32(wd)
    w.f64_array(stack)
    w.crc_since(mark)
    w.save(path)


def load_view_stack(path: Path) -> tuple[str, np.ndarray]:
    r = binio.Reader.load(path)
    r.magic(IMAGE_MAGIC, IMAGE_VERSION)
    mark = r.pos
    scene_id = r.string()
    v, h, wd = r.u32(), r.u32(), r.u32()
    stack = r.f64_array(v * h * wd * 3, (v, h, wd, 3))
    r.check_crc_since(mark)
    return scene_id, stack


def save_catalog(catalog: SceneCatalog, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg = ConfigParser()
        cfg["catalog"] = {
            "seed": str(catalog.seed),
            "resolution": str(catalog.resolution),
            "radius": repr(catalog.radius),
            "views_per_scene": str(len(catalog.poses)),
            "fov": repr(catalog.poses[0].fov),
            "categories": ",".join(sorted({s.category for s in catalog.specs})),
        }
        for spec in catalog.specs:
            cfg[f"scene:{spec.scene_id}"] = {
                "category": spec.category,
                "albedo": ",".join(repr(c) for c in spec.albedo),
                "size": repr(spec.size),
                "jitter": ",".join(repr(c) for c in spec.jitter),
                "seed": str(spec.seed),
                "sigma_max": repr(spec.sigma_max),
                "views": f"views/{spec.scene_id}.p2ni",
            }
        (out_dir / "views").mkdir(exist_ok=True)
        manifest = out_dir / "catalog.txt"
        with open(manifest, "w", encoding="utf-8") as f:
            cfg.write(f)
        for spec in catalog.specs:
            save_view_stack(spec.scene_id, catalog.views[spec.scene_id],
                            out_dir / "views" / f"{spec.scene_id}.p2ni")
    except OSError as e:
        raise OSError(f"failed writing catalog under {out_dir}: {e}") from e
    catalog.manifest_path = manifest
    return manifest


def load_catalog(manifest: str | Path) -> SceneCatalog:
    manifest = Path(manifest)
    cfg = ConfigParser()
    with open(manifest, encoding="utf-8") as f:
        cfg.read_file(f)
    head = cfg["catalog"]
    poses = sample_cameras(int(head["views_per_scene"]), radius=float(head["radius"]),
                           seed=int(head["seed"]), fov=float(head["fov"]))
    specs = []
    views = {}
    for section in cfg.sections():
        if not section.startswith("scene:"):
            continue
        s = cfg[section]
        spec = SceneSpec(
            scene_id=section.split(":", 1)[1],
            category=s["category"],
            albedo=tuple(float(x) for x in s["albedo"].split(",")),
            size=float(s["size"]),
            jitter=tuple(float(x) for x in s["jitter"].split(",")),
            seed=int(s["seed"]),
            sigma_max=float(s["sigma_max"]),
        )
        specs.append(spec)
        scene_id, stack = load_view_stack(manifest.parent / s["views"])
        if scene_id != spec.scene_id:
            raise binio.FormatError(f"view stack {s['views']} holds {scene_id!r}")
        views[spec.scene_id] = stack
    return SceneCatalog(specs=specs, poses=poses, views=views,
                        resolution=int(head["resolution"]), radius=float(head["radius"]),
                        seed=int(head["seed"]), manifest_path=manifest)


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """8-bit P6 export for eyeballing renders."""
    h, w, _ = image.shape
    data = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
