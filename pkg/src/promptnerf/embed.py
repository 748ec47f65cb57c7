"""Semantic embeddings: the deterministic built-in image embedder, ingestion
of externally computed embeddings (P2NE files), per-scene canonical
embeddings, and nearest-scene retrieval for prompts.

The built-in embedder is a fixed random projection of coarse image features,
not a trained encoder: views of one scene still map to different embeddings,
which is the property the alignment stage has to cope with. External files
(d=512, real vision-language encoder) use the same downstream machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from promptnerf import binio
from promptnerf.scenegen import SceneCatalog

MAGIC = "P2NE"
VERSION = 1

DEFAULT_DIM = 64
EXTERNAL_DIM = 512  # ViT-B/32 embedding width


@dataclass
class EmbeddingSet:
    """Per-(scene, view) unit-norm embeddings of uniform dimension."""

    dim: int
    provider: str  # "builtin" | "external"
    vectors: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    def add(self, scene_id: str, view: int, vec: np.ndarray) -> None:
        if vec.shape != (self.dim,):
            raise ValueError(f"embedding for ({scene_id}, {view}) has dim "
                             f"{vec.shape[0]}, set dim is {self.dim}")
        self.vectors[(scene_id, view)] = vec

    def views_of(self, scene_id: str) -> list[np.ndarray]:
        return [v for (sid, _), v in sorted(self.vectors.items()) if sid == scene_id]


@dataclass
class CatalogIndex:
    """Canonical (mean-of-views, renormalized) embedding per scene."""

    dim: int
    canonical: dict[str, np.ndarray]

    @property
    def scene_ids(self) -> list[str]:
        return sorted(self.canonical)


def _box_downsample(image: np.ndarray, out: int = 8) -> np.ndarray:
    h, w, _ = image.shape
    ys = np.linspace(0, h, out + 1).astype(int)
    xs = np.linspace(0, w, out + 1).astype(int)
    result = np.empty((out, out, 3))
    for i in range(out):
        for j in range(out):
            result[i, j] = image[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(0, 1))
    return result


def _projection_matrix(d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x50324E45])
    return rng.normal(size=(d, 198)) / np.sqrt(198)


def builtin_embed(image: np.ndarray, d: int = DEFAULT_DIM, seed: int = 0) -> np.ndarray:
    """Deterministic image embedding: 8x8 box downsample + per-channel mean
    and variance, projected through a fixed seeded Gaussian matrix to d,
    then L2-normalized."""
    # center intensities at 0.5 so constant images of different brightness
    # are not collinear under the (linear) projection
    small = _box_downsample(image).reshape(-1) - 0.5
    stats = np.concatenate([image.mean(axis=(0, 1)) - 0.5, image.var(axis=(0, 1))])
    feats = np.concatenate([small, stats])  # 192 + 6 = 198
    vec = _projection_matrix(d, seed) @ feats
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ValueError("degenerate embedding: zero projection")
    return vec / norm


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"cosine_sim: dims {a.shape[0]} and {b.shape[0]} differ")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def embed_catalog(catalog: SceneCatalog, d: int = DEFAULT_DIM, seed: int = 0) -> EmbeddingSet:
    """Built-in embeddings for every (scene, view) in the catalog."""
    out = EmbeddingSet(dim=d, provider="builtin")
    for spec in catalog.specs:
        for view, img in enumerate(catalog.views[spec.scene_id]):
            out.add(spec.scene_id, view, builtin_embed(img, d, seed))
    return out


def build_catalog_index(embeddings: EmbeddingSet, scene_ids: list[str]) -> CatalogIndex:
    """Canonical embedding per scene = normalized mean of its view embeddings."""
    canonical = {}
    for sid in scene_ids:
        views = embeddings.views_of(sid)
        if not views:
            raise ValueError(f"scene {sid!r} has no view embeddings")
        mean = np.mean(views, axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise ValueError(f"scene {sid!r}: view embeddings cancel to zero")
        canonical[sid] = mean / norm
    return CatalogIndex(dim=embeddings.dim, canonical=canonical)


def nearest_scene(query: np.ndarray, index: CatalogIndex, k: int = 1) -> list[tuple[str, float]]:
    """Exact top-k scenes by cosine similarity, ties broken by scene_id."""
    if not index.canonical:
        raise ValueError("nearest_scene: empty index")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    scored = [(sid, cosine_sim(q, vec)) for sid, vec in index.canonical.items()]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def descriptor_query(prompt: str, catalog: SceneCatalog, index: CatalogIndex) -> tuple[str, np.ndarray]:
    """Map a structured text prompt (category and color words) to the
    canonical embedding of the best-matching scene.

    This is a desk-scale stand-in for text understanding: free text goes
    through the external embedding path instead.
    """
    words = prompt.lower().split()
    color_names = {
        "red": (1.0, 0.1, 0.1), "green": (0.1, 1.0, 0.1), "blue": (0.1, 0.1, 1.0),
        "yellow": (1.0, 1.0, 0.1), "white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0),
        "gray": (0.5, 0.5, 0.5), "orange": (1.0, 0.6, 0.1), "purple": (0.6, 0.1, 0.8),
    }
    target_color = None
    target_cat = None
    for wd in words:
        if wd in color_names:
            target_color = np.array(color_names[wd])
        for cat in {s.category for s in catalog.specs}:
            if wd == cat or wd == cat + "s":
                target_cat = cat
    if target_cat is None and target_color is None:
        raise ValueError(
            f"prompt {prompt!r} has no recognizable category or color term "
            f"(categories: {sorted({s.category for s in catalog.specs})})")
    best, best_score = None, np.inf
    for spec in catalog.specs:
        if spec.scene_id not in index.canonical:
            continue
        if target_cat is not None and spec.category != target_cat:
            continue
        score = 0.0
        if target_color is not None:
            score = float(np.sum((np.asarray(spec.albedo) - target_color) ** 2))
        if score < best_score or (score == best_score and (best is None or spec.scene_id < best)):
            best, best_score = spec.scene_id, score
    if best is None:
        raise ValueError(f"prompt {prompt!r} matched no indexed scene "
                         f"(categories: {sorted({s.category for s in catalog.specs})})")
    return best, index.canonical[best]


# ---------------------------------------------------------------------------
# P2NE interchange format (bit-exact contract with the external exporter)
#
#   "P2NE" | u16 version=1 | u32 d | u32 count
#   count records: scene_id (u16 length + UTF-8) | u16 view | d * f32 (LE)
#   u32 CRC32 over everything after the 6-byte magic+version prefix


def save_embeddings(embeddings: EmbeddingSet, path) -> None:
    w = binio.Writer()
    w.magic(MAGIC, VERSION)
    mark = w.tell()
    w.u32(embeddings.dim)
    w.u32(len(embeddings.vectors))
    for (sid, view), vec in sorted(embeddings.vectors.items()):
        w.string(sid)
        w.u16(view)
        w.f32_array(vec)
    w.crc_since(mark)
    w.save(path)


def load_external_embeddings(path, expected_dim: int | None = None,
                             norm_tol: float = 1e-3) -> EmbeddingSet:
    """Load a P2NE file; vectors within ``norm_tol`` of unit norm are
    renormalized, anything further off is rejected."""
    r = binio.Reader.load(path)
    r.magic(MAGIC, VERSION)
    mark = r.pos
    d = r.u32()
    if expected_dim is not None and d != expected_dim:
        raise ValueError(f"embedding file has d={d}, pipeline expects d={expected_dim}")
    count = r.u32()
    out = EmbeddingSet(dim=d, provider="external")
    for _ in range(count):
        sid = r.string()
        view = r.u16()
        vec = r.f32_array(d).astype(np.float64)
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > norm_tol:
            raise ValueError(
                f"embedding ({sid!r}, view {view}) has norm {norm:.6f}, "
                f"outside 1 +/- {norm_tol}")
        out.add(sid, view, vec / norm)
    r.check_crc_since(mark)
    return out
