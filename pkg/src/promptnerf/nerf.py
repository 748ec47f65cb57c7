"""The simplified 7-layer NeRF MLP and its differentiable volume renderer.

The MLP maps positionally-encoded 3D points to (rgb, sigma); view direction
is deliberately not an input (scenes are Lambertian and the 14-token layout
has no direction branch). Rendering uses single-pass stratified quadrature
with a white background, matching the analytic reference renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from promptnerf import tensor as T
from promptnerf.scenegen import CameraPose, camera_rays, near_far
from promptnerf.tensor import Tensor


@dataclass(frozen=True)
class NerfArch:
    pe_frequencies: int = 6
    hidden: int = 64
    n_layers: int = 7  # linear layers, fixed by the 14-token layout

    @property
    def input_dim(self) -> int:
        return 3 + 6 * self.pe_frequencies

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [self.hidden] * (self.n_layers - 1) + [4]


@dataclass
class NerfParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    arch: NerfArch

    def __post_init__(self):
        dims = self.arch.layer_dims
        if len(self.weights) != self.arch.n_layers or len(self.biases) != self.arch.n_layers:
            raise ValueError("expected exactly 7 weight and 7 bias arrays")
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[j], dims[j + 1]) or b.shape != (dims[j + 1],):
                raise ValueError(
                    f"layer {j}: shapes {w.shape}/{b.shape} do not match arch "
                    f"({dims[j]}, {dims[j + 1]})")
        if not all(np.all(np.isfinite(a)) for a in self.weights + self.biases):
            raise ValueError("parameters contain non-finite entries")

    def copy(self) -> "NerfParams":
        return NerfParams([w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.arch)

    def as_tensors(self, requires_grad: bool = False) -> tuple[list[Tensor], list[Tensor]]:
        ws = [Tensor(w, requires_grad=requires_grad) for w in self.weights]
        bs = [Tensor(b, requires_grad=requires_grad) for b in self.biases]
        return ws, bs


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("ray directions must be unit vectors")
        if not (0.0 <= self.near < self.far):
            raise ValueError(f"need 0 <= near < far, got [{self.near}, {self.far}]")


@dataclass
class TrainNerfConfig:
    iterations: int = 5000
    rays_per_step: int = 128
    lr: float = 5e-4
    n_samples: int = 32
    checkpoint_stride: int = 500
    seed: int = 0


@dataclass
class TrainReport:
    params: NerfParams
    psnr_history: list[tuple[int, float]] = field(default_factory=list)
    iterations: int = 0
    final_loss: float = float("nan")


def positional_encode(points: np.ndarray, L: int) -> np.ndarray:
    """[p, sin(2^k pi p), cos(2^k pi p)] for k = 0..L-1, per axis."""
    if L < 0:
        raise ValueError("L must be >= 0")
    points = np.asarray(points, dtype=np.float64)
    parts = [points]
    for k in range(L):
        w = (2.0**k) * math.pi
        parts.append(np.sin(w * points))
        parts.append(np.cos(w * points))
    return np.concatenate(parts, axis=1)


def shared_init(arch: NerfArch, seed: int) -> NerfParams:
    """Glorot-uniform weights, zero biases; one seed shared by every scene."""
    rng = np.random.default_rng(seed)
    dims = arch.layer_dims
    weights, biases = [], []
    for j in range(arch.n_layers):
        bound = math.sqrt(6.0 / (dims[j] + dims[j + 1]))
        weights.append(rng.uniform(-bound, bound, size=(dims[j], dims[j + 1])))
        biases.append(np.zeros(dims[j + 1]))
    return NerfParams(weights, biases, arch)


def nerf_forward(ws: list[Tensor], bs: list[Tensor], encoded: Tensor) -> tuple[Tensor, Tensor]:
    """(rgb in (0,1), sigma >= 0) for encoded points (n, input_dim)."""
    if encoded.shape[1] != ws[0].shape[0]:
        raise T.ShapeError(
            f"encoded width {encoded.shape[1]} does not match arch input {ws[0].shape[0]}")
    h = encoded
    for j in range(len(ws) - 1):
        h = T.relu(T.add_rowvec(T.matmul(h, ws[j]), bs[j]))
    out = T.add_rowvec(T.matmul(h, ws[-1]), bs[-1])
    rgb = T.sigmoid(T.slice_cols(out, 0, 3))
    sigma = T.softplus(T.slice_cols(out, 3, 4))
    return rgb, sigma


def composite(sigma: Tensor, rgb: Tensor, delta: float) -> Tensor:
    """Quadrature compositing over white: sigma (n, S), rgb (n*S, 3) -> (n, 3)."""
    n, s = sigma.shape
    sigd = T.scale(sigma, delta)
    trans = T.exp(T.scale(T.cumsum_exclusive(sigd, axis=1), -1.0))
    alpha = 1.0 - T.exp(T.scale(sigd, -1.0))
    w = T.mul(trans, alpha)
    acc = T.tsum(w, axis=1)
    channels = []
    for ch in range(3):
        c = T.reshape(T.slice_cols(rgb, ch, ch + 1), (n, s))
        val = T.tsum(T.mul(w, c), axis=1) + (1.0 - acc)
        channels.append(T.reshape(val, (n, 1)))
    return T.concat_cols(channels)


def sample_depths(n_rays: int, n_samples: int, near: float, far: float,
                  rng: np.random.Generator | None) -> tuple[np.ndarray, float]:
    """Stratified depths (n, S); midpoints when rng is None (deterministic)."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    delta = (far - near) / n_samples
    if rng is None:
        u = np.full((n_rays, n_samples), 0.5)
    else:
        u = rng.uniform(size=(n_rays, n_samples))
    t = near + (np.arange(n_samples)[None, :] + u) * delta
    return t, delta


def render_rays(params: NerfParams | tuple[list[Tensor], list[Tensor]], rays: RayBatch,
                n_samples: int, rng: np.random.Generator | None = None) -> Tensor:
    """Render a ray batch; differentiable when params are grad-enabled Tensors."""
    if isinstance(params, NerfParams):
        ws, bs = params.as_tensors(requires_grad=False)
    else:
        ws, bs = params
    n = rays.origins.shape[0]
    t, delta = sample_depths(n, n_samples, rays.near, rays.far, rng)
    pts = rays.origins[:, None, :] + t[:, :, None] * rays.directions[:, None, :]
    arch_L = (ws[0].shape[0] - 3) // 6
    encoded = Tensor(positional_encode(pts.reshape(-1, 3), arch_L))
    rgb, sigma = nerf_forward(ws, bs, encoded)
    return composite(T.reshape(sigma, (n, n_samples)), rgb, delta)


def render_image(params: NerfParams, pose: CameraPose, resolution: int,
                 n_samples: int = 32, chunk: int = 8192) -> np.ndarray:
    """Deterministic full-frame render (no gradients), (H, W, 3) in [0, 1]."""
    origins, dirs = camera_rays(pose, resolution, resolution)
    near, far = near_far(float(np.linalg.norm(pose.eye)))
    out = np.empty((origins.shape[0], 3))
    for lo in range(0, origins.shape[0], chunk):
        hi = min(lo + chunk, origins.shape[0])
        batch = RayBatch(origins[lo:hi], dirs[lo:hi], near, far)
        out[lo:hi] = render_rays(params, batch, n_samples).data
    return np.clip(out.reshape(resolution, resolution, 3), 0.0, 1.0)


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """10 log10(1 / MSE) with peak 1.0; identical images cap at 99 dB."""
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def train_nerf(views: np.ndarray, poses: list[CameraPose], init: NerfParams,
               cfg: TrainNerfConfig,
               eval_view: tuple[np.ndarray, CameraPose] | None = None) -> TrainReport:
    """Fit one scene's NeRF from the shared init by photometric MSE + Adam.

    ``views`` is (V, H, W, 3); rays from all views are pooled and sampled per
    step. Deterministic given ``cfg.seed``. PSNR checkpoints render either
    the held-out ``eval_view`` or the first training view.
    """
    if len(views) < 1 or len(views) != len(poses):
        raise ValueError("need at least one view with a matching pose")
    resolution = views.shape[1]
    near, far = near_far(float(np.linalg.norm(poses[0].eye)))
    all_origins, all_dirs, all_colors = [], [], []
    for img, pose in zip(views, poses):
        o, d = camera_rays(pose, resolution, views.shape[2])
        all_origins.append(o)
        all_dirs.append(d)
        all_colors.append(img.reshape(-1, 3))
    origins = np.concatenate(all_origins)
    dirs = np.concatenate(all_dirs)
    colors = np.concatenate(all_colors)

    params = init.copy()
    ws, bs = params.as_tensors(requires_grad=True)
    trainable = ws + bs
    opt = T.Adam(trainable, lr=cfg.lr)
    report = TrainReport(params=params)

    def checkpoint(it: int) -> None:
        if eval_view is not None:
            ref, pose = eval_view
        else:
            ref, pose = views[0], poses[0]
        rendered = render_image(params, pose, ref.shape[0], cfg.n_samples)
        report.psnr_history.append((it, psnr(rendered, ref)))

    if cfg.iterations == 0:
        checkpoint(0)
        report.params = params
        return report

    n_rays_total = origins.shape[0]
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        idx = rng.integers(0, n_rays_total, size=cfg.rays_per_step)
        batch = RayBatch(origins[idx], dirs[idx], near, far)
        opt.reset_grads()
        pred = render_rays((ws, bs), batch, cfg.n_samples, rng=rng)
        loss = T.tmean(T.sum_sq(pred - Tensor(colors[idx]), axis=1))
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise RuntimeError(
                f"train_nerf: non-finite loss at iteration {it} (lr={cfg.lr})")
        T.backward(loss)
        opt.step()
        if (it + 1) % cfg.checkpoint_stride == 0 or it + 1 == cfg.iterations:
            report.final_loss = loss_val
            checkpoint(it + 1)
    report.iterations = cfg.iterations
    return report
