"""Stage 1: 14 independent variational autoencoders, one per parameter token.

Each VAE sees z-score-normalized tokens (statistics from the dataset's train
split), learns a Gaussian latent via the reparameterization trick, and is
supervised by reconstruction MSE plus a small beta-weighted KL term
(beta = 0 recovers the pure-MSE objective).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from promptnerf import binio
from promptnerf import tensor as T
from promptnerf.dataset import TOKEN_COUNT, ParamDataset, token_lengths
from promptnerf.nerf import NerfArch, NerfParams
from promptnerf.dataset import assemble_params, partition_params, TokenSet
from promptnerf.tensor import Tensor

MAGIC = "P2NV"
VERSION = 1

DEFAULT_HIDDEN = 256
DEFAULT_LATENT = 64


@dataclass
class VaeModel:
    """Encoder trunk (3 ReLU layers), mu/logvar heads, 3-layer decoder."""

    token_index: int
    token_len: int
    hidden: int = DEFAULT_HIDDEN
    latent: int = DEFAULT_LATENT
    params: dict[str, np.ndarray] = field(default_factory=dict)

    PARAM_KEYS = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "enc_w3", "enc_b3",
                  "mu_w", "mu_b", "lv_w", "lv_b",
                  "dec_w1", "dec_b1", "dec_w2", "dec_b2", "dec_w3", "dec_b3")

    @classmethod
    def init(cls, token_index: int, token_len: int, hidden: int, latent: int,
             seed: int) -> "VaeModel":
        rng = np.random.default_rng([seed, token_index])

        def glorot(n_in, n_out):
            bound = math.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-bound, bound, size=(n_in, n_out))

        params = {
            "enc_w1": glorot(token_len, hidden), "enc_b1": np.zeros(hidden),
            "enc_w2": glorot(hidden, hidden), "enc_b2": np.zeros(hidden),
            "enc_w3": glorot(hidden, hidden), "enc_b3": np.zeros(hidden),
            "mu_w": glorot(hidden, latent), "mu_b": np.zeros(latent),
            "lv_w": glorot(hidden, latent), "lv_b": np.zeros(latent),
            "dec_w1": glorot(latent, hidden), "dec_b1": np.zeros(hidden),
            "dec_w2": glorot(hidden, hidden), "dec_b2": np.zeros(hidden),
            "dec_w3": glorot(hidden, token_len), "dec_b3": np.zeros(token_len),
        }
        return cls(token_index, token_len, hidden, latent, params)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    @staticmethod
    def shapes(token_len: int, hidden: int, latent: int) -> dict[str, tuple]:
        return {
            "enc_w1": (token_len, hidden), "enc_b1": (hidden,),
            "enc_w2": (hidden, hidden), "enc_b2": (hidden,),
            "enc_w3": (hidden, hidden), "enc_b3": (hidden,),
            "mu_w": (hidden, latent), "mu_b": (latent,),
            "lv_w": (hidden, latent), "lv_b": (latent,),
            "dec_w1": (latent, hidden), "dec_b1": (hidden,),
            "dec_w2": (hidden, hidden), "dec_b2": (hidden,),
            "dec_w3": (hidden, token_len), "dec_b3": (token_len,),
        }


def _encode_graph(p: dict[str, Tensor], x: Tensor) -> tuple[Tensor, Tensor]:
    h = T.relu(T.add_rowvec(T.matmul(x, p["enc_w1"]), p["enc_b1"]))
    h = T.relu(T.add_rowvec(T.matmul(h, p["enc_w2"]), p["enc_b2"]))
    h = T.relu(T.add_rowvec(T.matmul(h, p["enc_w3"]), p["enc_b3"]))
    mu = T.add_rowvec(T.matmul(h, p["mu_w"]), p["mu_b"])
    logvar = T.add_rowvec(T.matmul(h, p["lv_w"]), p["lv_b"])
    return mu, logvar


def _decode_graph(p: dict[str, Tensor], z: Tensor) -> Tensor:
    h = T.relu(T.add_rowvec(T.matmul(z, p["dec_w1"]), p["dec_b1"]))
    h = T.relu(T.add_rowvec(T.matmul(h, p["dec_w2"]), p["dec_b2"]))
    return T.add_rowvec(T.matmul(h, p["dec_w3"]), p["dec_b3"])


def vae_encode(token: np.ndarray, model: VaeModel) -> tuple[np.ndarray, np.ndarray]:
    """(mu, logvar) of one normalized token; deterministic."""
    if token.shape != (model.token_len,):
        raise ValueError(f"token length {token.shape[0]} does not match model "
                         f"token {model.token_index} (expects {model.token_len})")
    mu, logvar = _encode_graph(model.tensors(), Tensor(token[None, :]))
    return mu.data[0], logvar.data[0]


def vae_sample(mu: np.ndarray, logvar: np.ndarray, seed: int) -> np.ndarray:
    """Reparameterized draw z = mu + exp(logvar / 2) * eps; logvar of -inf
    disables the noise entirely."""
    if mu.shape != logvar.shape:
        raise ValueError("mu/logvar shape mismatch")
    eps = np.random.default_rng(seed).standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eps


def vae_decode(z: np.ndarray, model: VaeModel) -> np.ndarray:
    """Decoded token in normalized units."""
    if z.shape != (model.latent,):
        raise ValueError(f"latent dim {z.shape[0]} != {model.latent}")
    return _decode_graph(model.tensors(), Tensor(z[None, :])).data[0]


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over dims, mean over rows."""
    term = T.exp(logvar) + T.square(mu) - logvar
    return T.scale(T.tmean(T.tsum(term, axis=1)) - mu.shape[1], 0.5)


@dataclass
class VaeTrainConfig:
    lr: float = 3e-4
    epochs: int = 2000
    beta: float = 1e-4
    batch_size: int = 512  # full-batch below this many train entries
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")


def train_single_vae(x: np.ndarray, token_index: int, cfg: VaeTrainConfig,
                     hidden: int = DEFAULT_HIDDEN, latent: int = DEFAULT_LATENT
                     ) -> tuple[VaeModel, list[float]]:
    """Fit one token's VAE on normalized rows x (n, token_len)."""
    model = VaeModel.init(token_index, x.shape[1], hidden, latent, cfg.seed)
    tensors = model.tensors(requires_grad=True)
    order = list(VaeModel.PARAM_KEYS)
    trainable = [tensors[k] for k in order]
    opt = T.Adam(trainable, lr=cfg.lr)
    losses = []
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, token_index, epoch])
        if n > cfg.batch_size:
            idx = rng.choice(n, size=cfg.batch_size, replace=False)
            batch = x[idx]
        else:
            batch = x
        xt = Tensor(batch)
        mu, logvar = _encode_graph(tensors, xt)
        eps = Tensor(rng.standard_normal(mu.shape))
        z = mu + T.mul(T.exp(T.scale(logvar, 0.5)), eps)
        recon = _decode_graph(tensors, z)
        loss = T.tmean(T.sum_sq(recon - xt, axis=1))
        if cfg.beta > 0.0:
            loss = loss + T.scale(kl_divergence(mu, logvar), cfg.beta)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise RuntimeError(f"train_vaes: non-finite loss on token {token_index} "
                               f"at epoch {epoch}")
        losses.append(loss_val)
        opt.reset_grads()
        T.backward(loss)
        opt.step()
    for k, t in tensors.items():
        model.params[k] = t.data
    return model, losses


def train_vaes(ds: ParamDataset, cfg: VaeTrainConfig,
               hidden: int = DEFAULT_HIDDEN, latent: int = DEFAULT_LATENT
               ) -> tuple[list[VaeModel], list[list[float]]]:
    """Train all 14 token VAEs on the dataset's train split."""
    train = ds.split_entries("train")
    if not train:
        raise ValueError("train split is empty")
    if not ds.norm_mean:
        ds.compute_norm_stats()
    models, curves = [], []
    for i in range(TOKEN_COUNT):
        x = np.stack([ds.normalize_token(i, e.tokens.tokens[i]) for e in train])
        model, losses = train_single_vae(x, i, cfg, hidden, latent)
        models.append(model)
        curves.append(losses)
    return models, curves


def encode_scene(params: NerfParams, models: list[VaeModel], ds: ParamDataset) -> np.ndarray:
    """Deterministic 14 x d latent code (per-token posterior means)."""
    if len(models) != TOKEN_COUNT:
        raise ValueError(f"need {TOKEN_COUNT} models, got {len(models)}")
    tokens = partition_params(params)
    rows = []
    for i, model in enumerate(models):
        mu, _ = vae_encode(ds.normalize_token(i, tokens.tokens[i]), model)
        rows.append(mu)
    return np.stack(rows)


def decode_scene(latent: np.ndarray, models: list[VaeModel], ds: ParamDataset,
                 arch: NerfArch) -> NerfParams:
    """Per-token decode + denormalize + reassemble into NerfParams."""
    if latent.shape != (TOKEN_COUNT, models[0].latent):
        raise ValueError(f"latent shape {latent.shape} != "
                         f"({TOKEN_COUNT}, {models[0].latent})")
    tokens = []
    for i, model in enumerate(models):
        tokens.append(ds.denormalize_token(i, vae_decode(latent[i], model)))
    return assemble_params(TokenSet(tokens, arch), arch)


# ---------------------------------------------------------------------------
# P2NV checkpoint format


def save_vaes(models: list[VaeModel], path) -> None:
    w = binio.Writer()
    w.magic(MAGIC, VERSION)
    w.u16(len(models))
    for m in models:
        mark = w.tell()
        w.u16(m.token_index)
        w.u32(m.token_len)
        w.u32(m.hidden)
        w.u32(m.latent)
        for k in VaeModel.PARAM_KEYS:
            w.f64_array(m.params[k])
        w.crc_since(mark)
    w.save(path)


def load_vaes(path) -> list[VaeModel]:
    r = binio.Reader.load(path)
    r.magic(MAGIC, VERSION)
    count = r.u16()
    models = []
    for _ in range(count):
        mark = r.pos
        idx, token_len, hidden, latent = r.u16(), r.u32(), r.u32(), r.u32()
        shapes = VaeModel.shapes(token_len, hidden, latent)
        params = {k: r.f64_array(int(np.prod(shapes[k])), shapes[k])
                  for k in VaeModel.PARAM_KEYS}
        r.check_crc_since(mark)
        models.append(VaeModel(idx, token_len, hidden, latent, params))
    return models


def default_models_for_arch(arch: NerfArch, hidden: int, latent: int,
                            seed: int) -> list[VaeModel]:
    return [VaeModel.init(i, n, hidden, latent, seed)
            for i, n in enumerate(token_lengths(arch))]
