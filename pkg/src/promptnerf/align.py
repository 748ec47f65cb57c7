"""Stage 2: semantic alignment. An encoder-decoder transformer maps one
semantic embedding vector to the 14-row latent code produced by the token
VAEs. The decoder is autoregressive over token positions with a zero-valued
start symbol; inference runs 14 greedy steps.

Batching folds the batch dimension into matrix rows: a batch of B sequences
of length L becomes one (B*L, D) matrix, and attention is restricted to the
correct sample blocks (plus causality) through additive softmax masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from promptnerf import binio
from promptnerf import tensor as T
from promptnerf.dataset import TOKEN_COUNT, ParamDataset
from promptnerf.nerf import NerfArch, NerfParams
from promptnerf.tensor import Tensor
from promptnerf.vae import VaeModel, decode_scene

MAGIC = "P2NA"
VERSION = 1

NEG_INF = -1e9  # additive mask value; finite to keep softmax gradients clean

SEQ_LEN = TOKEN_COUNT  # decoder positions 0..13; the encoder slot is 14


@dataclass(frozen=True)
class AlignArch:
    embed_dim: int = 64
    latent_dim: int = 64
    model_dim: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 4
    ff_mult: int = 4

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by "
                             f"{self.n_heads} heads")
        for name in ("embed_dim", "latent_dim", "enc_layers", "dec_layers",
                     "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


def _attn_keys(prefix: str) -> list[str]:
    return [f"{prefix}_{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv",
                                      "wo", "bo")]


def _ln_keys(prefix: str) -> list[str]:
    return [f"{prefix}_gain", f"{prefix}_bias"]


def _ff_keys(prefix: str) -> list[str]:
    return [f"{prefix}_w1", f"{prefix}_b1", f"{prefix}_w2", f"{prefix}_b2"]


def param_keys(arch: AlignArch) -> list[str]:
    keys = ["in_w", "in_b", "tok_w", "tok_b", "out_w", "out_b"]
    for i in range(arch.enc_layers):
        keys += _ln_keys(f"enc{i}_ln1") + _attn_keys(f"enc{i}_sa")
        keys += _ln_keys(f"enc{i}_ln2") + _ff_keys(f"enc{i}_ff")
    for i in range(arch.dec_layers):
        keys += _ln_keys(f"dec{i}_ln1") + _attn_keys(f"dec{i}_sa")
        keys += _ln_keys(f"dec{i}_ln2") + _attn_keys(f"dec{i}_ca")
        keys += _ln_keys(f"dec{i}_ln3") + _ff_keys(f"dec{i}_ff")
    keys += _ln_keys("final_ln")
    return keys


def param_shapes(arch: AlignArch) -> dict[str, tuple]:
    d, e, z, f = arch.model_dim, arch.embed_dim, arch.latent_dim, arch.ff_mult
    shapes = {"in_w": (e, d), "in_b": (d,), "tok_w": (z, d), "tok_b": (d,),
              "out_w": (d, z), "out_b": (z,)}

    def attn(prefix):
        for n in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}_{n}"] = (d, d)
        for n in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}_{n}"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}_gain"] = (d,)
        shapes[f"{prefix}_bias"] = (d,)

    def ff(prefix):
        shapes[f"{prefix}_w1"] = (d, f * d)
        shapes[f"{prefix}_b1"] = (f * d,)
        shapes[f"{prefix}_w2"] = (f * d, d)
        shapes[f"{prefix}_b2"] = (d,)

    for i in range(arch.enc_layers):
        ln(f"enc{i}_ln1"); attn(f"enc{i}_sa")
        ln(f"enc{i}_ln2"); ff(f"enc{i}_ff")
    for i in range(arch.dec_layers):
        ln(f"dec{i}_ln1"); attn(f"dec{i}_sa")
        ln(f"dec{i}_ln2"); attn(f"dec{i}_ca")
        ln(f"dec{i}_ln3"); ff(f"dec{i}_ff")
    ln("final_ln")
    return shapes


@dataclass
class AlignModel:
    arch: AlignArch
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, arch: AlignArch, seed: int) -> "AlignModel":
        rng = np.random.default_rng([seed, 0x50324E41])
        params = {}
        for key, shape in param_shapes(arch).items():
            if key.endswith("_gain"):
                params[key] = np.ones(shape)
            elif len(shape) == 1:
                params[key] = np.zeros(shape)
            else:
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                params[key] = rng.uniform(-bound, bound, size=shape)
        return cls(arch, params)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad)
                for k, v in self.params.items()}


def positional_table(d: int, n_positions: int = SEQ_LEN + 1) -> np.ndarray:
    """Sinusoidal position codes for slots 0..n_positions-1."""
    pos = np.arange(n_positions)[:, None].astype(float)
    idx = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / d)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


# ---------------------------------------------------------------------------
# masks


def causal_block_mask(batch: int, length: int) -> np.ndarray:
    """Self-attention bias: rows may only see earlier rows of the same
    sample."""
    n = batch * length
    mask = np.full((n, n), NEG_INF)
    tri = np.triu(np.full((length, length), NEG_INF), k=1)
    for b in range(batch):
        s = b * length
        mask[s:s + length, s:s + length] = tri
    return mask


def cross_block_mask(batch: int, q_len: int, kv_len: int) -> np.ndarray:
    """Cross-attention bias: each query row sees only its own sample's
    memory rows."""
    mask = np.full((batch * q_len, batch * kv_len), NEG_INF)
    for b in range(batch):
        mask[b * q_len:(b + 1) * q_len, b * kv_len:(b + 1) * kv_len] = 0.0
    return mask


# ---------------------------------------------------------------------------
# forward graph


def _layernorm(p, prefix: str, x):
    normed = T.layernorm_rows(x)
    return T.add_rowvec(T.mul_rowvec(normed, p[f"{prefix}_gain"]),
                        p[f"{prefix}_bias"])


def _attention(p, prefix: str, x_q, x_kv, mask: np.ndarray, arch: AlignArch):
    q = T.add_rowvec(T.matmul(x_q, p[f"{prefix}_wq"]), p[f"{prefix}_bq"])
    k = T.add_rowvec(T.matmul(x_kv, p[f"{prefix}_wk"]), p[f"{prefix}_bk"])
    v = T.add_rowvec(T.matmul(x_kv, p[f"{prefix}_wv"]), p[f"{prefix}_bv"])
    hd = arch.head_dim
    scale = 1.0 / math.sqrt(hd)
    heads = []
    for h in range(arch.n_heads):
        qh = T.slice_cols(q, h * hd, (h + 1) * hd)
        kh = T.slice_cols(k, h * hd, (h + 1) * hd)
        vh = T.slice_cols(v, h * hd, (h + 1) * hd)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), scale)
        weights = T.softmax_rows(scores, bias=mask)
        heads.append(T.matmul(weights, vh))
    merged = T.concat_cols(heads)
    return T.add_rowvec(T.matmul(merged, p[f"{prefix}_wo"]), p[f"{prefix}_bo"])


def _feedforward(p, prefix: str, x):
    h = T.relu(T.add_rowvec(T.matmul(x, p[f"{prefix}_w1"]), p[f"{prefix}_b1"]))
    return T.add_rowvec(T.matmul(h, p[f"{prefix}_w2"]), p[f"{prefix}_b2"])


def encode_embeddings(p, emb, arch: AlignArch, batch: int):
    """Encoder over length-1 prompt sequences; emb is (batch, embed_dim)."""
    x = T.add_rowvec(T.matmul(emb, p["in_w"]), p["in_b"])
    pos = positional_table(arch.model_dim)[SEQ_LEN]
    x = x + Tensor(np.tile(pos, (batch, 1)))
    mask = causal_block_mask(batch, 1)
    for i in range(arch.enc_layers):
        normed = _layernorm(p, f"enc{i}_ln1", x)
        x = x + _attention(p, f"enc{i}_sa", normed, normed, mask, arch)
        x = x + _feedforward(p, f"enc{i}_ff", _layernorm(p, f"enc{i}_ln2", x))
    return x


def decode_tokens(p, dec_in, memory, arch: AlignArch, batch: int, length: int):
    """Decoder over (batch*length, latent_dim) teacher inputs; returns
    per-row latent predictions."""
    x = T.add_rowvec(T.matmul(dec_in, p["tok_w"]), p["tok_b"])
    pos = positional_table(arch.model_dim)[:length]
    x = x + Tensor(np.tile(pos, (batch, 1)))
    sa_mask = causal_block_mask(batch, length)
    ca_mask = cross_block_mask(batch, length, 1)
    for i in range(arch.dec_layers):
        normed = _layernorm(p, f"dec{i}_ln1", x)
        x = x + _attention(p, f"dec{i}_sa", normed, normed, sa_mask, arch)
        x = x + _attention(p, f"dec{i}_ca", _layernorm(p, f"dec{i}_ln2", x),
                           memory, ca_mask, arch)
        x = x + _feedforward(p, f"dec{i}_ff", _layernorm(p, f"dec{i}_ln3", x))
    x = _layernorm(p, "final_ln", x)
    return T.add_rowvec(T.matmul(x, p["out_w"]), p["out_b"])


def teacher_inputs(targets: np.ndarray) -> np.ndarray:
    """Shift targets (B, 14, z) right by one slot behind a zero start symbol."""
    if targets.ndim != 3 or targets.shape[1] != SEQ_LEN:
        raise ValueError(f"targets must be (B, {SEQ_LEN}, z), got {targets.shape}")
    dec_in = np.zeros_like(targets)
    dec_in[:, 1:] = targets[:, :-1]
    return dec_in.reshape(-1, targets.shape[2])


def teacher_forced_loss(p, emb: Tensor | np.ndarray, targets: np.ndarray,
                        arch: AlignArch):
    """Mean squared error of next-token latent predictions under teacher
    forcing."""
    emb_t = emb if isinstance(emb, Tensor) else Tensor(emb)
    batch = emb_t.shape[0]
    memory = encode_embeddings(p, emb_t, arch, batch)
    pred = decode_tokens(p, Tensor(teacher_inputs(targets)), memory,
                         arch, batch, SEQ_LEN)
    diff = pred - Tensor(targets.reshape(-1, targets.shape[2]))
    return T.tmean(T.square(diff))


def predict_teacher_forced(model: AlignModel, emb: np.ndarray,
                           targets: np.ndarray) -> np.ndarray:
    """Per-position predictions under teacher forcing, shape (B, 14, z)."""
    p = model.tensors()
    batch = emb.shape[0]
    memory = encode_embeddings(p, Tensor(emb), model.arch, batch)
    pred = decode_tokens(p, Tensor(teacher_inputs(targets)), memory,
                         model.arch, batch, SEQ_LEN)
    return pred.data.reshape(batch, SEQ_LEN, model.arch.latent_dim)


def infer_latent(model: AlignModel, emb: np.ndarray) -> np.ndarray:
    """Greedy autoregressive inference of the full (14, latent) code for one
    embedding vector."""
    arch = model.arch
    if emb.shape != (arch.embed_dim,):
        raise ValueError(f"embedding shape {emb.shape} != ({arch.embed_dim},)")
    p = model.tensors()
    memory = encode_embeddings(p, Tensor(emb[None, :]), arch, 1)
    generated = np.zeros((SEQ_LEN, arch.latent_dim))
    dec_in = np.zeros((1, arch.latent_dim))  # start symbol
    for step in range(SEQ_LEN):
        out = decode_tokens(p, Tensor(dec_in), memory, arch, 1, step + 1)
        generated[step] = out.data[-1]
        if step + 1 < SEQ_LEN:
            dec_in = np.concatenate([dec_in, generated[step][None, :]])
    return generated


# ---------------------------------------------------------------------------
# training


@dataclass
class AlignExample:
    """One training scene: all of its view embeddings plus the latent target."""

    scene_id: str
    view_embeddings: np.ndarray  # (n_views, embed_dim)
    latent: np.ndarray  # (14, latent_dim)

    def __post_init__(self):
        if self.view_embeddings.ndim != 2 or self.view_embeddings.shape[0] < 1:
            raise ValueError("view_embeddings must be (n_views, embed_dim)")
        if self.latent.shape[0] != SEQ_LEN:
            raise ValueError(f"latent must have {SEQ_LEN} rows")


@dataclass
class AlignTrainConfig:
    lr: float = 1e-4
    epochs: int = 500
    seed: int = 0
    view_policy: str = "random_per_epoch"  # or "fixed_view"
    fixed_view: int = 0

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.view_policy not in ("random_per_epoch", "fixed_view"):
            raise ValueError(f"unknown view policy {self.view_policy!r}")


def _epoch_embeddings(examples, cfg: AlignTrainConfig, epoch: int) -> np.ndarray:
    if cfg.view_policy == "fixed_view":
        return np.stack([ex.view_embeddings[cfg.fixed_view % len(ex.view_embeddings)]
                         for ex in examples])
    rng = np.random.default_rng([cfg.seed, epoch])
    return np.stack([ex.view_embeddings[rng.integers(len(ex.view_embeddings))]
                     for ex in examples])


def train_align(examples: list[AlignExample], arch: AlignArch,
                cfg: AlignTrainConfig) -> tuple[AlignModel, list[float]]:
    """Fit the alignment transformer on (embedding, latent-code) pairs."""
    if not examples:
        raise ValueError("no training examples")
    for ex in examples:
        if ex.view_embeddings.shape[1] != arch.embed_dim:
            raise ValueError(f"scene {ex.scene_id}: embedding dim "
                             f"{ex.view_embeddings.shape[1]} != {arch.embed_dim}")
        if ex.latent.shape[1] != arch.latent_dim:
            raise ValueError(f"scene {ex.scene_id}: latent dim "
                             f"{ex.latent.shape[1]} != {arch.latent_dim}")
    model = AlignModel.init(arch, cfg.seed)
    tensors = model.tensors(requires_grad=True)
    order = param_keys(arch)
    opt = T.Adam([tensors[k] for k in order], lr=cfg.lr)
    targets = np.stack([ex.latent for ex in examples])
    losses = []
    for epoch in range(cfg.epochs):
        emb = _epoch_embeddings(examples, cfg, epoch)
        loss = teacher_forced_loss(tensors, emb, targets, arch)
        val = loss.item()
        if not math.isfinite(val):
            raise RuntimeError(f"train_align: non-finite loss at epoch {epoch}")
        losses.append(val)
        opt.reset_grads()
        T.backward(loss)
        opt.step()
    for k, t in tensors.items():
        model.params[k] = t.data
    return model, losses


def infer_params(emb: np.ndarray, model: AlignModel, vaes: list[VaeModel],
                 ds: ParamDataset, nerf_arch: NerfArch) -> NerfParams:
    """Full single-forward-pass path: embedding -> latent code -> NeRF
    parameters."""
    return decode_scene(infer_latent(model, emb), vaes, ds, nerf_arch)


# ---------------------------------------------------------------------------
# P2NA checkpoint format


def save_align(model: AlignModel, path) -> None:
    a = model.arch
    w = binio.Writer()
    w.magic(MAGIC, VERSION)
    mark = w.tell()
    for v in (a.embed_dim, a.latent_dim, a.model_dim, a.n_heads,
              a.enc_layers, a.dec_layers, a.ff_mult):
        w.u16(v)
    for key in param_keys(a):
        w.f64_array(model.params[key])
    w.crc_since(mark)
    w.save(path)


def load_align(path) -> AlignModel:
    r = binio.Reader.load(path)
    r.magic(MAGIC, VERSION)
    mark = r.pos
    arch = AlignArch(*(r.u16() for _ in range(7)))
    shapes = param_shapes(arch)
    params = {}
    for key in param_keys(arch):
        shape = shapes[key]
        params[key] = r.f64_array(int(np.prod(shape)), shape)
    r.check_crc_since(mark)
    return AlignModel(arch, params)
