"""Tokenized NeRF-parameter populations: the 14-way partition, the stratified
train/test split, per-token normalization statistics, and the P2NF binary
dataset format."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from promptnerf import binio
from promptnerf.nerf import NerfArch, NerfParams

TOKEN_COUNT = 14

MAGIC = "P2NF"
VERSION = 1


def token_lengths(arch: NerfArch) -> list[int]:
    dims = arch.layer_dims
    out = []
    for j in range(arch.n_layers):
        out.append(dims[j] * dims[j + 1])
        out.append(dims[j + 1])
    return out


@dataclass
class TokenSet:
    """Exactly 14 flat vectors, ordered [W1, b1, W2, b2, ..., W7, b7]."""

    tokens: list[np.ndarray]
    arch: NerfArch

    def __post_init__(self):
        expected = token_lengths(self.arch)
        if len(self.tokens) != TOKEN_COUNT:
            raise ValueError(f"expected {TOKEN_COUNT} tokens, got {len(self.tokens)}")
        for i, (tok, n) in enumerate(zip(self.tokens, expected)):
            if tok.shape != (n,):
                raise ValueError(f"token {i} expected {n} got {tok.shape[0]}")

    def concatenated(self) -> np.ndarray:
        return np.concatenate(self.tokens)


def partition_params(params: NerfParams) -> TokenSet:
    """Row-major flatten of each layer's weight matrix and bias, interleaved."""
    tokens = []
    for w, b in zip(params.weights, params.biases):
        tokens.append(w.reshape(-1).copy())
        tokens.append(b.copy())
    return TokenSet(tokens, params.arch)


def assemble_params(tokens: TokenSet, arch: NerfArch) -> NerfParams:
    """Exact inverse of partition_params."""
    expected = token_lengths(arch)
    for i, (tok, n) in enumerate(zip(tokens.tokens, expected)):
        if tok.shape != (n,):
            raise ValueError(f"token {i} expected {n} got {tok.shape[0]}")
    dims = arch.layer_dims
    weights, biases = [], []
    for j in range(arch.n_layers):
        weights.append(tokens.tokens[2 * j].reshape(dims[j], dims[j + 1]).copy())
        biases.append(tokens.tokens[2 * j + 1].copy())
    return NerfParams(weights, biases, arch)


@dataclass
class DatasetEntry:
    scene_id: str
    category: str
    tokens: TokenSet
    split: str = "train"  # "train" | "test"


@dataclass
class ParamDataset:
    entries: list[DatasetEntry]
    arch: NerfArch
    split_seed: int = 0
    # per-dimension normalization stats over the train split, one pair per token
    norm_mean: list[np.ndarray] = field(default_factory=list)
    norm_std: list[np.ndarray] = field(default_factory=list)

    @property
    def categories(self) -> list[str]:
        return sorted({e.category for e in self.entries})

    def split_entries(self, split: str) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == split]

    def compute_norm_stats(self, std_floor: float = 1e-6) -> None:
        """Per-dimension mean/std of each token over the train split."""
        train = self.split_entries("train")
        if not train:
            raise ValueError("cannot compute normalization stats: empty train split")
        self.norm_mean, self.norm_std = [], []
        for i in range(TOKEN_COUNT):
            stack = np.stack([e.tokens.tokens[i] for e in train])
            self.norm_mean.append(stack.mean(axis=0))
            self.norm_std.append(np.maximum(stack.std(axis=0), std_floor))

    def normalize_token(self, index: int, token: np.ndarray) -> np.ndarray:
        return (token - self.norm_mean[index]) / self.norm_std[index]

    def denormalize_token(self, index: int, token: np.ndarray) -> np.ndarray:
        return token * self.norm_std[index] + self.norm_mean[index]

    def matrix(self, split: str | None = None) -> tuple[np.ndarray, list[str]]:
        """(n, p) matrix of concatenated raw tokens plus the category labels."""
        entries = self.entries if split is None else self.split_entries(split)
        mat = np.stack([e.tokens.concatenated() for e in entries])
        return mat, [e.category for e in entries]


def split_dataset(entries: list[DatasetEntry], ratio: float, seed: int) -> ParamDataset:
    """Deterministic stratified split: per category, floor(n * (1 - ratio))
    test entries with a floor of 1 whenever the category has >= 2 entries."""
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if len(entries) < 2:
        raise ValueError("need at least 2 entries to split")
    ids = [e.scene_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("scene_ids must be unique")
    by_cat: dict[str, list[DatasetEntry]] = {}
    for e in entries:
        by_cat.setdefault(e.category, []).append(e)
    rng = np.random.default_rng(seed)
    for cat in sorted(by_cat):
        group = sorted(by_cat[cat], key=lambda e: e.scene_id)
        order = rng.permutation(len(group))
        n_test = int(len(group) * (1.0 - ratio) + 1e-9)
        if len(group) >= 2:
            n_test = max(1, n_test)
        for rank, idx in enumerate(order):
            group[idx].split = "test" if rank < n_test else "train"
    arch = entries[0].tokens.arch
    ds = ParamDataset(entries=list(entries), arch=arch, split_seed=seed)
    ds.compute_norm_stats()
    return ds


def save_dataset(ds: ParamDataset, path) -> None:
    cats = ds.categories
    lengths = token_lengths(ds.arch)
    w = binio.Writer()
    w.magic(MAGIC, VERSION)
    mark = w.tell()
    w.u16(ds.arch.pe_frequencies)
    w.u16(ds.arch.hidden)
    w.u16(ds.arch.n_layers)
    w.u16(TOKEN_COUNT)
    for n in lengths:
        w.u32(n)
    w.u32(ds.split_seed)
    w.u16(len(cats))
    for c in cats:
        w.string(c)
    has_stats = 1 if ds.norm_mean else 0
    w.u8(has_stats)
    if has_stats:
        for i in range(TOKEN_COUNT):
            w.f64_array(ds.norm_mean[i])
            w.f64_array(ds.norm_std[i])
    w.u32(len(ds.entries))
    w.crc_since(mark)
    for e in ds.entries:
        emark = w.tell()
        w.string(e.scene_id)
        w.u16(cats.index(e.category))
        w.u8(0 if e.split == "train" else 1)
        for tok in e.tokens.tokens:
            w.f64_array(tok)
        w.crc_since(emark)
    w.save(path)


def load_dataset(path) -> ParamDataset:
    r = binio.Reader.load(path)
    r.magic(MAGIC, VERSION)
    mark = r.pos
    arch = NerfArch(pe_frequencies=r.u16(), hidden=r.u16(), n_layers=r.u16())
    count = r.u16()
    if count != TOKEN_COUNT:
        raise binio.FormatError(f"token count {count} != {TOKEN_COUNT}", r.pos - 2)
    expected = token_lengths(arch)
    lengths = [r.u32() for _ in range(count)]
    if lengths != expected:
        raise binio.FormatError(f"token lengths {lengths} do not match arch {expected}")
    split_seed = r.u32()
    cats = [r.string() for _ in range(r.u16())]
    norm_mean, norm_std = [], []
    if r.u8():
        for n in lengths:
            norm_mean.append(r.f64_array(n))
            norm_std.append(r.f64_array(n))
    n_entries = r.u32()
    r.check_crc_since(mark)
    entries = []
    for _ in range(n_entries):
        emark = r.pos
        scene_id = r.string()
        cat = cats[r.u16()]
        split = "test" if r.u8() else "train"
        tokens = [r.f64_array(n) for n in lengths]
        r.check_crc_since(emark)
        entries.append(DatasetEntry(scene_id, cat, TokenSet(tokens, arch), split))
    return ParamDataset(entries=entries, arch=arch, split_seed=split_seed,
                        norm_mean=norm_mean, norm_std=norm_std)
