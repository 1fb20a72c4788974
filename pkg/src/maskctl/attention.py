"""Masked joint attention and a miniature MM-DiT velocity model.

Every operation except attention is token-local, so the attention mask alone
decides which tokens can influence which.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyList, EmptyRow, FormatError, ShapeMismatch
from .layout import TokenLayout
from .masks import AttentionMask

MaskLike = Union[AttentionMask, torch.Tensor, np.ndarray, None]


def _mask_tensor(mask: MaskLike, device=None) -> Optional[torch.Tensor]:
    if mask is None:
        return None
    if isinstance(mask, AttentionMask):
        bits = mask.bits
    else:
        bits = mask
    if isinstance(bits, np.ndarray):
        bits = torch.from_numpy(np.array(bits, dtype=bool, copy=True))
    return bits.to(device=device, dtype=torch.bool)


def attention_weights(q: torch.Tensor, k: torch.Tensor, mask: MaskLike = None) -> torch.Tensor:
    """Row-stochastic weights ``softmax(q k^T / sqrt(d) + log M)``.

    Disallowed entries are filled with -inf, so they get weight exactly 0.
    """
    if q.shape[-1] != k.shape[-1] or q.shape[-2] != k.shape[-2]:
        raise ShapeMismatch(f"q {tuple(q.shape)} vs k {tuple(k.shape)}")
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    m = _mask_tensor(mask, q.device)
    if m is not None:
        if m.shape[-2:] != logits.shape[-2:]:
            raise ShapeMismatch(f"mask {tuple(m.shape)} vs {q.shape[-2]} tokens")
        if not bool(m.any(dim=-1).all()):
            raise EmptyRow("mask has a row with no allowed keys")
        logits = logits.masked_fill(~m, float("-inf"))
    return torch.softmax(logits, dim=-1)


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: MaskLike = None) -> torch.Tensor:
    """Scaled dot-product attention over the last two dims, optionally masked.

    ``q``, ``k``, ``v`` are ``(..., N, d)``; ``mask`` is ``(N, N)`` with True
    where query row may read key column, or any shape broadcasting against
    ``(..., N, N)`` (e.g. ``(B, 1, N, N)`` for one mask per batch item).
    """
    if v.shape[-2] != k.shape[-2]:
        raise ShapeMismatch(f"k {tuple(k.shape)} vs v {tuple(v.shape)}")
    return attention_weights(q, k, mask) @ v


def pool_prompt_embeddings(pooled_per_prompt: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(pooled_per_prompt) == 0:
        raise EmptyList("no prompt embeddings to pool")
    shapes = {tuple(p.shape) for p in pooled_per_prompt}
    if len(shapes) != 1:
        raise ShapeMismatch(f"pooled embeddings differ in shape: {sorted(shapes)}")
    return torch.stack(list(pooled_per_prompt)).mean(dim=0)


@dataclass(frozen=True)
class Conditioning:
    """Global conditioning: time in [0, 1] and a pooled prompt vector.

    ``guidance`` is carried for bookkeeping; the toy model ignores it.
    """

    t: float
    pooled: torch.Tensor
    guidance: float = 5.0

    def __post_init__(self):
        if not 0.0 <= float(self.t) <= 1.0:
            raise ValueError(f"t={self.t} outside [0, 1]")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    heads: int = 4
    n_double: int = 2
    n_single: int = 2
    channels: int = 1
    grid_h: int = 16
    grid_w: int = 16
    vocab: int = 32
    max_prompt_len: int = 16
    mlp_ratio: int = 4
    time_freqs: int = 16

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


def timestep_embedding(t: torch.Tensor, n_freqs: int) -> torch.Tensor:
    freqs = torch.exp(-math.log(1000.0) * torch.arange(n_freqs, dtype=t.dtype) / n_freqs)
    args = 1000.0 * t[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Modulation(nn.Module):
    def __init__(self, dim: int, n: int):
        super().__init__()
        self.n = n
        self.lin = nn.Linear(dim, n * dim)

    def forward(self, cvec):
        # (B, d) -> n tensors of shape (B, 1, d), broadcast over tokens
        return self.lin(F.silu(cvec))[:, None, :].chunk(self.n, dim=-1)


def _modulate(x, shift, scale):
    return F.layer_norm(x, x.shape[-1:]) * (1 + scale) + shift


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def split(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return tuple(y.reshape(b, n, self.heads, d // self.heads).transpose(1, 2) for y in (q, k, v))


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


class DoubleStreamBlock(nn.Module):
    """Separate text/image weights, one joint masked attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.txt_mod = Modulation(dim, 4)
        self.img_mod = Modulation(dim, 4)
        self.txt_attn = _Attention(dim, heads)
        self.img_attn = _Attention(dim, heads)
        self.txt_mlp = FeedForward(dim, mlp_ratio)
        self.img_mlp = FeedForward(dim, mlp_ratio)

    def forward(self, txt, img, cvec, mask: MaskLike = None):
        if txt.shape[-1] != img.shape[-1]:
            raise ShapeMismatch("text and image feature widths differ")
        if mask is not None and _mask_tensor(mask).shape[-1] != txt.shape[1] + img.shape[1]:
            raise ShapeMismatch(f"mask does not match {txt.shape[1]}+{img.shape[1]} tokens")
        t_sh1, t_sc1, t_sh2, t_sc2 = self.txt_mod(cvec)
        i_sh1, i_sc1, i_sh2, i_sc2 = self.img_mod(cvec)
        tq, tk, tv = self.txt_attn.split(_modulate(txt, t_sh1, t_sc1))
        iq, ik, iv = self.img_attn.split(_modulate(img, i_sh1, i_sc1))
        out = masked_attention(
            torch.cat([tq, iq], dim=2), torch.cat([tk, ik], dim=2), torch.cat([tv, iv], dim=2), mask
        )
        out = _merge(out)
        L_T = txt.shape[1]
        txt = txt + self.txt_attn.proj(out[:, :L_T])
        img = img + self.img_attn.proj(out[:, L_T:])
        txt = txt + self.txt_mlp(_modulate(txt, t_sh2, t_sc2))
        img = img + self.img_mlp(_modulate(img, i_sh2, i_sc2))
        return txt, img


class SingleStreamBlock(nn.Module):
    """One weight set over the concatenated sequence."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.mod = Modulation(dim, 4)
        self.attn = _Attention(dim, heads)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x, cvec, mask: MaskLike = None):
        if mask is not None and _mask_tensor(mask).shape[-1] != x.shape[1]:
            raise ShapeMismatch(f"mask does not match {x.shape[1]} tokens")
        sh1, sc1, sh2, sc2 = self.mod(cvec)
        q, k, v = self.attn.split(_modulate(x, sh1, sc1))
        x = x + self.attn.proj(_merge(masked_attention(q, k, v, mask)))
        return x + self.mlp(_modulate(x, sh2, sc2))


class ToyDenoiser(nn.Module):
    """Miniature MM-DiT predicting the flow velocity ``eps - x0``.

    Patch size is 1: every latent pixel is one image token.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.config = config
        c, d = config, config.dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.img_in = nn.Linear(c.channels, d)
            self.img_pos = nn.Parameter(0.5 * torch.randn(c.grid_h * c.grid_w, d))
            self.txt_emb = nn.Embedding(c.vocab, d)
            self.txt_pos = nn.Parameter(0.5 * torch.randn(c.max_prompt_len, d))
            self.time_in = nn.Sequential(nn.Linear(2 * c.time_freqs, d), nn.SiLU(), nn.Linear(d, d))
            self.pooled_in = nn.Linear(d, d)
            self.double_blocks = nn.ModuleList(DoubleStreamBlock(d, c.heads, c.mlp_ratio) for _ in range(c.n_double))
            self.single_blocks = nn.ModuleList(SingleStreamBlock(d, c.heads, c.mlp_ratio) for _ in range(c.n_single))
            self.final_mod = Modulation(d, 2)
            self.final = nn.Linear(d, c.channels)
        self.to(dtype)

    @property
    def dtype(self):
        return self.img_pos.dtype

    # -- embeddings ----------------------------------------------------------

    def embed_prompts(self, prompts: Sequence[Sequence[int]]) -> torch.Tensor:
        """Concatenated token embeddings ``(L_T, d)``; positions restart per prompt."""
        parts = []
        for ids in prompts:
            if len(ids) > self.config.max_prompt_len:
                raise ShapeMismatch(f"prompt of {len(ids)} tokens exceeds max_prompt_len")
            ids_t = torch.as_tensor(list(ids), dtype=torch.long)
            parts.append(self.txt_emb(ids_t) + self.txt_pos[: len(ids)])
        return torch.cat(parts, dim=0)

    def prompt_pooled(self, ids: Sequence[int]) -> torch.Tensor:
        return self.txt_emb(torch.as_tensor(list(ids), dtype=torch.long)).mean(dim=0)

    def conditioning(self, t: float, prompts: Sequence[Sequence[int]], guidance: float = 5.0) -> Conditioning:
        pooled = pool_prompt_embeddings([self.prompt_pooled(p) for p in prompts])
        return Conditioning(float(t), pooled, guidance)

    def cond_vector(self, t: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.dtype).reshape(-1)
        pooled = pooled.reshape(-1, self.config.dim)
        return self.time_in(timestep_embedding(t, self.config.time_freqs)) + self.pooled_in(pooled)

    def embed_image(self, z: torch.Tensor) -> torch.Tensor:
        """``(B, c, h, w)`` -> ``(B, h*w, d)`` using local positions from (0, 0)."""
        b, ch, h, w = z.shape
        if ch != self.config.channels or h > self.config.grid_h or w > self.config.grid_w:
            raise ShapeMismatch(f"latent {tuple(z.shape)} does not fit model grid")
        rows = torch.arange(h)[:, None] * self.config.grid_w + torch.arange(w)[None, :]
        tokens = z.permute(0, 2, 3, 1).reshape(b, h * w, ch)
        return self.img_in(tokens) + self.img_pos[rows.reshape(-1)]

    # -- forward -------------------------------------------------------------

    def forward_tokens(self, txt, img, cvec, mask: MaskLike = None):
        """Run every block on already-embedded tokens; returns image features."""
        m = _mask_tensor(mask)
        for blk in self.double_blocks:
            txt, img = blk(txt, img, cvec, m)
        L_T = txt.shape[1]
        x = torch.cat([txt, img], dim=1)
        for blk in self.single_blocks:
            x = blk(x, cvec, m)
        return x[:, :L_T], x[:, L_T:]

    def unembed(self, img, cvec, h: int, w: int):
        shift, scale = self.final_mod(cvec)
        out = self.final(_modulate(img, shift, scale))
        return out.reshape(img.shape[0], h, w, self.config.channels).permute(0, 3, 1, 2)

    def forward(self, z, txt_emb, t, pooled, mask: MaskLike = None):
        """Batched velocity. ``z`` is ``(B, c, h, w)``, ``txt_emb`` ``(B, L_T, d)``."""
        cvec = self.cond_vector(t, pooled)
        if cvec.shape[0] == 1 and z.shape[0] > 1:
            cvec = cvec.expand(z.shape[0], -1)
        img = self.embed_image(z)
        if mask is not None:
            n_tok = txt_emb.shape[1] + img.shape[1]
            if _mask_tensor(mask).shape[-2:] != (n_tok, n_tok):
                raise ShapeMismatch(f"mask size does not match {n_tok} tokens")
        _, img = self.forward_tokens(txt_emb, img, cvec, mask)
        return self.unembed(img, cvec, z.shape[2], z.shape[3])


def denoiser_forward(
    model: ToyDenoiser,
    z: torch.Tensor,
    prompts: Sequence[Sequence[int]],
    layout: Optional[TokenLayout],
    c: Conditioning,
    mask: Optional[AttentionMask] = None,
) -> torch.Tensor:
    """Velocity for one latent ``(c, h, w)`` given prompt ids and a layout."""
    if z.ndim != 3:
        raise ShapeMismatch(f"latent must be (c, h, w), got {tuple(z.shape)}")
    if layout is not None:
        if (z.shape[1], z.shape[2]) != (layout.grid_h, layout.grid_w):
            raise ShapeMismatch(f"latent {tuple(z.shape)} vs layout grid {layout.grid_h}x{layout.grid_w}")
        if [len(p) for p in prompts] != layout.prompt_lengths:
            raise ShapeMismatch("prompt ids do not match layout spans")
        if mask is not None and mask.size != layout.size:
            raise ShapeMismatch(f"mask size {mask.size} vs layout size {layout.size}")
    txt = model.embed_prompts(prompts)[None]
    return model(z[None], txt, torch.tensor([c.t], dtype=model.dtype), c.pooled[None], mask)[0]


# -- cost model ---------------------------------------------------------------


def forward_flops(config: ModelConfig, L_T: int, L_I: int) -> int:
    """Floating-point operations of one forward pass (2 per multiply-add)."""
    d, N, r = config.dim, L_T + L_I, config.mlp_ratio
    lin = lambda tokens, i, o: 2 * tokens * i * o  # noqa: E731
    per_block = (
        lin(N, d, 3 * d)  # qkv
        + 2 * 2 * N * N * d  # logits and weighted sum
        + lin(N, d, d)  # output projection
        + lin(N, d, r * d) + lin(N, r * d, d)  # feed-forward
    )
    modulation = lin(1, d, 8 * d) * config.n_double + lin(1, d, 4 * d) * config.n_single + lin(1, d, 2 * d)
    conditioning = lin(1, 2 * config.time_freqs, d) + lin(1, d, d) + lin(1, d, d)
    io = lin(L_I, config.channels, d) + lin(L_I, d, config.channels)
    return per_block * (config.n_double + config.n_single) + modulation + conditioning + io


# -- checkpoint ---------------------------------------------------------------

CKPT_MAGIC = b"MCTLCKPT"
CKPT_VERSION = 1


def save_checkpoint(model: ToyDenoiser, path) -> None:
    """Magic, u32 version, u32 JSON length, JSON hyperparameters, u64 count,
    then every parameter as little-endian float64 in declaration order."""
    hp = json.dumps(dataclasses.asdict(model.config), sort_keys=True).encode("utf-8")
    flat = torch.cat([p.detach().reshape(-1).to(torch.float64) for p in model.parameters()]).numpy()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hp)))
        fh.write(hp)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path, dtype=torch.float64) -> ToyDenoiser:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint")
    off = len(CKPT_MAGIC)
    version, hp_len = struct.unpack_from("<II", data, off)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    config = ModelConfig(**json.loads(data[off: off + hp_len]))
    off += hp_len
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) - off != 8 * count:
        raise FormatError(f"{path}: payload has {len(data) - off} bytes, expected {8 * count}")
    flat = torch.from_numpy(np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64))
    model = ToyDenoiser(config, dtype=torch.float64)
    params = list(model.parameters())
    if sum(p.numel() for p in params) != count:
        raise FormatError(f"{path}: parameter count mismatch")
    with torch.no_grad():
        i = 0
        for p in params:
            p.copy_(flat[i: i + p.numel()].reshape(p.shape))
            i += p.numel()
    return model.to(dtype)
