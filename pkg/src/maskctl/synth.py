"""Glyph-in-region toy task and a flow-matching trainer for the toy denoiser.

Token vocabulary: ids ``0..G-1`` are glyph codes, ids ``G..G+P-1`` name the
``P`` lattice cells a region can occupy. A global prompt interleaves
``[glyph, cell, glyph, cell, ...]`` in reading order; a textual prompt is a
single glyph code.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch

from .attention import ToyDenoiser
from .errors import DivergenceDetected, FormatError, InfeasiblePacking, OutOfBounds, ValidationError
from .layout import BBox, PatchRect, build_token_layout, membership_vectors
from .masks import expansion_mask, focus_mask

GLYPH_SIZE = 4
ON, OFF = 1.0, -1.0
BACKGROUND_VALUE = OFF

# T, L, X, O; pairwise Hamming distance >= 5
GLYPHS = np.array(
    [
        [[1, 1, 1, 1], [0, 1, 1, 0], [0, 1, 1, 0], [0, 1, 1, 0]],
        [[1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0], [1, 1, 1, 1]],
        [[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]],
        [[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]],
    ],
    dtype=bool,
)

Library = Union[np.ndarray, Mapping[int, np.ndarray]]


@dataclass(frozen=True)
class GlyphSpec:
    glyph: int
    rect: PatchRect

    def __post_init__(self):
        if self.rect.height < GLYPH_SIZE or self.rect.width < GLYPH_SIZE:
            raise ValidationError(f"rect {self.rect} smaller than a glyph")


@dataclass
class Sample:
    x0: torch.Tensor  # (1, h, w)
    global_tokens: list[int]
    textual_tokens: list[list[int]]
    specs: list[GlyphSpec]

    @property
    def n(self) -> int:
        return len(self.specs)

    def boxes(self) -> list[BBox]:
        h, w = self.x0.shape[-2:]
        return [s.rect.to_bbox(h, w) for s in self.specs]


def glyph_origin(rect: PatchRect) -> tuple[int, int]:
    """Top-left of the glyph window centred in ``rect``."""
    return rect.row_start + (rect.height - GLYPH_SIZE) // 2, rect.col_start + (rect.width - GLYPH_SIZE) // 2


def stamp(image: np.ndarray, glyph: int, rect: PatchRect, library: np.ndarray = GLYPHS) -> None:
    r0, c0 = glyph_origin(rect)
    image[r0:r0 + GLYPH_SIZE, c0:c0 + GLYPH_SIZE] = np.where(library[glyph], ON, OFF)


def render(specs: Sequence[GlyphSpec], h: int, w: int, library: np.ndarray = GLYPHS) -> torch.Tensor:
    image = np.full((h, w), BACKGROUND_VALUE)
    for s in specs:
        stamp(image, s.glyph, s.rect, library)
    return torch.from_numpy(image)[None]


def lattice(h: int, w: int, rect_size: int = GLYPH_SIZE) -> list[PatchRect]:
    """Row-major cells a region may occupy; index in this list is the cell code."""
    return [
        PatchRect(r, r + rect_size, c, c + rect_size)
        for r in range(0, h - rect_size + 1, rect_size)
        for c in range(0, w - rect_size + 1, rect_size)
    ]


def vocab_size(h: int, w: int, n_glyphs: int = len(GLYPHS), rect_size: int = GLYPH_SIZE) -> int:
    return n_glyphs + len(lattice(h, w, rect_size))


def make_prompts(glyphs: Sequence[int], cells: Sequence[int], n_glyphs: int = len(GLYPHS)) -> tuple[list[int], list[list[int]]]:
    global_tokens = []
    for g, c in zip(glyphs, cells):
        global_tokens += [int(g), n_glyphs + int(c)]
    return global_tokens, [[int(g)] for g in glyphs]


def make_sample(glyphs: Sequence[int], cells: Sequence[int], h: int, w: int, rect_size: int = GLYPH_SIZE, library: np.ndarray = GLYPHS) -> Sample:
    order = np.argsort(cells, kind="stable")
    glyphs = [int(glyphs[i]) for i in order]
    cells = [int(cells[i]) for i in order]
    grid = lattice(h, w, rect_size)
    specs = [GlyphSpec(g, grid[c]) for g, c in zip(glyphs, cells)]
    global_tokens, textual = make_prompts(glyphs, cells, len(library))
    return Sample(render(specs, h, w, library), global_tokens, textual, specs)


def gen_dataset(
    n_samples: int,
    max_regions: int,
    grid: tuple[int, int] = (16, 16),
    seed: int = 0,
    min_regions: int = 1,
    rect_size: int = GLYPH_SIZE,
    library: np.ndarray = GLYPHS,
) -> list[Sample]:
    h, w = grid
    if rect_size < GLYPH_SIZE:
        raise InfeasiblePacking(f"rect_size {rect_size} below glyph size {GLYPH_SIZE}")
    cells = lattice(h, w, rect_size)
    if not 1 <= min_regions <= max_regions or max_regions > len(cells):
        raise InfeasiblePacking(f"cannot place {min_regions}..{max_regions} disjoint {rect_size}x{rect_size} regions on {h}x{w}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        n = int(rng.integers(min_regions, max_regions + 1))
        chosen = rng.choice(len(cells), size=n, replace=False)
        glyphs = rng.integers(0, len(library), size=n)
        out.append(make_sample(glyphs, chosen, h, w, rect_size, library))
    return out


# -- template matcher ---------------------------------------------------------


def _library_items(library: Library) -> list[tuple[int, np.ndarray]]:
    if isinstance(library, Mapping):
        return sorted((int(k), np.asarray(v, dtype=bool)) for k, v in library.items())
    return [(i, np.asarray(p, dtype=bool)) for i, p in enumerate(library)]


def match_glyph(window: np.ndarray, library: Library = GLYPHS) -> int:
    """Nearest template by Hamming distance after thresholding at 0; ties go to the lowest id."""
    bits = np.asarray(window) > 0
    best = min((int(np.count_nonzero(bits != p)), gid) for gid, p in _library_items(library))
    return best[1]


def decode_glyphs(image: torch.Tensor, specs: Sequence[GlyphSpec], library: Library = GLYPHS) -> list[int]:
    arr = image.detach().cpu().numpy()[0]
    out = []
    for s in specs:
        if not s.rect.fits(*arr.shape):
            raise OutOfBounds(f"{s.rect} outside {arr.shape}")
        r0, c0 = glyph_origin(s.rect)
        out.append(match_glyph(arr[r0:r0 + GLYPH_SIZE, c0:c0 + GLYPH_SIZE], library))
    return out


def region_accuracy(image: torch.Tensor, specs: Sequence[GlyphSpec], library: Library = GLYPHS) -> float:
    if not specs:
        return 1.0
    got = decode_glyphs(image, specs, library)
    return sum(g == s.glyph for g, s in zip(got, specs)) / len(specs)


@torch.no_grad()
def early_region_report(model: ToyDenoiser, z: torch.Tensor, t: float, specs: Sequence[GlyphSpec], textual_prompts: Sequence[Sequence[int]]) -> list[dict]:
    """Which glyph each region is heading towards at time ``t``.

    Each region crop of ``z`` is run alone on its own prompt (local positions),
    the clean image is estimated as ``crop - t * v`` and decoded. A region
    whose estimate decodes to the wrong glyph, or sits close to another
    template, has not formed its glyph yet; the global stage may still rescue
    or lose it.
    """
    items = _library_items(GLYPHS)
    out = []
    for spec, prompt in zip(specs, textual_prompts):
        r = spec.rect
        crop = z[:, r.row_start:r.row_end, r.col_start:r.col_end]
        pooled = model.prompt_pooled(prompt)[None]
        v = model(crop[None], model.embed_prompts([prompt])[None], torch.tensor([t], dtype=model.dtype), pooled)[0]
        est = (crop - t * v).cpu().numpy()[0]
        r0, c0 = glyph_origin(r)
        r0 -= r.row_start
        c0 -= r.col_start
        bits = est[r0:r0 + GLYPH_SIZE, c0:c0 + GLYPH_SIZE] > 0
        dists = sorted((int(np.count_nonzero(bits != pat)), gid) for gid, pat in items)
        out.append({"expected": spec.glyph, "decoded": dists[0][1], "margin": dists[1][0] - dists[0][0]})
    return out


# -- training -----------------------------------------------------------------


def flow_matching_loss(
    model: ToyDenoiser,
    x0: torch.Tensor,
    prompts: Sequence[Sequence[Sequence[int]]],
    t: torch.Tensor,
    eps: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean squared error between predicted velocity and ``eps - x0``.

    ``x0``/``eps`` are ``(B, c, h, w)``, ``t`` is ``(B,)``; ``prompts[b]`` is
    the list of prompts conditioning sample ``b`` (equal lengths across the
    batch) and the pooled vector is the mean over that list. ``mask`` is an
    optional ``(B, N, N)`` stack of per-sample attention masks.
    """
    tt = t[:, None, None, None]
    x_t = (1 - tt) * x0 + tt * eps
    txt = torch.stack([model.embed_prompts(p) for p in prompts])
    pooled = torch.stack([torch.stack([model.prompt_pooled(q) for q in p]).mean(0) for p in prompts])
    v = model(x_t, txt, t, pooled, None if mask is None else mask[:, None])
    return ((v - (eps - x0)) ** 2).mean()


def _global_batch(samples: Sequence[Sample]):
    return torch.stack([s.x0 for s in samples]), [[s.global_tokens] for s in samples]


def _crop_batch(samples: Sequence[Sample], rng: np.random.Generator):
    """One random region per sample, cropped, with its own prompt."""
    xs, prompts = [], []
    for s in samples:
        i = int(rng.integers(s.n))
        r = s.specs[i].rect
        xs.append(s.x0[:, r.row_start:r.row_end, r.col_start:r.col_end])
        prompts.append([s.textual_tokens[i]])
    return torch.stack(xs), prompts


def _masked_batch(samples: Sequence[Sample], rng: np.random.Generator, cache: dict):
    """Full images with all n+1 prompts under a focus or expansion mask each."""
    masks = []
    for s in samples:
        kind = int(rng.integers(2))
        key = (id(s), kind)
        if key not in cache:
            h, w = s.x0.shape[-2:]
            layout = build_token_layout([1] * s.n + [len(s.global_tokens)], s.boxes(), h, w)
            mv = membership_vectors(layout)
            cache[key] = torch.from_numpy(np.array((focus_mask(mv) if kind == 0 else expansion_mask(mv)).bits))
        masks.append(cache[key])
    prompts = [[*s.textual_tokens, s.global_tokens] for s in samples]
    return torch.stack([s.x0 for s in samples]), prompts, torch.stack(masks)


def train_toy(
    model: ToyDenoiser,
    dataset: Sequence[Sample],
    steps: int,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 8,
    masked_batch_size: Optional[int] = None,
    crop_batch_size: Optional[int] = None,
    log_every: int = 0,
    max_grad_norm: Optional[float] = None,
) -> tuple[ToyDenoiser, list[float]]:
    """Adam on a three-part objective, one term per way the sampler queries the model.

    * ``batch_size`` full images with their global prompt, unmasked (global
      denoising and the baseline);
    * ``masked_batch_size`` full images conditioned on all n+1 prompts under
      the focus or expansion mask (the masked stages); defaults to
      ``batch_size``;
    * ``crop_batch_size`` region crops at local positions from (0, 0) with
      their own prompt (localized initialization); defaults to twice
      ``batch_size``.

    Each step draws one region count so prompt lengths in a batch agree.
    Mutates and returns ``model``.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if not dataset:
        raise ValidationError("empty dataset")
    masked_batch_size = batch_size if masked_batch_size is None else masked_batch_size
    crop_batch_size = 2 * batch_size if crop_batch_size is None else crop_batch_size
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    buckets: dict[int, list[Sample]] = {}
    for s in dataset:
        buckets.setdefault(s.n, []).append(s)
    counts = sorted(buckets)
    weights = np.array([len(buckets[k]) for k in counts], dtype=float)
    weights /= weights.sum()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    dtype = model.dtype
    mask_cache: dict = {}
    losses = []
    for step in range(steps):
        bucket = buckets[counts[int(rng.choice(len(counts), p=weights))]]
        loss = torch.zeros((), dtype=dtype)
        if batch_size:
            x0, prompts = _global_batch([bucket[i] for i in rng.integers(0, len(bucket), size=batch_size)])
            loss = loss + _loss_on(model, x0.to(dtype), prompts, gen)
        if masked_batch_size:
            x0, prompts, masks = _masked_batch([bucket[i] for i in rng.integers(0, len(bucket), size=masked_batch_size)], rng, mask_cache)
            loss = loss + _loss_on(model, x0.to(dtype), prompts, gen, masks)
        if crop_batch_size:
            x0, prompts = _crop_batch([dataset[i] for i in rng.integers(0, len(dataset), size=crop_batch_size)], rng)
            loss = loss + _loss_on(model, x0.to(dtype), prompts, gen)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceDetected(f"loss {value} at step {step}")
        opt.zero_grad()
        loss.backward()
        if max_grad_norm is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), max_grad_norm)
        opt.step()
        losses.append(value)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {value:.4f}", flush=True)
    return model, losses


def _loss_on(model, x0, prompts, gen, mask=None):
    t = torch.rand(x0.shape[0], generator=gen, dtype=x0.dtype)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    return flow_matching_loss(model, x0, prompts, t, eps, mask)


# -- dataset dump -------------------------------------------------------------

DATA_MAGIC = b"MCTLDATA"
DATA_VERSION = 1


def save_dataset(samples: Sequence[Sample], path) -> None:
    """Magic, u32 version, u32 JSON length, JSON metadata, then every image
    as little-endian float64 row-major in sample order."""
    meta = {
        "samples": [
            {
                "shape": list(s.x0.shape),
                "global_tokens": s.global_tokens,
                "textual_tokens": s.textual_tokens,
                "specs": [[sp.glyph, sp.rect.row_start, sp.rect.row_end, sp.rect.col_start, sp.rect.col_end] for sp in s.specs],
            }
            for s in samples
        ]
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<II", DATA_VERSION, len(blob)))
        fh.write(blob)
        for s in samples:
            fh.write(s.x0.detach().to(torch.float64).numpy().astype("<f8").tobytes())


def load_dataset(path) -> list[Sample]:
    data = Path(path).read_bytes()
    if not data.startswith(DATA_MAGIC):
        raise FormatError(f"{path}: not a dataset dump")
    off = len(DATA_MAGIC)
    version, blob_len = struct.unpack_from("<II", data, off)
    if version != DATA_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    off += 8
    meta = json.loads(data[off: off + blob_len])
    off += blob_len
    out = []
    for m in meta["samples"]:
        count = int(np.prod(m["shape"]))
        if len(data) < off + 8 * count:
            raise FormatError(f"{path}: truncated image payload")
        x0 = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(m["shape"]).astype(np.float64)
        off += 8 * count
        specs = [GlyphSpec(g, PatchRect(a, b, c, d)) for g, a, b, c, d in m["specs"]]
        out.append(Sample(torch.from_numpy(x0), m["global_tokens"], m["textual_tokens"], specs))
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return out
