"""Four-stage divide-and-conquer sampler.

Stages, in order: localized noise initialization on region crops, masked
denoising with the focus mask, masked denoising with the expansion mask, and
plain denoising on the global prompt for whatever steps remain.

Flow convention: ``x_t = (1 - t) x0 + t eps`` and the model predicts
``eps - x0``; sampling integrates from t = 1 down to t = 0.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .attention import Conditioning, ModelConfig, ToyDenoiser, denoiser_forward, forward_flops
from .errors import FormatError, NonMonotoneTime, OutOfBounds, ShapeMismatch, ValidationError, ScheduleOverflow
from .layout import PatchRect, TokenLayout, membership_vectors
from .masks import AttentionMask, expansion_mask, focus_mask

INIT, FOCUS, EXPANSION, GLOBAL = "init", "focus", "expansion", "global"
STAGES = (INIT, FOCUS, EXPANSION, GLOBAL)


@dataclass(frozen=True)
class Schedule:
    T: int
    T_init: int = 0
    T_focus: int = 0
    T_expn: int = 0
    alpha: float = 0.7
    guidance: float = 5.0

    @property
    def T_global(self) -> int:
        return self.T - (self.T_init + self.T_focus + self.T_expn)

    @property
    def timesteps(self) -> list[float]:
        return [1.0 - k / self.T for k in range(self.T + 1)]

    def stage_lengths(self) -> list[int]:
        return [self.T_init, self.T_focus, self.T_expn, self.T_global]

    def stage_bounds(self) -> dict[str, tuple[int, int]]:
        """Half-open step-index range per stage on the shared timestep grid."""
        bounds, k = {}, 0
        for name, length in zip(STAGES, self.stage_lengths()):
            bounds[name] = (k, k + length)
            k += length
        return bounds


def make_schedule(T: int, T_init: int = 0, T_focus: int = 0, T_expn: int = 0, alpha: float = 0.7, guidance: float = 5.0) -> Schedule:
    counts = (T, T_init, T_focus, T_expn)
    if any(int(c) != c or c < 0 for c in counts):
        raise ValidationError(f"step counts must be non-negative integers, got {counts}")
    if T < 1:
        raise ValidationError("T must be at least 1")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha={alpha} outside [0, 1]")
    if T_init + T_focus + T_expn > T:
        raise ScheduleOverflow(f"T_init+T_focus+T_expn = {T_init + T_focus + T_expn} exceeds T = {T}")
    return Schedule(int(T), int(T_init), int(T_focus), int(T_expn), float(alpha), float(guidance))


def euler_step(z: torch.Tensor, v: torch.Tensor, t_from: float, t_to: float) -> torch.Tensor:
    if z.shape != v.shape:
        raise ShapeMismatch(f"latent {tuple(z.shape)} vs velocity {tuple(v.shape)}")
    if not t_from > t_to:
        raise NonMonotoneTime(f"t_from={t_from} must exceed t_to={t_to}")
    return z + (t_to - t_from) * v


def _check_rect(z: torch.Tensor, r: PatchRect) -> None:
    if not r.fits(z.shape[-2], z.shape[-1]):
        raise OutOfBounds(f"{r} outside latent {tuple(z.shape)}")


def extract_region(z: torch.Tensor, r: PatchRect) -> torch.Tensor:
    _check_rect(z, r)
    return z[:, r.row_start:r.row_end, r.col_start:r.col_end].clone()


def reinsert_blend(z: torch.Tensor, r: PatchRect, patch_orig: torch.Tensor, patch_denoised: torch.Tensor, alpha: float) -> torch.Tensor:
    """Copy of ``z`` with ``alpha * patch_orig + (1 - alpha) * patch_denoised`` inside ``r``."""
    _check_rect(z, r)
    want = (z.shape[0], r.height, r.width)
    if tuple(patch_orig.shape) != want or tuple(patch_denoised.shape) != want:
        raise ShapeMismatch(f"patches {tuple(patch_orig.shape)}, {tuple(patch_denoised.shape)} vs rect {want}")
    out = z.clone()
    out[:, r.row_start:r.row_end, r.col_start:r.col_end] = alpha * patch_orig + (1 - alpha) * patch_denoised
    return out


@dataclass
class StepRecord:
    stage: str
    step: int
    t_from: float
    t_to: float
    mask: str
    flops: int


@dataclass
class StageTrace:
    steps: list[StepRecord] = field(default_factory=list)
    snapshots: dict[str, torch.Tensor] = field(default_factory=dict)

    def stage_lengths(self) -> list[int]:
        return [sum(1 for s in self.steps if s.stage == name) for name in STAGES]

    def flops_by_stage(self) -> dict[str, int]:
        return {name: sum(s.flops for s in self.steps if s.stage == name) for name in STAGES}

    @property
    def total_flops(self) -> int:
        return sum(s.flops for s in self.steps)


@dataclass
class RunResult:
    latent: torch.Tensor
    trace: StageTrace
    z_T: torch.Tensor


def _denoise(model, z, prompts, layout, mask, sched: Schedule, k0: int, k1: int, stage: str, trace: Optional[StageTrace]):
    if k1 <= k0:
        return z
    ts = sched.timesteps
    pooled = model.conditioning(ts[k0], prompts, sched.guidance).pooled
    L_T = sum(len(p) for p in prompts)
    flops = forward_flops(model.config, L_T, z.shape[1] * z.shape[2])
    for k in range(k0, k1):
        cond = Conditioning(ts[k], pooled, sched.guidance)
        v = denoiser_forward(model, z, prompts, layout, cond, mask)
        z = euler_step(z, v, ts[k], ts[k + 1])
        if trace is not None:
            trace.steps.append(StepRecord(stage, k, ts[k], ts[k + 1], mask.label if mask is not None else "none", flops))
    return z


def init_step_flops(config: ModelConfig, rects: Sequence[PatchRect], textual_prompts: Sequence[Sequence[int]]) -> int:
    """Cost of one initialization step summed over every region crop."""
    return sum(forward_flops(config, len(p), r.area) for r, p in zip(rects, textual_prompts))


def full_step_flops(config: ModelConfig, L_T: int, grid_h: int, grid_w: int) -> int:
    return forward_flops(config, L_T, grid_h * grid_w)


@torch.no_grad()
def localized_noise_init(
    model: ToyDenoiser,
    z_T: torch.Tensor,
    regions: Sequence[PatchRect],
    textual_prompts: Sequence[Sequence[int]],
    sched: Schedule,
    trace: Optional[StageTrace] = None,
) -> torch.Tensor:
    """Denoise each region crop alone on its own prompt, then blend back.

    Every crop is read from the original ``z_T`` and written to a disjoint
    rect, so the result does not depend on region order.
    """
    if len(regions) != len(textual_prompts):
        raise ShapeMismatch(f"{len(regions)} regions vs {len(textual_prompts)} prompts")
    if sched.T_init == 0:
        return z_T
    ts = sched.timesteps
    refined = []
    for r, p in zip(regions, textual_prompts):
        crop = extract_region(z_T, r)
        refined.append((r, crop, _denoise(model, crop, [p], None, None, sched, 0, sched.T_init, INIT, None)))
    out = z_T
    for r, crop, den in refined:
        out = reinsert_blend(out, r, crop, den, sched.alpha)
    if trace is not None:
        flops = init_step_flops(model.config, regions, textual_prompts)
        for k in range(sched.T_init):
            trace.steps.append(StepRecord(INIT, k, ts[k], ts[k + 1], "none", flops))
    return out


@torch.no_grad()
def sample_global(model: ToyDenoiser, z_T: torch.Tensor, global_prompt: Sequence[int], sched: Schedule, trace: Optional[StageTrace] = None) -> torch.Tensor:
    """Baseline sampler: every step unmasked on the global prompt alone."""
    return _denoise(model, z_T, [global_prompt], None, None, sched, 0, sched.T, GLOBAL, trace)


@torch.no_grad()
def dctext_sample(
    model: ToyDenoiser,
    z_T: torch.Tensor,
    layout: TokenLayout,
    textual_prompts: Sequence[Sequence[int]],
    global_prompt: Sequence[int],
    sched: Schedule,
    focus_drop: Sequence[str] = (),
    stage_masks: Optional[Mapping[str, AttentionMask]] = None,
    snapshot_stages: Sequence[str] = (),
) -> RunResult:
    """Run all four stages on a prepared initial latent.

    ``stage_masks`` may replace the focus and/or expansion mask, e.g. with the
    isolation mask for probing.
    """
    if len(textual_prompts) != layout.n:
        raise ShapeMismatch(f"{len(textual_prompts)} textual prompts for {layout.n} regions")
    bad = set(snapshot_stages) - set(STAGES)
    if bad:
        raise ValidationError(f"unknown snapshot stages {sorted(bad)}")
    mv = membership_vectors(layout)
    masks = {FOCUS: focus_mask(mv, focus_drop), EXPANSION: expansion_mask(mv)}
    masks.update(stage_masks or {})
    prompts = [*textual_prompts, global_prompt]
    bounds = sched.stage_bounds()
    trace = StageTrace()

    z = localized_noise_init(model, z_T, layout.rects, textual_prompts, sched, trace)
    if INIT in snapshot_stages:
        trace.snapshots[INIT] = z.clone()
    for stage in (FOCUS, EXPANSION):
        z = _denoise(model, z, prompts, layout, masks[stage], sched, *bounds[stage], stage, trace)
        if stage in snapshot_stages:
            trace.snapshots[stage] = z.clone()
    z = _denoise(model, z, [global_prompt], None, None, sched, *bounds[GLOBAL], GLOBAL, trace)
    if GLOBAL in snapshot_stages:
        trace.snapshots[GLOBAL] = z.clone()
    return RunResult(latent=z, trace=trace, z_T=z_T)


def sample_noise(channels: int, h: int, w: int, seed: int, dtype=torch.float64) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(channels, h, w, generator=gen, dtype=dtype)


def run_dctext(model: ToyDenoiser, config) -> RunResult:
    """Full run from a :class:`maskctl.config.RunConfig`: draws ``z_T`` from the seed."""
    layout = config.layout()
    z_T = sample_noise(config.grid.channels, config.grid.h, config.grid.w, config.seed, model.dtype)
    return dctext_sample(
        model,
        z_T,
        layout,
        [tp.tokens for tp in config.prompts.textual],
        config.prompts.global_tokens,
        config.schedule.build(),
        focus_drop=config.focus_drop,
        snapshot_stages=config.outputs.snapshot_stages,
    )


# -- latent and image files ---------------------------------------------------

LATENT_MAGIC = b"MCTLLATN"
LATENT_VERSION = 1


def latent_to_bytes(z: torch.Tensor) -> bytes:
    """Magic, u32 version, u32 c, h, w, then little-endian float64 row-major."""
    if z.ndim != 3:
        raise ShapeMismatch(f"latent must be (c, h, w), got {tuple(z.shape)}")
    arr = z.detach().cpu().to(torch.float64).contiguous().numpy()
    return LATENT_MAGIC + struct.pack("<IIII", LATENT_VERSION, *arr.shape) + arr.astype("<f8").tobytes()


def latent_from_bytes(data: bytes) -> torch.Tensor:
    if not data.startswith(LATENT_MAGIC):
        raise FormatError("not a latent dump")
    version, c, h, w = struct.unpack_from("<IIII", data, len(LATENT_MAGIC))
    if version != LATENT_VERSION:
        raise FormatError(f"unsupported latent version {version}")
    off = len(LATENT_MAGIC) + 16
    if len(data) - off != 8 * c * h * w:
        raise FormatError("latent payload size mismatch")
    arr = np.frombuffer(data, dtype="<f8", offset=off).reshape(c, h, w).astype(np.float64)
    return torch.from_numpy(arr)


def save_latent(z: torch.Tensor, path) -> None:
    Path(path).write_bytes(latent_to_bytes(z))


def load_latent(path) -> torch.Tensor:
    return latent_from_bytes(Path(path).read_bytes())


def tone_map(z: torch.Tensor) -> np.ndarray:
    """Affine min-max map of channel 0 onto uint8 [0, 255]."""
    img = z.detach().cpu().to(torch.float64).numpy()[0]
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.rint((img - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def write_pgm(z: torch.Tensor, path) -> None:
    pixels = tone_map(z)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(data[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)
