"""Brute-force references used to check the vectorized code paths.

Nothing here shares code with the kernels it checks: attention is a scalar
triple loop, masks are rebuilt pair by pair from the layout's rectangles and
spans, and influence is measured by perturbing inputs and looking for exact
changes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .errors import EmptyRow, ShapeMismatch
from .layout import TokenLayout
from .masks import AttentionMask, EXPANSION, FOCUS, ISOLATION, PARTIAL_MASKS


def reference_attention(Q, K, V, M) -> np.ndarray:
    """Scalar-loop masked softmax attention in float64."""
    Q, K, V = (np.asarray(x.detach() if isinstance(x, torch.Tensor) else x, dtype=np.float64) for x in (Q, K, V))
    bits = M.bits if isinstance(M, AttentionMask) else np.asarray(M, dtype=bool)
    n, d = Q.shape
    if K.shape != (n, d) or V.shape[0] != n or bits.shape != (n, n):
        raise ShapeMismatch("reference_attention: inconsistent shapes")
    scale = 1.0 / math.sqrt(d)
    out = np.zeros((n, V.shape[1]))
    for i in range(n):
        logits = []
        for j in range(n):
            if bits[i, j]:
                s = 0.0
                for c in range(d):
                    s += Q[i, c] * K[j, c]
                logits.append((j, s * scale))
        if not logits:
            raise EmptyRow(f"row {i} has no allowed keys")
        top = max(s for _, s in logits)
        weights = [(j, math.exp(s - top)) for j, s in logits]
        total = math.fsum(w for _, w in weights)
        for c in range(V.shape[1]):
            out[i, c] = math.fsum(w * V[j, c] for j, w in weights) / total
    return out


def _token_roles(layout: TokenLayout) -> list[tuple[bool, int]]:
    """(is_text, group) per token, derived from spans and rect containment."""
    roles = []
    for g, (a, b) in enumerate(layout.prompt_spans):
        roles.extend((True, g) for _ in range(a, b))
    for row in range(layout.grid_h):
        for col in range(layout.grid_w):
            hits = [i for i, r in enumerate(layout.rects) if r.contains(row, col)]
            roles.append((False, hits[0] if hits else layout.n))
    return roles


def reference_mask(layout: TokenLayout, kind: str = ISOLATION, drop: Iterable[str] = ()) -> np.ndarray:
    """Per-pair rule evaluation of the isolation, focus and expansion masks."""
    drop = set(drop)
    n = layout.n
    roles = _token_roles(layout)
    size = len(roles)
    enabled = set() if kind == ISOLATION else set(PARTIAL_MASKS) - drop
    out = np.zeros((size, size), dtype=bool)
    for a, (a_text, a_group) in enumerate(roles):
        for b, (b_text, b_group) in enumerate(roles):
            ok = a_group == b_group
            b_background = not b_text and b_group == n
            if "pi_to_pg" in enabled and a_text and b_text and b_group == n:
                ok = True
            if "pi_to_rc" in enabled and a_text and b_background:
                ok = True
            if "pg_to_ri" in enabled and a_text and a_group == n and not b_text:
                ok = True
            if "rc_to_ri" in enabled and not a_text and a_group == n and not b_text:
                ok = True
            if kind == EXPANSION and not a_text and b_background:
                ok = True
            out[a, b] = ok
    return out


def mask_reachability(M, hops: int) -> np.ndarray:
    """``M or M^2 or ... or M^hops`` over the boolean semiring.

    Entry ``[a, b]`` says information at key ``b`` can reach query ``a`` within
    ``hops`` stacked attention layers.
    """
    if hops < 1:
        raise ValueError("hops must be >= 1")
    bits = M.bits if isinstance(M, AttentionMask) else np.asarray(M, dtype=bool)
    step = bits.astype(np.int64)
    power = bits.copy()
    reach = bits.copy()
    for _ in range(hops - 1):
        power = (power.astype(np.int64) @ step) > 0
        reach |= power
    return reach


Evaluator = Callable[[torch.Tensor, AttentionMask], torch.Tensor]


def empirical_influence(
    forward: Evaluator,
    M: AttentionMask,
    probe_magnitude: float = 1.0,
    base: Optional[torch.Tensor] = None,
    dim: int = 8,
    seed: int = 0,
) -> np.ndarray:
    """Which query outputs change, exactly, when one key token's input moves.

    ``forward(x, M)`` maps ``(N, d)`` tokens to ``(N, d)`` tokens. Influence is
    read off the update ``forward(x) - x`` so a zero residual branch shows an
    empty pattern. Entry ``[a, b]`` is True when perturbing token ``b`` changes
    the update of token ``a`` at all.
    """
    gen = torch.Generator().manual_seed(seed)
    if base is None:
        base = torch.randn(M.size, dim, generator=gen, dtype=torch.float64)
    ref = forward(base, M) - base
    out = np.zeros((M.size, M.size), dtype=bool)
    for b in range(M.size):
        x = base.clone()
        x[b] += probe_magnitude * torch.randn(base.shape[1], generator=gen, dtype=base.dtype)
        delta = forward(x, M) - x
        out[:, b] = (delta != ref).any(dim=1).numpy()
    return out


def block_evaluator(model, block_index: int, L_T: int, t: float = 0.5, pooled: Optional[torch.Tensor] = None) -> Evaluator:
    """Wrap one block of a :class:`ToyDenoiser` as ``(x, M) -> x'`` on ``(N, d)`` tokens.

    Indices ``0..n_double-1`` pick double-stream blocks, the rest single-stream.
    """
    if pooled is None:
        pooled = torch.zeros(model.config.dim, dtype=model.dtype)
    cvec = model.cond_vector(torch.tensor([t], dtype=model.dtype), pooled[None]).detach()
    n_double = len(model.double_blocks)

    @torch.no_grad()
    def run(x: torch.Tensor, M: AttentionMask) -> torch.Tensor:
        x = x[None]
        if block_index < n_double:
            txt, img = model.double_blocks[block_index](x[:, :L_T], x[:, L_T:], cvec, M)
            return torch.cat([txt, img], dim=1)[0]
        return model.single_blocks[block_index - n_double](x, cvec, M)[0]

    return run


def stacked_evaluator(evaluators: Iterable[Evaluator]) -> Evaluator:
    evaluators = list(evaluators)

    def run(x, M):
        for ev in evaluators:
            x = ev(x, M)
        return x

    return run
