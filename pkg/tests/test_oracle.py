import numpy as np
import pytest
import torch

from maskctl.attention import ModelConfig, ToyDenoiser
from maskctl.layout import BBox, build_token_layout, membership_vectors
from maskctl.masks import expansion_mask, focus_mask, full_mask, isolation_mask
from maskctl.oracle import (
    block_evaluator,
    empirical_influence,
    mask_reachability,
    reference_attention,
    reference_mask,
    stacked_evaluator,
)


@pytest.fixture(scope="module")
def model():
    return ToyDenoiser(ModelConfig(dim=16, heads=2), seed=7)


@pytest.fixture(scope="module")
def layout():
    # prompts of length 1, 1, 2 on a 4x4 grid; two 2x2 regions plus background
    return build_token_layout([1, 1, 2], [BBox(0, 0, 0.5, 0.5), BBox(0.5, 0.5, 1, 1)], 4, 4)


def pair_index(layout):
    """Index of p_1 and of one background patch token."""
    bg = layout.L_T + int(np.flatnonzero(layout.region_of_patch == -1)[0])
    return 0, bg


def test_reference_attention_single_key():
    q = np.ones((2, 2))
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = reference_attention(q, q, v, np.array([[False, True], [True, True]]))
    assert np.array_equal(out[0], v[1])
    assert np.allclose(out[1], v.mean(0))


def test_reachability_focus_one_and_two_hops(layout):
    mv = membership_vectors(layout)
    F = focus_mask(mv)
    p1, bg = pair_index(layout)
    assert not F.bits[bg, p1]
    assert mask_reachability(F, 1)[bg, p1] == F.bits[bg, p1]
    assert mask_reachability(F, 2)[bg, p1]


def test_reachability_isolation_idempotent(layout):
    iso = isolation_mask(membership_vectors(layout))
    r1 = mask_reachability(iso, 1)
    for h in (2, 3, 5):
        assert np.array_equal(mask_reachability(iso, h), r1)
    assert np.array_equal(r1, iso.bits)


def test_reachability_monotone_in_hops(rng):
    bits = rng.random((12, 12)) < 0.15
    prev = mask_reachability(bits, 1)
    for h in range(2, 6):
        cur = mask_reachability(bits, h)
        assert not (prev & ~cur).any()
        prev = cur


def test_reference_mask_matches_small_example(layout):
    iso = reference_mask(layout, "isolation")
    # p_1 sees itself and region 1 patches only
    row = iso[0]
    assert row[0] and not row[1]
    assert row.sum() == 1 + 4


def _check_influence_pattern(model, layout, M, block):
    ev = block_evaluator(model, block, layout.L_T)
    infl = empirical_influence(ev, M, dim=model.config.dim)
    return infl


@pytest.mark.parametrize("block", [0, 2])
@pytest.mark.parametrize("kind", ["isolation", "focus", "expansion"])
def test_one_block_influence_equals_mask(model, layout, block, kind):
    mv = membership_vectors(layout)
    M = {"isolation": isolation_mask, "focus": focus_mask, "expansion": expansion_mask}[kind](mv)
    infl = _check_influence_pattern(model, layout, M, block)
    assert np.array_equal(infl, M.bits)


def test_expansion_gains_background_columns(model, layout):
    mv = membership_vectors(layout)
    F, E = focus_mask(mv), expansion_mask(mv)
    i_f = _check_influence_pattern(model, layout, F, 0)
    i_e = _check_influence_pattern(model, layout, E, 0)
    gained = i_e & ~i_f
    bg_cols = np.zeros(layout.size, dtype=bool)
    bg_cols[layout.L_T:] = layout.region_of_patch == -1
    img_rows = np.zeros(layout.size, dtype=bool)
    img_rows[layout.L_T:] = True
    assert gained.any()
    assert not gained[:, ~bg_cols].any()
    assert not gained[~img_rows].any()


def test_zero_output_projection_gives_empty_influence(layout):
    m = ToyDenoiser(ModelConfig(dim=16, heads=2), seed=7)
    with torch.no_grad():
        for blk in list(m.double_blocks) + list(m.single_blocks):
            for name, p in blk.named_parameters():
                if name.endswith(("attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias")):
                    p.zero_()
    F = focus_mask(membership_vectors(layout))
    ev = stacked_evaluator(block_evaluator(m, b, layout.L_T) for b in range(4))
    assert not empirical_influence(ev, F, dim=16).any()


@pytest.mark.parametrize("hops", [1, 2, 3])
def test_stacked_influence_within_reachability(model, layout, hops):
    mv = membership_vectors(layout)
    for M in (isolation_mask(mv), focus_mask(mv), expansion_mask(mv)):
        ev = stacked_evaluator(block_evaluator(model, b, layout.L_T) for b in range(hops))
        infl = empirical_influence(ev, M, dim=16)
        reach = mask_reachability(M, hops)
        assert not (infl & ~reach).any()
        assert np.array_equal(infl, reach)


def test_full_mask_influence_dense(model, layout):
    infl = _check_influence_pattern(model, layout, full_mask(layout.size), 1)
    assert infl.all()
