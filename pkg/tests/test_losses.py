import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from cpgan import losses
from cpgan.errors import ContractError

import oracles

LN2 = 0.693147180559945309417232121458
BCE_075_075 = 0.562335144618808350288030315224
EPS = losses.EPS


def test_bce_values():
    assert losses.bce(0.5, 0.0) == pytest.approx(LN2, abs=1e-12)
    assert losses.bce(0.75, 0.75) == pytest.approx(BCE_075_075, abs=1e-12)
    assert losses.bce(EPS, 0.0) == pytest.approx(0.0, abs=1e-6)
    assert losses.bce(1 - EPS, 1.0) == pytest.approx(0.0, abs=1e-6)


def test_bce_clamps_saturated_inputs():
    assert math.isfinite(losses.bce(0.0, 1.0))
    assert math.isfinite(losses.bce(1.0, 0.0))


def test_d_real_loss():
    assert losses.d_real_loss(0.75) == pytest.approx(BCE_075_075, abs=1e-12)
    assert losses.d_real_loss(0.5) == pytest.approx(LN2, abs=1e-12)
    deriv = (losses.d_real_loss(0.75 + 1e-6) - losses.d_real_loss(0.75 - 1e-6)) / 2e-6
    assert abs(deriv) < 1e-6


@given(st.floats(1e-6, 1 - 1e-6))
def test_g_fake_is_negated_d_fake(s):
    assert losses.g_fake_loss(s) + losses.d_fake_loss(s) == 0.0


def test_d_fake_values():
    assert losses.d_fake_loss(0.5) == pytest.approx(LN2, abs=1e-12)
    assert losses.d_fake_loss(EPS) == pytest.approx(0.0, abs=1e-6)


def test_non_saturating_variant():
    assert losses.g_fake_loss(0.3, non_saturating=True) == pytest.approx(-math.log(0.3), abs=1e-12)


def test_anti_shortcut_loss():
    assert losses.g_anti_shortcut_loss(1e-9) == pytest.approx(0.0, abs=1e-6)
    assert losses.g_anti_shortcut_loss(0.5) == pytest.approx(LN2, abs=1e-12)
    s = torch.tensor(0.4, dtype=torch.float64, requires_grad=True)
    losses.g_anti_shortcut_loss(s).backward()
    assert s.grad > 0  # descending the loss lowers the score


def test_mask_loss_complement_symmetry_and_extremes():
    rng = np.random.default_rng(0)
    pred, tgt = rng.random((6, 7)), (rng.random((6, 7)) > 0.5).astype(float)
    assert losses.mask_loss(pred, tgt) == losses.mask_loss(pred, 1 - tgt)
    assert losses.mask_loss(tgt, tgt) == pytest.approx(0.0, abs=1e-6)
    assert losses.mask_loss(np.full((6, 7), 0.5), tgt) == pytest.approx(LN2, abs=1e-12)


def test_mask_loss_matches_two_branch_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        pred, tgt = rng.random((5, 4)), rng.random((5, 4))
        assert losses.mask_loss(pred, tgt) == pytest.approx(oracles.mask_xent(pred, tgt), abs=1e-12)


def test_mask_loss_batched_is_mean_of_per_sample_minimum():
    rng = np.random.default_rng(2)
    pred, tgt = rng.random((3, 1, 5, 5)), (rng.random((3, 1, 5, 5)) > 0.5).astype(float)
    tgt[1] = 1 - tgt[1]
    expect = np.mean([oracles.mask_xent(pred[i, 0], tgt[i, 0]) for i in range(3)])
    assert losses.mask_loss(pred, tgt) == pytest.approx(expect, abs=1e-12)


def test_mask_loss_shape_mismatch():
    with pytest.raises(ContractError):
        losses.mask_loss(np.zeros((3, 3)), np.zeros((3, 4)))


def _bundle_inputs(rng, size=(4, 4)):
    scores = {k: float(rng.random()) for k in ("real", "fake", "anti_shortcut", "grounded_fake")}
    masks = {k: rng.random(size) for k in scores}
    return scores, masks, rng.random(size), (rng.random(size) > 0.5).astype(float)


def test_assemble_all_half():
    half = np.full((4, 4), 0.5)
    scores = {k: 0.5 for k in ("real", "fake", "anti_shortcut", "grounded_fake")}
    masks = {k: half for k in scores}
    b = losses.assemble_losses(scores, masks, gen_mask=half, grounded_mask=np.ones((4, 4)))
    assert float(b.d_total) == pytest.approx(3.4 * LN2, abs=1e-9)
    assert float(b.g_total) == pytest.approx(0.0, abs=1e-12)


def test_assemble_zero_aux_weight():
    rng = np.random.default_rng(3)
    scores, masks, gm, gfm = _bundle_inputs(rng)
    b = losses.assemble_losses(scores, masks, gm, gfm, aux_weight=0.0)
    assert float(b.d_total) == pytest.approx(float(b.d_real + b.d_fake + b.d_grounded_fake), abs=1e-12)


def test_assemble_totals_recompute_from_parts():
    rng = np.random.default_rng(4)
    for _ in range(20):
        scores, masks, gm, gfm = _bundle_inputs(rng)
        b = losses.assemble_losses(scores, masks, gm, gfm).as_dict()
        aux = b["mask_real"] + b["mask_fake"] + b["mask_anti_shortcut"] + b["mask_grounded_fake"]
        assert b["d_total"] == pytest.approx(b["d_real"] + b["d_fake"] + b["d_grounded_fake"] + 0.1 * aux, abs=1e-9)
        assert b["g_total"] == pytest.approx(b["g_fake"] + b["g_anti_shortcut"], abs=1e-9)


def test_assemble_missing_branches_are_zero():
    b = losses.assemble_losses({"real": 0.3, "fake": 0.6})
    assert float(b.d_grounded_fake) == 0.0 and float(b.g_anti_shortcut) == 0.0
    assert float(b.mask_real) == 0.0


def test_all_losses_finite_under_fuzz():
    rng = np.random.default_rng(5)
    s = torch.as_tensor(np.concatenate([rng.random(100_000), [0.0, 1.0]]))
    for fn in (losses.d_real_loss, losses.d_fake_loss, losses.g_fake_loss, losses.g_anti_shortcut_loss):
        assert torch.isfinite(fn(s))
    assert torch.isfinite(losses.bce(s, torch.as_tensor(rng.random(len(s))))).all()
    m = torch.as_tensor(rng.random((1000, 1, 10, 10)))
    m[0] = 0.0
    m[1] = 1.0
    assert torch.isfinite(losses.mask_loss(m, (m > 0.3).double()))
