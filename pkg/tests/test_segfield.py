from math import comb

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from scenetok.segfield import (MaskPairBatch, SegConfig, SegFieldSet, contrastive_pair_loss, sample_training_pairs,
                               seg_losses, stable_norm)

BOUNDS = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
SMALL = SegConfig(resolutions=(4, 8), hidden=16, d_seg=6)


def test_pair_loss_examples():
    e = np.array([0.3, -0.2, 1.0])
    assert contrastive_pair_loss(e, e, True, 1.0) == 0.0
    assert contrastive_pair_loss([0.0, 0.0], [1.0, 0.0], False, 1.0) == 0.0
    assert contrastive_pair_loss([0.0, 0.0], [0.2, 0.0], False, 1.0) == pytest.approx(0.8)
    assert contrastive_pair_loss([0.0, 0.0], [3.0, 4.0], True, 1.0) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        contrastive_pair_loss(e, e, True, 0.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_stable_norm_matches_plain(v):
    x = torch.tensor(v, dtype=torch.float64)
    want = float(torch.linalg.norm(x))
    assert float(stable_norm(x)) == pytest.approx(want, rel=1e-9, abs=1e-25)


def test_stable_norm_survives_half_precision_overflow():
    x = torch.full((4,), 6e4, dtype=torch.float32)
    assert torch.isfinite(stable_norm(x)) and float(stable_norm(x)) == pytest.approx(1.2e5, rel=1e-5)


def test_torch_loss_matches_scalar(rng):
    a, b = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    same = rng.random(10) < 0.5
    t = contrastive_pair_loss(torch.tensor(a), torch.tensor(b), same, 2.0)
    for i in range(10):
        assert float(t[i]) == pytest.approx(contrastive_pair_loss(a[i], b[i], same[i], 2.0), abs=1e-12)


def test_single_mask_all_same():
    ids = np.zeros((2, 3, 6, 6), dtype=np.int64)
    b = sample_training_pairs(ids, 20, 0, rays_per_image=10)
    for s in range(3):
        assert len(b.pairs[s]) > 0 and b.same[s].all()


def test_two_disjoint_masks_tag_cross_pairs_different():
    ids = np.zeros((1, 3, 4, 8), dtype=np.int64)
    ids[:, :, :, 4:] = 1
    b = sample_training_pairs(ids, 32, 1, rays_per_image=32)
    m = b.mask_ids[:, 2]
    p = b.pairs[2]
    assert np.array_equal(b.same[2], m[p[:, 0]] == m[p[:, 1]])
    assert (~b.same[2]).sum() == 16 * 16


def test_pairs_stay_within_image_and_skip_unmasked(rng):
    ids = rng.integers(-1, 3, size=(5, 3, 6, 6))
    ids[2, 1] = -1  # image 2 has no medium-scale masks
    b = sample_training_pairs(ids, 96, 7, rays_per_image=12)
    for s in range(3):
        p = b.pairs[s]
        assert np.all(b.view[p[:, 0]] == b.view[p[:, 1]])
        assert np.all(b.mask_ids[p, s] >= 0)
    assert 2 not in b.pair_counts(1)


def test_pair_counts_match_reference_sampler(rng):
    ids = rng.integers(-1, 4, size=(6, 3, 8, 8))
    b = sample_training_pairs(ids, 120, 11, rays_per_image=24)
    # reference: redraw with the same seed and count valid pairs combinatorially
    ref = np.random.default_rng(11)
    n_images = int(np.ceil(120 / 24))
    views = ref.choice(6, size=n_images, replace=False)
    pix = [ref.choice(64, size=24, replace=False) for _ in views]
    for s in range(3):
        want = {}
        for v, px in zip(views, pix):
            valid = int((ids[v, s].reshape(-1)[px] >= 0).sum())
            if comb(valid, 2):
                want[int(v)] = want.get(int(v), 0) + comb(valid, 2)
        assert b.pair_counts(s) == want


def test_sampling_deterministic(rng):
    ids = rng.integers(-1, 3, size=(4, 3, 6, 6))
    a = sample_training_pairs(ids, 48, 3, rays_per_image=12)
    b = sample_training_pairs(ids, 48, 3, rays_per_image=12)
    assert np.array_equal(a.pixel, b.pixel) and all(np.array_equal(x, y) for x, y in zip(a.pairs, b.pairs))


def _loss_inputs(rng, ids):
    sf = SegFieldSet(SMALL, BOUNDS, 4)
    b = sample_training_pairs(ids, 24, 0, rays_per_image=12)
    n = len(b.view)
    pos = torch.as_tensor(rng.uniform(-1, 1, (n, 3, 3)), dtype=torch.float32)
    w = torch.as_tensor(rng.dirichlet(np.ones(3), n), dtype=torch.float32)
    targets = torch.zeros(3, n, 4)
    valid = torch.zeros(3, n, dtype=torch.bool)
    return sf, pos, w, b, targets, valid


def test_one_object_gives_no_push_at_object_scale(rng):
    ids = rng.integers(0, 3, size=(2, 3, 6, 6))
    ids[:, 2] = 0
    sf, pos, w, b, tg, va = _loss_inputs(rng, ids)
    assert b.same[2].all()
    losses = seg_losses(sf, pos, w, b, tg, va, SMALL)
    e, _ = sf(pos)
    e_r = (w[None, ..., None] * e).sum(2)
    p = torch.as_tensor(b.pairs[2])
    pull = stable_norm(e_r[2, p[:, 0]] - e_r[2, p[:, 1]]).mean()
    assert float(losses["pair2"]) == pytest.approx(float(pull), rel=1e-6)


def test_scale_losses_independent(rng):
    ids = rng.integers(0, 3, size=(2, 3, 6, 6))
    sf, pos, w, b, tg, va = _loss_inputs(rng, ids)

    def grads(batch):
        sf.zero_grad()
        seg_losses(sf, pos, w, batch, tg, va, SMALL)["total"].backward()
        return {n: p.grad.clone() for n, p in sf.named_parameters() if p.grad is not None and "grid" not in n}

    full = grads(b)
    cut = MaskPairBatch(b.view, b.pixel, b.mask_ids, [np.zeros((0, 2), dtype=np.int64)] + b.pairs[1:],
                        [np.zeros(0, dtype=bool)] + b.same[1:])
    part = grads(cut)
    for n, g in part.items():
        if n.startswith(("trunks.1", "trunks.2", "embed.1", "embed.2")):
            assert torch.equal(g, full[n]), n
    assert "embed.2.weight" in part and not part.get("embed.0.weight", torch.zeros(1)).any()


def test_loss_invariant_to_pair_order(rng):
    ids = rng.integers(0, 3, size=(2, 3, 6, 6))
    sf, pos, w, b, tg, va = _loss_inputs(rng, ids)
    a = float(seg_losses(sf, pos, w, b, tg, va, SMALL)["total"])
    perm = [np.random.default_rng(s).permutation(len(p)) for s, p in enumerate(b.pairs)]
    shuffled = MaskPairBatch(b.view, b.pixel, b.mask_ids, [p[i][:, ::-1] for p, i in zip(b.pairs, perm)],
                             [s[i] for s, i in zip(b.same, perm)])
    assert float(seg_losses(sf, pos, w, shuffled, tg, va, SMALL)["total"]) == pytest.approx(a, abs=1e-6)


def test_three_decoders_one_grid():
    sf = SegFieldSet(SMALL, BOUNDS, 4)
    e, lab = sf(torch.zeros(5, 3))
    assert e.shape == (3, 5, 6) and lab.shape == (3, 5, 4)
    grids = [n for n, _ in sf.named_parameters() if n.startswith("grid.")]
    assert grids and all(n.startswith("grid.levels") for n in grids)


def test_config_validation():
    with pytest.raises(ValueError):
        SegConfig(margin=0.0)
