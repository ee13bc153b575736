import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from ctfs import TEACHER_TAGS
from ctfs.model import build_model, predict
from ctfs.mvra import (MVRAConfig, assess, block_replicate, cross_teacher_consistency,
                       fuse_reliability, grid_pool, make_stability_views, teacher_stability)
from ctfs.teachers import TeacherBank


def random_probs(rng, *shape):
    """Random probability map, class axis at -3."""
    *lead, c, h, w = shape
    p = rng.dirichlet(np.ones(c) * 0.7, size=(*lead, h, w))
    return torch.from_numpy(np.moveaxis(p, -1, -3).copy())


def onehot_feat(cls, c=4):
    v = torch.zeros(c, 1, 1, dtype=torch.float64)
    v[cls] = 1.0
    return v


def to_lists(feat):
    """(C, Gr, Gc) tensor -> Gr x Gc x C lists."""
    return feat.permute(1, 2, 0).tolist()


def test_constant_map_pools_to_itself():
    v = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64)
    p = v[:, None, None].expand(4, 64, 64)
    f = grid_pool(p, 16)
    assert torch.allclose(f, v[:, None, None].expand(4, 4, 4))


def test_single_cell_is_global_mean():
    p = random_probs(np.random.default_rng(0), 4, 32, 32)
    assert torch.allclose(grid_pool(p, 32)[:, 0, 0], p.mean(dim=(1, 2)))


def test_grid_pool_oracle():
    p = random_probs(np.random.default_rng(1), 4, 64, 64)
    got = grid_pool(p, 32)
    ref = oracles.grid_pool(p.tolist(), 32)
    assert np.allclose(to_lists(got), ref, atol=1e-6)


def test_grid_pool_indivisible():
    with pytest.raises(ValueError):
        grid_pool(torch.ones(4, 30, 32) / 4, 32)


def test_grid_features_are_distributions():
    f = grid_pool(random_probs(np.random.default_rng(2), 3, 4, 64, 64), 16)
    assert torch.allclose(f.sum(dim=-3), torch.ones(3, 4, 4, dtype=f.dtype), atol=1e-5)


def test_pool_replicate_idempotent():
    f = grid_pool(random_probs(np.random.default_rng(3), 4, 64, 64), 16)
    assert torch.allclose(grid_pool(block_replicate(f, 16), 16), f)


def test_stability_identical_views():
    f = grid_pool(random_probs(np.random.default_rng(4), 4, 64, 64), 16)
    assert torch.allclose(teacher_stability(f, [f.clone(), f.clone()]), torch.ones(4, 4, dtype=f.dtype))


def test_stability_orthogonal():
    assert teacher_stability(onehot_feat(0), [onehot_feat(1)]).item() == 0.0


def test_stability_oracle_and_view_symmetry():
    rng = np.random.default_rng(5)
    fs = [grid_pool(random_probs(rng, 4, 64, 64), 16) for _ in range(4)]
    got = teacher_stability(fs[0], fs[1:])
    ref = oracles.stability(to_lists(fs[0]), [to_lists(v) for v in fs[1:]])
    assert np.allclose(got.tolist(), ref, atol=1e-6)
    for perm in itertools.permutations(fs[1:]):
        assert torch.allclose(teacher_stability(fs[0], list(perm)), got)


def test_stability_needs_aligned_views():
    with pytest.raises(ValueError):
        teacher_stability(torch.ones(4, 2, 2), [torch.ones(4, 2, 3)])
    with pytest.raises(ValueError):
        teacher_stability(torch.ones(4, 2, 2), [])


def test_consistency_identical():
    f = grid_pool(random_probs(np.random.default_rng(6), 4, 32, 32), 16)
    c = cross_teacher_consistency([f, f, f])
    assert torch.allclose(c, torch.ones_like(c))


def test_consistency_two_agree_one_differs():
    c = cross_teacher_consistency([onehot_feat(0), onehot_feat(0), onehot_feat(1)])
    assert c.item() == pytest.approx(1 / 3)


def test_consistency_oracle_and_teacher_symmetry():
    rng = np.random.default_rng(7)
    fs = [grid_pool(random_probs(rng, 4, 64, 64), 16) for _ in range(3)]
    got = cross_teacher_consistency(fs)
    assert np.allclose(got.tolist(), oracles.consistency([to_lists(f) for f in fs]), atol=1e-6)
    for perm in itertools.permutations(fs):
        assert torch.allclose(cross_teacher_consistency(list(perm)), got)


def test_fuse_perfect_agreement():
    ones = torch.ones(2, 2, dtype=torch.float64)
    rel = fuse_reliability([ones, ones, ones], ones, 0.5, 8)
    assert torch.equal(rel.grid_scores, ones)
    assert rel.pixel_scores.shape == (16, 16)


def test_fuse_worked_example():
    s = torch.full((1, 1), 0.9, dtype=torch.float64)
    rel = fuse_reliability([s, s, s], torch.zeros(1, 1, dtype=torch.float64), 0.5, 4)
    assert rel.grid_scores.item() == pytest.approx(0.45)


def test_fuse_delta_one_ignores_consistency():
    rng = np.random.default_rng(8)
    stabs = [torch.from_numpy(rng.random((3, 3))) for _ in range(3)]
    for c in (0.0, 0.3, 1.0):
        rel = fuse_reliability(stabs, torch.full((3, 3), c, dtype=torch.float64), 1.0, 2)
        assert torch.allclose(rel.grid_scores, torch.stack(stabs).mean(0))


def test_fuse_oracle():
    rng = np.random.default_rng(9)
    stabs = [torch.from_numpy(rng.random((4, 4))) for _ in range(3)]
    cons = torch.from_numpy(rng.random((4, 4)))
    rel = fuse_reliability(stabs, cons, 0.3, 8)
    ref = oracles.fuse([s.tolist() for s in stabs], cons.tolist(), 0.3)
    assert np.allclose(rel.grid_scores.tolist(), ref, atol=1e-6)
    assert torch.equal(rel.pixel_scores[::8, ::8], rel.grid_scores)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), delta=st.floats(0.0, 1.0))
def test_score_bounds(seed, delta):
    rng = np.random.default_rng(seed)
    orig = [grid_pool(random_probs(rng, 4, 32, 32), 8) for _ in range(3)]
    stabs = [teacher_stability(o, [grid_pool(random_probs(rng, 4, 32, 32), 8)]) for o in orig]
    cons = cross_teacher_consistency(orig)
    rel = fuse_reliability(stabs, cons, delta, 8)
    for s in stabs:
        assert (s >= 0).all() and (s <= 1).all()
    assert (cons >= 0).all() and (cons <= 1).all()
    assert (rel.penalty >= delta - 1e-12).all() and (rel.penalty <= 1 + 1e-12).all()
    assert (rel.grid_scores >= 0).all() and (rel.grid_scores <= 1).all()


def test_consistency_monotone_in_pairwise_cosine():
    # move teacher 2 toward teacher 0 along the simplex: cos(0,2) rises, others fixed-ish
    a = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)[:, None, None]
    b = torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64)[:, None, None]
    prev = -1.0
    for t in np.linspace(0, 1, 11):
        c = torch.tensor([t, 0.0, 1 - t, 0.0], dtype=torch.float64)[:, None, None]
        val = cross_teacher_consistency([a, b, c]).item()
        assert val >= prev - 1e-12
        prev = val


# ---------------------------------------------------------------- assess


@pytest.fixture(scope="module")
def bank():
    student = build_model(4, seed=0)
    bank = TeacherBank.from_student(student, ema_decay=0.0)
    # make the three teachers genuinely different
    for i, tag in enumerate(TEACHER_TAGS):
        other = build_model(4, seed=10 + i)
        bank.ema_update(tag, other)
    return bank


def test_assess_identical_teachers_identity_views():
    from ctfs.augment import AugmentConfig
    bank = TeacherBank.from_student(build_model(4, seed=0))
    identity = AugmentConfig(alpha_range=(0.0, 0.0), gamma_range=(0.0, 0.0),
                             view_brightness=0.0, view_contrast=0.0)
    img = np.random.default_rng(0).random((64, 64))
    rel = assess(bank, img, MVRAConfig(grid=16, views=2, delta=0.5), seed=0, aug_cfg=identity)
    assert torch.allclose(rel.grid_scores, torch.ones_like(rel.grid_scores), atol=1e-9)


def test_assess_block_constant_and_deterministic(bank):
    img = np.random.default_rng(1).random((2, 64, 64))
    cfg = MVRAConfig(grid=32, views=2, delta=0.5)
    a = assess(bank, img, cfg, seed=3)
    b = assess(bank, img, cfg, seed=3)
    assert torch.equal(a.grid_scores, b.grid_scores)
    assert a.pixel_scores.shape == (2, 64, 64)
    assert torch.equal(a.pixel_scores, block_replicate(a.grid_scores, 32))
    assert (a.pixel_scores >= 0).all() and (a.pixel_scores <= 1).all()


def test_assess_rejects_indivisible(bank):
    with pytest.raises(ValueError):
        assess(bank, np.zeros((40, 64)), MVRAConfig(grid=32))


def assess_bruteforce(bank, img, cfg, seed):
    """Per-pixel loops over raw teacher probabilities; no pooled intermediates reused."""
    rng = np.random.default_rng(seed)
    h, w = img.shape
    m = cfg.grid
    probs = {}
    for tag in TEACHER_TAGS:
        views = make_stability_views(tag, img, cfg.views, rng)
        maps = [predict(bank[tag], im)[0].double().numpy() for im in [img] + views]
        probs[tag] = maps
    c_n = probs["general"][0].shape[0]
    out = np.zeros((h // m, w // m))
    for i in range(h // m):
        for j in range(w // m):
            def cell(pm):
                vec = [0.0] * c_n
                for u in range(i * m, (i + 1) * m):
                    for v in range(j * m, (j + 1) * m):
                        for c in range(c_n):
                            vec[c] += pm[c, u, v]
                return [x / (m * m) for x in vec]
            origs = {}
            stab = []
            for tag in TEACHER_TAGS:
                o = cell(probs[tag][0])
                origs[tag] = o
                stab.append(sum(oracles.cos(o, cell(v)) for v in probs[tag][1:]) / cfg.views)
            pairs = [oracles.cos(origs[p], origs[q]) for p, q in itertools.combinations(TEACHER_TAGS, 2)]
            cons = sum(pairs) / len(pairs)
            out[i, j] = (cfg.delta + (1 - cfg.delta) * cons) * sum(stab) / len(stab)
    return out


def test_assess_matches_bruteforce(bank):
    img = np.random.default_rng(2).random((32, 32))
    cfg = MVRAConfig(grid=16, views=2, delta=0.5)
    got = assess(bank, img, cfg, seed=11).grid_scores.numpy()
    ref = assess_bruteforce(bank, img, cfg, seed=11)
    assert np.allclose(got, ref, atol=1e-5)
