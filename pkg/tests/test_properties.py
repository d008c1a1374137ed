"""Randomised invariants (hypothesis)."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hypercd import downstream as D, hsdata, selfsup
from hypercd import tensorops as T

from oracles import apply_coordinate_map, d4_coordinate_maps, multi_positive_by_sum, oa_aa_from_pairs

FAST = settings(max_examples=40, deadline=None)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@FAST
@given(st.integers(-50, 50), st.integers(1, 9))
def test_reflect_index_folds(i, n):
    j = int(hsdata.reflect_index(np.array([i]), n)[0])
    # fold step by step: mirror at -1 and at n, edge sample not repeated
    k = i
    while not 0 <= k < n:
        k = -k if k < 0 else 2 * (n - 1) - k
        if n == 1:
            k = 0
    assert j == k


@FAST
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4)), elements=finite))
def test_normalize_moments(data):
    z = hsdata.normalize_cube(hsdata.HyperCube("d", data)).data.reshape(-1, data.shape[2])
    raw = data.reshape(-1, data.shape[2])
    for b in range(data.shape[2]):
        assert np.isfinite(z[:, b]).all()
        if np.ptp(raw[:, b]) == 0 or raw[:, b].std() == 0:
            assert not z[:, b].any()
        elif raw[:, b].std() > 1e-6:
            assert abs(z[:, b].mean()) < 1e-9
            assert abs(z[:, b].std() - 1) < 1e-9


@FAST
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_dihedral_matches_coordinate_maps(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    ours = {hsdata.dihedral(a, k).tobytes() for k in range(8)}
    oracle = {apply_coordinate_map(a, f).tobytes() for f in d4_coordinate_maps(n)}
    assert ours == oracle


@FAST
@given(st.integers(3, 12), st.integers(2, 4), st.floats(0.05, 2.0), st.integers(0, 2**32 - 1))
def test_infonce_decomposition(m, groups, tau, seed):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((m, 4))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    g = rng.integers(0, groups, m)
    g[:2] = [0, 1]
    losses = selfsup.infonce_query_losses(emb, g, tau)
    np.testing.assert_allclose(losses, multi_positive_by_sum(emb, g, tau), rtol=1e-11, atol=1e-11)
    assert (losses >= -1e-12).all()


@FAST
@given(st.integers(1, 6), st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=60))
def test_metrics_match_raw_pairs(c, pairs):
    pairs = [(p % c, t % c) for p, t in pairs]
    pred, truth = zip(*pairs)
    rep = D.report_from_confusion(D.confusion_from_pairs(pred, truth, c))
    oa, aa = oa_aa_from_pairs(pred, truth, c)
    assert abs(rep.oa - oa) < 1e-12 and abs(rep.aa - aa) < 1e-12
    assert 0 <= rep.oa <= 1 and 0 <= rep.aa <= 1


@FAST
@given(st.integers(0, 300), st.lists(st.integers(1, 250), max_size=3, unique=True))
def test_lr_non_increasing(it, ms):
    cfg = T.SgdConfig(milestones=sorted(ms))
    assert T.lr_at(it + 1, cfg) <= T.lr_at(it, cfg)
    assert T.lr_at(it, cfg) == pytest.approx(0.03 * 0.1 ** sum(m <= it for m in ms), rel=1e-14)


@FAST
@given(st.lists(hnp.arrays(np.float64, st.integers(1, 5), elements=finite), min_size=1, max_size=4),
       st.floats(0.01, 10))
def test_clip_bounds_norm(grads, cap):
    params = [T.ParamTensor(np.zeros_like(g), grad=g.copy()) for g in grads]
    before = T.clip_grad_norm(params, cap)
    after = np.sqrt(sum(np.sum(p.grad ** 2) for p in params))
    assert after <= cap * (1 + 1e-12) + 1e-300
    if before <= cap:
        assert all(np.array_equal(p.grad, g) for p, g in zip(params, grads))


@FAST
@given(shapes=st.dictionaries(st.text("abc/._", min_size=1, max_size=8),
                              hnp.array_shapes(min_dims=0, max_dims=3, max_side=3), max_size=4),
       seed=st.integers(0, 2**32 - 1))
def test_checkpoint_round_trip(tmp_path_factory, shapes, seed):
    rng = np.random.default_rng(seed)
    named = [(k, rng.standard_normal(s).astype(np.float32)) for k, s in shapes.items()]
    path = tmp_path_factory.mktemp("ckpt") / "c.hcp"
    T.save_checkpoint(path, named)
    back = T.load_checkpoint(path)
    assert list(back) == [k for k, _ in named]
    for k, v in named:
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


@FAST
@given(st.integers(0, 2**63 - 1), st.integers(0, 4), st.integers(1, 30))
def test_split_partitions(seed, run, n):
    labels = np.random.default_rng(0).integers(0, 4, (8, 8))
    cube = hsdata.HyperCube("d", np.zeros((8, 8, 1)), labels, 3)
    train, test = hsdata.make_split(cube, hsdata.SplitSpec(seed, n, run))
    assert train.size == n
    np.testing.assert_array_equal(np.union1d(train, test), cube.labeled_indices())
    assert np.intersect1d(train, test).size == 0
