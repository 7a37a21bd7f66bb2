import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gti_lab.corpus import generate_catalog
from gti_lab.numerics import make_rng
from gti_lab.rq import (Assignment, CodebookStack, SemanticID, assign_all, codebook_stats,
                        fit_codebooks, quantize, sinkhorn_balance, usage_perplexity)
from oracles import per_level_argmin

CB2 = CodebookStack(np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.25, 0.0], [0.0, 0.25]]]))


def test_quantize_exact_two_level_composition():
    sid, r = quantize([1.25, 0.0], CB2)
    assert sid.codes == (0, 0)
    np.testing.assert_array_equal(r, [0.0, 0.0])


def test_quantize_distance_table_example():
    sid, _ = quantize([0.6, 0.5], CB2)
    codes, tables = per_level_argmin([0.6, 0.5], CB2.vectors.tolist())
    assert sid.codes == codes == (0, 1)
    np.testing.assert_allclose(np.sqrt(tables[0]), [0.640, 0.781], atol=1e-3)
    np.testing.assert_allclose(np.sqrt(tables[1]), [0.820, 0.472], atol=1e-3)


def test_quantize_zero_residual_picks_smallest_level2_codeword():
    cb = CodebookStack(np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.5, 0.5], [0.1, 0.0]]]))
    sid, r = quantize([1.0, 0.0], cb)
    assert sid.codes == (0, 1)
    np.testing.assert_array_equal(r, [-0.1, 0.0])


@given(st.integers(0, 10_000))
def test_quantize_matches_per_level_oracle(seed):
    rng = make_rng(seed)
    L, K, d = int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(1, 5))
    cb = CodebookStack(rng.normal(size=(L, K, d)))
    z = rng.normal(size=d)
    sid, r = quantize(z, cb)
    codes, _ = per_level_argmin(z, cb.vectors.tolist())
    assert sid.codes == codes
    np.testing.assert_allclose(z - r, sum(cb.vectors[l, c] for l, c in enumerate(codes)),
                               atol=1e-12)


def test_fit_codebooks_perfect_quantization():
    pts = np.array([[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0]])
    cb = fit_codebooks(pts, 1, 3, seed=0)
    assert sorted(map(tuple, cb.vectors[0])) == sorted(map(tuple, pts))
    for p in pts:
        _, r = quantize(p, cb)
        np.testing.assert_array_equal(r, 0.0)


def test_fit_codebooks_recovers_two_clusters():
    rng = make_rng(4)
    means = np.array([[5.0, 0.0, 0.0], [-5.0, 1.0, 2.0]])
    pts = np.vstack([m + 0.3 * rng.normal(size=(100, 3)) for m in means])
    cb = fit_codebooks(pts, 1, 2, seed=1)
    got = cb.vectors[0][np.argsort(cb.vectors[0][:, 0])[::-1]]
    np.testing.assert_allclose(got, means, atol=0.1)


def test_residual_codeword_norms_shrink_with_level():
    cat = generate_catalog(128, depth=2, branching=4, dim=16, seed=3)
    cb = fit_codebooks(cat.embeddings(), 2, 4, seed=0)
    norms = np.linalg.norm(cb.vectors, axis=2).mean(axis=1)
    assert norms[1] < norms[0]


def test_fit_codebooks_rejects_too_few_items():
    with pytest.raises(ValueError):
        fit_codebooks(np.zeros((3, 2)), 1, 4)


def test_codebook_roundtrip_is_exact(tmp_path):
    cb = CodebookStack(make_rng(2).normal(size=(2, 3, 4)), seed=9)
    cb.save(tmp_path / "cb.txt")
    back = CodebookStack.load(tmp_path / "cb.txt")
    np.testing.assert_array_equal(back.vectors, cb.vectors)
    assert back.seed == 9


def test_sinkhorn_symmetric_cost():
    plan, ok = sinkhorn_balance(np.ones((2, 2)))
    assert ok
    np.testing.assert_allclose(plan, 0.5, atol=1e-12)


def test_sinkhorn_dominant_diagonal():
    plan, _ = sinkhorn_balance(np.array([[0.0, 10.0], [10.0, 0.0]]), epsilon=0.05)
    np.testing.assert_allclose(plan, np.eye(2), atol=1e-12)


@given(st.integers(0, 10_000))
def test_sinkhorn_random_marginals(seed):
    cost = make_rng(seed).uniform(0, 1, size=(4, 4))
    plan, ok = sinkhorn_balance(cost, iterations=200, epsilon=0.05)
    assert ok
    np.testing.assert_allclose(plan.sum(axis=0), 1.0, atol=1e-6)
    np.testing.assert_allclose(plan.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(plan >= 0)


def test_sinkhorn_rejects_non_positive_epsilon():
    with pytest.raises(ValueError):
        sinkhorn_balance(np.ones((2, 2)), epsilon=0.0)


def test_assign_all_unique_inputs_match_quantize():
    # coarse level far apart, fine level small: every composition is its own greedy path
    cb = CodebookStack(np.stack([10 * np.eye(4)[:, :3], 0.5 * np.eye(4)[:, :3]]))
    z = np.array([cb.vectors[0, i] + cb.vectors[1, j] for i in range(4) for j in range(4)])
    assert len({quantize(v, cb)[0] for v in z}) == 16
    amap = assign_all(range(16), z, cb)
    for i, vec in enumerate(z):
        assert amap.sids[str(i)] == quantize(vec, cb)[0]
    assert not amap.rerouted


def test_identical_pair_split_closer_keeps_greedy_code():
    # level-2 codewords at 0 and 1 (1-d); both items sit nearest code 0
    cb = CodebookStack(np.array([[[0.0], [10.0]], [[0.0], [1.0]]]))
    z = np.array([[0.1], [0.1]])
    amap = assign_all(["a", "b"], z, cb)
    codes = sorted(amap.sids[i].codes for i in "ab")
    assert codes == [(0, 0), (0, 1)]
    # the 2x2 cost is [[0.01, 0.81], [0.01, 0.81]]; ties go to the lower row
    assert amap.sids["a"].codes == (0, 0)
    assert amap.rerouted == {"b"}


def test_closer_item_keeps_greedy_code():
    cb = CodebookStack(np.array([[[0.0], [10.0]], [[0.0], [1.0]]]))
    z = np.array([[0.3], [0.05]])
    amap = assign_all(["far", "near"], z, cb)
    assert amap.sids["near"].codes == (0, 0)
    assert amap.sids["far"].codes == (0, 1)


def test_pigeonhole_suffix():
    K = 4
    cb = CodebookStack(make_rng(1).normal(size=(2, K, 3)))
    z = np.tile(cb.vectors[0, 1] + cb.vectors[1, 2], (K + 1, 1))
    amap = assign_all([f"i{n}" for n in range(K + 1)], z, cb)
    suffixed = [s for s in amap.sids.values() if s.suffix is not None]
    assert len(suffixed) == 1
    assert codebook_stats(amap, 2, K)["unique"]


@given(st.integers(0, 10_000), st.sampled_from(["sinkhorn", "suffix"]))
def test_assign_all_is_injective(seed, policy):
    rng = make_rng(seed)
    L, K = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    cb = CodebookStack(rng.normal(size=(L, K, 2)))
    n = int(rng.integers(2, 30))
    z = rng.normal(size=(n, 2))
    z[n // 2:] = z[: n - n // 2]  # force collisions
    amap = assign_all(range(n), z, cb, collision_policy=policy)
    assert len({s.full() for s in amap.sids.values()}) == n


def test_assignment_roundtrip(tmp_path):
    a = Assignment({"x": SemanticID((1, 2)), "y": SemanticID((1, 2), 1)}, {"y"})
    a.save(tmp_path / "m.tsv")
    b = Assignment.load(tmp_path / "m.tsv")
    assert b.sids == a.sids and b.rerouted == a.rerouted


@pytest.mark.parametrize("counts, expected", [
    ([5, 5, 5, 5], 4.0),
    ([0, 9, 0], 1.0),
    ([3, 1], np.exp(-0.75 * np.log(0.75) - 0.25 * np.log(0.25))),
])
def test_usage_perplexity(counts, expected):
    assert usage_perplexity(counts) == pytest.approx(expected, rel=1e-12)
    if counts == [3, 1]:
        assert expected == pytest.approx(1.755, abs=1e-3)
