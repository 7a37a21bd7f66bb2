import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ortho_group

from gti_lab.diagnostics import (cosine_block, diagnose_checkpoint, effective_rank,
                                 heatmap_svg, render_heatmap, rsa, singular_spectrum,
                                 thresholded_rank, value_color)
from gti_lab.init_strategies import InitStrategy
from gti_lab.lm import ModelConfig, extend_vocabulary, init_params
from gti_lab.numerics import ZeroNormWarning, make_rng
from gti_lab.rq import Assignment, CodebookStack, SemanticID
from gti_lab.vocab import Vocabulary
from oracles import entropy_erank, pearson_loop


@pytest.mark.parametrize("values, expected", [
    ([1, 1, 1, 1], 4.0),
    ([1, 0, 0], 1.0),
    ([4, 3], entropy_erank([4, 3])),
])
def test_effective_rank_examples(values, expected):
    assert effective_rank(values) == pytest.approx(expected, rel=1e-12)


def test_effective_rank_two_values_closed_form():
    assert entropy_erank([4, 3]) == pytest.approx(1.9797, abs=1e-4)


def test_effective_rank_rejects_zero_spectrum():
    with pytest.raises(ValueError):
        effective_rank([0.0, 0.0])


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=10))
def test_effective_rank_bounds(values):
    e = effective_rank(values)
    assert 1.0 - 1e-12 <= e <= len(values) + 1e-9
    assert e == pytest.approx(entropy_erank(values), rel=1e-10)


def test_thresholded_rank():
    assert thresholded_rank([1.0, 0.5, 0.009, 0.0]) == 2
    with pytest.raises(ValueError):
        thresholded_rank([0.0])


def test_rank_one_matrix_has_effective_rank_exactly_one():
    row = make_rng(0).normal(size=16)
    spec = singular_spectrum(np.tile(row, (32, 1)))
    assert effective_rank(spec) == 1.0
    assert np.count_nonzero(spec.values) == 1


def test_orthonormal_rows_give_identity():
    q = ortho_group.rvs(6, random_state=1)
    sim = cosine_block(q, range(6), range(6))
    np.testing.assert_allclose(sim.values, np.eye(6), atol=1e-12)


def test_random_sid_block_is_near_orthogonal():
    E = make_rng(3).normal(size=(200, 32))
    sim = cosine_block(E, range(200), range(200)).values
    assert np.abs(sim[np.triu_indices(200, 1)]).mean() < 0.15
    assert abs(sim[np.triu_indices(200, 1)].mean()) < 0.1


def test_cosine_block_ordering_and_blocks():
    E = make_rng(4).normal(size=(10, 3))
    sim = cosine_block(E, [1, 2, 3], [3, 4], names=("text", "sid"))
    assert sim.labels == ["1", "2", "3", "4"]
    assert sim.blocks == [("text", 0, 3), ("sid", 3, 4)]
    assert sim.block("text").shape == (3, 3)


def test_zero_rows_are_flagged():
    E = np.vstack([np.zeros((2, 3)), np.eye(3)])
    with pytest.warns(ZeroNormWarning):
        sim = cosine_block(E, [0, 1, 2], [3])
    assert sim.degenerate.tolist() == [True, True, False, False]


def rotated(x, seed, scale):
    return scale * x @ ortho_group.rvs(x.shape[1], random_state=seed)


@pytest.mark.parametrize("seed", range(5))
def test_rsa_identity_rotation_and_scaling(seed):
    x = make_rng(seed).normal(size=(30, 6))
    for a, b in [(x, x), (x, rotated(x, seed, 3.7)), (rotated(x, seed + 1, 0.2), x)]:
        s = rsa(a, b)
        assert s.pearson_r == pytest.approx(1.0, abs=1e-12)
        assert s.spearman_rho == pytest.approx(1.0, abs=1e-12)
        assert s.n_pairs == 30 * 29 // 2


def test_rsa_different_dimensions_allowed():
    x = make_rng(1).normal(size=(12, 4))
    y = np.hstack([x, np.zeros((12, 5))])
    assert rsa(x, y).pearson_r == pytest.approx(1.0, abs=1e-12)


def test_rsa_matches_loop_oracle():
    rng = make_rng(2)
    a, b = rng.normal(size=(15, 4)), rng.normal(size=(15, 7))
    ca = a / np.linalg.norm(a, axis=1, keepdims=True)
    cb = b / np.linalg.norm(b, axis=1, keepdims=True)
    iu = np.triu_indices(15, 1)
    want = pearson_loop((ca @ ca.T)[iu].tolist(), (cb @ cb.T)[iu].tolist())
    assert rsa(a, b).pearson_r == pytest.approx(want, abs=1e-12)


def permutation_null(n=50, seeds=20, dim=16):
    out = []
    for seed in range(seeds):
        rng = make_rng(seed, 3)
        x = rng.normal(size=(n, dim))
        out.append(rsa(x, x[rng.permutation(n)]).pearson_r)
    return np.array(out)


def test_rsa_permutation_null():
    assert np.all(np.abs(permutation_null()) < 0.2)


def test_rsa_errors_and_constant_case():
    with pytest.raises(ValueError):
        rsa(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        rsa(np.ones((4, 3)), np.ones((5, 3)))
    s = rsa(make_rng(0).normal(size=(5, 3)), np.ones((5, 3)))
    assert s.constant and s.pearson_r == 0.0


@pytest.fixture(scope="module")
def mean_ckpt():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, context=16)
    params = extend_vocabulary(init_params(cfg, Vocabulary(), 0), 2, 4, InitStrategy("mean"))
    amap = Assignment({f"i{n}": SemanticID((n % 4, n // 4)) for n in range(16)})
    cb = CodebookStack(make_rng(5).normal(size=(2, 4, 6)))
    return params, amap, cb


def test_mean_init_checkpoint_collapses(mean_ckpt):
    params, amap, cb = mean_ckpt
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = diagnose_checkpoint(params, amap, cb, n_sample=5)
    assert np.all(rep.matrices["sid"].values == 1.0)
    assert rep.erank == 1.0 and rep.thresholded == 1
    assert rep.rsa.constant


def test_report_is_byte_identical(mean_ckpt, tmp_path):
    params, amap, cb = mean_ckpt
    for name in ("a", "b"):
        diagnose_checkpoint(params, amap, cb, n_sample=5).write(tmp_path / name)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "rsa.csv" in files and "cos_sid.svg" in files and "manifest.json" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_codebooks_skip_rsa(mean_ckpt, tmp_path):
    params, amap, _ = mean_ckpt
    rep = diagnose_checkpoint(params, amap, None, n_sample=5)
    assert rep.rsa is None and any("RSA skipped" in n for n in rep.notes)
    assert "rsa.csv" not in rep.write(tmp_path)


def test_value_color_endpoints():
    assert value_color(-1) == "#3b4cc0"
    assert value_color(0) == "#f7f7f7"
    assert value_color(1) == "#b40426"
    assert value_color(7) == value_color(1)


def test_heatmap_identity_and_uniform(tmp_path):
    eye = cosine_block(np.eye(4), range(4), range(4))
    svg = heatmap_svg(eye, cell=5)
    assert svg.count('fill="#b40426"') >= 4
    for i in range(4):
        assert f'<rect x="{i * 5}" y="{i * 5}" width="5" height="5" fill="#b40426"/>' in svg
    ones = cosine_block(np.ones((4, 2)), range(4), range(4))
    cells = [ln for ln in heatmap_svg(ones, cell=5).splitlines() if 'width="5"' in ln]
    assert len(cells) == 16 and all('fill="#b40426"' in c for c in cells)
    a = render_heatmap(eye, tmp_path / "a.svg").read_bytes()
    assert a == render_heatmap(eye, tmp_path / "b.svg").read_bytes()
