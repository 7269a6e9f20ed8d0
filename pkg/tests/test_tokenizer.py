import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointdg.autodiff import Tensor, apply_primitive as P, finite_difference_check
from pointdg.rng import Rng
from pointdg.tokenizer import (
    GroupEmbedding,
    Tokenizer,
    embed_groups,
    farthest_point_sample,
    knn_group,
    morton_codes,
    serialize_order,
)


def fps_oracle(points, L, start):
    chosen = [start]
    for _ in range(1, L):
        best, best_d = None, -1.0
        for i in range(len(points)):
            d = min(float(np.sum((points[i] - points[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


def morton_oracle(c, bits=10):
    q = [min(max(int(np.floor((v + 1.0) * 0.5 * 2**bits)), 0), 2**bits - 1) for v in c]
    code = 0
    for b in range(bits):
        for axis in range(3):
            code |= ((q[axis] >> b) & 1) << (3 * b + axis)
    return code


def test_fps_colinear():
    pts = np.array([[x, 0.0, 0.0] for x in (0.0, 1.0, 2.0, 3.0)])
    assert sorted(farthest_point_sample(pts, 2, 0).tolist()) == [0, 3]


def test_fps_exhaustion(rng):
    pts = rng.normal(size=(12, 3))
    out = farthest_point_sample(pts, 12, 4)
    assert sorted(out.tolist()) == list(range(12))
    np.testing.assert_array_equal(out, fps_oracle(pts, 12, 4))


@pytest.mark.parametrize("seed", range(5))
def test_fps_matches_oracle(seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(60, 3))
    start = int(r.integers(60))
    np.testing.assert_array_equal(farthest_point_sample(pts, 8, start), fps_oracle(pts, 8, start))


def test_fps_ties_lowest_index():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    assert farthest_point_sample(pts, 2, 0).tolist() == [0, 1]


def test_fps_batched_matches_single(rng):
    pts = rng.normal(size=(3, 40, 3))
    starts = np.array([0, 5, 39])
    out = farthest_point_sample(pts, 6, starts)
    for b in range(3):
        np.testing.assert_array_equal(out[b], farthest_point_sample(pts[b], 6, int(starts[b])))


def test_fps_errors(rng):
    with pytest.raises(ValueError):
        farthest_point_sample(rng.normal(size=(4, 3)), 5)
    with pytest.raises(ValueError):
        farthest_point_sample(rng.normal(size=(4, 3)), 2, start=4)


def test_knn_k1_is_zero(rng):
    pts = rng.normal(size=(30, 3))
    patches = knn_group(pts, np.arange(0, 30, 5), 1)
    assert patches.shape == (6, 1, 3)
    assert np.all(patches == 0.0)


def test_knn_translation_invariant(rng):
    pts = rng.normal(size=(50, 3))
    c = np.array([0, 7, 19])
    a = knn_group(pts, c, 5)
    b = knn_group(pts + np.array([3.0, -2.0, 0.5]), c, 5)
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_sort_oracle(seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(80, 3))
    centers = r.choice(80, 6, replace=False)
    out = knn_group(pts, centers, 7)
    for li, c in enumerate(centers):
        d = [(float(np.sum((pts[i] - pts[c]) ** 2)), i) for i in range(80)]
        idx = [i for _, i in sorted(d)[:7]]
        np.testing.assert_array_equal(out[li], pts[idx] - pts[c])


def test_knn_ties_by_index():
    # grid with many equal distances
    g = np.array([[x, y, 0.0] for x in range(4) for y in range(4)], dtype=float)
    out = knn_group(g, np.array([5]), 5)
    d = np.sum((g - g[5]) ** 2, axis=1)
    idx = np.argsort(d, kind="stable")[:5]
    np.testing.assert_array_equal(out[0], g[idx] - g[5])


def test_knn_too_many(rng):
    with pytest.raises(ValueError):
        knn_group(rng.normal(size=(4, 3)), np.array([0]), 5)


def test_axis_lex_examples():
    c = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, -1, 0]])
    np.testing.assert_array_equal(serialize_order(c, "axis-lex"), [0, 1, 2])
    c2 = np.array([[0.5, 0, 0], [0.1, 0, 0]])
    np.testing.assert_array_equal(serialize_order(c2, "axis-lex"), [1, 0])
    np.testing.assert_array_equal(serialize_order(c2, "zorder"), [1, 0])


@pytest.mark.parametrize("seed", range(5))
def test_zorder_matches_oracle(seed):
    r = np.random.default_rng(seed)
    c = r.uniform(-1, 1, size=(32, 3))
    codes = [morton_oracle(row) for row in c]
    assert [int(v) for v in morton_codes(c)] == codes
    expected = sorted(range(32), key=lambda i: (codes[i], i))
    np.testing.assert_array_equal(serialize_order(c, "zorder"), expected)


def test_zorder_stable_ties():
    c = np.zeros((5, 3))
    np.testing.assert_array_equal(serialize_order(c, "zorder"), np.arange(5))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**32 - 1), st.sampled_from(["zorder", "axis-lex"]))
def test_serialization_is_bijection(n, seed, strategy):
    c = np.random.default_rng(seed).uniform(-1, 1, (n, 3))
    assert sorted(serialize_order(c, strategy).tolist()) == list(range(n))


def test_embedding_permutation_invariant(rng):
    emb = GroupEmbedding(8, Rng(0))
    patches = rng.normal(size=(4, 6, 3))
    perm = rng.permutation(6)
    np.testing.assert_allclose(emb(Tensor(patches)).data, emb(Tensor(patches[:, perm])).data, rtol=0, atol=0)


def test_embedding_zero_patch_constant():
    emb = GroupEmbedding(8, Rng(0))
    out = embed_groups(emb, Tensor(np.zeros((5, 1, 3)))).data
    assert out.shape == (5, 8)
    np.testing.assert_array_equal(out, np.broadcast_to(out[0], out.shape))


def test_embedding_gradient(rng):
    emb = GroupEmbedding(6, Rng(1))
    w = rng.normal(size=(3, 6))
    patches = rng.normal(size=(3, 4, 3))
    f = lambda: P("sum", emb(Tensor(patches)) * Tensor(w))
    assert finite_difference_check(f, emb.parameters()) < 1e-6
    x = Tensor(patches)
    assert finite_difference_check(lambda t: P("sum", emb(t) * Tensor(w)), x) < 1e-6


def test_tokenizer_shapes_and_determinism(rng):
    tok = Tokenizer(8, 4, 16, Rng(2))
    pts = rng.normal(size=(2, 64, 3))
    pts /= np.linalg.norm(pts, axis=-1).max()
    a, b = tok(pts, 0), tok(pts, 0)
    assert a.features.shape == (2, 8, 16)
    assert a.centers.shape == (2, 8, 3)
    np.testing.assert_array_equal(a.features.data, b.features.data)
    np.testing.assert_array_equal(a.order, np.arange(8))
    assert np.all(np.linalg.norm(a.centers, axis=-1) <= 1.0 + 1e-12)
    # centers come out in serialized order
    for row in a.centers:
        np.testing.assert_array_equal(serialize_order(row, "zorder"), np.arange(8))


def test_tokenizer_translation_keeps_patches(rng):
    # axis-lex keeps the token order under translation; z-order quantizes on a fixed grid
    tok = Tokenizer(8, 4, 16, Rng(2), strategy="axis-lex")
    pts = rng.normal(size=(1, 64, 3)) * 0.3
    shift = np.array([0.1, -0.05, 0.02])
    a, b = tok(pts, 0), tok(pts + shift, 0)
    np.testing.assert_allclose(b.centers, a.centers + shift, atol=1e-12)
    # embedding differs only through the positional term
    da = a.features.data - tok.pos(Tensor(a.centers)).data
    db = b.features.data - tok.pos(Tensor(b.centers)).data
    np.testing.assert_allclose(da, db, atol=1e-12)
