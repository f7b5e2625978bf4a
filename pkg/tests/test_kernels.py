import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from manifoldnet import kernels
from manifoldnet.neighbors import make_rng

BACKENDS = kernels.available_backends()
IMPLS = list(BACKENDS.values())

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=64)


def matrices(max_rows=12, max_dim=5):
    return st.integers(1, max_dim).flatmap(
        lambda d: st.tuples(
            arrays(np.float64, st.tuples(st.integers(1, max_rows), st.just(d)), elements=finite),
            arrays(np.float64, st.tuples(st.integers(1, max_rows), st.just(d)), elements=finite),
        )
    )


def brute_sq(x, c):
    out = np.empty((len(x), len(c)))
    for i, j in itertools.product(range(len(x)), range(len(c))):
        acc = 0.0
        for k in range(x.shape[1]):
            diff = x[i, k] - c[j, k]
            acc += diff * diff
        out[i, j] = acc
    return out


def test_backend_name():
    assert kernels.BACKEND in BACKENDS


@pytest.mark.parametrize("impl", IMPLS, ids=list(BACKENDS))
@given(pair=matrices())
def test_sq_dists_matches_loop_oracle(impl, pair):
    x, c = pair
    assert np.array_equal(kernels.sq_dists(x, c, impl=impl), brute_sq(x, c))


@pytest.mark.parametrize("impl", IMPLS, ids=list(BACKENDS))
@given(pair=matrices())
def test_assign_nearest_first_minimum(impl, pair):
    x, c = pair
    lab, d2 = kernels.assign_nearest(x, c, impl=impl)
    ref = brute_sq(x, c)
    assert lab.tolist() == [int(np.argmin(r)) for r in ref]
    assert np.array_equal(d2, ref.min(axis=1))


def test_assign_nearest_ties_to_lowest():
    x = np.array([[0.0]])
    c = np.array([[1.0], [-1.0], [1.0]])
    for impl in IMPLS:
        assert kernels.assign_nearest(x, c, impl=impl)[0].tolist() == [0]


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40), z=st.integers(1, 6))
def test_backends_bit_identical(seed, n, z):
    rng = make_rng(seed)
    x = rng.normal(size=(n, 3))
    c = rng.normal(size=(z, 3))
    labels = rng.integers(0, z, size=n)
    outs = [
        (impl.sq_dists(x, c), *impl.assign_nearest(x, c), *impl.cluster_sums(x, labels, z),
         impl.nearest_other(x, x, True) if n > 1 else np.zeros(0), impl.nearest_other(x, c, False))
        for impl in IMPLS
    ]
    for other in outs[1:]:
        for a, b in zip(outs[0], other):
            assert np.array_equal(a, b)


def test_cluster_sums_counts():
    x = np.arange(8.0).reshape(4, 2)
    for impl in IMPLS:
        s, cnt = kernels.cluster_sums(x, [1, 1, 0, 2], 4, impl=impl)
        assert cnt.tolist() == [1, 2, 1, 0]
        np.testing.assert_array_equal(s, [[4, 5], [2, 4], [6, 7], [0, 0]])


def test_nearest_other_excludes_self_and_breaks_ties_low():
    q = np.array([[0.0], [1.0], [-1.0], [0.0]])
    for impl in IMPLS:
        assert kernels.nearest_other(q, q, exclude_self=True, impl=impl).tolist() == [3, 0, 0, 0]


def test_softmax_xent_matches_finite_differences():
    rng = make_rng(5)
    x = rng.normal(size=(7, 3))
    y = rng.integers(0, 4, size=7)
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    f, gw, gb = kernels.softmax_xent(x, y, w, b, 0.1)
    h = 1e-6
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        num = (kernels.softmax_xent(x, y, wp, b, 0.1)[0] - kernels.softmax_xent(x, y, wm, b, 0.1)[0]) / (2 * h)
        assert abs(num - gw[idx]) <= 1e-7 + 1e-5 * abs(num)
    for j in range(4):
        bp, bm = b.copy(), b.copy()
        bp[j] += h
        bm[j] -= h
        num = (kernels.softmax_xent(x, y, w, bp, 0.1)[0] - kernels.softmax_xent(x, y, w, bm, 0.1)[0]) / (2 * h)
        assert abs(num - gb[j]) <= 1e-7 + 1e-5 * abs(num)


def test_softmax_xent_zero_weights_is_log_z():
    f, _, _ = kernels.softmax_xent(np.ones((3, 2)), [0, 1, 2], np.zeros((5, 2)), np.zeros(5), 1.0)
    assert f == pytest.approx(np.log(5))


ENSEMBLE_SCRIPT = """
import hashlib, numpy as np
from manifoldnet import kernels
from manifoldnet.ems import EmsConfig, run_ems
from manifoldnet.neighbors import make_rng
x = make_rng(0).normal(size=(120, 5))
ens = run_ems(x, EmsConfig(z=4, t=3, k=3, kmeans_restarts=2))
print(kernels.BACKEND, hashlib.sha256(ens.labels.tobytes()).hexdigest())
"""


@pytest.mark.skipif("cython" not in BACKENDS, reason="extension not built")
def test_fallback_selected_by_env_and_gives_same_ensemble():
    import os
    import subprocess
    import sys

    outs = {}
    for flag in ("0", "1"):
        env = {**os.environ, "MANIFOLDNET_PURE_PYTHON": flag}
        proc = subprocess.run([sys.executable, "-c", ENSEMBLE_SCRIPT], env=env,
                              capture_output=True, text=True, check=True)
        outs[flag] = proc.stdout.split()
    assert outs["0"][0] == "cython" and outs["1"][0] == "python"
    assert outs["0"][1] == outs["1"][1]
