import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modstream import numerics as nx


def param(rng, *shape, name="p", scale=1.0):
    return nx.Parameter(rng.normal(0, scale, shape), name)


def test_softmax_of_equal_entries_is_uniform():
    p = nx.softmax_rows(nx.constant(np.zeros((1, 2))))
    assert p.data.tolist() == [[0.5, 0.5]]


def test_identity_matmul():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(nx.matmul(nx.constant(np.eye(3)), nx.constant(x)).data, x)


def test_cross_entropy_of_certain_prediction_is_zero():
    logits = np.array([[0.0, -1e4, -1e4]])
    assert nx.cross_entropy(nx.constant(logits), [0]).item() == 0.0


def test_shape_mismatch_raises():
    with pytest.raises(nx.ShapeError):
        nx.matmul(nx.constant(np.ones((2, 3))), nx.constant(np.ones((2, 3))))
    with pytest.raises(nx.ShapeError):
        nx.add(nx.constant(np.ones((2, 3))), nx.constant(np.ones((3, 2))))
    with pytest.raises(nx.ShapeError):
        nx.mul(nx.constant(np.ones(3)), nx.constant(np.ones(4)))


def test_non_finite_results_raise():
    big = nx.constant(np.array([[1e200]]))
    with pytest.raises(nx.NonFiniteError), np.errstate(over="ignore"):
        nx.matmul(big, big)
    with pytest.raises(nx.NonFiniteError):
        nx.scale(nx.constant(np.array([1.0])), math.inf)


def test_parameter_gradient_starts_at_zero_and_resets():
    p = nx.Parameter(np.ones((2, 2)), "w")
    assert p.grad.shape == p.shape and not p.grad.any()
    nx.total(nx.mul(p, p)).backward()
    assert p.grad.any()
    p.zero_grad()
    assert not p.grad.any()


def test_gradients_accumulate_across_backward_calls():
    p = nx.Parameter(np.array([1.0, 2.0]), "w")
    nx.total(p).backward()
    nx.total(p).backward()
    assert p.grad.tolist() == [2.0, 2.0]


def test_quadratic_gradcheck():
    x = nx.Parameter(np.array([3.0]), "x")
    rep = nx.check_gradients(lambda: nx.total(nx.mul(x, x)), [x], eps=1e-5)
    assert x.grad[0] == 6.0
    assert rep.per_parameter["x"] < 1e-8


def test_constant_function_gradcheck():
    x = nx.Parameter(np.array([1.0, -2.0]), "x")
    c = nx.constant(np.array(4.0))
    rep = nx.check_gradients(lambda: nx.add(c, nx.scale(nx.total(x), 0.0)), [x])
    assert not x.grad.any()
    assert rep.max_error == 0.0


def test_gradcheck_requires_float64():
    x = nx.Parameter(np.array([1.0], dtype=np.float32), "x")
    with pytest.raises(nx.NumericsError):
        nx.check_gradients(lambda: nx.total(x), [x])


# every op, randomized, against central differences
def _op_cases(rng):
    a = param(rng, 4, 3, name="a")
    b = param(rng, 3, 5, name="b")
    c = param(rng, 4, 3, name="c")
    v = param(rng, 3, name="v")
    s = param(rng, 4, name="s")
    g = nx.Parameter(1 + 0.1 * rng.normal(size=3), "g")
    w = param(rng, 4, 5, name="w")
    tab = param(rng, 6, 3, name="tab")
    mask = np.tril(np.ones((4, 4), dtype=bool))
    sq = param(rng, 4, 4, name="sq")
    return {
        "matmul": (lambda: nx.total(nx.mul(nx.matmul(a, b), nx.matmul(a, b))), [a, b]),
        "matvec": (lambda: nx.total(nx.mul(nx.matmul(a, v), nx.matmul(a, v))), [a, v]),
        "transpose": (lambda: nx.total(nx.matmul(nx.transpose(a), c)), [a, c]),
        "add_sub_mul": (lambda: nx.total(nx.mul(nx.sub(a, c), nx.add(a, c))), [a, c]),
        "bias": (lambda: nx.total(nx.mul(nx.add(a, v), nx.add(a, v))), [a, v]),
        "scale_rows": (lambda: nx.total(nx.mul(nx.scale_rows(a, s), c)), [a, s, c]),
        "softmax": (lambda: nx.cross_entropy(nx.softmax_rows(w), [0, 1, 2, 3],
                                             np.ones(4)), [w]),
        "masked_softmax": (lambda: nx.total(nx.mul(nx.softmax_rows(sq, mask), sq)), [sq]),
        "layer_norm": (lambda: nx.total(nx.mul(nx.layer_norm(a, g, v), c)), [a, g, v, c]),
        "gelu": (lambda: nx.total(nx.mul(nx.gelu(a), c)), [a, c]),
        "sigmoid": (lambda: nx.total(nx.mul(nx.sigmoid(a), c)), [a, c]),
        "embedding": (lambda: nx.total(nx.mul(nx.embedding(tab, [5, 0, 5, 2]), c)), [tab, c]),
        "scatter": (lambda: nx.total(nx.mul(nx.scatter_rows(a, [5, 0, 2, 1], 6), tab)), [a, tab]),
        "slice_concat": (lambda: nx.total(nx.mul(nx.concat_cols([nx.slice_cols(a, 1, 3), nx.slice_cols(c, 0, 1)]),
                                                 c)), [a, c]),
        "cross_entropy": (lambda: nx.cross_entropy(w, [4, -1, 0, 1], [0.5, 0.0, 1.0, 2.0]), [w]),
    }


@pytest.mark.parametrize("op", sorted(_op_cases(np.random.default_rng(0))))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradients_match_central_differences(op, seed):
    f, params = _op_cases(np.random.default_rng(seed))[op]
    rep = nx.check_gradients(f, params, eps=1e-6)
    assert rep.max_error < 1e-4, rep.per_parameter


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 12), seed=st.integers(0, 2**31))
def test_gather_then_scatter_is_identity_on_gathered_rows(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    idx = rng.choice(n, size=rng.integers(1, n + 1), replace=False)
    back = nx.scatter_rows(nx.gather_rows(nx.constant(x), idx), idx, n).data
    assert np.array_equal(back[idx], x[idx])
    rest = np.setdiff1d(np.arange(n), idx)
    assert not back[rest].any()


def test_forward_ops_are_bitwise_deterministic():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 4)).astype(np.float32)
    g = np.ones(4, np.float32)
    b = np.zeros(4, np.float32)
    outs = [nx.gelu(nx.layer_norm(nx.constant(a), nx.constant(g), nx.constant(b))).data for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


def test_float32_stays_float32():
    a = nx.constant(np.ones((2, 2), np.float32))
    assert nx.gelu(nx.scale(nx.matmul(a, a), 0.5)).dtype == np.float32
    assert nx.softmax_rows(a).dtype == np.float32


def test_no_grad_records_nothing():
    p = nx.Parameter(np.ones(2), "p")
    with nx.no_grad():
        out = nx.total(p)
    assert not out.requires_grad


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ps = [nx.Parameter(rng.normal(size=(2, 3)).astype(np.float32), "a"),
          nx.Parameter(rng.normal(size=4), "b")]
    nx.save_checkpoint(tmp_path, ps, {"nonlinearity": "gelu"})
    arrays, meta = nx.load_checkpoint(tmp_path)
    assert list(arrays) == ["a", "b"]
    assert meta["nonlinearity"] == "gelu"
    for p in ps:
        assert arrays[p.name].dtype == p.dtype
        assert arrays[p.name].tobytes() == p.data.tobytes()
    manifest = (tmp_path / "manifest.txt").read_text()
    assert "param = a float32 2,3 0 24" in manifest
    assert "param = b float64 4 24 32" in manifest


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        nx.load_checkpoint(tmp_path / "nope")
