import numpy as np
import pytest

from ratlab import _gru_py, kernels
from ratlab.autograd import Tensor
from ratlab.optim import SGD, Adam, Optimizer
from ratlab.vocab import MASKED, PAD, UNK, Vocab


def test_backend_selected_at_import():
    assert kernels.BACKEND in ("cython", "python")


def test_compiled_kernel_matches_numpy():
    ext = pytest.importorskip("ratlab._gru_ext")
    r = np.random.default_rng(1)
    for B, L, H in [(1, 1, 1), (3, 7, 4), (8, 13, 16)]:
        gx = r.normal(size=(B, L, 3 * H))
        U = r.normal(scale=0.4, size=(H, 3 * H))
        dh = r.normal(size=(B, L, H))
        a = _gru_py.gru_forward(gx, U)
        b = ext.gru_forward(gx, U)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)
        ga = _gru_py.gru_backward(dh, U, *a)
        gb = ext.gru_backward(dh, U, *a)
        for x, y in zip(ga, gb):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-11)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.use("fortran")


def test_sgd_example():
    p = Tensor(np.array([1.0]), requires_grad=True)
    SGD([p], 0.1).step({p: np.array([2.0])})
    assert p.data[0] == pytest.approx(0.8)


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.zeros(4), requires_grad=True)
    Adam([p], lr=0.01).step({p: np.ones(4)})
    np.testing.assert_allclose(p.data, -0.01 * np.ones(4), rtol=1e-6)


def test_adam_matches_reference_recurrence():
    r = np.random.default_rng(3)
    p = Tensor(r.normal(size=3), requires_grad=True)
    ref = p.data.copy()
    m = v = np.zeros(3)
    opt = Adam([p], lr=0.05)
    for t in range(1, 6):
        g = r.normal(size=3)
        opt.step({p: g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_params(kind):
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    Optimizer([p], kind, 0.1).step({p: np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_nonfinite_gradient_skipped_and_counted():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = SGD([a, b], 0.5)
    assert opt.step({a: np.array([np.nan, 1.0]), b: np.ones(2)}) == 1
    np.testing.assert_array_equal(a.data, [1.0, 1.0])
    np.testing.assert_array_equal(b.data, [0.5, 0.5])
    assert opt.state.skipped == 1


def test_optimizer_validation():
    with pytest.raises(ValueError):
        Optimizer([], "rmsprop", 0.1)
    with pytest.raises(ValueError):
        Optimizer([], "sgd", -1.0)


def test_vocab_reserved_and_roundtrip():
    v = Vocab(["a", "b"])
    assert (PAD, UNK, MASKED) == (0, 1, 2)
    assert v.encode(["a", "b", "c"]) == [3, 4, 5]
    assert v.encode(["zzz"], grow=False) == [UNK]
    assert v.decode([3, 4]) == ["a", "b"]
    w = Vocab.from_list(v.to_list())
    assert w.itos == v.itos and len(w) == 6
    assert Vocab(["<unk>"]).stoi["<unk>"] == 3
