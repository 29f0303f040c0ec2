import numpy as np
import pytest

from icd import serialize
from icd import tensor as T
from icd.errors import FormatError
from icd.gradcheck import grad_check
from icd.gradsuite import loss_cases, op_cases
from icd.tensor import Tensor


def test_sum_is_exact():
    r = grad_check(lambda x: T.sum(x), Tensor(np.random.default_rng(0).normal(size=(3, 4))))
    assert r.passed
    assert r.max_rel_err < 1e-9


def test_wrong_gradient_is_caught():
    def doubled_square(x):
        # forward x^2, backward deliberately 2x too large
        return T.make_op((x.data ** 2).sum(), (x,), lambda g: (g * 4 * x.data,), "bad_square")

    r = grad_check(doubled_square, Tensor([0.3, -1.2, 2.0]))
    assert not r.passed
    assert r.max_rel_err == pytest.approx(0.5, rel=1e-4)


def test_non_finite_analytic_gradient_fails_with_diagnostic():
    def nan_grad(x):
        return T.make_op(x.data.sum(), (x,), lambda g: (np.full(x.shape, np.nan),), "nan_grad")

    r = grad_check(nan_grad, Tensor([1.0, 2.0]))
    assert not r.passed
    assert "non-finite" in r.diagnostic


def test_report_passed_iff_within_tolerance():
    r = grad_check(lambda x: T.sum(T.exp(x)), Tensor([0.1, 0.2]), tolerance=1e-4)
    assert r.passed == (r.max_rel_err <= r.tolerance)


@pytest.mark.parametrize("trial", range(10))
def test_every_op_ten_random_inputs(trial):
    rng = np.random.default_rng(1000 + trial)
    for name, fn, inputs in op_cases(rng) + loss_cases(rng):
        r = grad_check(fn, inputs, 1e-4, op_name=name)
        assert r.passed, r.line()


def test_icdt_roundtrip(tmp_path):
    arr = np.random.default_rng(1).normal(size=(2, 3, 4))
    serialize.save(tmp_path / "a.icdt", arr)
    raw = (tmp_path / "a.icdt").read_bytes()
    assert raw[:4] == b"ICDT" and raw[4] == 1 and raw[5] == 3
    assert int.from_bytes(raw[6:14], "little") == 2
    assert len(raw) == 6 + 3 * 8 + arr.size * 8
    np.testing.assert_array_equal(serialize.load(tmp_path / "a.icdt"), arr)


def test_icdt_rejects_bad_magic_and_truncation(tmp_path):
    blob = serialize.encode(np.ones(4))
    (tmp_path / "bad").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        serialize.load(tmp_path / "bad")
    (tmp_path / "short").write_bytes(blob[:-3])
    with pytest.raises(FormatError):
        serialize.load(tmp_path / "short")
