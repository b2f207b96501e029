import numpy as np
import pytest

from coat import checks
from coat import tensor as T
from coat.gradcheck import gradcheck
from coat.tensor import Tensor


def test_kink_straddling_entries_are_skipped(f64):
    w = Tensor(np.array([1.0, 3e-6, -2.0]), requires_grad=True, name="w")
    rep = gradcheck(lambda: T.sum_(T.relu(w)), [w])
    (c,) = rep.checks
    assert (c.n_checked, c.n_skipped) == (2, 1)
    assert rep.passed


def test_sampled_check_replaces_skipped_entries(f64):
    w = Tensor(np.array([3e-6, 1.0, 2.0, -1.0]), requires_grad=True, name="w")
    rep = gradcheck(lambda: T.sum_(T.relu(w)), [w], max_checks=3, rng=np.random.default_rng(0))
    assert rep.checks[0].n_checked == 3


def test_all_kinks_fail(f64):
    w = Tensor(np.array([3e-6]), requires_grad=True, name="w")
    assert not gradcheck(lambda: T.sum_(T.relu(w)), [w]).passed


def test_watch_kinks_records_relu_patterns():
    with T.watch_kinks() as seen:
        T.relu(Tensor([1.0, -1.0]))
        T.relu(Tensor([-1.0, 1.0]))
    assert len(seen) == 2 and seen[0] != seen[1]
    with T.watch_kinks() as again:
        T.relu(Tensor([2.0, -3.0]))
    assert again[0] == seen[0]


@pytest.mark.parametrize("scope", ["op", "block"])
def test_scopes_pass(scope):
    rep = checks.run_gradcheck(scope)
    assert rep.passed, rep.table()
    assert rep.max_rel_err < 1e-4


def test_unknown_scope():
    with pytest.raises(ValueError):
        checks.run_gradcheck("everything")


def test_table_has_a_row_per_tensor():
    rep = checks.run_gradcheck("block")
    lines = rep.table().splitlines()
    assert len(lines) == len(rep.checks) + 1
    assert lines[0].split() == ["parameter", "checked", "skipped", "max_rel_err", "result"]
