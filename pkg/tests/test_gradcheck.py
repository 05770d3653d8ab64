import pytest

from app.errors import ParameterError
from app.gradcheck import OPS, run_gradcheck


@pytest.fixture(scope="module")
def default_report():
    return run_gradcheck(seed=0)


def test_every_op_passes(default_report):
    assert default_report.passed, default_report.failed_ops()
    assert [entry.op for entry in default_report.entries] == list(OPS)
    for entry in default_report.entries:
        assert entry.max_relative_error < 1e-4


def test_report_uses_configured_tolerance(default_report):
    assert default_report.tolerance == 1e-4


@pytest.mark.parametrize("op", ["softmax", "swapped_loss_queue"])
def test_perturbed_gradient_fails_with_named_op(op):
    report = run_gradcheck(seed=0, perturb_op=op)
    assert not report.passed
    assert report.failed_ops() == [op]


def test_unknown_perturb_op():
    with pytest.raises(ParameterError):
        run_gradcheck(perturb_op="conv2d")


def test_other_seed_passes():
    assert run_gradcheck(seed=7).passed
