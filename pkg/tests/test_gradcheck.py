import pytest

from anapred.gradcheck import TOLERANCE, check_fields, check_parameters, rel_err, run_gradcheck
from anapred.model import PARAMETER_GROUPS, TINY_CONFIG


def test_rel_err():
    assert rel_err(1.0, 1.0) == 0.0
    assert rel_err(2.0, 1.0) == 0.5
    assert rel_err(0.0, 1e-9) == pytest.approx(1e-3)  # below the floor errors are absolute-ish


def test_field_gradients_pass():
    report = check_fields(n=15)
    assert report.passed
    assert set(report.field_checks) == {"warp_disp", "warp_values", "loss_ssim", "loss_dice_p",
                                        "loss_dice_n", "loss_diffusion"}


def test_corrupted_group_is_named():
    report = check_parameters(TINY_CONFIG, per_group=5, corrupt_group="norm")
    assert [f.name for f in report.failures] == ["norm"]
    assert report.groups["norm"].worst_rel_err > 0.2


def test_full_suite_covers_all_groups():
    report = run_gradcheck(per_group=10)
    assert report.passed, report.to_text()
    assert set(report.groups) == set(PARAMETER_GROUPS)
    assert all(c.worst_rel_err <= TOLERANCE for c in report.groups.values())
    # 10 entries per group on the base config plus 5 on the window-3 variant
    assert report.parameters_checked == 6 * 15
