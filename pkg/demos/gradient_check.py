"""
Checking hand-derived gradients against finite differences
==========================================================

The warp layer has its own backward pass.  This script compares it, and the
network parameters of the tiny configuration, against central differences in
64-bit arithmetic, then shows that a deliberately broken gradient is caught.

Run with ``python demos/gradient_check.py``; takes about half a minute.
"""

from anapred.gradcheck import run_gradcheck
from anapred.model import TINY_CONFIG

report = run_gradcheck(TINY_CONFIG, per_group=20)
for name, check in list(report.groups.items()) + list(report.field_checks.items()):
    print("%-16s %3d entries  worst relative error %.2e" % (name, check.count, check.worst_rel_err))
print("passed:", report.passed, " parameters checked:", report.parameters_checked)

# scaling one group's analytic gradient must be detected
broken = run_gradcheck(TINY_CONFIG, per_group=5, corrupt_group="decoder", include_shifted=False)
print("corrupted decoder gradient caught:", [f.name for f in broken.failures])
