import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from anapred.dataset import split_cases  # noqa: E402
from anapred.phantom import PhantomRanges, PhantomSpec, generate_case, generate_corpus  # noqa: E402

SMALL_SPEC = PhantomSpec(shape=(32, 32, 16), body_semiaxes_mm=(25.0, 20.0, 100.0),
                         gtvp_radius_mm=7.0, gtvn_radius_mm=5.0, body_shrink_mm=1.0, seed=3)


@pytest.fixture(scope="session")
def small_case():
    return generate_case(SMALL_SPEC, case_id="small")


TINY_RANGES = PhantomRanges(gtvp_radius_mm=(6.0, 7.0), gtvn_radius_mm=(4.0, 5.0), body_shrink_mm=(0.5, 1.5),
                            body_semiaxis_x_mm=(24.0, 26.0), body_semiaxis_y_mm=(19.0, 21.0))
TINY_BASE = PhantomSpec(shape=(32, 32, 16), body_semiaxes_mm=(25.0, 20.0, 100.0))


@pytest.fixture(scope="session")
def tiny_corpus():
    """Six 32x32x16 phantoms keyed by id, with a 4/1/1 split."""
    cases, _ = generate_corpus(6, TINY_RANGES, seed=5, base=TINY_BASE)
    cases = {c.case_id: c for c in cases}
    return cases, split_cases(sorted(cases), (4 / 6, 1 / 6, 1 / 6), seed=0)
