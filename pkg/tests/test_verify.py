import pytest

from scpo.oracle import MASTER_SEED
from scpo.verify import (
    SUITES,
    augmentation_rows,
    relaxed_set_rows,
    run_suite,
    stability_rows,
    suite_oracle,
    suite_theorems,
)


@pytest.mark.parametrize("name", ["toys", "gradcheck", "lyapunov"])
def test_fast_suites_pass(name):
    rows = run_suite(name, MASTER_SEED)
    assert rows and all(r.passed for r in rows), [r for r in rows if not r.passed][:5]


def test_small_oracle_and_theorem_batches():
    rows = suite_oracle(n_instances=5) + suite_theorems(n_instances=5)
    assert all(r.passed for r in rows), [r for r in rows if not r.passed][:5]


def test_named_rows():
    assert all(r.passed for r in stability_rows())
    aug = {r.check: r for r in augmentation_rows()}
    assert any("dp" in k for k in aug)
    assert len(relaxed_set_rows()) == 3


def test_unknown_suite():
    assert set(SUITES) == {"oracle", "theorems", "lyapunov", "toys", "gradcheck"}
    with pytest.raises(KeyError):
        run_suite("nope", MASTER_SEED)
